import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flexkd.datasets import (
    CSVSchema,
    PlantedRelevanceSpec,
    gen_planted_task,
    gen_seq_task,
    load_csv,
    planted_rule,
    save_csv,
)
from flexkd.errors import ConfigError, DataError


class TestPlanted:
    def test_too_many_relevant(self):
        with pytest.raises(ConfigError):
            PlantedRelevanceSpec(d_input=4, num_relevant=5)

    def test_fully_informative(self):
        ds, rel = gen_planted_task(PlantedRelevanceSpec(6, 6, noise_scale=0.0, seed=1), 50, 0, 10)
        assert rel.tolist() == list(range(6))
        assert np.all(ds.features.std(axis=0) > 0)

    def test_zero_noise_zeroes_irrelevant_coordinates(self):
        ds, rel = gen_planted_task(PlantedRelevanceSpec(10, 3, noise_scale=0.0, seed=1), 50, 0, 0)
        irrelevant = np.setdiff1d(np.arange(10), rel)
        assert np.all(ds.features[:, irrelevant] == 0)

    def test_permuting_irrelevant_coordinates_keeps_label(self, rng):
        spec = PlantedRelevanceSpec(20, 5, seed=3)
        ds, rel = gen_planted_task(spec, 200, 0, 0)
        rule = planted_rule(spec)
        irrelevant = np.setdiff1d(np.arange(20), rel)
        x = ds.features.copy()
        for row in x:
            row[irrelevant] = rng.permutation(row[irrelevant])
        np.testing.assert_array_equal(rule(x), ds.labels)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), scale=st.floats(0.0, 50.0))
    def test_label_invariant_to_irrelevant_perturbation(self, seed, scale):
        spec = PlantedRelevanceSpec(12, 4, seed=seed % 7)
        ds, rel = gen_planted_task(spec, 30, 0, 0)
        noise = np.random.default_rng(seed).normal(scale=scale, size=ds.features.shape)
        noise[:, rel] = 0.0
        np.testing.assert_array_equal(planted_rule(spec)(ds.features + noise), ds.labels)

    def test_split_determinism_and_sizes(self):
        spec = PlantedRelevanceSpec(16, 4, seed=9)
        a, _ = gen_planted_task(spec, 100, 20, 30)
        b, _ = gen_planted_task(spec, 100, 20, 30)
        assert a.manifest() == b.manifest()
        assert a.manifest()["sizes"] == {"train": 100, "val": 20, "test": 30}

    def test_classes_roughly_balanced(self):
        ds, _ = gen_planted_task(PlantedRelevanceSpec(16, 8, num_classes=4, seed=2), 4000, 0, 0)
        freq = np.bincount(ds.labels, minlength=4) / len(ds)
        assert np.all(np.abs(freq - 0.25) < 0.05)

    def test_sample_seed_redraws_same_rule(self):
        a, ra = gen_planted_task(PlantedRelevanceSpec(16, 4, seed=1), 50, 0, 0)
        b, rb = gen_planted_task(PlantedRelevanceSpec(16, 4, seed=1, sample_seed=99), 50, 0, 0)
        assert ra.tolist() == rb.tolist()
        assert not np.array_equal(a.features, b.features)


class TestSequence:
    def test_majority_identical_sequence(self):
        from flexkd.datasets import majority_label

        assert majority_label(np.array([3, 3, 3, 3])) == 3

    def test_parity_of_zero_markers_is_even(self):
        from flexkd.datasets import parity_label

        assert parity_label(np.array([1, 2, 3, 1])) == 0

    @pytest.mark.parametrize("rule", ["majority-token", "parity-of-marker"])
    def test_recount_matches_generator(self, rule):
        ds = gen_seq_task(vocab=4, context_len=7, rule=rule, seed=5, n_train=100, n_test=0)
        for seq, label in zip(ds.features, ds.labels):
            counts = Counter(seq.tolist())
            if rule == "majority-token":
                best = max(counts.values())
                expected = min(tok for tok, c in counts.items() if c == best)
            else:
                expected = counts.get(0, 0) % 2
            assert label == expected

    @pytest.mark.parametrize("rule,k", [("majority-token", 4), ("parity-of-marker", 2)])
    def test_class_balance(self, rule, k):
        ds = gen_seq_task(vocab=4, context_len=9, rule=rule, seed=0, n_train=1000, n_test=0)
        freq = np.bincount(ds.labels, minlength=k) / len(ds)
        assert np.all(np.abs(freq - 1 / k) <= 0.05)

    def test_degenerate_inputs(self):
        with pytest.raises(ConfigError):
            gen_seq_task(vocab=1, context_len=4, rule="parity-of-marker", seed=0)
        with pytest.raises(ConfigError):
            gen_seq_task(vocab=3, context_len=1, rule="parity-of-marker", seed=0)
        with pytest.raises(ConfigError):
            gen_seq_task(vocab=3, context_len=4, rule="sorting", seed=0)

    def test_deterministic(self):
        a = gen_seq_task(5, 6, "majority-token", 3, 40, 0, 10)
        b = gen_seq_task(5, 6, "majority-token", 3, 40, 0, 10)
        np.testing.assert_array_equal(a.features, b.features)


class TestCSV:
    SCHEMA = CSVSchema(("f0", "f1"))

    def test_well_formed(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("f0,f1,label\n1,2,0\n3.5,-1,1\n0,0,1\n")
        ds = load_csv(p, self.SCHEMA)
        assert len(ds) == 3
        assert ds.provenance["rows"] == 3
        assert ds.provenance["label_histogram"] == {"0": 1, "1": 2}

    def test_non_numeric_feature_names_row(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("f0,f1,label\n1,2,0\n3,abc,1\n")
        with pytest.raises(DataError, match=":3:"):
            load_csv(p, self.SCHEMA)

    def test_unknown_label(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("f0,f1,label\n1,2,cat\n")
        with pytest.raises(DataError, match="unknown label"):
            load_csv(p, CSVSchema(("f0", "f1"), labels=("neg", "pos")))

    def test_missing_file_and_header(self, tmp_path):
        with pytest.raises(ConfigError):
            load_csv(tmp_path / "nope.csv", self.SCHEMA)
        p = tmp_path / "d.csv"
        p.write_text("f0,label\n1,0\n")
        with pytest.raises(DataError):
            load_csv(p, self.SCHEMA)

    def test_round_trip(self, tmp_path):
        ds, _ = gen_planted_task(PlantedRelevanceSpec(5, 2, seed=4), 20, 5, 5)
        schema = CSVSchema(tuple(f"x{i}" for i in range(5)), labels=("a", "b"), split_column="split")
        back = load_csv(save_csv(ds, tmp_path / "r.csv", schema), schema)
        assert back.features.tobytes() == ds.features.tobytes()
        np.testing.assert_array_equal(back.labels, ds.labels)
        assert back.split.tolist() == ds.split.tolist()

    def test_manifest_file(self, tmp_path):
        ds, _ = gen_planted_task(PlantedRelevanceSpec(5, 2, seed=4), 20, 0, 5)
        m = json.loads(ds.write_manifest(tmp_path / "m.json").read_text())
        assert m["seed"] == 4 and set(m["split_checksums"]) == {"train", "test"}


def test_sample_fraction_is_seeded_and_ordered():
    ds, _ = gen_planted_task(PlantedRelevanceSpec(5, 2, seed=0), 200, 0, 0)
    a = ds.sample_fraction(0.05, seed=3)
    b = ds.sample_fraction(0.05, seed=3)
    assert len(a) == 10 and a.features.tobytes() == b.features.tobytes()
    assert ds.sample_fraction(1.0, seed=3) is ds
    with pytest.raises(ConfigError):
        ds.sample_fraction(0.0, seed=0)
