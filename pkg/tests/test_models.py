import json

import numpy as np
import pytest

from flexkd import autograd as ag
from flexkd.errors import ConfigError, DataError
from flexkd.models import Checkpoint, MLPConfig, TinySeqConfig, init_model


@pytest.fixture
def mlp():
    return init_model(MLPConfig(4, [8], 2), seed=0)


def test_parameter_count(mlp):
    assert mlp.num_parameters() == 4 * 8 + 8 + 8 * 2 + 2 == 58


def test_same_seed_same_parameters():
    cfg = MLPConfig(5, [7, 3], 4, "gelu")
    assert init_model(cfg, 3).checksum() == init_model(cfg, 3).checksum()
    assert init_model(cfg, 3).checksum() != init_model(cfg, 4).checksum()


def test_init_bound_follows_fan_in():
    m = init_model(MLPConfig(100, [10], 2), seed=0)
    w = m.params["layer0.weight"].data
    assert np.abs(w).max() <= 0.1
    assert np.abs(w).max() > 0.09


@pytest.mark.parametrize(
    "kwargs",
    [dict(input_dim=0, hidden_dims=[3], num_classes=2), dict(input_dim=3, hidden_dims=[], num_classes=2),
     dict(input_dim=3, hidden_dims=[3], num_classes=2, activation="swish")],
)
def test_invalid_config(kwargs):
    with pytest.raises(ConfigError):
        MLPConfig(**kwargs)


def test_forward_shapes(mlp, rng):
    out = mlp.forward(rng.normal(size=(3, 4)))
    assert out.logits.shape == (3, 2) and out.last_hidden.shape == (3, 8)


def test_forward_rejects_wrong_width(mlp):
    with pytest.raises(DataError):
        mlp.forward(np.zeros((2, 5)))


def test_zero_head_gives_uniform_softmax(mlp, rng):
    mlp.params["head.weight"].data[:] = 0.0
    mlp.params["head.bias"].data[:] = 0.0
    p = ag.softmax(mlp.forward(rng.normal(size=(6, 4)) * 10).logits).data
    np.testing.assert_array_equal(p, np.full((6, 2), 0.5))


def test_logits_are_head_of_last_hidden(rng):
    m = init_model(MLPConfig(6, [5, 4], 3, "relu"), seed=2)
    out = m.forward(rng.normal(size=(7, 6)))
    offline = out.last_hidden.data @ m.params["head.weight"].data + m.params["head.bias"].data
    np.testing.assert_array_equal(out.logits.data, offline)


def test_forward_is_deterministic(mlp, rng):
    x = rng.normal(size=(5, 4))
    assert mlp.forward(x).logits.data.tobytes() == mlp.forward(x).logits.data.tobytes()


class TestHiddenStack:
    def test_two_layers(self, rng):
        m = init_model(MLPConfig(4, [8, 8], 2), seed=0)
        x = rng.normal(size=(3, 4))
        stack = m.hidden_layer_stack(x)
        assert len(stack) == 2
        assert stack[-1].data.tobytes() == m.forward(x).last_hidden.data.tobytes()

    def test_single_layer(self, mlp, rng):
        assert len(mlp.hidden_layer_stack(rng.normal(size=(2, 4)))) == 1


class TestTinySeq:
    @pytest.fixture
    def lm(self):
        return init_model(TinySeqConfig(vocab_size=7, embed_dim=5, num_layers=2, hidden_dim=6, context_len=8), seed=1)

    def test_shapes(self, lm, rng):
        out = lm.forward(rng.integers(0, 7, size=(3, 8)))
        assert out.logits.shape == (3, 8, 7) and out.last_hidden.shape == (3, 8, 6)
        assert len(lm.hidden_layer_stack(rng.integers(0, 7, size=(3, 8)))) == 2

    @pytest.mark.parametrize("t", [1, 3, 7])
    def test_causality(self, lm, rng, t):
        ids = rng.integers(0, 7, size=(4, 8))
        changed = ids.copy()
        changed[:, t] = (changed[:, t] + 1) % 7
        a = lm.forward(ids).logits.data
        b = lm.forward(changed).logits.data
        np.testing.assert_array_equal(a[:, :t], b[:, :t])
        assert not np.array_equal(a[:, t:], b[:, t:])

    def test_classifier_reads_final_position(self, rng):
        m = init_model(TinySeqConfig(5, 4, 1, 6, 6, num_classes=3), seed=0)
        out = m.forward(rng.integers(0, 5, size=(2, 6)))
        assert out.logits.shape == (2, 3)
        offline = out.last_hidden.data[:, -1] @ m.params["head.weight"].data + m.params["head.bias"].data
        np.testing.assert_array_equal(out.logits.data, offline)

    def test_vocab_violation(self, lm):
        with pytest.raises(DataError):
            lm.forward(np.array([[0, 7]]))
        with pytest.raises(DataError):
            lm.forward(np.zeros((1, 9), dtype=int))


class TestCheckpoint:
    def test_round_trip_is_bit_identical(self, tmp_path):
        for cfg in (MLPConfig(4, [8, 3], 2, "gelu"), TinySeqConfig(9, 4, 2, 5, 6, num_classes=2)):
            m = init_model(cfg, seed=5)
            ckpt = Checkpoint.from_model(m, seed=5, steps=0, final_loss=None)
            loaded = Checkpoint.load(ckpt.save(tmp_path / "c.json"))
            assert loaded.config == cfg
            for name, arr in m.state().items():
                assert loaded.params[name].tobytes() == arr.tobytes()
            assert loaded.to_model().checksum() == m.checksum()
            assert loaded.metadata["seed"] == 5

    def test_version_field_present(self, mlp, tmp_path):
        d = json.loads(Checkpoint.from_model(mlp).save(tmp_path / "c.json").read_text())
        assert d["version"] == 1

    def test_tampered_checkpoint_rejected(self, mlp, tmp_path):
        path = Checkpoint.from_model(mlp).save(tmp_path / "c.json")
        d = json.loads(path.read_text())
        d["checksum"] = "0" * 64
        path.write_text(json.dumps(d))
        with pytest.raises(DataError):
            Checkpoint.load(path)
