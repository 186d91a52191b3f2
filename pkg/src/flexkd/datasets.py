"""Synthetic tasks with known structure, plus CSV ingestion.

The planted-relevance task is the workhorse: labels are a fixed nonlinear
function of ``k`` designated input coordinates and every other coordinate is
independent noise, so "task-relevant" has a ground truth that tests can
check against.
"""

from __future__ import annotations

import csv
import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator

import numpy as np

from .errors import ConfigError, DataError

SPLITS = ("train", "val", "test")


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    split: np.ndarray  # one tag per row
    provenance: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features)
        self.labels = np.asarray(self.labels)
        self.split = np.asarray(self.split, dtype=object)
        n = len(self.features)
        if len(self.labels) != n or len(self.split) != n:
            raise DataError(
                f"features ({n}), labels ({len(self.labels)}) and split tags ({len(self.split)}) differ in length"
            )
        unknown = set(self.split.tolist()) - set(SPLITS)
        if unknown:
            raise DataError(f"unknown split tags {sorted(unknown)}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.provenance.get("num_classes", int(self.labels.max()) + 1 if len(self) else 0))

    def subset(self, split: str) -> LabeledDataset:
        if split not in SPLITS:
            raise DataError(f"unknown split {split!r}")
        return self.take(np.flatnonzero(self.split == split))

    def take(self, indices) -> LabeledDataset:
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.split[idx], dict(self.provenance))

    def sample_fraction(self, fraction: float, seed: int) -> LabeledDataset:
        """Seeded subsample without replacement, kept in dataset order."""
        if not 0.0 < fraction <= 1.0:
            raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")
        if fraction == 1.0:
            return self
        n = max(1, int(round(fraction * len(self))))
        rng = np.random.default_rng(seed)
        return self.take(np.sort(rng.choice(len(self), size=n, replace=False)))

    def batches(self, batch_size: int, rng: np.random.Generator | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start : start + batch_size]
            yield self.features[idx], self.labels[idx]

    def split_checksum(self, split: str) -> str:
        part = self.subset(split)
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(part.features).tobytes())
        h.update(np.ascontiguousarray(part.labels, dtype=np.int64).tobytes())
        return h.hexdigest()

    def manifest(self) -> dict[str, Any]:
        sizes = {s: int((self.split == s).sum()) for s in SPLITS}
        return {
            "provenance": self.provenance,
            "sizes": sizes,
            "seed": self.provenance.get("seed"),
            "split_checksums": {s: self.split_checksum(s) for s in SPLITS if sizes[s]},
        }

    def write_manifest(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.manifest(), indent=2, sort_keys=True, default=_jsonable))
        return path


def _jsonable(x):
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"cannot serialize {type(x).__name__}")


def _split_tags(n_train: int, n_val: int, n_test: int) -> np.ndarray:
    return np.array(["train"] * n_train + ["val"] * n_val + ["test"] * n_test, dtype=object)


# -- planted relevance ---------------------------------------------------------

@dataclass(frozen=True)
class PlantedRelevanceSpec:
    d_input: int
    num_relevant: int
    noise_scale: float = 1.0
    num_classes: int = 2
    seed: int = 0
    # draws fresh samples from the same rule when set
    sample_seed: int | None = None
    rule_width: int = 16

    def __post_init__(self):
        if self.d_input < 1 or self.num_relevant < 1:
            raise ConfigError("d_input and num_relevant must be >= 1")
        if self.num_relevant > self.d_input:
            raise ConfigError(f"num_relevant={self.num_relevant} exceeds d_input={self.d_input}")
        if self.noise_scale < 0:
            raise ConfigError("noise_scale must be >= 0")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")


@dataclass(frozen=True)
class PlantedRule:
    relevant: np.ndarray
    proj: np.ndarray
    mix: np.ndarray
    cuts: np.ndarray

    def score(self, x: np.ndarray) -> np.ndarray:
        return np.tanh(x[:, self.relevant] @ self.proj) @ self.mix

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.searchsorted(self.cuts, self.score(x), side="right").astype(np.int64)


def planted_rule(spec: PlantedRelevanceSpec) -> PlantedRule:
    """The labeling rule: a random tanh layer on the relevant coordinates,
    a random readout, then quantile cuts that balance the classes."""
    rng = np.random.default_rng([spec.seed, 0])
    relevant = np.sort(rng.choice(spec.d_input, size=spec.num_relevant, replace=False))
    proj = rng.normal(0.0, 1.0 / np.sqrt(spec.num_relevant), size=(spec.num_relevant, spec.rule_width))
    proj *= 2.0  # puts tanh into its curved regime
    mix = rng.normal(0.0, 1.0, size=spec.rule_width)
    ref = np.zeros((20000, spec.d_input))
    ref[:, relevant] = rng.normal(size=(20000, spec.num_relevant))
    scores = np.tanh(ref[:, relevant] @ proj) @ mix
    cuts = np.quantile(scores, np.arange(1, spec.num_classes) / spec.num_classes)
    return PlantedRule(relevant, proj, mix, cuts)


def gen_planted_task(
    spec: PlantedRelevanceSpec, n_train: int = 2000, n_val: int = 0, n_test: int = 500
) -> tuple[LabeledDataset, np.ndarray]:
    """Return the dataset and the sorted array of relevant coordinates."""
    rule = planted_rule(spec)
    n = n_train + n_val + n_test
    if n < 1:
        raise ConfigError("dataset must have at least one row")
    sample_seed = spec.seed if spec.sample_seed is None else spec.sample_seed
    rng = np.random.default_rng([sample_seed, 1])
    x = rng.normal(0.0, spec.noise_scale, size=(n, spec.d_input)) if spec.noise_scale > 0 else np.zeros((n, spec.d_input))
    x[:, rule.relevant] = rng.normal(size=(n, spec.num_relevant))
    y = rule(x)
    provenance = {
        "generator": "planted",
        "d_input": spec.d_input,
        "num_relevant": spec.num_relevant,
        "noise_scale": spec.noise_scale,
        "num_classes": spec.num_classes,
        "seed": spec.seed,
        "sample_seed": sample_seed,
        "relevant": rule.relevant.tolist(),
    }
    return LabeledDataset(x, y, _split_tags(n_train, n_val, n_test), provenance), rule.relevant


# -- sequence tasks ------------------------------------------------------------

SEQ_RULES = ("majority-token", "parity-of-marker")
MARKER = 0


def majority_label(seq: np.ndarray) -> int:
    """Most frequent token; ties go to the smallest id."""
    counts = np.bincount(seq)
    return int(np.argmax(counts))


def parity_label(seq: np.ndarray) -> int:
    return int(np.count_nonzero(seq == MARKER) % 2)


def gen_seq_task(
    vocab: int,
    context_len: int,
    rule: str,
    seed: int,
    n_train: int = 2000,
    n_val: int = 0,
    n_test: int = 500,
) -> LabeledDataset:
    """Token sequences labeled by a deterministic counting rule.

    Target classes are drawn in exact balance first and each sequence is
    edited until the rule yields its target, so class balance holds by
    construction while labels still come from recounting the tokens.
    """
    if rule not in SEQ_RULES:
        raise ConfigError(f"unknown sequence rule {rule!r}; choose from {SEQ_RULES}")
    if vocab < 2:
        raise ConfigError("vocabulary needs at least 2 tokens")
    if context_len < 2:
        raise ConfigError("context_len must be >= 2")
    num_classes = vocab if rule == "majority-token" else 2
    n = n_train + n_val + n_test
    rng = np.random.default_rng([seed, 2])
    targets = rng.permutation(np.arange(n) % num_classes)
    seqs = rng.integers(0, vocab, size=(n, context_len))
    label_fn = majority_label if rule == "majority-token" else parity_label
    for i in range(n):
        seq, target = seqs[i], int(targets[i])
        if rule == "majority-token":
            while majority_label(seq) != target:
                others = np.flatnonzero(seq != target)
                seq[rng.choice(others)] = target
        elif parity_label(seq) != target:
            pos = rng.integers(context_len)
            if seq[pos] == MARKER:
                seq[pos] = rng.integers(1, vocab)
            else:
                seq[pos] = MARKER
    labels = np.array([label_fn(s) for s in seqs], dtype=np.int64)
    provenance = {
        "generator": "sequence",
        "rule": rule,
        "vocab": vocab,
        "context_len": context_len,
        "num_classes": num_classes,
        "seed": seed,
    }
    return LabeledDataset(seqs.astype(np.int64), labels, _split_tags(n_train, n_val, n_test), provenance)


# -- CSV -----------------------------------------------------------------------

@dataclass(frozen=True)
class CSVSchema:
    """Columns of a CSV file.

    ``labels`` lists the allowed label strings in class-index order; when it
    is ``None`` the label column must hold integer class indices.  Rows are
    tagged from ``split_column`` if given, else all rows are ``train``.
    """

    feature_columns: tuple[str, ...]
    label_column: str = "label"
    labels: tuple[str, ...] | None = None
    split_column: str | None = None


def load_csv(path: str | Path, schema: CSVSchema) -> LabeledDataset:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"dataset file not found: {path}")
    features, labels, splits = [], [], []
    label_index = {name: i for i, name in enumerate(schema.labels)} if schema.labels is not None else None
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        wanted = list(schema.feature_columns) + [schema.label_column]
        if schema.split_column:
            wanted.append(schema.split_column)
        missing = [c for c in wanted if c not in header]
        if missing:
            raise DataError(f"{path}: header lacks columns {missing}")
        col = {name: header.index(name) for name in wanted}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
            try:
                features.append([float(row[col[c]]) for c in schema.feature_columns])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: non-numeric feature cell ({exc})") from None
            raw = row[col[schema.label_column]]
            if label_index is not None:
                if raw not in label_index:
                    raise DataError(f"{path}:{lineno}: unknown label {raw!r}")
                labels.append(label_index[raw])
            else:
                try:
                    value = int(raw)
                except ValueError:
                    raise DataError(f"{path}:{lineno}: label {raw!r} is not a class index") from None
                if value < 0:
                    raise DataError(f"{path}:{lineno}: negative label {value}")
                labels.append(value)
            splits.append(row[col[schema.split_column]] if schema.split_column else "train")
            if splits[-1] not in SPLITS:
                raise DataError(f"{path}:{lineno}: unknown split tag {splits[-1]!r}")
    if not labels:
        raise DataError(f"{path}: no data rows")
    y = np.array(labels, dtype=np.int64)
    num_classes = len(schema.labels) if schema.labels is not None else int(y.max()) + 1
    provenance = {
        "source": str(path),
        "rows": len(y),
        "num_classes": num_classes,
        "label_histogram": {str(k): v for k, v in sorted(Counter(y.tolist()).items())},
    }
    return LabeledDataset(np.array(features, dtype=np.float64).reshape(len(y), -1), y, splits, provenance)


def save_csv(dataset: LabeledDataset, path: str | Path, schema: CSVSchema) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = list(schema.feature_columns) + [schema.label_column]
    if schema.split_column:
        header.append(schema.split_column)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for x, y, s in zip(dataset.features, dataset.labels, dataset.split):
            label = schema.labels[int(y)] if schema.labels is not None else str(int(y))
            row = [repr(float(v)) for v in x] + [label]
            if schema.split_column:
                row.append(s)
            writer.writerow(row)
    return path
