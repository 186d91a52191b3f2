"""Gradient-based importance of last-hidden-layer units.

For each sample the teacher's output is reduced to a scalar, differentiated
with respect to the last hidden activation, and the absolute gradient is
that sample's importance vector.  Averaging over a dataset gives the
profile, whose descending order picks the units a narrower student should
match.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import autograd as ag
from .datasets import LabeledDataset
from .errors import ConfigError, DataError, NumericError
from .models import Model

PROFILE_VERSION = 1
REDUCTIONS = ("loss", "predicted-logit", "output-sum")


def scalar_output(model: Model, logits: ag.Tensor, target, reduction: str) -> ag.Tensor:
    """Collapse one sample's logits into the scalar that gets differentiated.

    ``loss`` is the supervised loss on ``target`` (cross-entropy for a class
    label, mean next-token NLL for a target sequence); ``predicted-logit`` is
    the largest logit, summed over positions for token-level heads;
    ``output-sum`` adds up every logit.
    """
    if reduction == "loss":
        if target is None:
            raise ConfigError("output_reduction='loss' needs a label for every sample")
        if logits.ndim == 3:
            flat = logits.reshape(-1, logits.shape[-1])
            return ag.softmax_cross_entropy(flat, np.asarray(target, dtype=np.int64).reshape(-1))
        return ag.softmax_cross_entropy(logits, np.asarray([target], dtype=np.int64).reshape(-1))
    if reduction == "predicted-logit":
        return ag.reduce_max(logits, axis=-1).sum()
    if reduction == "output-sum":
        return logits.sum()
    raise ConfigError(f"unknown output_reduction {reduction!r}; choose from {REDUCTIONS}")


def per_sample_importance(
    teacher: Model,
    x,
    target=None,
    output_reduction: str = "loss",
    position_mask: np.ndarray | None = None,
) -> np.ndarray:
    """``|d F(x) / d h|`` for a single sample, as a length-``d_T`` vector.

    Sequence inputs give one gradient row per position; rows are averaged
    over the positions selected by ``position_mask`` (all by default).
    """
    batch = np.asarray(x)[None, ...]
    result = teacher.forward(batch, watch_hidden=True)
    out = scalar_output(teacher, result.logits, target, output_reduction)
    grad = np.abs(ag.grad_wrt(out, result.last_hidden).data[0])
    if grad.ndim == 2:
        if position_mask is None:
            grad = grad.mean(axis=0)
        else:
            mask = np.asarray(position_mask, dtype=bool)
            if mask.shape != (grad.shape[0],) or not mask.any():
                raise DataError("position_mask must select at least one position")
            grad = grad[mask].mean(axis=0)
    if not np.isfinite(grad).all():
        raise NumericError("non-finite importance gradient")
    return grad


def rank_neurons(scores: Sequence[float]) -> np.ndarray:
    """Indices by descending score, ties broken by ascending index."""
    g = np.asarray(scores, dtype=np.float64)
    if g.ndim != 1:
        raise DataError(f"scores must be a vector, got shape {g.shape}")
    if np.isnan(g).any():
        raise NumericError("NaN in importance scores")
    return np.argsort(-g, kind="stable")


@dataclass(frozen=True)
class SelectionSet:
    indices: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.indices)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.indices, dtype=np.int64)


@dataclass
class ImportanceProfile:
    scores: np.ndarray
    ranked_indices: np.ndarray
    num_samples: int
    output_reduction: str = "loss"
    scope: str = "last_layer"
    calibration_fraction: float = 1.0
    seed: int = 0
    teacher_checksum: str | None = None
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.ranked_indices = np.asarray(self.ranked_indices, dtype=np.int64)
        d = self.scores.shape[0]
        if not np.isfinite(self.scores).all() or (self.scores < 0).any():
            raise NumericError("importance scores must be finite and non-negative")
        if sorted(self.ranked_indices.tolist()) != list(range(d)):
            raise DataError("ranked_indices is not a permutation of the units")
        if np.any(np.diff(self.scores[self.ranked_indices]) > 0):
            raise DataError("ranked_indices is not in descending score order")

    @property
    def d_T(self) -> int:
        return int(self.scores.shape[0])

    def to_dict(self) -> dict[str, Any]:
        return {
            "format": "flexkd-profile",
            "version": PROFILE_VERSION,
            "d_T": self.d_T,
            "N": int(self.num_samples),
            "scope": self.scope,
            "output_reduction": self.output_reduction,
            "scores": [float(s) for s in self.scores],
            "ranked_indices": [int(i) for i in self.ranked_indices],
            "calibration_fraction": float(self.calibration_fraction),
            "seed": int(self.seed),
            "teacher_checksum": self.teacher_checksum,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ImportanceProfile:
        if d.get("format") != "flexkd-profile" or d.get("version") != PROFILE_VERSION:
            raise DataError("not a supported importance profile")
        prof = cls(
            scores=np.array(d["scores"], dtype=np.float64),
            ranked_indices=np.array(d["ranked_indices"], dtype=np.int64),
            num_samples=int(d["N"]),
            output_reduction=d["output_reduction"],
            scope=d.get("scope", "last_layer"),
            calibration_fraction=float(d["calibration_fraction"]),
            seed=int(d["seed"]),
            teacher_checksum=d.get("teacher_checksum"),
            metadata=d.get("metadata", {}),
        )
        if prof.d_T != d["d_T"]:
            raise DataError(f"profile declares d_T={d['d_T']} but holds {prof.d_T} scores")
        return prof

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        return path

    @classmethod
    def load(cls, path: str | Path) -> ImportanceProfile:
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except FileNotFoundError as exc:
            raise ConfigError(f"profile not found: {path}") from exc

    def checksum(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def aggregate_importance(
    teacher: Model,
    dataset: LabeledDataset,
    output_reduction: str = "loss",
    calibration_fraction: float = 1.0,
    seed: int = 0,
) -> ImportanceProfile:
    """Mean per-sample importance over ``dataset`` (optionally a seeded
    fraction of it), accumulated in dataset order."""
    data = dataset.sample_fraction(calibration_fraction, seed)
    if len(data) == 0:
        raise DataError("cannot aggregate importance over an empty dataset")
    total = np.zeros(teacher.hidden_size)
    targets = data.labels if output_reduction == "loss" else [None] * len(data)
    for x, y in zip(data.features, targets):
        total = total + per_sample_importance(teacher, x, y, output_reduction)
    scores = total / len(data)
    return ImportanceProfile(
        scores=scores,
        ranked_indices=rank_neurons(scores),
        num_samples=len(data),
        output_reduction=output_reduction,
        calibration_fraction=calibration_fraction,
        seed=seed,
        teacher_checksum=teacher.checksum(),
    )


def select_top(profile: ImportanceProfile | np.ndarray, d_s: int) -> SelectionSet:
    """First ``d_s`` entries of the ranking, in rank order."""
    ranked = profile.ranked_indices if isinstance(profile, ImportanceProfile) else np.asarray(profile)
    if not 1 <= d_s <= len(ranked):
        raise ConfigError(f"cannot select {d_s} units out of {len(ranked)}")
    return SelectionSet(tuple(int(i) for i in ranked[:d_s]))


def input_sensitivity(model: Model, features: np.ndarray) -> np.ndarray:
    """Mean ``|d h_u / d x_i|`` over samples, as an (inputs x units) matrix.

    Rows of a feature batch do not interact, so one backward pass per hidden
    unit over the whole batch yields every per-sample input gradient.
    """
    x = ag.Tensor(np.asarray(features, dtype=np.float64)).watch()
    h = model.hidden_layer_stack(x)[-1]
    tape = ag.Tape.record(h)
    out = np.zeros((x.shape[1], h.shape[-1]))
    for u in range(h.shape[-1]):
        seed = np.zeros_like(h.data)
        seed[:, u] = 1.0
        out[:, u] = np.abs(tape.gradients(seed)[id(x)]).mean(axis=0)
    return out


def jaccard(a, b) -> float:
    a, b = set(np.asarray(a).tolist()), set(np.asarray(b).tolist())
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


# -- activation sparsity -------------------------------------------------------

@dataclass
class SparsityTable:
    """Percent of activation entries below each magnitude threshold."""

    thresholds: list[float]
    percentages: np.ndarray  # layers x thresholds
    counts: np.ndarray  # layers x thresholds, raw below-threshold counts
    totals: np.ndarray  # entries per layer

    def to_dict(self) -> dict[str, Any]:
        return {
            "thresholds": [float(t) for t in self.thresholds],
            "layers": [
                {
                    "layer": i,
                    "entries": int(self.totals[i]),
                    "below": {repr(float(t)): int(c) for t, c in zip(self.thresholds, self.counts[i])},
                    "percent": {repr(float(t)): float(p) for t, p in zip(self.thresholds, self.percentages[i])},
                }
                for i in range(len(self.totals))
            ],
        }

    def to_text(self) -> str:
        head = "layer  " + "  ".join(f"|a|<{t:g}".rjust(9) for t in self.thresholds)
        rows = [head]
        for i, pct in enumerate(self.percentages):
            rows.append(f"{i:5d}  " + "  ".join(f"{p:8.2f}%" for p in pct))
        return "\n".join(rows)


def activation_sparsity_profile(
    model: Model, dataset: LabeledDataset, thresholds: Sequence[float], batch_size: int = 256
) -> SparsityTable:
    thresholds = [float(t) for t in thresholds]
    if not thresholds or min(thresholds) <= 0:
        raise ConfigError("thresholds must be positive")
    if len(dataset) == 0:
        raise DataError("cannot profile activations on an empty dataset")
    counts = None
    totals = None
    with ag.no_grad():
        for xb, _ in dataset.batches(batch_size):
            layers = model.hidden_layer_stack(xb)
            if counts is None:
                counts = np.zeros((len(layers), len(thresholds)), dtype=np.int64)
                totals = np.zeros(len(layers), dtype=np.int64)
            for i, act in enumerate(layers):
                mags = np.abs(act.data)
                totals[i] += mags.size
                for k, tau in enumerate(thresholds):
                    counts[i, k] += int(np.count_nonzero(mags < tau))
    percentages = 100.0 * counts / totals[:, None]
    return SparsityTable(thresholds, percentages, counts, totals)
