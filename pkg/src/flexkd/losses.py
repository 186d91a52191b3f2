"""Distillation objectives.

The feature term pairs the m-th selected teacher unit with the m-th student
unit and penalises ``(1 - C)^2`` where ``C`` is the un-centred cosine of the
two columns over the batch.  Teacher-side inputs are always treated as
constants: they are read through ``.data`` and never enter the graph.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, DimensionError

log = logging.getLogger(__name__)

LOGIT_MODES = ("forward_kl", "reverse_kl", "none")


class _ZeroNormCounter:
    """Counts columns whose correlation fell back to 0 for lack of signal."""

    def __init__(self):
        self.count = 0

    def bump(self, n: int) -> None:
        if n:
            self.count += n
            log.debug("zero-norm column(s) in correlation: %d (total %d)", n, self.count)

    def reset(self) -> None:
        self.count = 0


zero_norm_warnings = _ZeroNormCounter()


def _const(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _as_rows(x: np.ndarray | Tensor, mask: np.ndarray | None = None):
    """Flatten (batch, seq, d) to (rows, d), keeping only masked positions."""
    if x.ndim == 2:
        return x
    if x.ndim != 3:
        raise DimensionError(f"hidden states must be rank 2 or 3, got shape {x.shape}")
    flat = x.reshape(-1, x.shape[-1])
    if mask is None:
        return flat
    keep = np.flatnonzero(np.asarray(mask, dtype=bool).reshape(-1))
    return flat[keep]


def cross_correlation(teacher_col, student_col) -> float:
    """Un-centred correlation of two batch vectors; 0 if either is all zeros."""
    t = np.asarray(teacher_col, dtype=np.float64)
    s = np.asarray(student_col, dtype=np.float64)
    if t.shape != s.shape or t.ndim != 1 or t.size == 0:
        raise DimensionError(f"columns must be equal-length vectors, got {t.shape} and {s.shape}")
    tn, sn = np.sqrt(t @ t), np.sqrt(s @ s)
    if tn == 0.0 or sn == 0.0:
        zero_norm_warnings.bump(1)
        return 0.0
    return float((t @ s) / (tn * sn))


def column_correlation(teacher_cols, student: Tensor, centered: bool = False) -> Tensor:
    """Per-column correlation between a constant teacher matrix and a student
    tensor of the same (rows, d) shape, differentiable in the student."""
    t = _const(teacher_cols)
    if t.shape != student.shape or t.ndim != 2:
        raise DimensionError(f"teacher columns {t.shape} and student {student.shape} must match")
    s = student.data
    if centered:
        t = t - t.mean(axis=0)
        s = s - s.mean(axis=0)
    tn = np.sqrt((t * t).sum(axis=0))
    sn = np.sqrt((s * s).sum(axis=0))
    ok = (tn > 0) & (sn > 0)
    zero_norm_warnings.bump(int((~ok).sum()))
    denom = np.where(ok, tn * sn, 1.0)
    c = np.where(ok, (t * s).sum(axis=0) / denom, 0.0)
    sn2 = np.where(ok, sn * sn, 1.0)

    def backward(g):
        # dC/ds = t / (|t||s|) - C s / |s|^2, zero for fallback columns
        gs = np.where(ok, g, 0.0) * (t / denom - c * s / sn2)
        if centered:
            gs = gs - gs.mean(axis=0)
        return (gs,)

    return Tensor._make(c, (student,), backward, "column_correlation")


def correlation_loss(teacher_cols, student: Tensor, centered: bool = False) -> Tensor:
    c = column_correlation(teacher_cols, student, centered)
    return ag.square(1.0 - c).sum()


def flex_kd_loss(
    teacher_hidden,
    student_hidden: Tensor,
    selection,
    centered: bool = False,
    mask: np.ndarray | None = None,
) -> Tensor:
    """Sum over m of ``(1 - C_m)^2`` between teacher unit ``selection[m]``
    and student unit ``m``."""
    idx = np.asarray(getattr(selection, "indices", selection), dtype=np.int64)
    t = _as_rows(_const(teacher_hidden), mask)
    s = _as_rows(student_hidden, mask)
    d_t, d_s = t.shape[-1], s.shape[-1]
    if idx.ndim != 1 or len(idx) != d_s:
        raise ConfigError(f"selection has {idx.size} units but the student has {d_s}")
    if idx.size and (idx.min() < 0 or idx.max() >= d_t):
        raise ConfigError(f"selection indices must lie in [0, {d_t})")
    if len(set(idx.tolist())) != len(idx):
        raise ConfigError("selection indices must be distinct")
    if t.shape[0] != s.shape[0]:
        raise DimensionError(f"teacher has {t.shape[0]} rows, student {s.shape[0]}")
    return correlation_loss(t[:, idx], s, centered)


def logit_kd_loss(teacher_logits, student_logits: Tensor, temperature: float = 1.0, mode: str = "forward_kl") -> Tensor:
    """``T^2 * KL`` between softened distributions, averaged over rows.

    ``forward_kl`` is KL(teacher || student); ``reverse_kl`` is
    KL(student || teacher).
    """
    if temperature <= 0:
        raise ConfigError("temperature must be > 0")
    t = _const(teacher_logits)
    if t.shape != student_logits.shape:
        raise DimensionError(f"teacher logits {t.shape} and student logits {student_logits.shape} differ")
    t = t.reshape(-1, t.shape[-1])
    s = student_logits.reshape(-1, student_logits.shape[-1]) if student_logits.ndim != 2 else student_logits
    n = t.shape[0]
    log_p = ag._log_softmax_np(t / temperature)
    log_q = ag.log_softmax(ag.scale(s, 1.0 / temperature))
    if mode == "forward_kl":
        kl = (Tensor(np.exp(log_p)) * (Tensor(log_p) - log_q)).sum()
    elif mode == "reverse_kl":
        kl = (ag.exp(log_q) * (log_q - Tensor(log_p))).sum()
    else:
        raise ConfigError(f"unknown logit KD mode {mode!r}")
    return ag.scale(kl, temperature * temperature / n)


class ProjectorHead:
    """Trainable ``d_T x d_S`` map taking student features to teacher space."""

    def __init__(self, d_t: int, d_s: int, seed: int):
        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(d_s)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(d_t, d_s)), requires_grad=True)

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape

    def parameters(self) -> list[Tensor]:
        return [self.weight]

    def __call__(self, student_hidden: Tensor) -> Tensor:
        return student_hidden @ ag.transpose(self.weight)


def projector_loss(teacher_hidden, student_hidden: Tensor, head: ProjectorHead, metric: str = "mse", mask=None) -> Tensor:
    t = _as_rows(_const(teacher_hidden), mask)
    s = _as_rows(student_hidden, mask)
    if head.shape != (t.shape[-1], s.shape[-1]):
        raise ConfigError(f"projector shape {head.shape} does not map d_S={s.shape[-1]} to d_T={t.shape[-1]}")
    projected = head(s)
    if metric == "mse":
        return ag.square(projected - Tensor(t)).mean()
    if metric == "correlation":
        return correlation_loss(t, projected)
    raise ConfigError(f"unknown projector metric {metric!r}")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5
    beta: float = 0.0
    lam: float = 0.5
    temperature: float = 1.0
    logit_mode: str = "forward_kl"

    def __post_init__(self):
        if min(self.alpha, self.beta, self.lam) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.alpha + self.beta + self.lam <= 0:
            raise ConfigError("at least one loss weight must be positive")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if self.logit_mode not in LOGIT_MODES:
            raise ConfigError(f"logit_mode must be one of {LOGIT_MODES}")
        if self.beta > 0 and self.logit_mode == "none":
            raise ConfigError("beta > 0 needs a logit_mode other than 'none'")


# classification regime: each stand-alone KD term and the hard loss at 0.5
CLASSIFICATION_WEIGHTS = LossWeights(alpha=0.5, beta=0.0, lam=0.5)
# generation regime: small feature weight next to reverse-KL logit KD
GENERATION_WEIGHTS = LossWeights(alpha=0.05, beta=1.0, lam=1.0, logit_mode="reverse_kl")


def composite_loss(parts: Mapping[str, Tensor | None], weights: LossWeights) -> tuple[Tensor, dict[str, float | None]]:
    """``alpha * feature + beta * logit + lam * supervised``.

    Returns the total and the unweighted value of each part (``None`` for
    parts that were not supplied).
    """
    total = None
    for name, w in (("feature", weights.alpha), ("logit", weights.beta), ("supervised", weights.lam)):
        part = parts.get(name)
        if w > 0:
            if part is None:
                raise ConfigError(f"weight for {name!r} is {w} but the term is missing")
            term = ag.scale(part, w)
            total = term if total is None else total + term
    raw = {name: (None if parts.get(name) is None else float(parts[name].data)) for name in ("feature", "logit", "supervised")}
    return total, raw
