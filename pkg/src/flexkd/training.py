"""Teacher fine-tuning, student distillation and evaluation loops.

Runs are single-threaded and fully determined by their seeds: the model
init, the shuffling stream and any projector init each draw from their own
``numpy`` generator keyed on the run seed.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from . import autograd as ag
from .attribution import ImportanceProfile, SelectionSet, select_top
from .datasets import LabeledDataset
from .errors import ConfigError, DataError, NumericError
from .losses import LossWeights, ProjectorHead, composite_loss, flex_kd_loss, logit_kd_loss, projector_loss
from .models import Checkpoint, Model, init_model

log = logging.getLogger(__name__)

METHODS = ("flexkd", "projector_mse", "projector_corr", "vanilla_kd", "ft_only")

DEFAULT_METHOD_WEIGHTS: dict[str, LossWeights] = {
    "flexkd": LossWeights(alpha=0.5, beta=0.0, lam=0.5, logit_mode="none"),
    "projector_mse": LossWeights(alpha=0.5, beta=0.0, lam=0.5, logit_mode="none"),
    "projector_corr": LossWeights(alpha=0.5, beta=0.0, lam=0.5, logit_mode="none"),
    "vanilla_kd": LossWeights(alpha=0.0, beta=0.5, lam=0.5, logit_mode="forward_kl"),
    "ft_only": LossWeights(alpha=0.0, beta=0.0, lam=1.0, logit_mode="none"),
}


class TrainingDiverged(NumericError):
    def __init__(self, message: str, last_good: Checkpoint | None):
        super().__init__(message)
        self.last_good = last_good


# -- optimizers ----------------------------------------------------------------

@dataclass
class OptimizerState:
    method: str = "adam"
    learning_rate: float = 5e-4
    epsilon: float = 1e-8
    weight_decay: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    step_count: int = 0
    moments: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.method!r}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")


class Optimizer:
    """SGD or Adam with L2 weight decay folded into the gradient."""

    def __init__(self, params: list[ag.Tensor], state: OptimizerState):
        self.params = params
        self.state = state

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        st = self.state
        st.step_count += 1
        t = st.step_count
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad + st.weight_decay * p.data if st.weight_decay else p.grad
            if st.method == "sgd":
                p.data = p.data - st.learning_rate * g
                continue
            m, v = st.moments.get(i, (np.zeros_like(p.data), np.zeros_like(p.data)))
            m = st.beta1 * m + (1.0 - st.beta1) * g
            v = st.beta2 * v + (1.0 - st.beta2) * g * g
            st.moments[i] = (m, v)
            m_hat = m / (1.0 - st.beta1**t)
            v_hat = v / (1.0 - st.beta2**t)
            p.data = p.data - st.learning_rate * m_hat / (np.sqrt(v_hat) + st.epsilon)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    learning_rate: float = 5e-4
    optimizer: str = "adam"
    epsilon: float = 1e-8
    weight_decay: float = 1e-6
    select_best_val: bool = False

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")

    def optimizer_state(self) -> OptimizerState:
        return OptimizerState(self.optimizer, self.learning_rate, self.epsilon, self.weight_decay)


def supervised_loss(logits: ag.Tensor, labels) -> ag.Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim == 3:
        return ag.softmax_cross_entropy(logits.reshape(-1, logits.shape[-1]), labels.reshape(-1))
    return ag.softmax_cross_entropy(logits, labels)


# -- evaluation ------------------------------------------------------------------

def predict_logits(model: Model, features, batch_size: int = 512) -> np.ndarray:
    chunks = []
    with ag.no_grad():
        for start in range(0, len(features), batch_size):
            chunks.append(model.forward(features[start : start + batch_size]).logits.data)
    return np.concatenate(chunks, axis=0)


def evaluate(model: Model, dataset: LabeledDataset, metric: str = "accuracy") -> float:
    """Accuracy (argmax, ties to the lowest class) or mean NLL."""
    if len(dataset) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    logits = predict_logits(model, dataset.features)
    if metric == "accuracy":
        return float(np.mean(np.argmax(logits, axis=-1) == dataset.labels))
    if metric == "nll":
        with ag.no_grad():
            return float(supervised_loss(ag.Tensor(logits), dataset.labels).data)
    raise ConfigError(f"unknown metric {metric!r}")


def _epoch_metrics(model: Model, dataset: LabeledDataset, epoch: int, loss_sum: float, steps: int) -> dict[str, Any]:
    rec: dict[str, Any] = {"epoch": epoch, "train_loss": loss_sum / max(steps, 1)}
    train = dataset.subset("train")
    rec["train_accuracy"] = evaluate(model, train)
    val = dataset.subset("val")
    if len(val):
        rec["val_accuracy"] = evaluate(model, val)
    return rec


# -- teacher ---------------------------------------------------------------------

def train_teacher(
    model_config, dataset: LabeledDataset, epochs: int | None = None, seed: int = 0, train: TrainConfig | None = None
) -> Checkpoint:
    """Supervised fine-tuning from a seeded init.

    Per-epoch metrics go into ``checkpoint.metadata["history"]``.
    """
    train = train or TrainConfig()
    if epochs is not None:
        train = replace(train, epochs=epochs)
    data = dataset.subset("train")
    if len(data) == 0:
        raise DataError("teacher training set is empty")
    model = init_model(model_config, seed)
    opt = Optimizer(model.parameters(), train.optimizer_state())
    rng = np.random.default_rng([seed, 7])
    history: list[dict[str, Any]] = []
    best: tuple[float, dict[str, np.ndarray]] | None = None
    final_loss = None
    step = 0
    for epoch in range(train.epochs):
        loss_sum, n_steps = 0.0, 0
        for xb, yb in data.batches(train.batch_size, rng):
            snapshot = model.state()
            try:
                loss = supervised_loss(model.forward(xb).logits, yb)
                opt.zero_grad()
                loss.backward()
                opt.step()
            except NumericError as exc:
                last = Checkpoint(model.config, snapshot, {"seed": seed, "steps": step, "final_loss": final_loss})
                raise TrainingDiverged(f"teacher training diverged at step {step}: {exc}", last) from exc
            final_loss = float(loss.data)
            loss_sum += final_loss
            n_steps += 1
            step += 1
        rec = _epoch_metrics(model, dataset, epoch, loss_sum, n_steps)
        history.append(rec)
        log.info("teacher epoch %d: %s", epoch, rec)
        if train.select_best_val and "val_accuracy" in rec and (best is None or rec["val_accuracy"] > best[0]):
            best = (rec["val_accuracy"], model.state())
    params = best[1] if best is not None else model.state()
    meta = {"seed": seed, "steps": step, "final_loss": final_loss, "history": history, "train": asdict(train), "role": "teacher"}
    return Checkpoint(model.config, params, meta)


# -- distillation ----------------------------------------------------------------

@dataclass
class DistillationPlan:
    teacher: Checkpoint
    student_config: Any
    method: str = "flexkd"
    profile: ImportanceProfile | None = None
    selection: SelectionSet | None = None
    weights: LossWeights | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    centered: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.weights is None:
            self.weights = DEFAULT_METHOD_WEIGHTS[self.method]
        if self.method == "flexkd" and self.selection is None and self.profile is not None:
            self.selection = select_top(self.profile, self.student_config.hidden_size)

    @property
    def effective_weights(self) -> LossWeights:
        w = self.weights
        if self.method == "ft_only":
            return replace(w, alpha=0.0, beta=0.0, logit_mode="none")
        if self.method == "vanilla_kd":
            return replace(w, alpha=0.0)
        return w

    def validate(self) -> None:
        d_t = self.teacher.config.hidden_size
        d_s = self.student_config.hidden_size
        if self.profile is not None:
            if self.profile.teacher_checksum != self.teacher.checksum:
                raise ConfigError("importance profile was computed from a different teacher checkpoint")
            if self.profile.d_T != d_t:
                raise ConfigError(f"profile covers {self.profile.d_T} units but the teacher has {d_t}")
        if self.method == "flexkd":
            if self.profile is None or self.selection is None:
                raise ConfigError("flexkd needs an importance profile")
            if len(self.selection) != d_s:
                raise ConfigError(f"selection has {len(self.selection)} units but the student width is {d_s}")
            if list(self.selection.indices) != list(self.profile.ranked_indices[:d_s]):
                raise ConfigError("selection is not the top of the profile ranking")
        teacher_out = getattr(self.teacher.config, "num_classes", None)
        student_out = getattr(self.student_config, "num_classes", None)
        if teacher_out != student_out:
            raise ConfigError("teacher and student must share an output space")


@dataclass
class DistillResult:
    student: Checkpoint
    trace: list[dict[str, Any]]
    history: list[dict[str, Any]]
    projector: ProjectorHead | None = None


def distill(plan: DistillationPlan, dataset: LabeledDataset) -> DistillResult:
    """Train a fresh student against a frozen teacher under ``plan.method``."""
    plan.validate()
    data = dataset.subset("train")
    if len(data) == 0:
        raise DataError("distillation set is empty")
    weights = plan.effective_weights
    teacher = plan.teacher.to_model().freeze()
    teacher_sum = teacher.checksum()
    student = init_model(plan.student_config, plan.seed)
    params = student.parameters()
    projector = None
    if plan.method.startswith("projector"):
        projector = ProjectorHead(teacher.hidden_size, student.hidden_size, seed=plan.seed + 1_000_003)
        params = params + projector.parameters()
    opt = Optimizer(params, plan.train.optimizer_state())
    rng = np.random.default_rng([plan.seed, 7])
    selection = plan.selection.as_array() if plan.selection is not None else None

    trace: list[dict[str, Any]] = []
    history: list[dict[str, Any]] = []
    best = None
    step = 0
    for epoch in range(plan.train.epochs):
        loss_sum, n_steps = 0.0, 0
        for xb, yb in data.batches(plan.train.batch_size, rng):
            with ag.no_grad():
                t_out = teacher.forward(xb)
            s_out = student.forward(xb)
            parts: dict[str, ag.Tensor | None] = {}
            if weights.lam > 0:
                parts["supervised"] = supervised_loss(s_out.logits, yb)
            if weights.alpha > 0:
                if plan.method == "flexkd":
                    parts["feature"] = flex_kd_loss(t_out.last_hidden, s_out.last_hidden, selection, centered=plan.centered)
                elif projector is not None:
                    metric = "mse" if plan.method == "projector_mse" else "correlation"
                    parts["feature"] = projector_loss(t_out.last_hidden, s_out.last_hidden, projector, metric)
            if weights.beta > 0:
                parts["logit"] = logit_kd_loss(t_out.logits, s_out.logits, weights.temperature, weights.logit_mode)
            total, raw = composite_loss(parts, weights)
            opt.zero_grad()
            total.backward()
            opt.step()
            trace.append(
                {
                    "step": step,
                    "loss_total": float(total.data),
                    "loss_feature": raw["feature"],
                    "loss_logit": raw["logit"],
                    "loss_supervised": raw["supervised"],
                    "lr": opt.state.learning_rate,
                }
            )
            loss_sum += float(total.data)
            n_steps += 1
            step += 1
        rec = _epoch_metrics(student, dataset, epoch, loss_sum, n_steps)
        history.append(rec)
        if plan.train.select_best_val and "val_accuracy" in rec and (best is None or rec["val_accuracy"] > best[0]):
            best = (rec["val_accuracy"], student.state())

    if teacher.checksum() != teacher_sum:
        raise NumericError("teacher parameters changed during distillation")
    meta = {
        "seed": plan.seed,
        "steps": step,
        "final_loss": trace[-1]["loss_total"] if trace else None,
        "method": plan.method,
        "teacher_checksum": teacher_sum,
        "weights": asdict(weights),
        "role": "student",
    }
    ckpt = Checkpoint(student.config, best[1] if best is not None else student.state(), meta)
    if projector is not None:
        ckpt.extra_params["projector.weight"] = projector.weight.data.copy()
    return DistillResult(ckpt, trace, history, projector)


def write_trace(path: str | Path, trace: list[dict[str, Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for rec in trace:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def read_trace(path: str | Path) -> list[dict[str, Any]]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


class Stopwatch:
    def __init__(self):
        self.start = time.perf_counter()

    @property
    def elapsed(self) -> float:
        return time.perf_counter() - self.start
