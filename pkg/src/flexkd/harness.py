"""Staged experiment pipeline: teacher -> profile -> students -> report.

Every stage reads and writes plain files under ``output_dir``, so stages can
be rerun or resumed independently::

    out/
      resolved_config.yaml
      dataset_manifest.json
      teacher/checkpoint.json
      profile.json
      runs/<method>/seed<k>/{student.json, trace.jsonl, metrics.json}
      report.json, report.md, timings.json
      inspect/sparsity.{json,txt}
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .attribution import ImportanceProfile, activation_sparsity_profile, aggregate_importance
from .datasets import CSVSchema, LabeledDataset, PlantedRelevanceSpec, gen_planted_task, gen_seq_task, load_csv
from .errors import ConfigError, DataError
from .losses import LOGIT_MODES, LossWeights
from .models import Checkpoint, MLPConfig, TinySeqConfig
from .training import DEFAULT_METHOD_WEIGHTS, METHODS, DistillationPlan, Stopwatch, TrainConfig, distill, evaluate, train_teacher, write_trace

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
DEFAULT_METHODS = ["ft_only", "vanilla_kd", "projector_mse", "flexkd"]
BASELINE = "projector_mse"


# -- config ------------------------------------------------------------------------

def _num(value, name: str, kind=float):
    try:
        out = kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: expected {kind.__name__}, got {value!r}") from None
    if kind is int and isinstance(value, float) and value != out:
        raise ConfigError(f"{name}: expected an integer, got {value!r}")
    return out


def _section(d: dict, key: str) -> dict:
    sec = d.get(key, {}) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"section {key!r} must be a mapping")
    return sec


def _reject_unknown(sec: dict, allowed, where: str) -> None:
    unknown = set(sec) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


@dataclass
class DatasetSection:
    kind: str = "planted"
    seed: int = 0
    n_train: int = 2000
    n_val: int = 0
    n_test: int = 500
    # planted
    d_input: int = 32
    num_relevant: int = 8
    noise_scale: float = 1.0
    num_classes: int = 2
    rule_width: int = 16
    # sequence
    vocab: int = 4
    context_len: int = 8
    rule: str = "majority-token"
    # csv
    path: str | None = None
    feature_columns: list[str] | None = None
    labels: list[str] | None = None
    split_column: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> DatasetSection:
        _reject_unknown(d, [f.name for f in fields(cls)], "dataset")
        out = cls(**d)
        for name in ("seed", "n_train", "n_val", "n_test", "d_input", "num_relevant", "num_classes", "rule_width", "vocab", "context_len"):
            setattr(out, name, _num(getattr(out, name), f"dataset.{name}", int))
        out.noise_scale = _num(out.noise_scale, "dataset.noise_scale")
        if out.kind not in ("planted", "sequence", "csv"):
            raise ConfigError(f"dataset.kind must be planted, sequence or csv, got {out.kind!r}")
        if out.kind == "csv" and (not out.path or not out.feature_columns):
            raise ConfigError("csv datasets need dataset.path and dataset.feature_columns")
        return out


@dataclass
class ModelSection:
    family: str = "mlp"
    hidden_dims: list[int] = field(default_factory=lambda: [64])
    activation: str = "tanh"
    # sequence family
    embed_dim: int = 16
    num_layers: int = 1
    hidden_dim: int = 64

    @classmethod
    def from_dict(cls, d: dict, where: str, default_width: int) -> ModelSection:
        _reject_unknown(d, [f.name for f in fields(cls)], where)
        out = cls(**{"hidden_dims": [default_width], "hidden_dim": default_width, **d})
        if out.family not in ("mlp", "seq"):
            raise ConfigError(f"{where}.family must be mlp or seq")
        out.hidden_dims = [_num(h, f"{where}.hidden_dims", int) for h in out.hidden_dims]
        for name in ("embed_dim", "num_layers", "hidden_dim"):
            setattr(out, name, _num(getattr(out, name), f"{where}.{name}", int))
        return out

    def build(self, data: LabeledDataset):
        num_classes = data.num_classes
        if self.family == "mlp":
            if data.features.ndim != 2:
                raise ConfigError("mlp models need a feature-matrix dataset")
            return MLPConfig(int(data.features.shape[1]), tuple(self.hidden_dims), num_classes, self.activation)
        if data.features.ndim != 2 or not np.issubdtype(data.features.dtype, np.integer):
            raise ConfigError("seq models need a token-sequence dataset")
        return TinySeqConfig(
            vocab_size=int(data.provenance.get("vocab", int(data.features.max()) + 1)),
            embed_dim=self.embed_dim,
            num_layers=self.num_layers,
            hidden_dim=self.hidden_dim,
            context_len=int(data.features.shape[1]),
            num_classes=num_classes,
            activation=self.activation,
        )


def _train_from_dict(d: dict, where: str) -> TrainConfig:
    _reject_unknown(d, [f.name for f in fields(TrainConfig)], where)
    base = asdict(TrainConfig())
    base.update(d)
    return TrainConfig(
        epochs=_num(base["epochs"], f"{where}.epochs", int),
        batch_size=_num(base["batch_size"], f"{where}.batch_size", int),
        learning_rate=_num(base["learning_rate"], f"{where}.learning_rate"),
        optimizer=str(base["optimizer"]),
        epsilon=_num(base["epsilon"], f"{where}.epsilon"),
        weight_decay=_num(base["weight_decay"], f"{where}.weight_decay"),
        select_best_val=bool(base["select_best_val"]),
    )


def _weights_from_dict(d: dict, method: str) -> LossWeights:
    base = asdict(DEFAULT_METHOD_WEIGHTS[method])
    if "lambda" in d:
        d = {**d, "lam": d["lambda"]}
        d.pop("lambda")
    _reject_unknown(d, base, f"weights.{method}")
    base.update(d)
    if base["logit_mode"] not in LOGIT_MODES:
        raise ConfigError(f"weights.{method}.logit_mode must be one of {LOGIT_MODES}")
    return LossWeights(
        alpha=_num(base["alpha"], f"weights.{method}.alpha"),
        beta=_num(base["beta"], f"weights.{method}.beta"),
        lam=_num(base["lam"], f"weights.{method}.lambda"),
        temperature=_num(base["temperature"], f"weights.{method}.temperature"),
        logit_mode=base["logit_mode"],
    )


@dataclass
class ExperimentConfig:
    dataset: DatasetSection
    teacher_model: ModelSection
    teacher_train: TrainConfig
    teacher_seed: int
    student_model: ModelSection
    student_train: TrainConfig
    output_reduction: str
    calibration_fraction: float
    attribution_seed: int
    methods: list[str]
    weights: dict[str, LossWeights]
    seeds: list[int]
    output_dir: str
    centered: bool = False
    sparsity_thresholds: list[float] = field(default_factory=lambda: [0.5, 1.0, 2.0])

    TOP_KEYS = ("version", "output_dir", "dataset", "teacher", "student", "attribution", "methods", "weights", "seeds", "centered", "inspect")

    @classmethod
    def from_dict(cls, raw: dict) -> ExperimentConfig:
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping")
        _reject_unknown(raw, cls.TOP_KEYS, "config")
        version = raw.get("version")
        if version != CONFIG_VERSION:
            raise ConfigError(f"config version must be {CONFIG_VERSION}, got {version!r}")
        teacher = _section(raw, "teacher")
        student = _section(raw, "student")
        _reject_unknown(teacher, ("model", "train", "seed"), "teacher")
        _reject_unknown(student, ("model", "train"), "student")
        attr = _section(raw, "attribution")
        _reject_unknown(attr, ("output_reduction", "calibration_fraction", "seed"), "attribution")
        methods = list(raw.get("methods", DEFAULT_METHODS))
        bad = [m for m in methods if m not in METHODS]
        if bad or not methods:
            raise ConfigError(f"unknown methods {bad}; choose from {METHODS}")
        wsec = _section(raw, "weights")
        _reject_unknown(wsec, METHODS, "weights")
        seeds = [_num(s, "seeds", int) for s in raw.get("seeds", [0, 1, 2])]
        if not seeds:
            raise ConfigError("seeds must be non-empty")
        frac = _num(attr.get("calibration_fraction", 1.0), "attribution.calibration_fraction")
        if not 0 < frac <= 1:
            raise ConfigError("attribution.calibration_fraction must lie in (0, 1]")
        reduction = attr.get("output_reduction", "loss")
        if reduction not in ("loss", "predicted-logit", "output-sum"):
            raise ConfigError(f"unknown attribution.output_reduction {reduction!r}")
        inspect = _section(raw, "inspect")
        _reject_unknown(inspect, ("thresholds",), "inspect")
        if not raw.get("output_dir"):
            raise ConfigError("output_dir is required")
        return cls(
            dataset=DatasetSection.from_dict(_section(raw, "dataset")),
            teacher_model=ModelSection.from_dict(teacher.get("model", {}) or {}, "teacher.model", 64),
            teacher_train=_train_from_dict(teacher.get("train", {}) or {}, "teacher.train"),
            teacher_seed=_num(teacher.get("seed", 0), "teacher.seed", int),
            student_model=ModelSection.from_dict(student.get("model", {}) or {}, "student.model", 16),
            student_train=_train_from_dict(student.get("train", {}) or {}, "student.train"),
            output_reduction=reduction,
            calibration_fraction=frac,
            attribution_seed=_num(attr.get("seed", 0), "attribution.seed", int),
            methods=methods,
            weights={m: _weights_from_dict(dict(wsec.get(m, {}) or {}), m) for m in methods},
            seeds=seeds,
            output_dir=str(raw["output_dir"]),
            centered=bool(raw.get("centered", False)),
            sparsity_thresholds=[_num(t, "inspect.thresholds") for t in inspect.get("thresholds", [0.5, 1.0, 2.0])],
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": CONFIG_VERSION,
            "output_dir": self.output_dir,
            "dataset": asdict(self.dataset),
            "teacher": {"model": asdict(self.teacher_model), "train": asdict(self.teacher_train), "seed": self.teacher_seed},
            "student": {"model": asdict(self.student_model), "train": asdict(self.student_train)},
            "attribution": {
                "output_reduction": self.output_reduction,
                "calibration_fraction": self.calibration_fraction,
                "seed": self.attribution_seed,
            },
            "methods": list(self.methods),
            "weights": {m: {**asdict(w)} for m, w in self.weights.items()},
            "seeds": list(self.seeds),
            "centered": self.centered,
            "inspect": {"thresholds": list(self.sparsity_thresholds)},
        }

    @property
    def out(self) -> Path:
        return Path(self.output_dir)


def load_config(path: str | Path, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
    raw = copy.deepcopy(raw) or {}
    for dotted, value in (overrides or {}).items():
        node = raw
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return ExperimentConfig.from_dict(raw)


def write_resolved_config(cfg: ExperimentConfig) -> Path:
    path = cfg.out / "resolved_config.yaml"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    return path


# -- stage helpers -----------------------------------------------------------------

def build_dataset(cfg: ExperimentConfig) -> LabeledDataset:
    ds = cfg.dataset
    if ds.kind == "planted":
        spec = PlantedRelevanceSpec(ds.d_input, ds.num_relevant, ds.noise_scale, ds.num_classes, ds.seed, rule_width=ds.rule_width)
        data, _ = gen_planted_task(spec, ds.n_train, ds.n_val, ds.n_test)
        return data
    if ds.kind == "sequence":
        return gen_seq_task(ds.vocab, ds.context_len, ds.rule, ds.seed, ds.n_train, ds.n_val, ds.n_test)
    schema = CSVSchema(
        tuple(ds.feature_columns), labels=tuple(ds.labels) if ds.labels else None, split_column=ds.split_column
    )
    return load_csv(ds.path, schema)


def _write_json(path: Path, obj: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def teacher_path(cfg: ExperimentConfig) -> Path:
    return cfg.out / "teacher" / "checkpoint.json"


def profile_path(cfg: ExperimentConfig) -> Path:
    return cfg.out / "profile.json"


def run_dir(cfg: ExperimentConfig, method: str, seed: int) -> Path:
    return cfg.out / "runs" / method / f"seed{seed}"


# -- stages ----------------------------------------------------------------------

def cmd_train_teacher(cfg: ExperimentConfig) -> Path:
    data = build_dataset(cfg)
    write_resolved_config(cfg)
    data.write_manifest(cfg.out / "dataset_manifest.json")
    model_cfg = cfg.teacher_model.build(data)
    watch = Stopwatch()
    ckpt = train_teacher(model_cfg, data, seed=cfg.teacher_seed, train=cfg.teacher_train)
    ckpt.metadata["test_accuracy"] = evaluate(ckpt.to_model(), data.subset("test")) if len(data.subset("test")) else None
    path = ckpt.save(teacher_path(cfg))
    _record_timing(cfg, "train_teacher", watch.elapsed)
    return path


def cmd_score(cfg: ExperimentConfig, teacher: str | Path | None = None) -> Path:
    ckpt = Checkpoint.load(teacher or teacher_path(cfg))
    data = build_dataset(cfg).subset("train")
    watch = Stopwatch()
    model = ckpt.to_model().freeze()
    profile = aggregate_importance(model, data, cfg.output_reduction, cfg.calibration_fraction, cfg.attribution_seed)
    path = profile.save(profile_path(cfg))
    _record_timing(cfg, "score", watch.elapsed)
    return path


def _metrics_for(model_ckpt: Checkpoint, data: LabeledDataset) -> dict[str, float]:
    model = model_ckpt.to_model()
    test = data.subset("test")
    if len(test) == 0:
        test = data.subset("train")
    return {"accuracy": evaluate(model, test, "accuracy"), "nll": evaluate(model, test, "nll")}


def cmd_distill(
    cfg: ExperimentConfig,
    teacher: str | Path | None = None,
    profile: str | Path | None = None,
    methods: list[str] | None = None,
    seeds: list[int] | None = None,
) -> list[Path]:
    t_ckpt = Checkpoint.load(teacher or teacher_path(cfg))
    prof = ImportanceProfile.load(profile or profile_path(cfg))
    if prof.teacher_checksum != t_ckpt.checksum:
        raise ConfigError("profile teacher checksum does not match the teacher checkpoint; rerun `score`")
    data = build_dataset(cfg)
    student_cfg = cfg.student_model.build(data)
    done = []
    for method in methods or cfg.methods:
        if method not in cfg.weights:
            raise ConfigError(f"method {method!r} is not configured")
        for seed in seeds if seeds is not None else cfg.seeds:
            watch = Stopwatch()
            plan = DistillationPlan(
                teacher=t_ckpt,
                student_config=student_cfg,
                method=method,
                profile=prof,
                weights=cfg.weights[method],
                train=cfg.student_train,
                seed=seed,
                centered=cfg.centered,
            )
            result = distill(plan, data)
            d = run_dir(cfg, method, seed)
            result.student.save(d / "student.json")
            write_trace(d / "trace.jsonl", result.trace)
            metrics = _metrics_for(result.student, data)
            _write_json(
                d / "metrics.json",
                {"method": method, "seed": seed, "steps": result.student.metadata["steps"], "metrics": metrics, "history": result.history},
            )
            _record_timing(cfg, f"distill/{method}/seed{seed}", watch.elapsed)
            log.info("%s seed %d: %s", method, seed, metrics)
            done.append(d)
    return done


def summarize(values: list[float]) -> dict[str, float]:
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std())}


def build_report(per_run: dict[str, dict[int, dict[str, Any]]], metric: str = "accuracy", baseline: str = BASELINE) -> dict[str, Any]:
    """Aggregate per-seed results into mean, population std and deltas
    against the projector baseline (when it was run)."""
    methods = {}
    for method, runs in per_run.items():
        seeds = sorted(runs)
        values = [runs[s]["metrics"][metric] for s in seeds]
        methods[method] = {
            "seeds": seeds,
            "values": values,
            "steps": [runs[s].get("steps") for s in seeds],
            **summarize(values),
        }
    if baseline in methods:
        base = methods[baseline]["mean"]
        for entry in methods.values():
            entry["delta_vs_baseline"] = entry["mean"] - base
    return {"metric": metric, "baseline": baseline if baseline in methods else None, "methods": methods}


def render_markdown(report: dict[str, Any]) -> str:
    metric = report["metric"]
    scale = 100.0 if metric == "accuracy" else 1.0
    unit = " (%)" if metric == "accuracy" else ""
    lines = [
        f"| Method | {metric}{unit} mean ± std | Δ vs {report['baseline'] or 'baseline'} | seeds |",
        "|---|---|---|---|",
    ]
    for method, e in report["methods"].items():
        delta = e.get("delta_vs_baseline")
        if delta is None or method == report["baseline"]:
            dtext = "–"
        else:
            dtext = f"{'+' if delta >= 0 else ''}{delta * scale:.2f}" + (" ▲" if delta > 0 else " ▼" if delta < 0 else "")
        lines.append(f"| {method} | {e['mean'] * scale:.2f} ± {e['std'] * scale:.2f} | {dtext} | {len(e['seeds'])} |")
    return "\n".join(lines) + "\n"


def cmd_compare(cfg: ExperimentConfig, metric: str = "accuracy") -> Path:
    missing, per_run = [], {}
    for method in cfg.methods:
        per_run[method] = {}
        for seed in cfg.seeds:
            path = run_dir(cfg, method, seed) / "metrics.json"
            if not path.exists():
                missing.append(f"{method}/seed{seed}")
                continue
            per_run[method][seed] = json.loads(path.read_text())
    if missing:
        raise DataError("missing runs: " + ", ".join(missing))
    report = build_report(per_run, metric)
    resolved = cfg.to_dict()
    resolved.pop("output_dir")
    report["config"] = resolved
    t_ckpt = Checkpoint.load(teacher_path(cfg))
    report["teacher"] = {"checksum": t_ckpt.checksum, "test_accuracy": t_ckpt.metadata.get("test_accuracy")}
    report["profile_sha256"] = ImportanceProfile.load(profile_path(cfg)).checksum()
    path = _write_json(cfg.out / "report.json", report)
    (cfg.out / "report.md").write_text(
        f"# Distillation comparison\n\nTest {metric} over seeds {list(cfg.seeds)}; "
        f"teacher {metric}: {report['teacher']['test_accuracy']}.\n\n" + render_markdown(report)
    )
    return path


def cmd_inspect(cfg: ExperimentConfig, checkpoint: str | Path | None = None, thresholds: list[float] | None = None) -> Path:
    ckpt = Checkpoint.load(checkpoint or teacher_path(cfg))
    data = build_dataset(cfg).subset("train")
    table = activation_sparsity_profile(ckpt.to_model(), data, thresholds or cfg.sparsity_thresholds)
    out = cfg.out / "inspect"
    _write_json(out / "sparsity.json", {"checkpoint_checksum": ckpt.checksum, **table.to_dict()})
    (out / "sparsity.txt").write_text(table.to_text() + "\n")
    return out / "sparsity.json"


def cmd_evaluate(cfg: ExperimentConfig, checkpoint: str | Path) -> dict[str, float]:
    ckpt = Checkpoint.load(checkpoint)
    return _metrics_for(ckpt, build_dataset(cfg))


def _record_timing(cfg: ExperimentConfig, stage: str, seconds: float) -> None:
    """Wall-clock lives in its own file so report.json stays reproducible."""
    path = cfg.out / "timings.json"
    timings = json.loads(path.read_text()) if path.exists() else {}
    timings[stage] = seconds
    _write_json(path, timings)
