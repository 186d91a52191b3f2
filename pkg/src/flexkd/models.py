"""Teacher and student networks that expose their last hidden layer.

Two families share one interface: :class:`MLP` for feature vectors and
:class:`TinySeq`, a causal attention-free sequence model.  Both return a
:class:`ForwardResult` holding the logits and the activation that feeds the
output head, on the same graph, so gradients with respect to that
activation are available to attribution.

These architectures are small stand-ins; nothing here is tied to a
particular pretrained model family.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, DataError

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MLPConfig:
    input_dim: int
    hidden_dims: tuple[int, ...]
    num_classes: int
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        if not self.hidden_dims:
            raise ConfigError("hidden_dims must be non-empty")
        if min(self.input_dim, self.num_classes, *self.hidden_dims) < 1:
            raise ConfigError(f"all MLP dimensions must be >= 1: {self}")
        if self.activation not in ag.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def hidden_size(self) -> int:
        return self.hidden_dims[-1]


@dataclass(frozen=True)
class TinySeqConfig:
    """Token-level model; ``num_classes=None`` gives a next-token LM head.

    With ``num_classes`` set, the sequence is classified from the final
    position, which by causality has seen every token.
    """

    vocab_size: int
    embed_dim: int
    num_layers: int
    hidden_dim: int
    context_len: int
    num_classes: int | None = None
    activation: str = "tanh"

    def __post_init__(self):
        if self.context_len < 1 or self.embed_dim < 1 or self.hidden_dim < 1:
            raise ConfigError(f"context_len, embed_dim and hidden_dim must be >= 1: {self}")
        if self.vocab_size < 1 or self.num_layers < 1:
            raise ConfigError(f"vocab_size and num_layers must be >= 1: {self}")
        if self.num_classes is not None and self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.activation not in ag.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def hidden_size(self) -> int:
        return self.hidden_dim

    @property
    def output_size(self) -> int:
        return self.num_classes if self.num_classes is not None else self.vocab_size


@dataclass
class ForwardResult:
    logits: Tensor
    last_hidden: Tensor


class Model:
    """Base class: an ordered dict of named parameters plus a forward."""

    family = "base"

    def __init__(self, config, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @property
    def hidden_size(self) -> int:
        return self.config.hidden_size

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def freeze(self) -> Model:
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self

    def unfreeze(self) -> Model:
        for p in self.params.values():
            p.requires_grad = True
        return self

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def checksum(self) -> str:
        return params_checksum({k: v.data for k, v in self.params.items()})

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def head(self, hidden: Tensor) -> Tensor:
        """Output projection applied to the last hidden layer."""
        return ag.add_bias(_flat_matmul(hidden, self.params["head.weight"]), self.params["head.bias"])

    def forward(self, batch, watch_hidden: bool = False) -> ForwardResult:
        layers = self.hidden_layer_stack(batch)
        h = layers[-1]
        if watch_hidden:
            h = h.watch()
        return ForwardResult(logits=self._logits_from_hidden(h), last_hidden=h)

    __call__ = forward

    def _logits_from_hidden(self, h: Tensor) -> Tensor:
        return self.head(h)

    def hidden_layer_stack(self, batch) -> list[Tensor]:
        raise NotImplementedError


def _flat_matmul(x: Tensor, w: Tensor) -> Tensor:
    """Matmul over the last axis of a rank-2 or rank-3 input."""
    if x.ndim == 2:
        return x @ w
    lead = x.shape[:-1]
    return (x.reshape(-1, x.shape[-1]) @ w).reshape(*lead, w.shape[1])


class MLP(Model):
    family = "mlp"

    def hidden_layer_stack(self, batch) -> list[Tensor]:
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        cfg: MLPConfig = self.config
        if x.ndim != 2 or x.shape[1] != cfg.input_dim:
            raise DataError(f"MLP expects batch x {cfg.input_dim} features, got {x.shape}")
        act = ag.ACTIVATIONS[cfg.activation]
        out = []
        for i in range(len(cfg.hidden_dims)):
            x = act(ag.add_bias(x @ self.params[f"layer{i}.weight"], self.params[f"layer{i}.bias"]))
            out.append(x)
        return out


class TinySeq(Model):
    """Embedding followed by gated causal blocks.

    Each block computes ``act(x W + b) * tanh(causal_mean(x) U + c)``, so the
    state at position t depends only on tokens 0..t.
    """

    family = "seq"

    def hidden_layer_stack(self, batch) -> list[Tensor]:
        cfg: TinySeqConfig = self.config
        ids = np.asarray(batch)
        if ids.ndim != 2 or ids.shape[1] < 1 or ids.shape[1] > cfg.context_len:
            raise DataError(f"expected token ids of shape batch x (1..{cfg.context_len}), got {ids.shape}")
        if not np.issubdtype(ids.dtype, np.integer):
            raise DataError("token ids must be integers")
        if ids.min() < 0 or ids.max() >= cfg.vocab_size:
            raise DataError(f"token id outside vocabulary of size {cfg.vocab_size}")
        act = ag.ACTIVATIONS[cfg.activation]
        x = ag.take_rows(self.params["embed"], ids)
        out = []
        for i in range(cfg.num_layers):
            value = act(ag.add_bias(_flat_matmul(x, self.params[f"block{i}.value"]), self.params[f"block{i}.value_bias"]))
            ctx = ag.causal_mean(x, axis=1)
            gate = ag.tanh(ag.add_bias(_flat_matmul(ctx, self.params[f"block{i}.gate"]), self.params[f"block{i}.gate_bias"]))
            x = value * gate
            out.append(x)
        return out

    def _logits_from_hidden(self, h: Tensor) -> Tensor:
        if self.config.num_classes is not None:
            return self.head(h[:, -1, :])
        return self.head(h)


def _param_shapes(config) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names, shapes and fan-in order for a config."""
    shapes: list[tuple[str, tuple[int, ...]]] = []
    if isinstance(config, MLPConfig):
        fan_in = config.input_dim
        for i, width in enumerate(config.hidden_dims):
            shapes += [(f"layer{i}.weight", (fan_in, width)), (f"layer{i}.bias", (width,))]
            fan_in = width
        shapes += [("head.weight", (fan_in, config.num_classes)), ("head.bias", (config.num_classes,))]
    elif isinstance(config, TinySeqConfig):
        shapes.append(("embed", (config.vocab_size, config.embed_dim)))
        fan_in = config.embed_dim
        for i in range(config.num_layers):
            d = config.hidden_dim
            shapes += [
                (f"block{i}.value", (fan_in, d)),
                (f"block{i}.value_bias", (d,)),
                (f"block{i}.gate", (fan_in, d)),
                (f"block{i}.gate_bias", (d,)),
            ]
            fan_in = d
        shapes += [("head.weight", (fan_in, config.output_size)), ("head.bias", (config.output_size,))]
    else:
        raise ConfigError(f"unsupported config type {type(config).__name__}")
    return shapes


def _fan_in(name: str, shape: tuple[int, ...], prev_fan_in: int) -> int:
    if name == "embed":
        return 1  # embeddings are drawn from U(-1, 1)
    return shape[0] if len(shape) == 2 else prev_fan_in


def init_model(config, seed: int) -> Model:
    """Uniform ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))`` init from ``seed``."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    fan_in = 1
    for name, shape in _param_shapes(config):
        fan_in = _fan_in(name, shape, fan_in)
        bound = 1.0 / np.sqrt(fan_in)
        params[name] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
    return build_model(config, params)


def build_model(config, params: dict[str, Tensor]) -> Model:
    expected = _param_shapes(config)
    if sorted(n for n, _ in expected) != sorted(params):
        raise ConfigError("parameter names do not match config")
    params = {name: params[name] for name, _ in expected}
    for name, shape in expected:
        if params[name].shape != shape:
            raise ConfigError(f"parameter {name} has shape {params[name].shape}, expected {shape}")
    cls = MLP if isinstance(config, MLPConfig) else TinySeq
    return cls(config, params)


def params_checksum(params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        h.update(name.encode())
        h.update(repr(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


# -- checkpoints -------------------------------------------------------------

def config_to_dict(config) -> dict[str, Any]:
    d = asdict(config)
    d["family"] = "mlp" if isinstance(config, MLPConfig) else "seq"
    if "hidden_dims" in d:
        d["hidden_dims"] = list(d["hidden_dims"])
    return d


def config_from_dict(d: dict[str, Any]):
    d = dict(d)
    family = d.pop("family", "mlp")
    try:
        if family == "mlp":
            return MLPConfig(**d)
        if family == "seq":
            return TinySeqConfig(**d)
    except TypeError as exc:
        raise ConfigError(f"bad model config: {exc}") from exc
    raise ConfigError(f"unknown model family {family!r}")


def _encode_array(arr: np.ndarray) -> dict[str, Any]:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(arr.shape), "f8le_b64": base64.b64encode(arr.tobytes()).decode("ascii")}


def _decode_array(d: dict[str, Any]) -> np.ndarray:
    raw = base64.b64decode(d["f8le_b64"])
    return np.frombuffer(raw, dtype="<f8").reshape(d["shape"]).astype(np.float64)


@dataclass
class Checkpoint:
    config: Any
    params: dict[str, np.ndarray]
    metadata: dict[str, Any] = field(default_factory=dict)
    extra_params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: Model, **metadata) -> Checkpoint:
        return cls(model.config, model.state(), dict(metadata))

    def to_model(self) -> Model:
        params = {k: Tensor(v, requires_grad=True) for k, v in self.params.items()}
        return build_model(self.config, params)

    @property
    def checksum(self) -> str:
        return params_checksum(self.params)

    def to_dict(self) -> dict[str, Any]:
        return {
            "format": "flexkd-checkpoint",
            "version": CHECKPOINT_VERSION,
            "config": config_to_dict(self.config),
            "params": {k: _encode_array(v) for k, v in self.params.items()},
            "extra_params": {k: _encode_array(v) for k, v in self.extra_params.items()},
            "checksum": self.checksum,
            "metadata": self.metadata,
        }

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        return path

    @classmethod
    def load(cls, path: str | Path) -> Checkpoint:
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"checkpoint not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise DataError(f"checkpoint {path} is not valid JSON: {exc}") from exc
        if d.get("format") != "flexkd-checkpoint" or "version" not in d:
            raise DataError(f"{path} is not a checkpoint file")
        if d["version"] != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version {d['version']}")
        ckpt = cls(
            config=config_from_dict(d["config"]),
            params={k: _decode_array(v) for k, v in d["params"].items()},
            metadata=d.get("metadata", {}),
            extra_params={k: _decode_array(v) for k, v in d.get("extra_params", {}).items()},
        )
        if ckpt.checksum != d["checksum"]:
            raise DataError(f"checkpoint {path} failed its checksum")
        return ckpt
