"""Differentiable numerical substrate.

Tensors are float64 ``torch.Tensor`` objects and reverse-mode gradients come
from torch autograd. The layers (MLP, multi-head attention), the Adam update
and the finite-difference checker are written out here so that every model in
the package goes through the same small, checkable surface.
"""

from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

DTYPE = torch.float64
FORMAT_VERSION = 1

Tensor = torch.Tensor


class ShapeError(ValueError):
    pass


class NumericalError(RuntimeError):
    pass


def as_tensor(x) -> Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE)


# ---------------------------------------------------------------------------
# parameters


class ParamSet(OrderedDict):
    """Ordered map from parameter name to a leaf tensor.

    Gradients live on the tensors themselves (``.grad``) after a backward
    pass; :meth:`grads` exposes them under the same names.
    """

    def __setitem__(self, name, value):
        value = as_tensor(value).detach().clone().requires_grad_(True)
        super().__setitem__(name, value)

    def grads(self) -> dict[str, Tensor | None]:
        return {k: v.grad for k, v in self.items()}

    def zero_grad(self) -> None:
        for v in self.values():
            v.grad = None

    def sub(self, prefix: str) -> "ParamSet":
        """View of the entries under ``prefix.``, sharing the same tensors."""
        out = ParamSet()
        for k, v in self.items():
            if k.startswith(prefix + "."):
                OrderedDict.__setitem__(out, k[len(prefix) + 1:], v)
        return out

    def merge(self, prefix: str, other: "ParamSet") -> None:
        for k, v in other.items():
            OrderedDict.__setitem__(self, f"{prefix}.{k}", v)

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for k, v in self.items():
            out[k] = v.detach().clone()
        return out

    def fill_missing_grads(self) -> None:
        """Zero gradients for entries the last backward pass never reached."""
        for v in self.values():
            if v.grad is None:
                v.grad = torch.zeros_like(v)

    def numel(self) -> int:
        return sum(v.numel() for v in self.values())


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def linear_init(rng, in_dim: int, out_dim: int, bias: bool = True) -> ParamSet:
    p = ParamSet()
    p["weight"] = glorot(rng, in_dim, out_dim)
    if bias:
        p["bias"] = np.zeros(out_dim)
    return p


def linear(params: ParamSet, x: Tensor) -> Tensor:
    y = x @ params["weight"]
    if "bias" in params:
        y = y + params["bias"]
    return y


# ---------------------------------------------------------------------------
# activations


def sigmoid(x):
    """Logistic function, stable for large ``|x|``.

    Accepts python floats (returns float) or tensors (returns tensor).
    """
    if isinstance(x, torch.Tensor):
        return torch.sigmoid(x)
    x = float(x)
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def log_sigmoid(x: Tensor) -> Tensor:
    return torch.nn.functional.logsigmoid(x)


def gelu(x: Tensor) -> Tensor:
    return 0.5 * x * (1.0 + torch.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def softmax(x: Tensor, dim: int = -1) -> Tensor:
    x = x - x.amax(dim=dim, keepdim=True).detach()
    e = torch.exp(x)
    return e / e.sum(dim=dim, keepdim=True)


def log_softmax(x: Tensor, dim: int = -1) -> Tensor:
    return x - torch.logsumexp(x, dim=dim, keepdim=True)


def dropout(x: Tensor, rate: float, generator: torch.Generator | None, train_mode: bool) -> Tensor:
    if not train_mode or rate == 0.0:
        return x
    keep = 1.0 - rate
    mask = torch.rand(x.shape, generator=generator, dtype=DTYPE) < keep
    return x * mask / keep


def layer_norm_init(dim: int) -> ParamSet:
    p = ParamSet()
    p["gain"] = np.ones(dim)
    p["bias"] = np.zeros(dim)
    return p


def layer_norm(params: ParamSet, x: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * params["gain"] + params["bias"]


# ---------------------------------------------------------------------------
# MLP


@dataclass(frozen=True)
class MLPSpec:
    in_dim: int
    out_dim: int
    hidden_dim: int = 256
    num_hidden_layers: int = 2
    activation: str = "gelu"
    # off for heads whose output only enters through differences
    output_bias: bool = True

    def __post_init__(self):
        for name in ("in_dim", "out_dim", "hidden_dim", "num_hidden_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"MLPSpec.{name} must be positive")
        if self.activation != "gelu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.in_dim] + [self.hidden_dim] * self.num_hidden_layers + [self.out_dim]
        return list(zip(dims[:-1], dims[1:]))


def mlp_init(spec: MLPSpec, rng: np.random.Generator) -> ParamSet:
    p = ParamSet()
    dims = spec.layer_dims()
    for i, (a, b) in enumerate(dims):
        p.merge(f"layer{i}", linear_init(rng, a, b, bias=spec.output_bias or i < len(dims) - 1))
    return p


def _check_shapes(spec: MLPSpec, params: ParamSet) -> None:
    dims = spec.layer_dims()
    for i, (a, b) in enumerate(dims):
        expected = [(f"layer{i}.weight", (a, b))]
        if spec.output_bias or i < len(dims) - 1:
            expected.append((f"layer{i}.bias", (b,)))
        for name, shape in expected:
            if name not in params:
                raise ShapeError(f"missing parameter {name}")
            if tuple(params[name].shape) != shape:
                raise ShapeError(
                    f"parameter {name} has shape {tuple(params[name].shape)}, expected {shape}"
                )


def mlp_forward(spec: MLPSpec, params: ParamSet, x: Tensor) -> Tensor:
    _check_shapes(spec, params)
    if x.shape[-1] != spec.in_dim:
        raise ShapeError(f"input last dim {x.shape[-1]} != in_dim {spec.in_dim} (layer0.weight)")
    n = len(spec.layer_dims())
    h = x
    for i in range(n):
        h = h @ params[f"layer{i}.weight"]
        if i < n - 1 or spec.output_bias:
            h = h + params[f"layer{i}.bias"]
        if i < n - 1:
            h = gelu(h)
    return h


# ---------------------------------------------------------------------------
# multi-head attention


@dataclass(frozen=True)
class AttentionSpec:
    model_dim: int
    num_heads: int = 8
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.model_dim % self.num_heads:
            raise ValueError("num_heads must divide model_dim")
        if not 0.0 <= self.dropout_rate <= 1.0:
            raise ValueError("dropout_rate must lie in [0, 1]")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


def attention_init(spec: AttentionSpec, rng: np.random.Generator) -> ParamSet:
    p = ParamSet()
    for name in ("q", "k", "v", "out"):
        # a key bias shifts every score in a row equally, so softmax ignores it
        p.merge(name, linear_init(rng, spec.model_dim, spec.model_dim, bias=name != "k"))
    return p


def multihead_attention(
    spec: AttentionSpec,
    params: ParamSet,
    seq: Tensor,
    train_mode: bool = False,
    causal: bool = False,
    generator: torch.Generator | None = None,
    return_weights: bool = False,
):
    """Scaled dot-product self-attention over the second-to-last axis.

    ``seq`` has shape ``(..., set_size, model_dim)``; any leading axes are
    treated as independent batches. Dropout is applied to the attention
    weights only when ``train_mode`` is set.
    """
    if seq.shape[-2] == 0:
        raise ShapeError("multihead_attention needs a non-empty set")
    if seq.shape[-1] != spec.model_dim:
        raise ShapeError(f"seq last dim {seq.shape[-1]} != model_dim {spec.model_dim}")
    *lead, n, d = seq.shape
    h, dh = spec.num_heads, spec.head_dim

    def heads(t):
        return t.reshape(*lead, n, h, dh).transpose(-3, -2)  # (..., h, n, dh)

    q = heads(linear(params.sub("q"), seq))
    k = heads(linear(params.sub("k"), seq))
    v = heads(linear(params.sub("v"), seq))
    scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
    if causal:
        mask = torch.ones(n, n, dtype=torch.bool).triu(1)
        scores = scores.masked_fill(mask, float("-inf"))
    weights = softmax(scores, dim=-1)
    weights = dropout(weights, spec.dropout_rate, generator, train_mode)
    out = (weights @ v).transpose(-3, -2).reshape(*lead, n, d)
    out = linear(params.sub("out"), out)
    if return_weights:
        return out, weights
    return out


# ---------------------------------------------------------------------------
# Adam


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


@dataclass
class AdamState:
    m: dict[str, Tensor] = field(default_factory=dict)
    v: dict[str, Tensor] = field(default_factory=dict)
    step: int = 0


def adam_step(config: AdamConfig, params: ParamSet, state: AdamState, step_index: int | None = None) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    t = state.step + 1 if step_index is None else step_index
    if t < 1:
        raise ValueError("step_index must be positive")
    missing = [k for k, p in params.items() if p.grad is None]
    if missing:
        raise ValueError(f"missing gradient for {', '.join(missing)}")
    b1, b2 = config.beta1, config.beta2
    with torch.no_grad():
        for name, p in params.items():
            g = p.grad
            m = state.m.get(name, torch.zeros_like(p))
            v = state.v.get(name, torch.zeros_like(p))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            p -= config.learning_rate * m_hat / (torch.sqrt(v_hat) + config.epsilon)
            state.m[name] = m
            state.v[name] = v
    state.step = t
    return state


# ---------------------------------------------------------------------------
# gradient check


def grad_check(
    loss_fn: Callable[[ParamSet], Tensor],
    params: ParamSet,
    probe_count: int = 64,
    step: float = 1e-5,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between autograd and central differences.

    ``probe_count`` coordinates are sampled uniformly over all parameter
    entries. Relative error uses ``max(|analytic|, |numeric|, 1e-8)`` as the
    denominator.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    params.zero_grad()
    loss = loss_fn(params)
    if not torch.isfinite(loss):
        raise NumericalError(f"non-finite loss {loss.item()}")
    loss.backward()
    analytic = {k: (p.grad.clone() if p.grad is not None else torch.zeros_like(p)) for k, p in params.items()}
    params.zero_grad()

    names = list(params)
    sizes = np.array([params[k].numel() for k in names])
    flat = rng.choice(sizes.sum(), size=min(probe_count, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    with torch.no_grad():
        for f in flat:
            j = int(np.searchsorted(offsets, f, side="right") - 1)
            name, idx = names[j], int(f - offsets[j])
            p = params[name].view(-1)
            orig = p[idx].item()
            p[idx] = orig + step
            up = loss_fn(params).item()
            p[idx] = orig - step
            down = loss_fn(params).item()
            p[idx] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NumericalError(f"non-finite loss while probing {name}[{idx}]")
            numeric = (up - down) / (2 * step)
            a = analytic[name].view(-1)[idx].item()
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class ModelCheckpoint:
    model_kind: str
    spec: dict
    params: ParamSet
    rng_seed: int = 0
    step: int = 0
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "manifest": {
                "format_version": FORMAT_VERSION,
                "model_kind": self.model_kind,
                "spec": self.spec,
                "rng_seed": self.rng_seed,
                "step": self.step,
                "metadata": self.metadata,
            },
            "params": {
                k: {"shape": list(v.shape), "values": v.detach().reshape(-1).tolist()}
                for k, v in self.params.items()
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelCheckpoint":
        man = d["manifest"]
        if man.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format_version {man.get('format_version')}")
        params = ParamSet()
        for k, entry in d["params"].items():
            values = np.asarray(entry["values"], dtype=np.float64)
            shape = tuple(entry["shape"])
            if int(np.prod(shape)) != values.size:
                raise ShapeError(f"checkpoint entry {k}: shape {shape} does not match {values.size} values")
            params[k] = values.reshape(shape)
        return cls(
            model_kind=man["model_kind"],
            spec=man["spec"],
            params=params,
            rng_seed=man.get("rng_seed", 0),
            step=man.get("step", 0),
            metadata=man.get("metadata", {}),
        )

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(self.to_dict()))
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "ModelCheckpoint":
        return cls.from_dict(json.loads(Path(path).read_text()))


def spec_dict(spec) -> dict:
    return asdict(spec)
