"""Reward models (BTL, DPL, NP-BTL), their trainer and the unseen-pair evaluator."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from .numcore import (
    DTYPE,
    AdamConfig,
    AdamState,
    AttentionSpec,
    MLPSpec,
    ModelCheckpoint,
    NumericalError,
    ParamSet,
    ShapeError,
    adam_step,
    as_tensor,
    attention_init,
    linear,
    linear_init,
    log_sigmoid,
    mlp_forward,
    mlp_init,
    multihead_attention,
    sigmoid,
)
from .synthdata import (
    Latent,
    PairPool,
    PopulationSpec,
    PreferencePair,
    Task,
    TaskConfig,
    sample_task,
    sample_tasks,
    task_rng,
)

log = logging.getLogger(__name__)

MODEL_KINDS = ("btl", "dpl", "np_btl")


# ---------------------------------------------------------------------------
# pairwise probabilities


def btl_prob(r1: float, r2: float) -> float:
    return sigmoid(r1 - r2)


def std_normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def dpl_prob(mu1: float, sigma1: float, mu2: float, sigma2: float) -> float:
    """P(r1 > r2) for independent Gaussian rewards."""
    if sigma1 <= 0 or sigma2 <= 0:
        raise ValueError("sigmas must be positive")
    return std_normal_cdf((mu1 - mu2) / math.sqrt(sigma1**2 + sigma2**2))


@dataclass
class LatentEmbedding:
    values: np.ndarray
    context_size: int


# ---------------------------------------------------------------------------
# models


@dataclass
class RewardModelConfig:
    option_dim: int
    hidden_dim: int = 256
    num_hidden_layers: int = 2
    latent_dim: int = 256
    encoder: str = "deepset"  # or "attention"
    num_heads: int = 8
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.encoder not in ("deepset", "attention"):
            raise ValueError(f"unknown encoder {self.encoder!r}")


class RewardModel:
    """Shared surface: batched log-probabilities of winner-over-loser.

    Inputs are tensors shaped ``(batch, n, option_dim)``; context tensors may
    have ``n == 0``.
    """

    kind: str

    def __init__(self, config: RewardModelConfig, params: ParamSet):
        self.config = config
        self.params = params

    def mlp(self, hidden_in: int, out: int, output_bias: bool = True) -> MLPSpec:
        c = self.config
        return MLPSpec(hidden_in, out, c.hidden_dim, c.num_hidden_layers, output_bias=output_bias)

    def pair_log_prob(self, winners, losers, ctx_w=None, ctx_l=None, train_mode=False, generator=None):
        raise NotImplementedError

    def loss(self, batch: dict, train_mode=False, generator=None) -> torch.Tensor:
        """Mean over tasks of the summed target negative log-likelihood."""
        lp = self.pair_log_prob(batch["winners"], batch["losers"], batch["ctx_w"], batch["ctx_l"], train_mode, generator)
        return -lp.sum(dim=-1).mean()

    def margin(self, batch: dict) -> torch.Tensor:
        """Positive where the winner is preferred; sign matches log-odds."""
        lp = self.pair_log_prob(batch["winners"], batch["losers"], batch["ctx_w"], batch["ctx_l"])
        lq = self.pair_log_prob(batch["losers"], batch["winners"], batch["ctx_w"], batch["ctx_l"])
        return lp - lq

    def checkpoint(self, seed: int = 0, step: int = 0, **metadata) -> ModelCheckpoint:
        return ModelCheckpoint(self.kind, asdict(self.config), self.params.copy(), seed, step, metadata)


class BTLModel(RewardModel):
    kind = "btl"

    @classmethod
    def create(cls, config: RewardModelConfig, rng: np.random.Generator) -> "BTLModel":
        p = ParamSet()
        # a reward offset cancels in every comparison, so the head has no bias
        p.merge("net", mlp_init(MLPSpec(config.option_dim, 1, config.hidden_dim, config.num_hidden_layers,
                                        output_bias=False), rng))
        return cls(config, p)

    def reward(self, y: torch.Tensor) -> torch.Tensor:
        return mlp_forward(self.mlp(self.config.option_dim, 1, False), self.params.sub("net"), y)[..., 0]

    def pair_logits(self, winners, losers, *_, **__):
        return self.reward(winners) - self.reward(losers)

    def pair_log_prob(self, winners, losers, ctx_w=None, ctx_l=None, train_mode=False, generator=None):
        return log_sigmoid(self.pair_logits(winners, losers))

    def prob(self, y1, y2) -> float:
        with torch.no_grad():
            return float(torch.sigmoid(self.pair_logits(as_tensor(y1)[None], as_tensor(y2)[None]))[0])


class DPLModel(RewardModel):
    kind = "dpl"

    @classmethod
    def create(cls, config: RewardModelConfig, rng: np.random.Generator) -> "DPLModel":
        p = ParamSet()
        p.merge("net", mlp_init(MLPSpec(config.option_dim, 2, config.hidden_dim, config.num_hidden_layers,
                                        output_bias=False), rng))
        # only the log-sigma head gets an offset; a mean offset cancels in comparisons
        p["log_sigma_bias"] = np.zeros(1)
        return cls(config, p)

    def mean_std(self, y: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        out = mlp_forward(self.mlp(self.config.option_dim, 2, False), self.params.sub("net"), y)
        return out[..., 0], torch.exp(out[..., 1] + self.params["log_sigma_bias"][0])

    def pair_standardized(self, winners, losers):
        mw, sw = self.mean_std(winners)
        ml, sl = self.mean_std(losers)
        return (mw - ml) / torch.sqrt(sw**2 + sl**2)

    def pair_log_prob(self, winners, losers, ctx_w=None, ctx_l=None, train_mode=False, generator=None):
        return torch.special.log_ndtr(self.pair_standardized(winners, losers))

    def prob(self, y1, y2) -> float:
        with torch.no_grad():
            return float(torch.special.ndtr(self.pair_standardized(as_tensor(y1)[None], as_tensor(y2)[None]))[0])


def encoder_init(config: RewardModelConfig, rng: np.random.Generator) -> ParamSet:
    c = config
    d, L, H = c.option_dim, c.latent_dim, c.hidden_dim
    p = ParamSet()
    if c.encoder == "deepset":
        p.merge("inner", mlp_init(MLPSpec(2 * d, L, H, c.num_hidden_layers), rng))
    else:
        p.merge("proj", linear_init(rng, 2 * d, L))
        p.merge("attn", attention_init(attention_spec(c), rng))
    p.merge("outer", mlp_init(MLPSpec(L, L, H, c.num_hidden_layers), rng))
    return p


def attention_spec(c: RewardModelConfig) -> AttentionSpec:
    return AttentionSpec(c.latent_dim, c.num_heads, c.dropout_rate)


def context_aggregate(config: RewardModelConfig, params: ParamSet, ctx_w: torch.Tensor, ctx_l: torch.Tensor,
                      train_mode=False, generator=None) -> torch.Tensor:
    """Set aggregate before the outer encoder, shape ``(batch, latent_dim)``.

    DeepSet: mean of the inner MLP over pairs. Attention: sum over pairs of
    self-attention applied to a linear projection. Empty sets give zeros.
    """
    c = config
    if ctx_w.shape[-1] != c.option_dim or ctx_l.shape[-1] != c.option_dim:
        raise ShapeError(f"context feature dim {ctx_w.shape[-1]} != model option_dim {c.option_dim}")
    batch, n = ctx_w.shape[0], ctx_w.shape[1]
    if n == 0:
        return torch.zeros(batch, c.latent_dim, dtype=DTYPE)
    pairs = torch.cat([ctx_w, ctx_l], dim=-1)
    if c.encoder == "deepset":
        inner = mlp_forward(MLPSpec(2 * c.option_dim, c.latent_dim, c.hidden_dim, c.num_hidden_layers),
                            params.sub("inner"), pairs)
        return inner.mean(dim=-2)
    proj = linear(params.sub("proj"), pairs)
    attn = multihead_attention(attention_spec(c), params.sub("attn"), proj, train_mode, generator=generator)
    return attn.sum(dim=-2)


def context_encode(config: RewardModelConfig, params: ParamSet, ctx_w, ctx_l, train_mode=False, generator=None):
    agg = context_aggregate(config, params, ctx_w, ctx_l, train_mode, generator)
    spec = MLPSpec(config.latent_dim, config.latent_dim, config.hidden_dim, config.num_hidden_layers)
    return mlp_forward(spec, params.sub("outer"), agg)


class NPBTLModel(RewardModel):
    """Conditional BTL reward: DeepSet context encoder plus a reward decoder."""

    kind = "np_btl"

    @classmethod
    def create(cls, config: RewardModelConfig, rng: np.random.Generator) -> "NPBTLModel":
        c = config
        H = c.hidden_dim
        p = ParamSet()
        p.merge("encoder", encoder_init(c, rng))
        p.merge("dec_option", mlp_init(MLPSpec(c.option_dim, H, H, c.num_hidden_layers), rng))
        p.merge("dec_head", mlp_init(MLPSpec(H + c.latent_dim, 1, H, c.num_hidden_layers, output_bias=False), rng))
        return cls(config, p)

    def aggregate(self, ctx_w, ctx_l, train_mode=False, generator=None) -> torch.Tensor:
        return context_aggregate(self.config, self.params.sub("encoder"), ctx_w, ctx_l, train_mode, generator)

    def encode(self, ctx_w, ctx_l, train_mode=False, generator=None) -> torch.Tensor:
        return context_encode(self.config, self.params.sub("encoder"), ctx_w, ctx_l, train_mode, generator)

    def decode(self, y: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        """Conditional reward of options ``(batch, n, d)`` under ``z`` of shape ``(batch, L)``."""
        c = self.config
        e = mlp_forward(MLPSpec(c.option_dim, c.hidden_dim, c.hidden_dim, c.num_hidden_layers),
                        self.params.sub("dec_option"), y)
        zz = z[:, None, :].expand(*e.shape[:-1], z.shape[-1])
        return mlp_forward(self.mlp(c.hidden_dim + c.latent_dim, 1, False), self.params.sub("dec_head"),
                           torch.cat([e, zz], dim=-1))[..., 0]

    def pair_logits(self, winners, losers, ctx_w, ctx_l, train_mode=False, generator=None):
        z = self.encode(ctx_w, ctx_l, train_mode, generator)
        n = winners.shape[1]
        r = self.decode(torch.cat([winners, losers], dim=1), z)
        return r[:, :n] - r[:, n:]

    def pair_log_prob(self, winners, losers, ctx_w=None, ctx_l=None, train_mode=False, generator=None):
        return log_sigmoid(self.pair_logits(winners, losers, ctx_w, ctx_l, train_mode, generator))


MODEL_CLASSES = {"btl": BTLModel, "dpl": DPLModel, "np_btl": NPBTLModel}


def create_model(kind: str, config: RewardModelConfig, rng: np.random.Generator) -> RewardModel:
    if kind not in MODEL_CLASSES:
        raise ValueError(f"unknown reward model kind {kind!r}")
    return MODEL_CLASSES[kind].create(config, rng)


def model_from_checkpoint(ckpt: ModelCheckpoint) -> RewardModel:
    cls = MODEL_CLASSES[ckpt.model_kind]
    return cls(RewardModelConfig(**ckpt.spec), ckpt.params.copy())


def _context_tensors(context: Sequence[PreferencePair], dim: int):
    if len(context) == 0:
        empty = torch.zeros(1, 0, dim, dtype=DTYPE)
        return empty, empty
    w = as_tensor(np.stack([np.asarray(p.winner, dtype=np.float64).reshape(-1) for p in context]))[None]
    l = as_tensor(np.stack([np.asarray(p.loser, dtype=np.float64).reshape(-1) for p in context]))[None]
    return w, l


def encode_context(model: NPBTLModel, context: Sequence[PreferencePair], train_mode=False, generator=None) -> LatentEmbedding:
    w, l = _context_tensors(context, model.config.option_dim)
    with torch.no_grad():
        z = model.encode(w, l, train_mode, generator)
    return LatentEmbedding(z[0].numpy(), len(context))


def np_btl_prob(model: NPBTLModel, y1, y2, context: Sequence[PreferencePair]) -> float:
    w, l = _context_tensors(context, model.config.option_dim)
    y1 = as_tensor(np.asarray(y1, dtype=np.float64).reshape(1, 1, -1))
    y2 = as_tensor(np.asarray(y2, dtype=np.float64).reshape(1, 1, -1))
    with torch.no_grad():
        return float(torch.sigmoid(model.pair_logits(y1, y2, w, l))[0, 0])


# ---------------------------------------------------------------------------
# batching


def stack_tasks(tasks: Sequence[Task], with_context: bool = True) -> dict:
    """Stack tasks sharing one context size into batch tensors."""
    nc = {t.n_context for t in tasks} if with_context else {0}
    if len(nc) != 1:
        raise ValueError("tasks in a batch must share n_context")
    n = nc.pop()
    w = np.stack([t.winners for t in tasks])
    l = np.stack([t.losers for t in tasks])
    return {
        "winners": as_tensor(w),
        "losers": as_tensor(l),
        "ctx_w": as_tensor(w[:, :n]),
        "ctx_l": as_tensor(l[:, :n]),
        "n_context": n,
    }


def task_loss(model: RewardModel, task: Task) -> torch.Tensor:
    """Negative log-likelihood of all target pairs of one task."""
    return model.loss(stack_tasks([task], with_context=model.kind == "np_btl"))


np_btl_loss = task_loss


def grouped_loss(model: RewardModel, tasks: Sequence[Task]) -> float:
    """Task-averaged loss over tasks with mixed context sizes."""
    total = 0.0
    conditional = model.kind == "np_btl"
    groups: dict[int, list[Task]] = {}
    for t in tasks:
        groups.setdefault(t.n_context if conditional else 0, []).append(t)
    with torch.no_grad():
        for _, group in sorted(groups.items()):
            total += model.loss(stack_tasks(group, conditional)).item() * len(group)
    return total / len(tasks)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    batch_tasks: int = 64
    max_steps: int = 50
    learning_rate: float = 1e-4
    seed: int = 0
    n_val_tasks: int = 200
    val_every: int = 1


@dataclass
class TrainResult:
    checkpoint: ModelCheckpoint
    model: RewardModel
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[tuple[int, float]] = field(default_factory=list)
    best_step: int = 0


def train_reward(
    kind: str,
    pools: dict[str, PairPool],
    spec: PopulationSpec,
    cfg: TrainConfig,
    task_cfg: TaskConfig,
    model_cfg: RewardModelConfig | None = None,
    train_spec: PopulationSpec | None = None,
    z_star: Latent | None = None,
) -> TrainResult:
    """Adam over batches of tasks sharing a context size; keep the best-val params.

    BTL and DPL see empty contexts. ``z_star`` pins every task to one user
    type, which gives the dedicated per-mode baselines. All randomness derives from ``cfg.seed``
    through separate init / training / validation substreams.
    """
    model_cfg = model_cfg or RewardModelConfig(option_dim=spec.option_dim)
    init_rng, train_rng, _ = np.random.SeedSequence(cfg.seed).spawn(3)
    model = create_model(kind, model_cfg, np.random.default_rng(init_rng))
    rng = np.random.default_rng(train_rng)
    gen = torch.Generator().manual_seed(int(rng.integers(2**31)))
    conditional = kind == "np_btl"
    val_cfg = task_cfg if conditional else TaskConfig(0, 0, task_cfg.n_target)
    val_tasks = sample_tasks(pools["val"], spec, val_cfg, cfg.n_val_tasks, cfg.seed, stream=101, z_star=z_star)
    train_spec = train_spec or spec

    adam = AdamConfig(cfg.learning_rate)
    state = AdamState()
    best = (grouped_loss(model, val_tasks), 0, model.params.copy())
    result = TrainResult(None, model, val_loss=[(0, best[0])])
    for step in range(1, cfg.max_steps + 1):
        nc = int(rng.integers(task_cfg.nc_min, task_cfg.nc_max + 1)) if conditional else 0
        tasks = [sample_task(pools["train"], train_spec, task_cfg, rng, n_context=nc, z_star=z_star) for _ in range(cfg.batch_tasks)]
        model.params.zero_grad()
        loss = model.loss(stack_tasks(tasks, conditional), train_mode=True, generator=gen)
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite training loss at step {step}")
        loss.backward()
        model.params.fill_missing_grads()
        adam_step(adam, model.params, state, step)
        result.train_loss.append(loss.item())
        if step % cfg.val_every == 0 or step == cfg.max_steps:
            v = grouped_loss(model, val_tasks)
            result.val_loss.append((step, v))
            if not math.isfinite(v):
                raise NumericalError(f"non-finite validation loss at step {step}")
            if v < best[0]:
                best = (v, step, model.params.copy())
    model.params = best[2]
    result.best_step = best[1]
    result.checkpoint = model.checkpoint(cfg.seed, best[1], best_val_loss=best[0])
    log.info("trained %s: best val loss %.4f at step %d", kind, best[0], best[1])
    return result


# ---------------------------------------------------------------------------
# evaluation


def presentation_flips(seed: int, task_index: int, n: int) -> np.ndarray:
    """Which targets are shown loser-first; fixed per (seed, task)."""
    return task_rng(seed, 997, task_index).random(n) < 0.5


def task_accuracies(model, tasks: Sequence[Task], seed: int = 0) -> np.ndarray:
    """Per-task unseen-pair accuracy; NaN for tasks without unseen pairs.

    Each pair is shown in a fixed pseudo-random order and the first option is
    predicted to win iff its probability is strictly above 0.5, so a model
    that ties everything scores about one half.
    """
    acc = np.full(len(tasks), np.nan)
    groups: dict[int, list[int]] = {}
    for i, t in enumerate(tasks):
        groups.setdefault(t.n_context, []).append(i)
    for nc, idx in sorted(groups.items()):
        batch = stack_tasks([tasks[i] for i in idx], with_context=True)
        with torch.no_grad():
            margin = torch.as_tensor(model.margin(batch))
        margin = margin.numpy()
        for row, i in enumerate(idx):
            mask = tasks[i].eval_mask
            if not mask.any():
                continue
            flip = presentation_flips(seed, i, len(mask))
            m = margin[row]
            # flipped: the loser is shown first and loses unless strictly preferred
            correct = np.where(flip, m >= 0, m > 0)
            acc[i] = correct[mask].mean()
    return acc


def _summary(values: np.ndarray) -> tuple[float, float]:
    if len(values) == 0:
        return float("nan"), float("nan")
    mean = float(values.mean())
    se = float(values.std(ddof=1) / math.sqrt(len(values))) if len(values) > 1 else 0.0
    return mean, se


def latent_label(z) -> str:
    return str(z.index) if z.index is not None else "simplex"


def evaluate_accuracy(model, tasks: Sequence[Task], by_n_context: bool = True, by_z: bool = True, seed: int = 0) -> dict:
    """Unseen-pair accuracy table, standard errors taken across tasks."""
    acc = task_accuracies(model, tasks, seed)
    keep = ~np.isnan(acc)
    groups: dict[tuple, list[int]] = {}
    for i, t in enumerate(tasks):
        if not keep[i]:
            continue
        nc = t.n_context if by_n_context else "all"
        groups.setdefault((nc, "all"), []).append(i)
        if by_z:
            groups.setdefault((nc, latent_label(t.z_star)), []).append(i)
    rows = []
    for (nc, z), idx in sorted(groups.items(), key=lambda kv: (str(kv[0][0]).zfill(6), kv[0][1])):
        mean, se = _summary(acc[idx])
        rows.append({"n_context": nc, "z_star": z, "n_tasks": len(idx), "accuracy_mean": mean, "accuracy_stderr": se})
    return {"rows": rows, "excluded_tasks": int((~keep).sum()), "stderr": "across tasks"}


def lookup(table: dict, n_context, z_star="all") -> dict:
    for row in table["rows"]:
        if row["n_context"] == n_context and row["z_star"] == z_star:
            return row
    raise KeyError((n_context, z_star))
