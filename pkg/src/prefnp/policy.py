"""Conditional DPO on a toy token language.

A small causal transformer plays the LLM. A hypernetwork maps the DeepSet
embedding of a user's context pairs to per-block FiLM parameters that scale
and shift the attention-block outputs, and the pair is trained jointly on the
conditional DPO objective. Options are stored in pools as float rows of token
ids (prompt followed by response) so the reward-side task sampler and
accuracy evaluator apply unchanged.
"""

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
    glorot,
    layer_norm,
    layer_norm_init,
    linear,
    linear_init,
    log_sigmoid,
    log_softmax,
    mlp_forward,
    mlp_init,
    multihead_attention,
)
from .rewards import RewardModelConfig, context_encode, encoder_init, stack_tasks, task_accuracies
from .synthdata import PairPool, PopulationSpec, TaskConfig, filtered_pairs, sample_task, sample_tasks

log = logging.getLogger(__name__)

LN2 = math.log(2.0)


# ---------------------------------------------------------------------------
# toy language


@dataclass
class ToyLanguageSpec:
    vocab_size: int = 16
    prompt_len: int = 4
    response_len: int = 8
    n_attributes: int = 2
    weight_correlation: float = 0.0
    weight_range: int = 3
    seed: int = 0
    attribute_weights: list[list[int]] | None = None

    def __post_init__(self):
        if not -1.0 <= self.weight_correlation <= 1.0:
            raise ValueError("weight_correlation must lie in [-1, 1]")
        if self.attribute_weights is None:
            rng = np.random.default_rng([self.seed, 4242])
            r = self.weight_range
            base = rng.integers(-r, r + 1, size=self.vocab_size)
            rows = [base]
            c = self.weight_correlation
            for _ in range(1, self.n_attributes):
                noise = rng.integers(-r, r + 1, size=self.vocab_size)
                rows.append(np.rint(c * base + math.sqrt(1 - c * c) * noise).astype(int))
            self.attribute_weights = [[int(v) for v in row] for row in rows]
        w = np.asarray(self.attribute_weights)
        if w.shape != (self.n_attributes, self.vocab_size):
            raise ShapeError(f"attribute_weights shape {w.shape} != ({self.n_attributes}, {self.vocab_size})")

    @property
    def seq_len(self) -> int:
        return self.prompt_len + self.response_len

    def scores(self, responses: np.ndarray) -> np.ndarray:
        """Attribute scores ``h_k = sum_t w_k[token_t]``, shape ``(..., n_attributes)``."""
        responses = np.asarray(responses, dtype=np.int64)
        if responses.size and (responses.min() < 0 or responses.max() >= self.vocab_size):
            raise ValueError("token out of vocabulary")
        w = np.asarray(self.attribute_weights, dtype=np.float64)
        return np.moveaxis(w[:, responses].sum(axis=-1), 0, -1)

    def population(self) -> PopulationSpec:
        """Labelling spec: coordinate rewards over the attribute scores."""
        return PopulationSpec(family="kmode", k=self.n_attributes, feature_dim=self.seq_len)


def option_features(tokens: torch.Tensor, spec: ToyLanguageSpec) -> torch.Tensor:
    """Bag-of-tokens frequencies of the response part, the encoder's view of an option."""
    resp = tokens[..., spec.prompt_len:].long()
    onehot = torch.nn.functional.one_hot(resp, spec.vocab_size).to(DTYPE)
    return onehot.mean(dim=-2)


# ---------------------------------------------------------------------------
# policy network


@dataclass
class PolicyConfig:
    vocab_size: int = 16
    seq_len: int = 12
    model_dim: int = 64
    n_blocks: int = 2
    num_heads: int = 4
    ffn_dim: int = 128

    def attention(self) -> AttentionSpec:
        return AttentionSpec(self.model_dim, self.num_heads, 0.0)


def policy_init(cfg: PolicyConfig, rng: np.random.Generator) -> ParamSet:
    p = ParamSet()
    p["tok_emb"] = glorot(rng, cfg.vocab_size, cfg.model_dim)
    p["pos_emb"] = 0.1 * rng.standard_normal((cfg.seq_len, cfg.model_dim))
    for m in range(cfg.n_blocks):
        p.merge(f"block{m}.ln1", layer_norm_init(cfg.model_dim))
        p.merge(f"block{m}.attn", attention_init(cfg.attention(), rng))
        p.merge(f"block{m}.ln2", layer_norm_init(cfg.model_dim))
        p.merge(f"block{m}.ff", mlp_init(MLPSpec(cfg.model_dim, cfg.model_dim, cfg.ffn_dim, 1), rng))
    p.merge("ln_f", layer_norm_init(cfg.model_dim))
    p.merge("head", linear_init(rng, cfg.model_dim, cfg.vocab_size))
    return p


@dataclass
class FiLMParams:
    """Per-block ``(gamma, beta)``, each of shape ``(batch, model_dim)``."""

    gamma: list[torch.Tensor]
    beta: list[torch.Tensor]

    @classmethod
    def identity(cls, batch: int, n_blocks: int, dim: int) -> "FiLMParams":
        return cls([torch.ones(batch, dim, dtype=DTYPE)] * n_blocks, [torch.zeros(batch, dim, dtype=DTYPE)] * n_blocks)

    def repeat(self, times: int) -> "FiLMParams":
        return FiLMParams([g.repeat_interleave(times, 0) for g in self.gamma],
                          [b.repeat_interleave(times, 0) for b in self.beta])


def film_modulate(o: torch.Tensor, film: FiLMParams, m: int) -> torch.Tensor:
    """``gamma_m * o + beta_m`` broadcast over sequence positions; ``o`` is ``(batch, T, D)``."""
    g, b = film.gamma[m], film.beta[m]
    if g.shape[-1] != o.shape[-1] or b.shape[-1] != o.shape[-1]:
        raise ShapeError(f"FiLM dim {g.shape[-1]} != hidden dim {o.shape[-1]}")
    return g[:, None, :] * o + b[:, None, :]


def policy_log_probs(cfg: PolicyConfig, params: ParamSet, tokens: torch.Tensor, film: FiLMParams | None = None) -> torch.Tensor:
    """Next-token log-probabilities, shape ``(batch, T, vocab)``; row t predicts token t+1."""
    tokens = tokens.long()
    if tokens.numel() and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ValueError("token out of vocabulary")
    T = tokens.shape[-1]
    h = params["tok_emb"][tokens] + params["pos_emb"][:T]
    attn = cfg.attention()
    for m in range(cfg.n_blocks):
        o = multihead_attention(attn, params.sub(f"block{m}.attn"), layer_norm(params.sub(f"block{m}.ln1"), h), causal=True)
        if film is not None:
            o = film_modulate(o, film, m)
        h = h + o
        h = h + mlp_forward(MLPSpec(cfg.model_dim, cfg.model_dim, cfg.ffn_dim, 1), params.sub(f"block{m}.ff"),
                            layer_norm(params.sub(f"block{m}.ln2"), h))
    logits = linear(params.sub("head"), layer_norm(params.sub("ln_f"), h))
    return log_softmax(logits, dim=-1)


def sequence_log_prob(cfg: PolicyConfig, params: ParamSet, tokens: torch.Tensor, prompt_len: int,
                      film: FiLMParams | None = None) -> torch.Tensor:
    """Summed log-probability of the response tokens given the prompt, shape ``(batch,)``."""
    tokens = tokens.long()
    lp = policy_log_probs(cfg, params, tokens, film)
    picked = lp[:, :-1].gather(-1, tokens[:, 1:, None])[..., 0]
    return picked[:, prompt_len - 1:].sum(dim=-1)


# ---------------------------------------------------------------------------
# conditional policy


@dataclass
class DPOConfig:
    beta: float = 0.05
    learning_rate: float = 1e-4
    batch_tasks: int = 1
    max_steps: int = 1500
    seed: int = 0
    n_val_tasks: int = 100
    val_every: int = 25

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")


class SteerablePolicy:
    """Policy ``theta`` plus FiLM hypernetwork ``phi`` and a frozen reference.

    ``conditional=False`` gives the BTL-DPO baseline: no encoder, no FiLM.
    """

    def __init__(self, lang: ToyLanguageSpec, pcfg: PolicyConfig, hcfg: RewardModelConfig, params: ParamSet,
                 ref_params: ParamSet, beta: float = 0.05, conditional: bool = True):
        self.lang, self.pcfg, self.hcfg = lang, pcfg, hcfg
        self.params = params
        self.ref_params = ref_params
        self.beta = beta
        self.conditional = conditional

    @property
    def kind(self) -> str:
        return "np_dpo" if self.conditional else "btl_dpo"

    @classmethod
    def create(cls, lang: ToyLanguageSpec, rng: np.random.Generator, conditional: bool = True, beta: float = 0.05,
               pcfg: PolicyConfig | None = None, hcfg: RewardModelConfig | None = None,
               ref_params: ParamSet | None = None) -> "SteerablePolicy":
        pcfg = pcfg or PolicyConfig(vocab_size=lang.vocab_size, seq_len=lang.seq_len)
        hcfg = hcfg or RewardModelConfig(option_dim=lang.vocab_size, hidden_dim=64, latent_dim=64)
        theta = policy_init(pcfg, rng)
        if ref_params is not None:
            theta = ref_params.copy()
        params = ParamSet()
        params.merge("policy", theta)
        if conditional:
            params.merge("hyper.encoder", encoder_init(hcfg, rng))
            for m in range(pcfg.n_blocks):
                for name in ("gamma", "beta"):
                    p = ParamSet()
                    # zero-initialised so training starts exactly at the reference
                    p["weight"] = np.zeros((hcfg.latent_dim, pcfg.model_dim))
                    p["bias"] = np.zeros(pcfg.model_dim)
                    params.merge(f"hyper.{name}{m}", p)
        ref = theta.copy() if ref_params is None else ref_params.copy()
        for v in ref.values():
            v.requires_grad_(False)
        return cls(lang, pcfg, hcfg, params, ref, beta, conditional)

    # -- conditioning -------------------------------------------------------

    def film(self, ctx_w: torch.Tensor, ctx_l: torch.Tensor) -> FiLMParams | None:
        """FiLM parameters per task from context token rows ``(batch, n, T)``."""
        if not self.conditional:
            return None
        fw = option_features(ctx_w, self.lang)
        fl = option_features(ctx_l, self.lang)
        z = context_encode(self.hcfg, self.params.sub("hyper.encoder"), fw, fl)
        gammas = [1.0 + linear(self.params.sub(f"hyper.gamma{m}"), z) for m in range(self.pcfg.n_blocks)]
        betas = [linear(self.params.sub(f"hyper.beta{m}"), z) for m in range(self.pcfg.n_blocks)]
        return FiLMParams(gammas, betas)

    def log_prob(self, tokens: torch.Tensor, ctx_w: torch.Tensor, ctx_l: torch.Tensor) -> torch.Tensor:
        """Conditional response log-probability for ``tokens`` of shape ``(batch, n, T)``."""
        b, n, T = tokens.shape
        film = self.film(ctx_w, ctx_l)
        if film is not None:
            film = film.repeat(n)
        lp = sequence_log_prob(self.pcfg, self.params.sub("policy"), tokens.reshape(b * n, T), self.lang.prompt_len, film)
        return lp.reshape(b, n)

    def ref_log_prob(self, tokens: torch.Tensor) -> torch.Tensor:
        b, n, T = tokens.shape
        with torch.no_grad():
            lp = sequence_log_prob(self.pcfg, self.ref_params, tokens.reshape(b * n, T), self.lang.prompt_len)
        return lp.reshape(b, n)

    def implicit_reward(self, tokens, ctx_w, ctx_l) -> torch.Tensor:
        return self.beta * (self.log_prob(tokens, ctx_w, ctx_l) - self.ref_log_prob(tokens))

    def reward_margin(self, batch: dict) -> torch.Tensor:
        b, n, T = batch["winners"].shape
        both = torch.cat([batch["winners"], batch["losers"]], dim=1)
        ctx_w, ctx_l = batch["ctx_w"], batch["ctx_l"]
        if not self.conditional:
            ctx_w = ctx_l = ctx_w[:, :0]
        r = self.implicit_reward(both, ctx_w, ctx_l)
        return r[:, :n] - r[:, n:]

    def loss(self, batch: dict) -> torch.Tensor:
        """Mean over batch pairs of ``-log sigmoid(r(y_w) - r(y_l))``."""
        return -log_sigmoid(self.reward_margin(batch)).mean()

    def margin(self, batch: dict) -> torch.Tensor:
        return self.reward_margin(batch)

    def checkpoint(self, seed: int = 0, step: int = 0, **metadata) -> ModelCheckpoint:
        out = self.params.copy()
        for k, v in self.ref_params.items():
            out[f"ref.{k}"] = v.detach().clone()
        spec = {
            "lang": asdict(self.lang),
            "policy": asdict(self.pcfg),
            "hyper": asdict(self.hcfg),
            "beta": self.beta,
            "conditional": self.conditional,
        }
        return ModelCheckpoint(self.kind, spec, out, seed, step, metadata)

    @classmethod
    def from_checkpoint(cls, ckpt: ModelCheckpoint) -> "SteerablePolicy":
        s = ckpt.spec
        params, ref = ParamSet(), ParamSet()
        for k, v in ckpt.params.items():
            if k.startswith("ref."):
                ref[k[4:]] = v.detach()
            else:
                params[k] = v.detach()
        for v in ref.values():
            v.requires_grad_(False)
        return cls(ToyLanguageSpec(**s["lang"]), PolicyConfig(**s["policy"]), RewardModelConfig(**s["hyper"]),
                   params, ref, s["beta"], s["conditional"])


def conditional_log_prob(policy: SteerablePolicy, x, y, context: Sequence[tuple] = ()) -> float:
    """Log-probability of response ``y`` for prompt ``x`` given context ``[(winner_tokens, loser_tokens), ...]``."""
    tokens = as_tensor(np.concatenate([np.asarray(x), np.asarray(y)]).reshape(1, 1, -1))
    ctx_w, ctx_l = _context_tokens(context, policy.lang.seq_len)
    with torch.no_grad():
        return float(policy.log_prob(tokens, ctx_w, ctx_l)[0, 0])


def implicit_reward(policy: SteerablePolicy, x, y, context: Sequence[tuple] = ()) -> float:
    tokens = as_tensor(np.concatenate([np.asarray(x), np.asarray(y)]).reshape(1, 1, -1))
    ctx_w, ctx_l = _context_tokens(context, policy.lang.seq_len)
    with torch.no_grad():
        return float(policy.implicit_reward(tokens, ctx_w, ctx_l)[0, 0])


def _context_tokens(context, seq_len: int):
    if len(context) == 0:
        empty = torch.zeros(1, 0, seq_len, dtype=DTYPE)
        return empty, empty
    w = as_tensor(np.stack([np.asarray(a, dtype=np.float64) for a, _ in context]))[None]
    l = as_tensor(np.stack([np.asarray(b, dtype=np.float64) for _, b in context]))[None]
    return w, l


def np_dpo_loss(policy: SteerablePolicy, tasks, beta: float | None = None) -> torch.Tensor:
    """Conditional DPO loss over a list of tasks sharing one context size."""
    if beta is not None:
        policy.beta = beta
    return policy.loss(stack_tasks(tasks, with_context=True))


# ---------------------------------------------------------------------------
# sampling and data


def sample_responses(policy_cfg: PolicyConfig, params: ParamSet, prompts: np.ndarray, response_len: int,
                     rng: np.random.Generator, temperature: float = 1.0, film: FiLMParams | None = None) -> np.ndarray:
    """Autoregressive sampling of ``response_len`` tokens for each prompt row."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    seqs = torch.as_tensor(np.asarray(prompts, dtype=np.int64))
    with torch.no_grad():
        for _ in range(response_len):
            lp = policy_log_probs(policy_cfg, params, seqs, film)[:, -1] / temperature
            probs = torch.softmax(lp, dim=-1).numpy()
            cdf = np.cumsum(probs, axis=-1)
            u = rng.random((len(seqs), 1)) * cdf[:, -1:]
            nxt = np.minimum((cdf < u).sum(axis=-1), policy_cfg.vocab_size - 1)
            seqs = torch.cat([seqs, torch.as_tensor(nxt)[:, None]], dim=1)
    return seqs[:, prompts.shape[1]:].numpy()


def sample_response(policy: SteerablePolicy, x, context: Sequence[tuple] = (), temperature: float = 1.0,
                    rng: np.random.Generator | None = None, n: int = 1) -> np.ndarray:
    """Steered sampling: ``n`` responses for prompt ``x`` under the context's FiLM parameters."""
    rng = np.random.default_rng(0) if rng is None else rng
    ctx_w, ctx_l = _context_tokens(context, policy.lang.seq_len)
    with torch.no_grad():
        film = policy.film(ctx_w, ctx_l)
    if film is not None:
        film = film.repeat(n)
    prompts = np.repeat(np.asarray(x, dtype=np.int64)[None], n, axis=0)
    out = sample_responses(policy.pcfg, policy.params.sub("policy"), prompts, policy.lang.response_len, rng,
                           temperature, film)
    return out[0] if n == 1 else out


def gen_toy_preferences(lang: ToyLanguageSpec, ref: SteerablePolicy, sizes: dict[str, int], rng: np.random.Generator,
                        conflict_filter: float | None = None) -> dict[str, PairPool]:
    """Pools of (prompt, response, response) rows sampled from the reference policy."""

    def draw(m, g):
        prompts = g.integers(0, lang.vocab_size, size=(m, lang.prompt_len))
        r1 = sample_responses(ref.pcfg, ref.ref_params, prompts, lang.response_len, g)
        r2 = sample_responses(ref.pcfg, ref.ref_params, prompts, lang.response_len, g)
        y1 = np.concatenate([prompts, r1], axis=1).astype(np.float64)
        y2 = np.concatenate([prompts, r2], axis=1).astype(np.float64)
        return y1, y2, lang.scores(r1), lang.scores(r2)

    pools = {}
    start = 0
    for split, sub in zip(("train", "val", "test"), rng.spawn(3)):
        n = sizes[split]
        # cap the candidate chunk so sampling cost tracks the requested size
        y1, y2, s1, s2 = filtered_pairs(lambda m, g: draw(min(m, 2 * n + 64), g), "kmode", lang.n_attributes, n, sub,
                                        conflict_filter)
        pools[split] = PairPool(split, np.arange(start, start + n), y1, y2, s1, s2)
        start += n
    return pools


# ---------------------------------------------------------------------------
# training


@dataclass
class DPOResult:
    checkpoint: ModelCheckpoint
    policy: SteerablePolicy
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[tuple[int, float]] = field(default_factory=list)
    initial_loss: float = float("nan")
    best_step: int = 0


def _val_loss(policy: SteerablePolicy, tasks) -> float:
    groups: dict[int, list] = {}
    for t in tasks:
        groups.setdefault(t.n_context, []).append(t)
    total = 0.0
    with torch.no_grad():
        for _, g in sorted(groups.items()):
            total += policy.loss(stack_tasks(g)).item() * len(g)
    return total / len(tasks)


def train_np_dpo(lang: ToyLanguageSpec, pools: dict[str, PairPool], cfg: DPOConfig, task_cfg: TaskConfig,
                 conditional: bool = True, ref_params: ParamSet | None = None,
                 pcfg: PolicyConfig | None = None, hcfg: RewardModelConfig | None = None) -> DPOResult:
    """Joint Adam on policy and hypernetwork; best-validation checkpoint is kept."""
    init_ss, train_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    policy = SteerablePolicy.create(lang, np.random.default_rng(init_ss), conditional, cfg.beta, pcfg, hcfg, ref_params)
    spec = lang.population()
    rng = np.random.default_rng(train_ss)
    val_cfg = task_cfg if conditional else TaskConfig(0, 0, task_cfg.n_target)
    val_tasks = sample_tasks(pools["val"], spec, val_cfg, cfg.n_val_tasks, cfg.seed, stream=202)
    state = AdamState()
    adam = AdamConfig(cfg.learning_rate)
    v0 = _val_loss(policy, val_tasks)
    best = (v0, 0, policy.params.copy())
    result = DPOResult(None, policy, val_loss=[(0, v0)])
    bad_run = 0
    for step in range(1, cfg.max_steps + 1):
        nc = int(rng.integers(task_cfg.nc_min, task_cfg.nc_max + 1)) if conditional else 0
        tasks = [sample_task(pools["train"], spec, task_cfg, rng, n_context=nc) for _ in range(cfg.batch_tasks)]
        policy.params.zero_grad()
        loss = policy.loss(stack_tasks(tasks))
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite DPO loss at step {step}")
        if step == 1:
            result.initial_loss = loss.item()
        loss.backward()
        policy.params.fill_missing_grads()
        adam_step(adam, policy.params, state, step)
        result.train_loss.append(loss.item())
        bad_run = bad_run + 1 if loss.item() > 10 * LN2 else 0
        if bad_run >= 100:
            raise NumericalError(f"DPO training diverged: loss above 10 ln 2 for 100 steps ending at step {step}")
        if step % cfg.val_every == 0 or step == cfg.max_steps:
            v = _val_loss(policy, val_tasks)
            result.val_loss.append((step, v))
            if v < best[0]:
                best = (v, step, policy.params.copy())
    policy.params = best[2]
    result.best_step = best[1]
    result.checkpoint = policy.checkpoint(cfg.seed, best[1], best_val_loss=best[0])
    log.info("trained %s: best val loss %.4f at step %d", policy.kind, best[0], best[1])
    return result


def eval_implicit_accuracy(policy: SteerablePolicy, tasks, seed: int = 0) -> dict:
    from .rewards import evaluate_accuracy

    return evaluate_accuracy(policy, tasks, seed=seed)
