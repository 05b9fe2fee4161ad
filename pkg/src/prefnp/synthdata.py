"""Synthetic heterogeneous-preference populations and task sampling.

Options are stored as two arrays: the features a model sees and the hidden
attribute scores the latent reward functions act on. For the 1D/2D families
these coincide; for the ``kmode``/``dirichlet`` embedding proxies the first
``k`` feature coordinates are the scores (optionally blurred by
``score_noise`` in the visible copy).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

FAMILIES = ("piecewise1d", "gaussian2d", "kmode", "dirichlet")
POOL_HEADER = "prefnp-pool v1"
TASKS_HEADER = "prefnp-tasks v1"
SPLITS = ("train", "val", "test")


class TieError(ValueError):
    """Raised when two options receive exactly equal rewards."""


class InfeasibleFilter(ValueError):
    pass


# ---------------------------------------------------------------------------
# types


@dataclass(frozen=True)
class Latent:
    """Ground-truth user latent: a discrete mode index or simplex weights."""

    index: int | None = None
    weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if (self.index is None) == (self.weights is None):
            raise ValueError("Latent needs exactly one of index or weights")
        if self.weights is not None:
            w = np.asarray(self.weights)
            if (w < 0).any() or abs(w.sum() - 1.0) > 1e-12:
                raise ValueError("simplex weights must be nonnegative and sum to 1")

    @property
    def kind(self) -> str:
        return "discrete" if self.index is not None else "simplex"

    def as_weights(self, k: int) -> np.ndarray:
        if self.weights is not None:
            return np.asarray(self.weights, dtype=np.float64)
        w = np.zeros(k)
        w[self.index] = 1.0
        return w

    def to_json(self):
        return self.index if self.index is not None else list(self.weights)

    @classmethod
    def from_json(cls, v) -> "Latent":
        if isinstance(v, list):
            return cls(weights=tuple(float(x) for x in v))
        return cls(index=int(v))


def discrete(k: int) -> Latent:
    return Latent(index=k)


def simplex(*weights: float) -> Latent:
    return Latent(weights=tuple(float(w) for w in weights))


@dataclass(frozen=True)
class PreferencePair:
    winner: np.ndarray
    loser: np.ndarray


@dataclass
class PopulationSpec:
    family: str = "piecewise1d"
    rho: float = 0.0
    k: int = 2
    feature_dim: int = 8
    score_noise: float = 0.0
    alpha: tuple[float, ...] = (0.5, 0.5)
    support: tuple[float, float] = (-1.0, 1.0)
    conflict_filter: float | None = None
    n_train: int = 10_000
    n_val: int = 5_000
    n_test: int = 5_000

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if abs(self.rho) > 1:
            raise ValueError(f"|rho| must be <= 1, got {self.rho}")
        if self.family == "kmode" and self.k not in (2, 3):
            raise ValueError("kmode supports k in {2, 3}")
        if self.family == "dirichlet":
            self.alpha = tuple(float(a) for a in self.alpha)
            if len(self.alpha) != self.k or min(self.alpha) <= 0:
                raise ValueError("dirichlet alpha must be k positive values")
        lo, hi = self.support
        if not -1.0 <= lo < hi <= 1.0:
            raise ValueError("piecewise support must lie inside [-1, 1]")
        self.support = (float(lo), float(hi))
        if self.conflict_filter is not None and not 0.0 <= self.conflict_filter <= 1.0:
            raise ValueError("conflict_filter must lie in [0, 1]")
        if self.family in ("kmode", "dirichlet") and self.feature_dim < self.k:
            raise ValueError("feature_dim must be at least k")

    @property
    def n_latents(self) -> int:
        return 2 if self.family in ("piecewise1d", "gaussian2d") else self.k

    @property
    def option_dim(self) -> int:
        return {"piecewise1d": 1, "gaussian2d": 2}.get(self.family, self.feature_dim)

    @property
    def score_dim(self) -> int:
        return {"piecewise1d": 1, "gaussian2d": 2}.get(self.family, self.k)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["alpha"] = list(self.alpha)
        d["support"] = list(self.support)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PopulationSpec":
        d = dict(d)
        for key in ("alpha", "support"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class TaskConfig:
    nc_min: int = 0
    nc_max: int = 10
    n_target: int = 20

    def __post_init__(self):
        if not 0 <= self.nc_min <= self.nc_max <= self.n_target:
            raise ValueError("need 0 <= nc_min <= nc_max <= n_target")
        if self.n_target < 1:
            raise ValueError("n_target must be positive")


REWARD_TASK_CONFIG = TaskConfig(0, 10, 20)
POLICY_TASK_CONFIG = TaskConfig(0, 6, 9)


@dataclass
class PairPool:
    """Unlabelled option pairs of one split."""

    split: str
    ids: np.ndarray
    y1: np.ndarray
    y2: np.ndarray
    s1: np.ndarray
    s2: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class Task:
    """One simulated user's (context, target) split.

    Rows ``[:n_context]`` of the target arrays are the context pairs.
    """

    z_star: Latent
    winners: np.ndarray
    losers: np.ndarray
    winner_scores: np.ndarray
    loser_scores: np.ndarray
    n_context: int
    pair_ids: np.ndarray
    context_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.context_ids is None:
            self.context_ids = self.pair_ids[: self.n_context]

    @property
    def n_target(self) -> int:
        return len(self.winners)

    @property
    def eval_mask(self) -> np.ndarray:
        m = np.ones(self.n_target, dtype=bool)
        m[: self.n_context] = False
        return m

    @property
    def context_winners(self) -> np.ndarray:
        return self.winners[: self.n_context]

    @property
    def context_losers(self) -> np.ndarray:
        return self.losers[: self.n_context]

    @property
    def context(self) -> list[PreferencePair]:
        return [PreferencePair(w, l) for w, l in zip(self.context_winners, self.context_losers)]

    @property
    def target(self) -> list[PreferencePair]:
        return [PreferencePair(w, l) for w, l in zip(self.winners, self.losers)]


# ---------------------------------------------------------------------------
# rewards and labels


def reward_piecewise(y, z: Latent) -> float:
    y = float(np.asarray(y).reshape(-1)[0])
    if not -1.0 <= y <= 1.0:
        raise ValueError(f"piecewise option {y} outside [-1, 1]")
    if z.index not in (0, 1):
        raise ValueError("piecewise latent must be discrete 0 or 1")
    if y <= 0.5:
        return y
    return 2 * y if z.index == 0 else 1 - y


def reward_piecewise_array(y: np.ndarray, z: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim and y.shape[-1] == 1:
        y = y[..., 0]
    high = 2 * y if z == 0 else 1 - y
    return np.where(y <= 0.5, y, high)


def reward_linear(y, z: Latent) -> float:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    k = len(z.weights) if z.weights is not None else z.index + 1
    if z.index is not None and z.index >= len(y):
        raise ValueError(f"latent index {z.index} exceeds feature dim {len(y)}")
    if len(y) < k:
        raise ValueError(f"feature dim {len(y)} is smaller than {k} latent weights")
    return float(np.dot(z.as_weights(k), y[:k]))


def rewards(scores: np.ndarray, z: Latent, family: str) -> np.ndarray:
    """Vectorised reward of score rows ``(..., score_dim)`` under ``z``."""
    if family == "piecewise1d":
        return reward_piecewise_array(scores, z.index)
    k = scores.shape[-1]
    return scores @ z.as_weights(k)


def reward_set(scores: np.ndarray, family: str, n_latents: int) -> np.ndarray:
    """Rewards under every vertex latent, shape ``(..., n_latents)``."""
    return np.stack([rewards(scores, discrete(j), family) for j in range(n_latents)], axis=-1)


def _reward_scalar(y, z: Latent, family: str) -> float:
    if family == "piecewise1d":
        return reward_piecewise(y, z)
    return reward_linear(y, z)


def label_pair(y1, y2, z: Latent, family: str) -> PreferencePair:
    r1, r2 = _reward_scalar(y1, z, family), _reward_scalar(y2, z, family)
    if r1 == r2:
        raise TieError(f"tie at reward {r1}")
    return PreferencePair(np.asarray(y1), np.asarray(y2)) if r1 > r2 else PreferencePair(np.asarray(y2), np.asarray(y1))


def is_conflicting(y1, y2, r0, r1) -> bool:
    """Whether reward callables ``r0`` and ``r1`` order ``y1, y2`` differently."""
    a1, a2, b1, b2 = r0(y1), r0(y2), r1(y1), r1(y2)
    if a1 == a2 or b1 == b2:
        raise TieError("tie under one of the rewards")
    return (a1 > a2) != (b1 > b2)


def conflict_flags(s1: np.ndarray, s2: np.ndarray, family: str, n_latents: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-pair (conflicting, tied) flags under the family's vertex rewards.

    A pair conflicts when the vertex rewards do not all pick the same winner.
    """
    d = reward_set(s1, family, n_latents) - reward_set(s2, family, n_latents)
    tied = (d == 0).any(axis=-1)
    first = d > 0
    conflicting = first.any(axis=-1) & ~first.all(axis=-1)
    return conflicting & ~tied, tied


def conflict_rate_theoretical(rho: float) -> float:
    if abs(rho) > 1:
        raise ValueError("|rho| must be <= 1")
    return 0.5 - math.asin(rho) / math.pi


# ---------------------------------------------------------------------------
# sampling


def sample_features(spec: PopulationSpec, n: int, rng: np.random.Generator, rho: float | None = None):
    """Return ``(features, scores)`` for ``n`` i.i.d. options."""
    if n < 1:
        raise ValueError("n must be positive")
    if spec.family == "piecewise1d":
        lo, hi = spec.support
        y = rng.uniform(lo, hi, size=(n, 1))
        return y, y
    if spec.family == "gaussian2d":
        rho = spec.rho if rho is None else rho
        if abs(rho) > 1:
            raise ValueError(f"|rho| must be <= 1, got {rho}")
        chol = np.array([[1.0, 0.0], [rho, math.sqrt(max(0.0, 1 - rho * rho))]])
        y = rng.standard_normal((n, 2)) @ chol.T
        return y, y
    x = rng.standard_normal((n, spec.feature_dim))
    scores = x[:, : spec.k].copy()
    if spec.score_noise > 0:
        x[:, : spec.k] += spec.score_noise * rng.standard_normal((n, spec.k))
    return x, scores


def sample_options(spec: PopulationSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    return sample_features(spec, n, rng)[0]


def filtered_pairs(draw, family: str, n_latents: int, n: int, rng: np.random.Generator, rate: float | None):
    """Collect ``n`` untied pairs from ``draw(m, rng) -> (y1, y2, s1, s2)``.

    With ``rate`` set, exactly ``round(rate * n)`` of them conflict under the
    family's vertex rewards.
    """
    want_conf = None if rate is None else int(round(rate * n))
    kept, n_conf, n_free, drawn = [], 0, 0, 0
    chunk = max(256, 2 * n)
    while True:
        y1, y2, s1, s2 = draw(chunk, rng)
        drawn += chunk
        conf, tied = conflict_flags(s1, s2, family, n_latents)
        if rate is None:
            idx = np.flatnonzero(~tied)[: n - n_free]
            n_free += len(idx)
        else:
            ic = np.flatnonzero(conf)[: max(0, want_conf - n_conf)]
            inf = np.flatnonzero(~tied & ~conf)[: max(0, n - want_conf - n_free)]
            idx = np.concatenate([ic, inf])
            n_conf += len(ic)
            n_free += len(inf)
        kept.append((y1[idx], y2[idx], s1[idx], s2[idx]))
        if n_conf + n_free >= n:
            break
        if drawn > 500 * n + 100_000:
            raise InfeasibleFilter(
                f"conflict filter {rate} infeasible for family {family}: "
                f"found {n_conf} conflicting / {n_free} agreeing pairs in {drawn} draws"
            )
    parts = [np.concatenate(a) for a in zip(*kept)]
    perm = rng.permutation(n)
    return tuple(p[perm] for p in parts)


def _filtered_pairs(spec: PopulationSpec, n: int, rng, rate: float | None, rho=None):
    if rate is not None and spec.family == "gaussian2d":
        r = spec.rho if rho is None else rho
        want_conf = int(round(rate * n))
        if (r == 1.0 and want_conf > 0) or (r == -1.0 and want_conf < n):
            raise InfeasibleFilter(f"conflict rate {rate} is unreachable for gaussian2d at rho={r}")

    def draw(m, g):
        y1, s1 = sample_features(spec, m, g, rho)
        y2, s2 = sample_features(spec, m, g, rho)
        return y1, y2, s1, s2

    return filtered_pairs(draw, spec.family, spec.n_latents, n, rng, rate)


def build_pool(spec: PopulationSpec, rng: np.random.Generator | int) -> dict[str, PairPool]:
    """Train/val/test pair pools, each drawn from its own substream."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    sizes = {"train": spec.n_train, "val": spec.n_val, "test": spec.n_test}
    if min(sizes.values()) < 1:
        raise ValueError("pool sizes must be positive")
    streams = rng.spawn(3)
    pools = {}
    start = 0
    for split, sub in zip(SPLITS, streams):
        n = sizes[split]
        y1, y2, s1, s2 = _filtered_pairs(spec, n, sub, spec.conflict_filter)
        pools[split] = PairPool(split, np.arange(start, start + n), y1, y2, s1, s2)
        start += n
    return pools


def pool_conflict_fraction(pool: PairPool, spec: PopulationSpec) -> float:
    conf, _ = conflict_flags(pool.s1, pool.s2, spec.family, spec.n_latents)
    return float(conf.mean())


def sample_latent(spec: PopulationSpec, rng: np.random.Generator) -> Latent:
    if spec.family == "dirichlet":
        w = rng.dirichlet(spec.alpha)
        w = w / w.sum()
        return Latent(weights=tuple(float(x) for x in w))
    return discrete(int(rng.integers(spec.n_latents)))


def _label(pool: PairPool, idx: np.ndarray, z: Latent, family: str):
    r1 = rewards(pool.s1[idx], z, family)
    r2 = rewards(pool.s2[idx], z, family)
    return r1 > r2, r1 == r2


def sample_task(
    pool: PairPool,
    spec: PopulationSpec,
    cfg: TaskConfig,
    rng: np.random.Generator,
    n_context: int | None = None,
    z_star: Latent | None = None,
    context_pool: PairPool | None = None,
) -> Task:
    """Draw a user and label ``cfg.n_target`` distinct pool pairs for them.

    ``context_pool``, when given, supplies the context rows while the
    remaining target rows come from ``pool``.
    """
    if len(pool) < cfg.n_target:
        raise ValueError(f"pool of {len(pool)} pairs is smaller than n_target={cfg.n_target}")
    z = sample_latent(spec, rng) if z_star is None else z_star
    nc = int(rng.integers(cfg.nc_min, cfg.nc_max + 1)) if n_context is None else n_context
    if not 0 <= nc <= cfg.n_target:
        raise ValueError("n_context out of range")

    def draw(src: PairPool, m: int):
        order = rng.permutation(len(src))
        chosen = list(order[:m])
        spare = iter(order[m:])
        first, tied = _label(src, np.array(chosen, dtype=int), z, spec.family)
        # ties are measure-zero; swap in unused pairs until none remain
        while tied.any():
            for j in np.flatnonzero(tied):
                chosen[j] = next(spare)
            first, tied = _label(src, np.array(chosen, dtype=int), z, spec.family)
        idx = np.array(chosen, dtype=int)
        f = first[:, None]
        w = np.where(f, src.y1[idx], src.y2[idx])
        l = np.where(f, src.y2[idx], src.y1[idx])
        ws = np.where(f, src.s1[idx], src.s2[idx])
        ls = np.where(f, src.s2[idx], src.s1[idx])
        return w, l, ws, ls, src.ids[idx]

    if context_pool is None:
        w, l, ws, ls, ids = draw(pool, cfg.n_target)
    else:
        parts = [draw(context_pool, nc), draw(pool, cfg.n_target - nc)]
        w, l, ws, ls, ids = (np.concatenate(a) for a in zip(*parts))
    return Task(z, w, l, ws, ls, nc, ids)


def task_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, index])


def sample_tasks(
    pool: PairPool,
    spec: PopulationSpec,
    cfg: TaskConfig,
    n_tasks: int,
    seed: int,
    stream: int = 0,
    n_context: int | None = None,
    context_pool: PairPool | None = None,
    z_star: Latent | None = None,
) -> list[Task]:
    return [
        sample_task(pool, spec, cfg, task_rng(seed, stream, i), n_context=n_context, z_star=z_star,
                    context_pool=context_pool)
        for i in range(n_tasks)
    ]


def check_task(task: Task, family: str) -> None:
    """Assert the labelling and context-in-target invariants."""
    rw = rewards(task.winner_scores, task.z_star, family)
    rl = rewards(task.loser_scores, task.z_star, family)
    if not (rw > rl).all():
        raise AssertionError("a labelled pair violates r(winner) > r(loser)")
    if not set(task.context_ids).issubset(set(task.pair_ids)):
        raise AssertionError("context is not a subset of target")


# ---------------------------------------------------------------------------
# files


def write_pool(path, pools: dict[str, PairPool]) -> None:
    lines = [POOL_HEADER]
    for split in SPLITS:
        if split not in pools:
            continue
        p = pools[split]
        for i in range(len(p)):
            lines.append(json.dumps({
                "pair_id": int(p.ids[i]),
                "split": split,
                "y1": p.y1[i].tolist(),
                "y2": p.y2[i].tolist(),
                "s1": p.s1[i].tolist(),
                "s2": p.s2[i].tolist(),
            }))
    _atomic_write(path, "\n".join(lines) + "\n")


def read_pool(path) -> dict[str, PairPool]:
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != POOL_HEADER:
        raise ValueError(f"{path}: missing '{POOL_HEADER}' header")
    rows: dict[str, list[dict]] = {}
    for line in text[1:]:
        if line.strip():
            rec = json.loads(line)
            rows.setdefault(rec["split"], []).append(rec)
    pools = {}
    for split, recs in rows.items():
        def col(key, fallback):
            return np.array([r.get(key, r[fallback]) for r in recs], dtype=np.float64)

        pools[split] = PairPool(
            split,
            np.array([r["pair_id"] for r in recs]),
            col("y1", "y1"),
            col("y2", "y2"),
            col("s1", "y1"),
            col("s2", "y2"),
        )
    return pools


def write_tasks(path, tasks: Sequence[Task]) -> None:
    lines = [TASKS_HEADER]
    for i, t in enumerate(tasks):
        lines.append(json.dumps({
            "task_id": i,
            "z_star": t.z_star.to_json(),
            "context_ids": [int(x) for x in t.context_ids],
            "target_ids": [int(x) for x in t.pair_ids],
        }))
    _atomic_write(path, "\n".join(lines) + "\n")


def read_tasks(path) -> list[dict]:
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != TASKS_HEADER:
        raise ValueError(f"{path}: missing '{TASKS_HEADER}' header")
    out = []
    for line in text[1:]:
        if line.strip():
            rec = json.loads(line)
            rec["z_star"] = Latent.from_json(rec["z_star"])
            out.append(rec)
    return out


def _atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)
