"""Bayes-optimal identification of the hidden user type.

Ground truth for the two-mode Gaussian population: exact posteriors under the
deterministic choice model, the single-pair error law
``1/4 + arcsin(rho) / (2 pi)``, and Monte-Carlo estimates for longer contexts.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .numcore import as_tensor
from .synthdata import PopulationSpec, PreferencePair, TieError, reward_set, sample_features

MC_CHUNK = 50_000


@dataclass(frozen=True)
class Posterior:
    probs: np.ndarray | None

    @property
    def impossible(self) -> bool:
        return self.probs is None


IMPOSSIBLE = Posterior(None)


def bayes_posterior(context: Sequence[PreferencePair], latent_count: int = 2, family: str = "gaussian2d") -> Posterior:
    """Posterior over discrete latents under a uniform prior.

    Each context pair contributes the indicator that its winner beats its
    loser under latent ``k``.
    """
    like = np.ones(latent_count)
    for pair in context:
        w = np.asarray(pair.winner, dtype=np.float64).reshape(1, -1)
        l = np.asarray(pair.loser, dtype=np.float64).reshape(1, -1)
        d = (reward_set(w, family, latent_count) - reward_set(l, family, latent_count))[0]
        if (d == 0).any():
            raise TieError("tie inside a context indicator")
        like *= d > 0
    if like.sum() == 0:
        return IMPOSSIBLE
    return Posterior(like / like.sum())


def bayes_posterior_batch(winner_scores: np.ndarray, loser_scores: np.ndarray, latent_count: int = 2,
                          family: str = "gaussian2d") -> tuple[np.ndarray, np.ndarray]:
    """Vectorised posterior for ``(trials, n_context, score_dim)`` inputs.

    Returns ``(probs, impossible)``; rows flagged impossible hold zeros.
    """
    d = reward_set(winner_scores, family, latent_count) - reward_set(loser_scores, family, latent_count)
    if (d == 0).any():
        raise TieError("tie inside a context indicator")
    like = (d > 0).all(axis=1).astype(np.float64)
    total = like.sum(axis=-1, keepdims=True)
    impossible = total[:, 0] == 0
    probs = np.divide(like, total, out=np.zeros_like(like), where=total > 0)
    return probs, impossible


def bayes_classify(posterior: Posterior, rng: np.random.Generator) -> int:
    if posterior.impossible:
        raise ValueError("cannot classify an impossible posterior")
    p = posterior.probs
    best = np.flatnonzero(p == p.max())
    return int(best[0]) if len(best) == 1 else int(rng.choice(best))


def classify_batch(scores: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Row-wise argmax with uniformly random tie-breaking."""
    noise = rng.random(scores.shape)
    top = scores == scores.max(axis=-1, keepdims=True)
    return np.where(top, noise, -1.0).argmax(axis=-1)


def closed_form_error(rho: float) -> float:
    if abs(rho) > 1:
        raise ValueError("|rho| must be <= 1")
    return 0.25 + math.asin(rho) / (2 * math.pi)


def _gaussian_spec(rho: float) -> PopulationSpec:
    return PopulationSpec(family="gaussian2d", rho=rho)


def labelled_pairs(rho: float, z: np.ndarray, n: int, rng: np.random.Generator):
    """``n`` pairs per trial labelled by the per-trial latent ``z``: (winners, losers)."""
    spec = _gaussian_spec(rho)
    t = len(z)
    a = sample_features(spec, t * n, rng)[0].reshape(t, n, 2)
    b = sample_features(spec, t * n, rng)[0].reshape(t, n, 2)
    ra = np.where(z[:, None] == 0, a[..., 0], a[..., 1])
    rb = np.where(z[:, None] == 0, b[..., 0], b[..., 1])
    if (ra == rb).any():
        raise TieError("tied pair")
    first = (ra > rb)[..., None]
    return np.where(first, a, b), np.where(first, b, a)


def _mc_chunk(rho: float, n: int, n_context: int, seed: int, chunk: int) -> int:
    rng = np.random.default_rng([seed, chunk])
    z = rng.integers(0, 2, size=n)
    while True:
        try:
            w, l = labelled_pairs(rho, z, n_context, rng)
            break
        except TieError:
            continue
    probs, impossible = bayes_posterior_batch(w, l, 2)
    assert not impossible.any()
    guess = classify_batch(probs, rng)
    return int((guess != z).sum())


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("PREFNP_THREADS", "1")))
    except ValueError:
        return 1


def mc_error_estimate(rho: float, n_trials: int, n_context: int = 1, rng: np.random.Generator | int = 0) -> tuple[float, float]:
    """Monte-Carlo Bayes misclassification rate and its binomial standard error.

    Trials run in fixed-size chunks with their own derived streams, so the
    estimate does not depend on the worker count.
    """
    if n_trials < 1 or n_context < 1:
        raise ValueError("n_trials and n_context must be positive")
    seed = int(rng.integers(2**63)) if isinstance(rng, np.random.Generator) else int(rng)
    sizes = [MC_CHUNK] * (n_trials // MC_CHUNK)
    if n_trials % MC_CHUNK:
        sizes.append(n_trials % MC_CHUNK)
    jobs = [(rho, s, n_context, seed, i) for i, s in enumerate(sizes)]
    with ThreadPoolExecutor(worker_count()) as ex:
        mistakes = sum(ex.map(lambda a: _mc_chunk(*a), jobs))
    p = mistakes / n_trials
    return p, math.sqrt(p * (1 - p) / n_trials)


def identify_latents(model, ctx_w: np.ndarray, ctx_l: np.ndarray, probe1: np.ndarray, probe2: np.ndarray,
                     probe_s1: np.ndarray, probe_s2: np.ndarray, latent_count: int, family: str,
                     rng: np.random.Generator) -> np.ndarray:
    """Latent each context points the model to, by majority vote on probe pairs.

    The model's predicted winner on each probe pair is compared with the
    choice every vertex latent would make; the latent agreeing most often is
    returned, ties broken at random.
    """
    batch = {"winners": as_tensor(probe1), "losers": as_tensor(probe2), "ctx_w": as_tensor(ctx_w), "ctx_l": as_tensor(ctx_l)}
    with torch.no_grad():
        first_wins = model.margin(batch).numpy() > 0
    truth = reward_set(probe_s1, family, latent_count) > reward_set(probe_s2, family, latent_count)
    agree = (truth == first_wins[..., None]).sum(axis=1)
    return classify_batch(agree, rng)


def np_identification_error(model, rho: float, n_trials: int, seed: int, n_probe: int = 20) -> tuple[float, float]:
    rng = np.random.default_rng(seed)
    z = rng.integers(0, 2, size=n_trials)
    w, l = labelled_pairs(rho, z, 1, rng)
    spec = _gaussian_spec(rho)
    p1 = sample_features(spec, n_trials * n_probe, rng)[0].reshape(n_trials, n_probe, 2)
    p2 = sample_features(spec, n_trials * n_probe, rng)[0].reshape(n_trials, n_probe, 2)
    guess = identify_latents(model, w, l, p1, p2, p1, p2, 2, "gaussian2d", rng)
    err = float((guess != z).mean())
    return err, math.sqrt(err * (1 - err) / n_trials)


def np_vs_bayes_curve(model, rho_grid: Sequence[float], n_trials: int, seed: int = 0, rho_train: float | None = None,
                      n_probe: int = 20) -> list[dict]:
    """Single-pair identification error of a trained NP-BTL model next to the Bayes error."""
    rows = []
    for i, rho in enumerate(rho_grid):
        err, se = np_identification_error(model, rho, n_trials, seed + 7919 * i, n_probe)
        rows.append({
            "rho_train": rho_train,
            "rho_eval": rho,
            "n_context": 1,
            "np_error": err,
            "bayes_error": closed_form_error(rho),
            "stderr": se,
            "n_trials": n_trials,
        })
    return rows

