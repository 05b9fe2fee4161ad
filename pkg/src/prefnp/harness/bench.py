"""Wall-clock scaling of the context encoder and the reward decoder."""

from __future__ import annotations

import time
from typing import Sequence

import numpy as np
import torch

from ..numcore import as_tensor
from ..rewards import NPBTLModel


def _timed(fn, repeats: int) -> float:
    fn()  # warm-up, discarded
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def bench_scaling(model: NPBTLModel, nc_grid: Sequence[int], nt: int = 20, repeats: int = 7,
                  batch: int = 8, seed: int = 0) -> list[dict]:
    """Median seconds for encode, decode and encode+decode at each context size."""
    rng = np.random.default_rng(seed)
    d = model.config.option_dim
    y = as_tensor(rng.standard_normal((batch, 2 * nt, d)))
    rows = []
    with torch.no_grad():
        for nc in nc_grid:
            cw = as_tensor(rng.standard_normal((batch, nc, d)))
            cl = as_tensor(rng.standard_normal((batch, nc, d)))
            z = model.encode(cw, cl)
            enc = _timed(lambda: model.encode(cw, cl), repeats)
            dec = _timed(lambda: model.decode(y, z), repeats)
            tot = _timed(lambda: model.decode(y, model.encode(cw, cl)), repeats)
            rows.append({"n_context": int(nc), "n_target": nt, "batch": batch,
                         "encode_seconds": enc, "decode_seconds": dec, "total_seconds": tot})
    return rows


def linear_fit(x: Sequence[float], y: Sequence[float]) -> tuple[float, float, float]:
    """Least-squares ``y = a + b x``; returns ``(a, b, r_squared)``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    b, a = np.polyfit(x, y, 1)
    resid = y - (a + b * x)
    ss_tot = ((y - y.mean()) ** 2).sum()
    r2 = 1.0 - (resid ** 2).sum() / ss_tot if ss_tot > 0 else 1.0
    return float(a), float(b), float(r2)
