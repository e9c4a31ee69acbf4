"""Independent reference computations used as second routes in the tests.

Nothing here imports the implementation under test beyond plain data containers.
"""

from __future__ import annotations

from decimal import Decimal, getcontext

import numpy as np

getcontext().prec = 50


def alpha_bar_decimal(T: int, beta_start: float, beta_end: float) -> list[Decimal]:
    """Cumulative products of (1 - beta) in 50-digit decimal arithmetic."""
    lo, hi = Decimal(beta_start), Decimal(beta_end)
    out, acc = [], Decimal(1)
    for k in range(T):
        beta = lo if T == 1 else lo + (hi - lo) * Decimal(k) / Decimal(T - 1)
        acc *= 1 - beta
        out.append(acc)
    return out


def karras_sigma_decimal(i: int, T: int, sigma_min: float, sigma_max: float, rho: float) -> Decimal:
    inv = 1 / Decimal(rho)
    lo = Decimal(sigma_min) ** inv
    hi = Decimal(sigma_max) ** inv
    base = hi + (1 - Decimal(i) / Decimal(T)) * (lo - hi)
    return base ** Decimal(rho)


def brute_force_argmin(keys: np.ndarray, query: np.ndarray) -> tuple[int, float]:
    """Row-by-row scan in Python floats; strict '<' keeps the lowest index on ties."""
    q = [float(v) for v in np.asarray(query, dtype=np.float32)]
    best, best_d = -1, float("inf")
    for j, row in enumerate(np.asarray(keys, dtype=np.float32)):
        d = 0.0
        for a, b in zip(row.tolist(), q):
            diff = a - b
            d += diff * diff
        if d < best_d:
            best, best_d = j, d
    return best, best_d


def sequential_argmin(keys: np.ndarray, query: np.ndarray) -> tuple[int, float]:
    """Same scan vectorized over keys: a running sum over dimensions, first minimum wins."""
    diff = np.asarray(keys, dtype=np.float32).astype(np.float64) - np.asarray(query, dtype=np.float32).astype(np.float64)
    dist = np.cumsum(diff * diff, axis=1)[:, -1]
    best = int(np.flatnonzero(dist == dist.min())[0])
    return best, float(dist[best])


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x`` by central differences over every coordinate."""
    x = np.array(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def gaussian_vp_eps(x, abar: float, mu: float, s: float):
    """Optimal noise predictor for a N(mu, s^2) target, derived from Tweedie's formula."""
    var = abar * s * s + 1.0 - abar
    score = -(np.asarray(x) - np.sqrt(abar) * mu) / var
    return -np.sqrt(1.0 - abar) * score


def gaussian_ve_denoiser(x, sigma: float, mu: float, s: float):
    """Posterior mean E[a | a + sigma * eps = x] for a ~ N(mu, s^2)."""
    var = s * s + sigma * sigma
    return np.asarray(x) + sigma * sigma * (-(np.asarray(x) - mu) / var)
