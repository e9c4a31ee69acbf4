"""Pure numpy versions of the compiled kernels, used when the extension is unavailable."""

from __future__ import annotations

import numpy as np


def l2_argmin(keys: np.ndarray, query: np.ndarray) -> tuple[int, float]:
    """Index and squared distance of the nearest key; ties go to the lowest index."""
    if query.shape[0] != keys.shape[1]:
        raise ValueError(f"query has dimension {query.shape[0]}, keys have {keys.shape[1]}")
    if keys.shape[0] == 0:
        raise ValueError("empty key set")
    diff = keys.astype(np.float64) - query.astype(np.float64)
    dist = np.einsum("ij,ij->i", diff, diff)
    best = int(np.argmin(dist))
    return best, float(dist[best])


def l2_argmin_many(keys: np.ndarray, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if queries.shape[1] != keys.shape[1]:
        raise ValueError(f"queries have dimension {queries.shape[1]}, keys have {keys.shape[1]}")
    if keys.shape[0] == 0:
        raise ValueError("empty key set")
    idx = np.empty(len(queries), dtype=np.int64)
    dist = np.empty(len(queries), dtype=np.float64)
    for q, query in enumerate(queries):
        idx[q], dist[q] = l2_argmin(keys, query)
    return idx, dist


def dense_forward(
    x: np.ndarray, weight: np.ndarray, bias: np.ndarray, activate: bool, residual: bool
) -> np.ndarray:
    if weight.shape[1] != x.shape[1] or bias.shape[0] != weight.shape[0]:
        raise ValueError("dense layer shape mismatch")
    if residual and weight.shape[0] != weight.shape[1]:
        raise ValueError("residual connection needs equal widths")
    out = x @ weight.T + bias
    if activate:
        with np.errstate(over="ignore"):
            out = out / (1.0 + np.exp(-out))
    if residual:
        out += x
    return out
