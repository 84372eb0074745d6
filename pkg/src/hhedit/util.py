"""Shared numerics: deterministic RNG substreams and batched categorical draws."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

# Phase tags for substream derivation.  Streams are keyed on integer paths
# (seed, sweep, phase, ...) so results never depend on thread count.
PHASE_INIT = 0
PHASE_EPSILON = 1
PHASE_IMPUTE = 2
PHASE_AUGMENT = 3
PHASE_LATENT = 4
PHASE_PARAMS = 5
PHASE_EMIT = 6


def substream(seed: int, *path: int) -> np.random.Generator:
    """Generator for a deterministic substream keyed by (seed, *path)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(x) for x in path]]))


def categorical_rows(rng: np.random.Generator, weights: np.ndarray) -> np.ndarray:
    """Draw one index per row of a nonnegative weight matrix (rows need not be normalized).

    Returns 0-based indices, shape (n,).  Raises on rows with zero total mass.
    """
    weights = np.asarray(weights, dtype=np.float64)
    cum = np.cumsum(weights, axis=-1)
    totals = cum[..., -1]
    if np.any(totals <= 0.0) or not np.all(np.isfinite(totals)):
        raise ValueError("categorical draw over a row with zero or invalid total mass")
    u = rng.random(weights.shape[:-1]) * totals
    idx = (cum < u[..., None]).sum(axis=-1)
    return np.minimum(idx, weights.shape[-1] - 1)


def categorical_logit_rows(rng: np.random.Generator, logits: np.ndarray) -> np.ndarray:
    """Row-wise categorical draw from unnormalized log weights (max-shifted)."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return categorical_rows(rng, np.exp(shifted))


def logsumexp(a: np.ndarray, axis: int = -1) -> np.ndarray:
    m = a.max(axis=axis, keepdims=True)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return np.log(np.exp(a - safe).sum(axis=axis)) + np.squeeze(safe, axis=axis)


def map_blocks(fn, items, threads: int = 1) -> list:
    """Order-preserving map; runs blocks concurrently when threads > 1.

    The decomposition into items is fixed by the caller, so outputs are
    identical for every thread count.
    """
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
