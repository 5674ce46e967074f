"""Seeding and worker-pool helpers."""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.random import SeedSequence


def derive_seed(seed, *keys: int) -> SeedSequence:
    """Deterministic child stream ``(seed, keys...)``; independent for distinct key tuples."""
    if isinstance(seed, SeedSequence):
        return SeedSequence(seed.entropy, spawn_key=tuple(seed.spawn_key) + tuple(int(k) for k in keys))
    return SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))


def seed_repr(ss: SeedSequence) -> dict:
    return {"entropy": int(ss.entropy), "spawn_key": [int(k) for k in ss.spawn_key]}


def rng_from(seed, *keys: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *keys))


def pmap(fn: Callable, items: Iterable, workers: int = 1) -> list:
    """Ordered map, optionally over a joblib process pool.

    Results come back in input order, so reductions done by the caller are
    independent of the worker count.
    """
    items = list(items)
    if workers is None or workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    from joblib import Parallel, delayed

    return Parallel(n_jobs=workers)(delayed(fn)(it) for it in items)


def mean_stderr(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return float("nan"), float("nan")
    if v.size == 1:
        return float(v[0]), 0.0
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(v.size))
