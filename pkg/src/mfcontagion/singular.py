"""Regularised approximations of absorption at zero.

The killing intensity ``lam0 * max(-x, 0)`` is pushed up along an
increasing sequence of scales. For each scale the loss paths are computed on
shared common-noise paths, so they can be compared path by path. Absorption
itself is never solved directly; only the monotone family and its limit
diagnostics are produced.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ._util import pmap
from .errors import ConvergenceError
from .fem import MC_CHUNK, evolve_batch, evolve_spde
from .measures import Grid1D
from .model import CoefficientBundle
from .particle import NoisePath, kill_gap_stats, noise_paths, with_intensity

__all__ = [
    "LossPathFamily",
    "MinimalIteration",
    "MonotoneLimit",
    "intensity_sweep",
    "minimal_iteration",
    "monotone_limit",
    "write_family_csv",
]

MONOTONE_TOL = 1e-3


@dataclass
class LossPathFamily:
    """Loss paths ``loss[i, j, k]`` for intensity scale ``i``, noise path ``j`` and time step ``k``."""

    lam0: np.ndarray
    times: np.ndarray
    loss: np.ndarray
    seed: object = 0
    kill_gap: list = field(default_factory=list)

    def __post_init__(self):
        self.lam0 = np.asarray(self.lam0, dtype=float)
        self.loss = np.asarray(self.loss, dtype=float)
        if self.loss.ndim == 2:
            self.loss = self.loss[:, None, :]
        if self.loss.shape[0] != self.lam0.size or self.loss.shape[-1] != self.times.size:
            raise ValueError("loss array does not match the intensity scales and time grid")

    @property
    def n_paths(self) -> int:
        return self.loss.shape[1]

    def mean_terminal_loss(self) -> np.ndarray:
        return self.loss[:, :, -1].mean(axis=1)

    def monotonicity_violation(self) -> float:
        """Largest drop of a loss path when the intensity scale increases (0 if monotone)."""
        if self.lam0.size < 2:
            return 0.0
        return float(max(0.0, np.max(self.loss[:-1] - self.loss[1:])))


def _sweep_chunk(args):
    bundle, grid, noises = args
    return np.stack([p.loss for p in evolve_batch(bundle, None, grid, noises)])


def intensity_sweep(scenario: CoefficientBundle, lam0_list: Sequence[float], grid: Grid1D, m: int, K: int,
                    seed=0, *, N: Optional[int] = 256, gap_reps: int = 40, gap_m: int = 128,
                    workers: int = 1) -> LossPathFamily:
    """FEM loss paths for every intensity scale on the same ``K`` noise paths.

    With ``N`` set, particle kill-gap statistics (``gap_reps`` runs of ``N``
    particles with ``gap_m`` steps) are attached as well. Noise path ``j``
    uses the seed ``(seed, j)`` for every scale.
    """
    lam0 = np.asarray(lam0_list, dtype=float)
    if lam0.ndim != 1 or lam0.size == 0:
        raise ValueError("need a non-empty list of intensity scales")
    if np.any(np.diff(lam0) <= 0):
        raise ValueError("intensity scales must be strictly increasing")
    noises = noise_paths(K, m, scenario.T, seed)
    chunks = [noises[i:i + MC_CHUNK] for i in range(0, K, MC_CHUNK)]
    loss = np.empty((lam0.size, K, m + 1))
    for i, l0 in enumerate(lam0):
        b = with_intensity(scenario, float(l0))
        parts = pmap(_sweep_chunk, [(b, grid, ch) for ch in chunks], workers)
        loss[i] = np.concatenate(parts, axis=0)
    gaps = []
    if N:
        gaps = kill_gap_stats(scenario, lam0, N, gap_reps, seed=seed, m=gap_m, workers=workers)
    times = np.linspace(0.0, scenario.T, m + 1)
    return LossPathFamily(lam0=lam0, times=times, loss=loss, seed=seed, kill_gap=gaps)


def write_family_csv(family: LossPathFamily, filename) -> str:
    with open(filename, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["lam0", "path", "t", "L_t"])
        for i, l0 in enumerate(family.lam0):
            for j in range(family.n_paths):
                for t, v in zip(family.times, family.loss[i, j]):
                    wr.writerow([repr(float(l0)), j, repr(float(t)), repr(float(v))])
    return str(filename)


# --------------------------------------------------------------------------
# minimal solution by fixed-point iteration
# --------------------------------------------------------------------------


@dataclass
class MinimalIteration:
    iterates: list
    fixed_point: np.ndarray
    iterations: int
    gaps: list
    converged: bool

    @property
    def last_gap(self) -> float:
        return self.gaps[-1] if self.gaps else float("nan")

    def monotonicity_violation(self) -> float:
        worst = 0.0
        for a, b in zip(self.iterates[:-1], self.iterates[1:]):
            worst = max(worst, float(np.max(a - b)))
        return worst


def minimal_iteration(bundle: CoefficientBundle, lam0: Optional[float], grid: Grid1D, m: int,
                      noise: Optional[NoisePath] = None, tol: float = 1e-8, max_iter: int = 50) -> MinimalIteration:
    """Fixed-point iteration for the loss along one noise path, started from zero loss.

    Iterate ``j`` solves the linear Fokker-Planck problem whose contagion
    push is driven by the previous loss iterate instead of the solution's
    own loss. Stops when the sup-norm change is at most ``tol``; otherwise
    raises :class:`ConvergenceError` carrying the partial result.
    ``lam0=None`` keeps the bundle's own intensity.
    """
    if lam0 is not None:
        bundle = with_intensity(bundle, float(lam0))
    prev = np.zeros(m + 1)
    iterates = [prev]
    gaps = []
    for j in range(1, max_iter + 1):
        path = evolve_spde(bundle, None, grid, m, noise=noise, feedback=prev)
        cur = path.loss
        iterates.append(cur)
        gaps.append(float(np.max(np.abs(cur - prev))))
        prev = cur
        if gaps[-1] <= tol:
            return MinimalIteration(iterates, cur, j, gaps, True)
    res = MinimalIteration(iterates, prev, max_iter, gaps, False)
    raise ConvergenceError(f"no convergence after {max_iter} iterations (last gap {gaps[-1]:.3e})", res)


# --------------------------------------------------------------------------
# monotone limit
# --------------------------------------------------------------------------


@dataclass
class MonotoneLimit:
    limit: np.ndarray
    pair_gaps: np.ndarray
    diagnostic: float
    diagnostic_pair: tuple

    def to_dict(self) -> dict:
        return {"pair_gaps": [float(g) for g in self.pair_gaps], "diagnostic": self.diagnostic,
                "diagnostic_pair": [float(v) for v in self.diagnostic_pair]}


def monotone_limit(family: LossPathFamily, tol: float = MONOTONE_TOL) -> MonotoneLimit:
    """Limit candidate of an increasing family of loss paths.

    The candidate is the pointwise supremum over scales, made nondecreasing
    in time by a running maximum. ``pair_gaps[i]`` is the sup-norm distance
    between scales ``i`` and ``i+1``; ``diagnostic`` compares the largest
    scale with the largest one not exceeding half of it.
    """
    viol = family.monotonicity_violation()
    if viol > tol:
        raise ValueError(f"loss paths decrease by {viol:.3e} as the intensity grows (tolerance {tol:g})")
    loss = family.loss
    limit = np.maximum.accumulate(loss.max(axis=0), axis=-1)
    if family.lam0.size < 2:
        return MonotoneLimit(limit, np.zeros(0), 0.0, (family.lam0[0], family.lam0[0]))
    pair_gaps = np.max(np.abs(np.diff(loss, axis=0)), axis=(1, 2))
    top = family.lam0[-1]
    below = np.flatnonzero(family.lam0 <= top / 2 * (1 + 1e-12))
    ref = int(below[-1]) if below.size else family.lam0.size - 2
    diag = float(np.max(np.abs(loss[-1] - loss[ref])))
    return MonotoneLimit(limit, pair_gaps, diag, (float(family.lam0[ref]), float(top)))
