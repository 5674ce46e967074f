"""Subprobability measures on the line.

Two concrete representations are used throughout the package:

* :class:`SubProbGrid` -- a continuous, piecewise-linear density on a uniform
  grid, expanded in interior hat functions (zero at both boundary nodes);
* :class:`AtomicSubProb` -- a finite sum of weighted Dirac masses (the
  empirical measure of a particle system).

Both support total mass, loss ``1 - mass``, moments, the compensated
Wasserstein-type metric ``d_p`` and quadrature pairings against test
functions.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence, Union

import numpy as np

__all__ = [
    "Grid1D",
    "SubProbGrid",
    "AtomicSubProb",
    "QuadRule",
    "quad_rule",
    "mass_and_loss",
    "moment",
    "dist_dp",
    "wasserstein",
    "pair",
    "empirical_of",
]

MASS_TOL = 1e-12
N_QUANTILES = 4096

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(3)


@dataclass(frozen=True)
class Grid1D:
    """Uniform grid ``x_i = x_lo + i*h``, ``i = 0..n+1``, with ``n`` interior nodes."""

    x_lo: float
    x_hi: float
    n: int

    def __post_init__(self):
        if not (self.x_lo < 0.0 < self.x_hi):
            raise ValueError(f"need x_lo < 0 < x_hi, got [{self.x_lo}, {self.x_hi}]")
        if int(self.n) != self.n or self.n < 2:
            raise ValueError(f"need n >= 2 interior nodes, got {self.n}")
        object.__setattr__(self, "x_lo", float(self.x_lo))
        object.__setattr__(self, "x_hi", float(self.x_hi))
        object.__setattr__(self, "n", int(self.n))

    @property
    def h(self) -> float:
        return (self.x_hi - self.x_lo) / (self.n + 1)

    @property
    def nodes(self) -> np.ndarray:
        """All ``n + 2`` nodes including the two boundary nodes."""
        return self.x_lo + self.h * np.arange(self.n + 2)

    @property
    def interior(self) -> np.ndarray:
        return self.nodes[1:-1]


@dataclass(frozen=True, eq=False)
class SubProbGrid:
    """Density ``sum_i c_i v_i`` on ``grid`` with nonnegative nodal values ``c``."""

    grid: Grid1D
    c: np.ndarray

    def __post_init__(self):
        c = np.array(self.c, dtype=float)
        if c.shape != (self.grid.n,):
            raise ValueError(f"expected {self.grid.n} nodal values, got shape {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("nodal values must be finite")
        if np.any(c < 0.0):
            raise ValueError("nodal density values must be nonnegative")
        if self.grid.h * c.sum() > 1.0 + MASS_TOL:
            raise ValueError(f"mass {self.grid.h * c.sum()!r} exceeds 1")
        c.setflags(write=False)
        object.__setattr__(self, "c", c)

    @classmethod
    def zero(cls, grid: Grid1D) -> "SubProbGrid":
        return cls(grid, np.zeros(grid.n))

    @property
    def mass(self) -> float:
        return float(self.grid.h * self.c.sum())

    def padded(self) -> np.ndarray:
        """Nodal values on all ``n + 2`` nodes (boundary values are zero)."""
        return np.concatenate(([0.0], self.c, [0.0]))

    def density(self, x) -> np.ndarray:
        return np.interp(np.asarray(x, dtype=float), self.grid.nodes, self.padded(), left=0.0, right=0.0)

    def scaled(self, a: float) -> "SubProbGrid":
        return SubProbGrid(self.grid, a * self.c)


@dataclass(frozen=True, eq=False)
class AtomicSubProb:
    """Finite sum of point masses; weights nonnegative with total at most one."""

    locations: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        x = np.array(self.locations, dtype=float).reshape(-1)
        w = np.array(self.weights, dtype=float).reshape(-1)
        if x.shape != w.shape:
            raise ValueError("locations and weights must have the same length")
        if np.any(w < 0.0):
            raise ValueError("weights must be nonnegative")
        if w.sum() > 1.0 + MASS_TOL:
            raise ValueError(f"total weight {w.sum()!r} exceeds 1")
        x.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "locations", x)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_pairs(cls, atoms: Sequence[tuple[float, float]]) -> "AtomicSubProb":
        if len(atoms) == 0:
            return cls(np.zeros(0), np.zeros(0))
        x, w = zip(*atoms)
        return cls(np.array(x), np.array(w))

    @property
    def mass(self) -> float:
        return float(self.weights.sum())


Measure = Union[SubProbGrid, AtomicSubProb]


# --------------------------------------------------------------------------
# quadrature
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class QuadRule:
    """Three-point Gauss rule per (sub)element of a grid.

    ``elem[q]`` is the element containing point ``q``, i.e. the interval
    between nodes ``elem[q]`` and ``elem[q] + 1`` (indices into the padded
    node array). ``phi_l``/``phi_r`` are the values of the two hat functions
    living on that element.
    """

    grid: Grid1D
    x: np.ndarray
    w: np.ndarray
    elem: np.ndarray
    phi_l: np.ndarray
    phi_r: np.ndarray
    scatter: object = field(repr=False)

    @property
    def size(self) -> int:
        return self.x.size

    def interp(self, c: np.ndarray) -> np.ndarray:
        """Evaluate ``sum_j c_j v_j`` at the quadrature points; ``c`` may be batched."""
        c = np.asarray(c, dtype=float)
        cp = np.zeros(c.shape[:-1] + (c.shape[-1] + 2,))
        cp[..., 1:-1] = c
        return cp[..., self.elem] * self.phi_l + cp[..., self.elem + 1] * self.phi_r

    def interp_adjoint(self, g: np.ndarray) -> np.ndarray:
        """Transpose of :meth:`interp`: maps point values back to interior nodes."""
        g = np.asarray(g, dtype=float)
        # padded-node accumulation through a sparse (n+2) x Q matrix
        lead = g.shape[:-1]
        g2 = g.reshape(-1, g.shape[-1])
        out = np.asarray(self.scatter @ g2.T).T
        return out[:, 1:-1].reshape(lead + (self.grid.n,))


@lru_cache(maxsize=64)
def _quad_rule_cached(grid: Grid1D, kinks: tuple) -> QuadRule:
    from scipy import sparse

    nodes = grid.nodes
    h = grid.h
    xs, ws, es = [], [], []
    for e in range(grid.n + 1):
        a, b = nodes[e], nodes[e + 1]
        cuts = [a] + [k for k in kinks if a < k < b] + [b]
        for lo, hi in zip(cuts[:-1], cuts[1:]):
            half = 0.5 * (hi - lo)
            xs.append(lo + half * (_GL_NODES + 1.0))
            ws.append(half * _GL_WEIGHTS)
            es.append(np.full(3, e))
    x = np.concatenate(xs)
    w = np.concatenate(ws)
    elem = np.concatenate(es).astype(np.intp)
    phi_r = (x - nodes[elem]) / h
    phi_l = 1.0 - phi_r
    q = np.arange(x.size)
    scatter = sparse.csr_matrix(
        (np.concatenate([phi_l, phi_r]), (np.concatenate([elem, elem + 1]), np.concatenate([q, q]))),
        shape=(grid.n + 2, x.size),
    )
    for arr in (x, w, elem, phi_l, phi_r):
        arr.setflags(write=False)
    return QuadRule(grid, x, w, elem, phi_l, phi_r, scatter)


def quad_rule(grid: Grid1D, kinks: Sequence[float] = ()) -> QuadRule:
    """Quadrature points for pairings on ``grid``; elements are split at ``kinks``.

    Kinks outside the open domain are ignored. Rules are cached per grid.
    """
    ks = tuple(sorted({float(k) for k in kinks if grid.x_lo < k < grid.x_hi}))
    return _quad_rule_cached(grid, ks)


# --------------------------------------------------------------------------
# basic functionals
# --------------------------------------------------------------------------


def mass_and_loss(nu: Measure) -> tuple[float, float]:
    m = nu.mass
    return m, 1.0 - m


def pair(nu: Measure, phi: Callable[[np.ndarray], np.ndarray], kinks: Sequence[float] = ()) -> np.ndarray:
    """Integral of ``phi`` against ``nu``.

    For grid densities the integral uses :func:`quad_rule`, which is exact
    whenever ``phi`` is a polynomial of degree at most four on every
    subelement. ``phi`` may be vector valued (returning shape ``(Q, d)``).
    """
    if isinstance(nu, AtomicSubProb):
        if nu.locations.size == 0:
            vals = np.asarray(phi(np.zeros(1)))
            return np.zeros(vals.shape[1:]) if vals.ndim > 1 else 0.0
        vals = np.asarray(phi(nu.locations), dtype=float)
        return np.tensordot(nu.weights, vals, axes=(0, 0))
    rule = quad_rule(nu.grid, kinks)
    vals = np.asarray(phi(rule.x), dtype=float)
    wr = rule.w * rule.interp(nu.c)
    if vals.ndim == 0:
        return float(vals * wr.sum())
    return np.tensordot(wr, vals, axes=(0, 0))


def moment(nu: Measure, p: float = 1) -> float:
    """``M_p(nu) = (int |x|^p dnu)^(1/p)`` for ``p`` in {1, 2}."""
    if p not in (1, 2):
        raise ValueError(f"unsupported moment order p={p}; use 1 or 2")
    if isinstance(nu, AtomicSubProb):
        val = float(np.sum(nu.weights * np.abs(nu.locations) ** p))
    else:
        val = float(pair(nu, lambda x: np.abs(x) ** p, kinks=(0.0,)))
    return val ** (1.0 / p)


def empirical_of(ensemble) -> AtomicSubProb:
    """Empirical subprobability ``N^-1 sum_i I^i delta_{X^i}`` of an ensemble.

    ``ensemble`` needs ``x`` and ``alive`` arrays of equal length.
    """
    x = np.asarray(ensemble.x, dtype=float)
    alive = np.asarray(ensemble.alive, dtype=bool)
    n_part = x.size
    if n_part == 0:
        return AtomicSubProb(np.zeros(0), np.zeros(0))
    return AtomicSubProb(x[alive], np.full(int(alive.sum()), 1.0 / n_part))


# --------------------------------------------------------------------------
# distribution functions of the compensated probability measures
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class _PiecewiseCDF:
    """Right-continuous CDF that is quadratic between knots.

    On ``[knots[j], knots[j+1])``: ``F = f0[j] + a[j]*s + b[j]*s**2`` with
    ``s = x - knots[j]``; ``f0[j]`` already contains any jump at ``knots[j]``.
    Left of ``knots[0]`` the CDF is 0, from ``knots[-1]`` on it is ``f0[-1]``.
    """

    knots: np.ndarray
    f0: np.ndarray
    a: np.ndarray
    b: np.ndarray

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        j = np.searchsorted(self.knots, x, side="right") - 1
        out = np.zeros_like(x)
        inside = (j >= 0) & (j < self.knots.size - 1)
        jj = j[inside]
        s = x[inside] - self.knots[jj]
        out[inside] = self.f0[jj] + self.a[jj] * s + self.b[jj] * s * s
        out[j >= self.knots.size - 1] = self.f0[-1]
        return out

    def left_limits(self) -> np.ndarray:
        """``F(knots[j]-)`` for every knot."""
        ell = np.diff(self.knots)
        ends = self.f0[:-1] + self.a * ell + self.b * ell * ell
        return np.concatenate(([0.0], ends))

    def quantile(self, u) -> np.ndarray:
        """Generalised inverse ``inf{x : F(x) >= u}``."""
        u = np.asarray(u, dtype=float)
        fpost = np.maximum.accumulate(self.f0)
        fpre = self.left_limits()
        j = np.searchsorted(fpost, u, side="left")
        j = np.minimum(j, self.knots.size - 1)
        out = self.knots[j].astype(float)
        in_prev = (j > 0) & (fpre[j] >= u)
        jp = j[in_prev] - 1
        d = np.maximum(u[in_prev] - self.f0[jp], 0.0)
        a = self.a[jp]
        b = self.b[jp]
        disc = np.sqrt(np.maximum(a * a + 4.0 * b * d, 0.0))
        den = a + disc
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.where(den > 0.0, 2.0 * d / den, 0.0)
        ell = self.knots[jp + 1] - self.knots[jp]
        out[in_prev] = self.knots[jp] + np.clip(s, 0.0, ell)
        return out


def _compensated_cdf(nu: Measure) -> _PiecewiseCDF:
    """CDF of ``nu + (1 - nu(R)) delta_0``."""
    deficit = max(0.0, 1.0 - nu.mass)
    if isinstance(nu, AtomicSubProb):
        locs = np.concatenate([nu.locations, [0.0]])
        wts = np.concatenate([nu.weights, [deficit]])
        knots, inv = np.unique(locs, return_inverse=True)
        jumps = np.bincount(inv, weights=wts, minlength=knots.size)
        f0 = np.cumsum(jumps)
        zeros = np.zeros(knots.size - 1)
        return _PiecewiseCDF(knots, f0, zeros, zeros.copy())

    grid = nu.grid
    nodes = grid.nodes
    rho = nu.padded()
    if not np.any(np.isclose(nodes, 0.0, rtol=0.0, atol=1e-15)):
        k = np.searchsorted(nodes, 0.0)
        rho0 = np.interp(0.0, nodes, rho)
        nodes = np.insert(nodes, k, 0.0)
        rho = np.insert(rho, k, rho0)
    ell = np.diff(nodes)
    a = rho[:-1]
    b = (rho[1:] - rho[:-1]) / (2.0 * ell)
    incr = a * ell + b * ell * ell
    jumps = np.where(np.isclose(nodes, 0.0, rtol=0.0, atol=1e-15), deficit, 0.0)
    f0 = np.cumsum(jumps + np.concatenate(([0.0], incr)))
    return _PiecewiseCDF(nodes, f0, a, b)


def _w1(F1: _PiecewiseCDF, F2: _PiecewiseCDF) -> float:
    """``int |F1 - F2| dx`` computed exactly for piecewise quadratic CDFs."""
    xs = np.union1d(F1.knots, F2.knots)
    if xs.size < 2:
        return 0.0
    lo, ell = xs[:-1], np.diff(xs)
    pts = lo[:, None] + ell[:, None] * np.array([0.25, 0.5, 0.75])
    d = F1(pts) - F2(pts)
    # D(u) = e0 + e1 u + e2 u^2 on u in [-1/2, 1/2]
    e0 = d[:, 1]
    e1 = 2.0 * (d[:, 2] - d[:, 0])
    e2 = 8.0 * (d[:, 0] + d[:, 2] - 2.0 * d[:, 1])
    scale = np.abs(e0) + np.abs(e1) + np.abs(e2)
    r1 = np.full_like(e0, 0.5)
    r2 = np.full_like(e0, 0.5)
    quad = np.abs(e2) > 1e-13 * scale
    lin = ~quad & (np.abs(e1) > 1e-13 * scale)
    with np.errstate(divide="ignore", invalid="ignore"):
        disc = e1 * e1 - 4.0 * e2 * e0
        real = quad & (disc > 0.0)
        sq = np.sqrt(np.where(real, disc, 0.0))
        qq = -0.5 * (e1 + np.where(e1 >= 0.0, sq, -sq))
        ra = np.where(real, qq / e2, 0.5)
        rb = np.where(real & (qq != 0.0), e0 / qq, 0.5)
        rl = np.where(lin, -e0 / e1, 0.5)
    r1 = np.where(real, ra, np.where(lin, rl, r1))
    r2 = np.where(real, rb, r2)
    r1 = np.where((r1 > -0.5) & (r1 < 0.5), r1, 0.5)
    r2 = np.where((r2 > -0.5) & (r2 < 0.5), r2, 0.5)
    cuts = np.sort(np.stack([np.full_like(e0, -0.5), r1, r2, np.full_like(e0, 0.5)], axis=1), axis=1)
    ua, ub = cuts[:, :-1], cuts[:, 1:]
    um = 0.5 * (ua + ub)

    def D(u):
        return e0[:, None] + e1[:, None] * u + e2[:, None] * u * u

    simpson = (ub - ua) / 6.0 * (D(ua) + 4.0 * D(um) + D(ub))
    return float(np.sum(ell * np.abs(simpson).sum(axis=1)))


def _w2_steps(F1: _PiecewiseCDF, F2: _PiecewiseCDF) -> float:
    levels = np.union1d(np.maximum.accumulate(F1.f0), np.maximum.accumulate(F2.f0))
    levels = levels[(levels > 0.0) & (levels < 1.0)]
    u = np.concatenate(([0.0], levels, [1.0]))
    mid = 0.5 * (u[:-1] + u[1:])
    diff = F1.quantile(mid) - F2.quantile(mid)
    return float(np.sqrt(np.sum(np.diff(u) * diff * diff)))


def wasserstein(nu1: Measure, nu2: Measure, p: int = 1) -> float:
    """``W_p`` between the probability measures obtained by compensating at zero."""
    F1, F2 = _compensated_cdf(nu1), _compensated_cdf(nu2)
    if p == 1:
        return _w1(F1, F2)
    if p == 2:
        if isinstance(nu1, AtomicSubProb) and isinstance(nu2, AtomicSubProb):
            return _w2_steps(F1, F2)
        u = (np.arange(N_QUANTILES) + 0.5) / N_QUANTILES
        diff = F1.quantile(u) - F2.quantile(u)
        return float(np.sqrt(np.mean(diff * diff)))
    raise ValueError(f"unsupported order p={p}; use 1 or 2")


def dist_dp(nu1: Measure, nu2: Measure, p: int = 1) -> float:
    """Metric ``d_p = W_p(mu1, mu2) + |nu1(R) - nu2(R)|``, ``mu_i = nu_i + (1 - nu_i(R)) delta_0``."""
    return wasserstein(nu1, nu2, p) + abs(nu1.mass - nu2.mass)
