"""Coefficient bundles, admissibility checks and scenario presets.

All coefficient callables are vectorised in ``x``. Measure arguments are a
:class:`~mfcontagion.measures.SubProbGrid` (FEM), an
:class:`~mfcontagion.measures.AtomicSubProb` (particles) or ``None`` when the
bundle declares itself ``measure_free``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Optional

import numpy as np
from scipy import special, stats

from .measures import AtomicSubProb, Grid1D, SubProbGrid, moment

__all__ = [
    "CoefficientBundle",
    "ScenarioConfig",
    "bailout_coefficients",
    "scenario_bailout",
    "gamma_init",
    "gaussian_init",
    "sigmas_from_correlation",
    "validate",
    "PRESETS",
]

GAMMA_SHAPE = 6.0
GAMMA_SCALE = 1.0 / 60.0


@dataclass(frozen=True)
class CoefficientBundle:
    """Model functions of a controlled killed McKean-Vlasov system.

    ``b(t, x, nu, g)`` and ``f(t, x, nu, g)`` take the control ``g`` as an
    array broadcastable against ``x``; ``sigma``, ``sigma0``, ``alpha`` and
    ``lam`` take ``(t, x, nu)``; ``psi`` maps a measure to a scalar.

    The optional derivative hooks are only needed for exact policy
    gradients: ``db_dg`` and ``df_dg`` are partial derivatives in ``g``,
    ``psi_grad(nu)`` is the gradient of ``psi`` with respect to the nodal
    values of a grid measure.
    """

    b: Callable
    sigma: Callable
    sigma0: Callable
    alpha: Callable
    lam: Callable
    f: Callable
    psi: Callable
    T: float
    init: Callable[[Grid1D], SubProbGrid]
    control_set_lo: float = 0.0
    control_set_hi: Optional[float] = None
    kinks: tuple = ()
    measure_free: bool = False
    db_dg: Optional[Callable] = None
    df_dg: Optional[Callable] = None
    psi_grad: Optional[Callable] = None
    init_sampler: Optional[Callable] = None
    x_lo: float = -1.0
    x_hi: float = 1.0
    name: str = "custom"
    params: Mapping[str, Any] = field(default_factory=dict)

    def replace(self, **changes) -> "CoefficientBundle":
        return dataclasses.replace(self, **changes)

    def grid(self, n: int) -> Grid1D:
        return Grid1D(self.x_lo, self.x_hi, n)

    def diffusion(self, t, x, nu) -> np.ndarray:
        """``a = (sigma^2 + sigma0^2) / 2``."""
        return 0.5 * (np.asarray(self.sigma(t, x, nu)) ** 2 + np.asarray(self.sigma0(t, x, nu)) ** 2)

    def project_control(self, g):
        g = np.maximum(g, self.control_set_lo)
        if self.control_set_hi is not None:
            g = np.minimum(g, self.control_set_hi)
        return g


# --------------------------------------------------------------------------
# initial laws
# --------------------------------------------------------------------------


def gamma_init(k: float, scale: float, grid: Grid1D) -> SubProbGrid:
    """Gamma(k, scale) density sampled at the interior nodes of ``grid``.

    The nodal values are rescaled so that the piecewise-linear density
    carries exactly the gamma mass of the window ``[x_lo, x_hi]``.
    """
    if k <= 0 or scale <= 0:
        raise ValueError("gamma shape and scale must be positive")
    x = grid.interior
    c = np.zeros_like(x)
    pos = x > 0 if k < 1 else x >= 0
    xp = x[pos]
    with np.errstate(divide="ignore"):
        logpdf = special.xlogy(k - 1.0, xp) - xp / scale - special.gammaln(k) - k * np.log(scale)
    c[pos] = np.exp(logpdf)
    target = stats.gamma.cdf(grid.x_hi, k, scale=scale) - stats.gamma.cdf(max(grid.x_lo, 0.0), k, scale=scale)
    raw = grid.h * c.sum()
    if raw > 0:
        c *= target / raw
    c /= max(grid.h * c.sum(), 1.0)  # round-off guard
    return SubProbGrid(grid, c)


def gaussian_init(mean: float, std: float, grid: Grid1D, mass: float = 1.0) -> SubProbGrid:
    """Normal density of total ``mass`` sampled at the nodes (no renormalisation)."""
    c = mass * stats.norm.pdf(grid.interior, loc=mean, scale=std)
    total = grid.h * c.sum()
    if total > 1.0:
        c /= total
    return SubProbGrid(grid, c)


# --------------------------------------------------------------------------
# the bailout model
# --------------------------------------------------------------------------


def _const(value: float) -> Callable:
    def coef(t, x, nu):
        return np.full(np.shape(x), value, dtype=float)

    return coef


def bailout_coefficients(alpha: float, lam0: float, sigma: float, sigma0: float, w: float,
                         T: float = 1.0, k: float = GAMMA_SHAPE, scale: float = GAMMA_SCALE,
                         init: Optional[Callable[[Grid1D], SubProbGrid]] = None,
                         init_sampler: Optional[Callable] = None) -> CoefficientBundle:
    """Bailout model without positivity checks.

    Drift ``b = g``, intensity ``lam0 * max(-x, 0)``, running cost ``w*g``,
    terminal cost equal to the loss and control set ``[0, inf)``. Zero
    parameters are allowed here, which gives degenerate variants (no
    killing, no contagion, no noise) used by the oracles.
    """
    for name, v in (("alpha", alpha), ("lam0", lam0), ("sigma", sigma), ("sigma0", sigma0), ("w", w), ("T", T)):
        if not np.isfinite(v) or v < 0:
            raise ValueError(f"{name} must be finite and nonnegative, got {v}")

    def b(t, x, nu, g):
        return np.broadcast_to(np.asarray(g, dtype=float), np.broadcast_shapes(np.shape(x), np.shape(g))).copy()

    def db_dg(t, x, nu, g):
        return np.ones(np.broadcast_shapes(np.shape(x), np.shape(g)))

    def lam(t, x, nu):
        return lam0 * np.maximum(-np.asarray(x, dtype=float), 0.0)

    def f(t, x, nu, g):
        return w * np.broadcast_to(np.asarray(g, dtype=float), np.broadcast_shapes(np.shape(x), np.shape(g)))

    def df_dg(t, x, nu, g):
        return np.full(np.broadcast_shapes(np.shape(x), np.shape(g)), float(w))

    def psi(nu):
        return 1.0 - nu.mass

    def psi_grad(nu):
        return np.full(nu.grid.n, -nu.grid.h)

    if init is None:
        def init(grid):
            return gamma_init(k, scale, grid)

        def init_sampler(rng, size):
            return rng.gamma(k, scale, size=size)

    return CoefficientBundle(
        b=b, sigma=_const(sigma), sigma0=_const(sigma0), alpha=_const(alpha), lam=lam, f=f, psi=psi,
        T=float(T), init=init, control_set_lo=0.0, kinks=(0.0,), measure_free=True,
        db_dg=db_dg, df_dg=df_dg, psi_grad=psi_grad, init_sampler=init_sampler,
        name="bailout",
        params=dict(alpha=alpha, lam0=lam0, sigma=sigma, sigma0=sigma0, w=w, T=T, k=k, scale=scale),
    )


def scenario_bailout(alpha: float = 1.5, lam0: float = 10.0, sigma: float = 0.1, sigma0: float = 0.1,
                     w: float = 5.0, T: float = 1.0, k: float = GAMMA_SHAPE,
                     scale: float = GAMMA_SCALE) -> CoefficientBundle:
    """Bailout preset; every parameter must be strictly positive."""
    for name, v in (("alpha", alpha), ("lam0", lam0), ("sigma", sigma), ("sigma0", sigma0), ("w", w),
                    ("T", T), ("k", k), ("scale", scale)):
        if not (np.isfinite(v) and v > 0):
            raise ValueError(f"{name} must be positive, got {v}")
    return bailout_coefficients(alpha, lam0, sigma, sigma0, w, T=T, k=k, scale=scale)


def sigmas_from_correlation(rho: float, total_var: float = 0.04) -> tuple[float, float]:
    """``(sigma, sigma0)`` with ``sigma^2 + sigma0^2 = total_var`` and ``sigma0^2 / total_var = rho``."""
    if not (0.0 <= rho <= 1.0) or total_var <= 0:
        raise ValueError("need 0 <= rho <= 1 and total_var > 0")
    return float(np.sqrt((1.0 - rho) * total_var)), float(np.sqrt(rho * total_var))


PRESETS: dict[str, Callable[..., CoefficientBundle]] = {
    "bailout": scenario_bailout,
    "bailout-degenerate": bailout_coefficients,
}


@dataclass(frozen=True)
class ScenarioConfig:
    """Named preset plus parameter overrides, grid and seeds."""

    preset: str = "bailout"
    params: Mapping[str, float] = field(default_factory=dict)
    n: int = 128
    m: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; known: {sorted(PRESETS)}")
        if self.n < 2 or self.m < 1:
            raise ValueError("need n >= 2 and m >= 1")

    def build(self) -> CoefficientBundle:
        params = dict(self.params)
        if self.preset == "bailout-degenerate":
            defaults = dict(alpha=1.5, lam0=10.0, sigma=0.1, sigma0=0.1, w=5.0)
            defaults.update(params)
            params = defaults
        return PRESETS[self.preset](**params)


# --------------------------------------------------------------------------
# validation
# --------------------------------------------------------------------------

_BOUND = 1e6


def validate(bundle: CoefficientBundle, n_x: int = 41, n_t: int = 5) -> list[str]:
    """Check the standing assumptions on a sampling lattice.

    Returns a list of human-readable violations (empty if none were found).
    The coercivity condition on ``f`` is not checked, since the shipped
    linear-cost preset does not satisfy it.
    """
    issues: list[str] = []
    grid = bundle.grid(32)
    ts = np.linspace(0.0, bundle.T, n_t)
    xs = np.linspace(bundle.x_lo, bundle.x_hi, n_x)
    xs = np.union1d(xs, [0.0])
    try:
        nu_init = bundle.init(grid)
    except Exception as exc:  # noqa: BLE001 - report rather than crash
        issues.append(f"initial law could not be built: {exc}")
        nu_init = SubProbGrid.zero(grid)
    measures = [SubProbGrid.zero(grid), nu_init, AtomicSubProb.from_pairs([(0.1, 0.5), (-0.3, 0.25)])]
    lo = bundle.control_set_lo
    gs = [lo, lo + 1.0, lo + 10.0]

    def record(msg):
        if msg not in issues:
            issues.append(msg)

    for nu in measures:
        m2 = moment(nu, 2)
        for t in ts:
            lam = np.asarray(bundle.lam(t, xs, nu), dtype=float)
            if not np.all(np.isfinite(lam)):
                record("λ must be finite")
            if np.any(lam[xs >= 0] != 0.0):
                record("λ must vanish on x ≥ 0")
            if np.any(lam[xs < 0] <= 0.0):
                record("λ must be positive on x < 0")
            if np.any(np.abs(lam) > _BOUND * (1 + np.abs(xs) + m2)):
                record("λ violates the linear growth bound")
            for tag, coef in (("σ", bundle.sigma), ("σ0", bundle.sigma0), ("α", bundle.alpha)):
                v = np.asarray(coef(t, xs, nu), dtype=float)
                if not np.all(np.isfinite(v)) or np.any(np.abs(v) > _BOUND):
                    record(f"{tag} unbounded on domain")
            for g in gs:
                garr = np.full_like(xs, g)
                bv = np.asarray(bundle.b(t, xs, nu, garr), dtype=float)
                if not np.all(np.isfinite(bv)) or np.any(np.abs(bv) > _BOUND * (1 + np.abs(xs) + m2 + abs(g))):
                    record("b violates the linear growth bound")
                fv = np.asarray(bundle.f(t, xs, nu, garr), dtype=float)
                if not np.all(np.isfinite(fv)) or np.any(np.abs(fv) > _BOUND * (1 + xs ** 2 + m2 ** 2 + g * g)):
                    record("f violates the quadratic growth bound")
        if isinstance(nu, SubProbGrid):
            pv = float(bundle.psi(nu))
            if not np.isfinite(pv) or abs(pv) > _BOUND * (1 + m2 ** 2):
                record("ψ violates the quadratic growth bound")
    if bundle.T <= 0:
        record("horizon T must be positive")
    if bundle.control_set_hi is not None and bundle.control_set_hi < bundle.control_set_lo:
        record("control set is empty")
    return issues
