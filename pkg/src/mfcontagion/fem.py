"""Finite-element solver for the stochastic Fokker-Planck equation of the
killed mean-field system.

The density of the alive population is expanded in interior hat functions,
``rho = sum_j c_j v_j``. Testing the equation against ``v_i`` gives

    M dc = A(t, nu, u) c dt + B(t, nu) c dW0,

with the consistent mass matrix ``M = (h/6) tridiag(1, 4, 1)``,

    A_ij = int beta v_j v_i' - int (a v_j)' v_i' - int lam v_j v_i,
    B_ij = int sigma0 v_j v_i',

``beta = b(t, x, nu, u) - alpha <nu, lam>`` and ``a = (sigma^2 + sigma0^2)/2``.
Time stepping is semi-implicit,

    (M - dt A_k) c_{k+1} = M c_k + dW0_k B_k c_k,

where ``A_k`` and ``B_k`` are assembled from the clipped measure ``nu_k``.
The moments ``p = M c`` are clipped to a nonnegative vector of total
weight at most one and converted back to a nodal density.

Everything below is batched over independent common-noise paths: nodal
arrays have shape ``(K, n)``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from ._util import mean_stderr, pmap
from .errors import NumericalBlowup
from .measures import Grid1D, QuadRule, SubProbGrid, quad_rule
from .model import CoefficientBundle
from .particle import NoisePath, noise_paths
from .tridiag import TriDiag, thomas_solve

__all__ = [
    "TriDiag",
    "Assembler",
    "assemble_A",
    "assemble_noise",
    "thomas_solve",
    "mass_matrix",
    "semi_implicit_step",
    "clip_normalize",
    "density_from_moments",
    "SpdePath",
    "evolve_spde",
    "evolve_batch",
    "spde_cost",
    "mc_cost",
    "write_heatmap_csv",
    "write_loss_csv",
]

MC_CHUNK = 16


# --------------------------------------------------------------------------
# assembly
# --------------------------------------------------------------------------


class Assembler:
    """Precomputed element integrals for one grid and quadrature rule.

    Each of the four local entries of an element (left-left, right-right,
    left-right and right-left) is a fixed linear functional of the point
    values of ``beta - a'``, ``a`` and ``lam``. This makes assembly and its
    adjoint two cheap reductions.
    """

    def __init__(self, grid: Grid1D, kinks: Sequence[float] = ()):
        self.grid = grid
        self.rule: QuadRule = quad_rule(grid, kinks)
        r = self.rule
        h = grid.h
        w, pl, pr = r.w, r.phi_l, r.phi_r
        # order: LL (diag of left node), RR (diag of right node), LR (upper), RL (lower)
        self.c_beta = np.stack([-w * pl / h, w * pr / h, -w * pr / h, w * pl / h])
        self.c_a = np.stack([-w / h**2, -w / h**2, w / h**2, w / h**2])
        self.c_lam = np.stack([-w * pl * pl, -w * pr * pr, -w * pl * pr, -w * pl * pr])
        starts = np.flatnonzero(np.r_[True, np.diff(r.elem) != 0])
        if starts.size != grid.n + 1:
            raise AssertionError("every element must carry quadrature points")
        self.starts = starts

    def _reduce(self, field: np.ndarray) -> np.ndarray:
        """Sum point values per element: ``(..., Q) -> (..., n + 1)``."""
        return np.add.reduceat(field, self.starts, axis=-1)

    def _to_tridiag(self, LL, RR, LR, RL) -> TriDiag:
        lead = LL.shape[:-1]
        n = self.grid.n
        D = np.zeros(lead + (n + 2,))
        D[..., :-1] += LL
        D[..., 1:] += RR
        return TriDiag(RL[..., 1:-1].copy(), D[..., 1:-1].copy(), LR[..., 1:-1].copy())

    def drift_matrix(self, beta, a, da, lam) -> TriDiag:
        """``A`` from point values of ``beta``, ``a``, ``a'`` and ``lam`` (broadcast to ``(..., Q)``)."""
        s = np.asarray(beta) - np.asarray(da)
        ents = [self._reduce(s * self.c_beta[t] + a * self.c_a[t] + lam * self.c_lam[t]) for t in range(4)]
        return self._to_tridiag(*ents)

    def noise_matrix(self, sigma0) -> TriDiag:
        ents = [self._reduce(sigma0 * self.c_beta[t]) for t in range(4)]
        return self._to_tridiag(*ents)

    def beta_adjoint(self, A_bar: TriDiag) -> np.ndarray:
        """Gradient of ``<A_bar, A>`` (entrywise) with respect to the point values of ``beta``."""
        lead = A_bar.diag.shape[:-1]
        n = self.grid.n
        z = np.zeros(lead + (1,))
        D = np.concatenate([z, A_bar.diag, z], axis=-1)
        U = np.concatenate([z, A_bar.upper, z], axis=-1)
        Lo = np.concatenate([z, A_bar.lower, z], axis=-1)
        e = self.rule.elem
        ent = (D[..., e], D[..., e + 1], U[..., e], Lo[..., e])
        return sum(ent[t] * self.c_beta[t] for t in range(4))

    def pair_points(self, dens: np.ndarray, values) -> np.ndarray:
        """``<nu, phi>`` per path from nodal densities ``(..., n)`` and point values of ``phi``."""
        return np.sum(self.rule.w * self.rule.interp(dens) * values, axis=-1)


@lru_cache(maxsize=32)
def _assembler(grid: Grid1D, kinks: tuple) -> Assembler:
    return Assembler(grid, kinks)


def get_assembler(grid: Grid1D, kinks: Sequence[float] = ()) -> Assembler:
    ks = tuple(sorted({float(k) for k in kinks if grid.x_lo < k < grid.x_hi}))
    return _assembler(grid, ks)


def _diffusion_fields(bundle: CoefficientBundle, t: float, x: np.ndarray, nu):
    a = np.broadcast_to(np.asarray(bundle.diffusion(t, x, nu), dtype=float), x.shape)
    eps = 1e-6 * (1.0 + np.abs(x))
    da = (np.asarray(bundle.diffusion(t, x + eps, nu)) - np.asarray(bundle.diffusion(t, x - eps, nu))) / (2 * eps)
    return a, np.broadcast_to(da, x.shape)


def assemble_A(t: float, nu: SubProbGrid, u, bundle: CoefficientBundle) -> TriDiag:
    """Drift-diffusion-killing matrix for one measure; ``u`` holds controls at the quadrature points."""
    asm = get_assembler(nu.grid, bundle.kinks)
    x = asm.rule.x
    nu_arg = None if bundle.measure_free else nu
    lam = np.broadcast_to(np.asarray(bundle.lam(t, x, nu_arg), dtype=float), x.shape)
    ell = float(asm.pair_points(nu.c, lam))
    u = np.broadcast_to(np.asarray(u, dtype=float), x.shape)
    beta = bundle.b(t, x, nu_arg, u) - bundle.alpha(t, x, nu_arg) * ell
    a, da = _diffusion_fields(bundle, t, x, nu_arg)
    return asm.drift_matrix(beta, a, da, lam)


def assemble_noise(t: float, nu: SubProbGrid, bundle: CoefficientBundle) -> TriDiag:
    asm = get_assembler(nu.grid, bundle.kinks)
    x = asm.rule.x
    nu_arg = None if bundle.measure_free else nu
    return asm.noise_matrix(np.broadcast_to(np.asarray(bundle.sigma0(t, x, nu_arg), dtype=float), x.shape))


# --------------------------------------------------------------------------
# time stepping and clipping
# --------------------------------------------------------------------------


def mass_matrix(grid: Grid1D) -> TriDiag:
    h, n = grid.h, grid.n
    off = np.full(n - 1, h / 6.0)
    return TriDiag(off, np.full(n, 4.0 * h / 6.0), off.copy())


def step_coeffs(c: np.ndarray, A: TriDiag, B: TriDiag, dW0, dt: float, M: TriDiag,
                check_dominance: bool = False) -> np.ndarray:
    """One step ``(M - dt A) c' = M c + dW0 B c`` on nodal coefficients (batched)."""
    dW0 = np.asarray(dW0, dtype=float)
    dWc = dW0[..., None] if dW0.ndim else dW0
    rhs = M.matvec(c) + dWc * B.matvec(c)
    return thomas_solve(M.lower - dt * A.lower, M.diag - dt * A.diag, M.upper - dt * A.upper, rhs,
                        check_dominance=check_dominance)


def semi_implicit_step(p: np.ndarray, A: TriDiag, B: TriDiag, dW0, dt: float, grid: Grid1D,
                       check_dominance: bool = False) -> np.ndarray:
    """Advance the moment vector ``p = M c`` by one step of the scheme.

    Equivalent to ``p' = M (M - dt A)^{-1} (p + dW0 B M^{-1} p)``.
    """
    M = mass_matrix(grid)
    c = M.solve(np.asarray(p, dtype=float))
    return M.matvec(step_coeffs(c, A, B, dW0, dt, M, check_dominance=check_dominance))


def clip_normalize(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Weights ``(p)_+ / max(r, 1)`` with ``r = sum (p)_+``; batched over leading axes."""
    q = np.maximum(np.asarray(p, dtype=float), 0.0)
    r = q.sum(axis=-1)
    return q / np.maximum(r, 1.0)[..., None], r


def _density_parts(weights: np.ndarray, grid: Grid1D):
    """Nodal density from moment weights plus the intermediates needed by the adjoint."""
    M = mass_matrix(grid)
    h = grid.h
    chat = M.solve(weights)
    pos = np.maximum(chat, 0.0)
    floored = np.any(chat < 0.0, axis=-1)
    raw_mass = h * chat.sum(axis=-1)
    pos_mass = h * pos.sum(axis=-1)
    target = np.clip(raw_mass, 0.0, 1.0)
    # with flooring: rescale the positive part to the (capped) raw mass;
    # otherwise only cap at one
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(floored, np.where(pos_mass > 0, target / pos_mass, 0.0),
                         1.0 / np.maximum(raw_mass, 1.0))
    dens = pos * scale[..., None]
    return dens, chat, floored, raw_mass, pos_mass, scale


def density_from_moments(weights: np.ndarray, grid: Grid1D) -> np.ndarray:
    """Nodal values ``c`` with ``M c = weights``, repaired to be nonnegative.

    Negative nodal values are set to zero and the remainder is rescaled to
    the mass of the unrepaired solution; the mass is capped at one.
    Returns an array (use :class:`SubProbGrid` for a validated measure).
    """
    return _density_parts(np.asarray(weights, dtype=float), grid)[0]


def moments_to_measure(p: np.ndarray, grid: Grid1D) -> SubProbGrid:
    w, _ = clip_normalize(p)
    return SubProbGrid(grid, density_from_moments(w, grid))


# --------------------------------------------------------------------------
# paths
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SpdePath:
    """One discretised path of the measure flow.

    ``raw[k]`` are the unclipped moments ``p_k = M c_k``, ``coeffs[k]`` the
    unclipped nodal coefficients ``c_k`` and ``density[k]`` the nodal
    values of the clipped measure ``nu_k``. ``running[k]`` is the running
    cost increment ``dt <nu_k, f_k>`` and ``lam_pair[k] = <nu_k, lam>``.
    Under exogenous feedback the grid is a frame moved right by
    ``shift[k]``: node ``x_i`` stands for the position ``x_i - shift[k]``.
    """

    grid: Grid1D
    raw: np.ndarray
    coeffs: np.ndarray
    density: np.ndarray
    loss: np.ndarray
    running: np.ndarray
    lam_pair: np.ndarray
    noise: NoisePath
    terminal: float
    shift: Optional[np.ndarray] = None

    @property
    def m(self) -> int:
        return self.loss.size - 1

    @property
    def times(self) -> np.ndarray:
        return self.noise.times

    def clipped(self, k: int) -> SubProbGrid:
        return SubProbGrid(self.grid, self.density[k])

    @property
    def mass(self) -> np.ndarray:
        return 1.0 - self.loss


def control_values(policy, bundle: CoefficientBundle, t: float, asm: Assembler, dens: np.ndarray) -> np.ndarray:
    """Controls at the quadrature points for each path, shape ``(K, Q)``."""
    K = dens.shape[0]
    Q = asm.rule.size
    if policy is None:
        return np.full((K, Q), float(bundle.project_control(0.0)))
    if hasattr(policy, "grid_values"):
        return policy.grid_values(t, dens, asm.rule)
    out = np.empty((K, Q))
    for j in range(K):
        out[j] = policy(t, asm.rule.x, SubProbGrid(asm.grid, dens[j]))
    return out


def _point_fields(bundle: CoefficientBundle, t: float, asm: Assembler, dens: np.ndarray, u: np.ndarray,
                  shift: Optional[np.ndarray] = None):
    """Coefficient point values for every path; each entry has shape ``(K, Q)`` or ``(Q,)``.

    With ``shift`` (measure-free bundles only) the grid is a frame moved
    right by ``shift[j]`` and coefficients are evaluated at ``x - shift[j]``.
    """
    x = asm.rule.x
    if shift is not None:
        x = x[None, :] - shift[:, None]
    if bundle.measure_free:
        lam = np.broadcast_to(np.asarray(bundle.lam(t, x, None), dtype=float), x.shape)
        alpha = np.broadcast_to(np.asarray(bundle.alpha(t, x, None), dtype=float), x.shape)
        sig0 = np.broadcast_to(np.asarray(bundle.sigma0(t, x, None), dtype=float), x.shape)
        a, da = _diffusion_fields(bundle, t, x, None)
        b = np.asarray(bundle.b(t, x, None, u), dtype=float)
        f = np.asarray(bundle.f(t, x, None, u), dtype=float)
        return dict(lam=lam, alpha=alpha, sig0=sig0, a=a, da=da, b=b, f=f)
    K = dens.shape[0]
    keys = ("lam", "alpha", "sig0", "a", "da", "b", "f")
    out = {k: np.empty((K, x.size)) for k in keys}
    for j in range(K):
        nu = SubProbGrid(asm.grid, dens[j])
        out["lam"][j] = bundle.lam(t, x, nu)
        out["alpha"][j] = bundle.alpha(t, x, nu)
        out["sig0"][j] = bundle.sigma0(t, x, nu)
        out["a"][j], out["da"][j] = _diffusion_fields(bundle, t, x, nu)
        out["b"][j] = bundle.b(t, x, nu, u[j])
        out["f"][j] = bundle.f(t, x, nu, u[j])
    return out


@dataclass
class _Trace:
    """Per-step arrays of a batched run (all with leading axis ``m + 1``)."""

    coeffs: np.ndarray
    density: np.ndarray
    running: np.ndarray
    lam_pair: np.ndarray
    loss: np.ndarray
    terminal: np.ndarray
    shift: Optional[np.ndarray] = None


def _run_batch(bundle: CoefficientBundle, policy, grid: Grid1D, dW0: np.ndarray, T: float,
               feedback: Optional[np.ndarray] = None, check_dominance: bool = False) -> _Trace:
    """Core time loop for ``K`` paths at once; ``dW0`` has shape ``(K, m)``."""
    K, m = dW0.shape
    dt = T / m
    asm = get_assembler(grid, bundle.kinks)
    M = mass_matrix(grid)
    n = grid.n
    nu0 = bundle.init(grid)
    c = np.broadcast_to(nu0.c, (K, n)).copy()
    w0, _ = clip_normalize(M.matvec(c))
    d = density_from_moments(w0, grid)
    shift = None
    if feedback is not None:
        if not bundle.measure_free or policy is not None:
            raise ValueError("exogenous feedback needs a measure-free bundle without a policy")
        feedback = np.broadcast_to(np.asarray(feedback, dtype=float), (K, m + 1))
        shift = np.zeros((m + 1, K))
    coeffs = np.empty((m + 1, K, n))
    density = np.empty((m + 1, K, n))
    running = np.zeros((m, K))
    lam_pair = np.empty((m + 1, K))
    coeffs[0], density[0] = c, d
    for k in range(m):
        t = k * dt
        u = control_values(policy, bundle, t, asm, d)
        if feedback is None:
            fld = _point_fields(bundle, t, asm, d, u)
        else:
            # the exogenous push is a pure translation, so step in the frame it
            # moves; killing then grows pointwise with the pushed loss
            alpha_t = float(np.ravel(bundle.alpha(t, asm.rule.x[:1], None))[0])
            shift[k + 1] = shift[k] + alpha_t * (feedback[:, k + 1] - feedback[:, k])
            fld = _point_fields(bundle, t, asm, d, u, shift=shift[k + 1])
        rho = asm.rule.interp(d)
        wr = asm.rule.w * rho
        ell = np.sum(wr * fld["lam"], axis=-1)
        lam_pair[k] = ell
        running[k] = dt * np.sum(wr * fld["f"], axis=-1)
        beta = fld["b"] if feedback is not None else fld["b"] - fld["alpha"] * ell[:, None]
        A = asm.drift_matrix(beta, fld["a"], fld["da"], fld["lam"])
        B = asm.noise_matrix(fld["sig0"])
        c = step_coeffs(c, A, B, dW0[:, k], dt, M, check_dominance=check_dominance)
        if not np.all(np.isfinite(c)):
            raise NumericalBlowup("non-finite finite-element coefficients", step=k)
        w, _ = clip_normalize(M.matvec(c))
        d = density_from_moments(w, grid)
        coeffs[k + 1], density[k + 1] = c, d
    x = asm.rule.x
    lam_T = bundle.lam(T, x, None) if bundle.measure_free else None
    for j in range(K):
        if shift is not None:
            lam_pair[m, j] = asm.pair_points(d[j], bundle.lam(T, x - shift[m, j], None))
        elif lam_T is None:
            lam_pair[m, j] = asm.pair_points(d[j], bundle.lam(T, x, SubProbGrid(grid, d[j])))
        else:
            lam_pair[m, j] = asm.pair_points(d[j], lam_T)
    terminal = np.array([float(bundle.psi(SubProbGrid(grid, d[j]))) for j in range(K)])
    loss = 1.0 - grid.h * density.sum(axis=-1)
    return _Trace(coeffs, density, running, lam_pair, loss, terminal, shift)


def evolve_batch(bundle: CoefficientBundle, policy, grid: Grid1D, noises: Sequence[NoisePath],
                 feedback=None, check_dominance: bool = False) -> list[SpdePath]:
    """Evolve one path per common-noise path; all paths share ``m`` and ``T``."""
    noises = list(noises)
    if not noises:
        return []
    m = noises[0].m
    if any(nz.m != m for nz in noises):
        raise ValueError("all noise paths must have the same number of steps")
    T = bundle.T
    if any(abs(nz.T - T) > 1e-12 * max(T, 1.0) for nz in noises):
        raise ValueError("noise horizon does not match the bundle horizon")
    dW0 = np.stack([nz.dW0 for nz in noises])
    tr = _run_batch(bundle, policy, grid, dW0, T, feedback=feedback, check_dominance=check_dominance)
    M = mass_matrix(grid)
    out = []
    for j, nz in enumerate(noises):
        cj = tr.coeffs[:, j]
        out.append(SpdePath(grid=grid, raw=M.matvec(cj), coeffs=cj, density=tr.density[:, j],
                            loss=tr.loss[:, j], running=tr.running[:, j], lam_pair=tr.lam_pair[:, j],
                            noise=nz, terminal=float(tr.terminal[j]),
                            shift=None if tr.shift is None else tr.shift[:, j]))
    return out


def evolve_spde(bundle: CoefficientBundle, policy, grid: Grid1D, m: int, noise: Optional[NoisePath] = None,
                feedback=None, check_dominance: bool = False) -> SpdePath:
    """Evolve the measure flow along a single common-noise path (``None``: no common noise)."""
    if noise is None:
        noise = NoisePath.zero(m, bundle.T)
    if noise.m != m:
        raise ValueError(f"noise path has {noise.m} steps, expected {m}")
    return evolve_batch(bundle, policy, grid, [noise], feedback=feedback, check_dominance=check_dominance)[0]


def spde_cost(path: SpdePath, bundle: CoefficientBundle | None = None, policy=None, parts: bool = False):
    """Discrete cost ``sum_k dt <nu_k, f_k> + psi(nu_m)`` of a path.

    The running increments were recorded during :func:`evolve_spde` with
    the same bundle and policy. ``parts=True`` returns ``(running, terminal)``.
    """
    running = float(np.sum(path.running))
    terminal = float(bundle.psi(path.clipped(path.m))) if bundle is not None else path.terminal
    return (running, terminal) if parts else running + terminal


def _chunk_costs(args):
    bundle, policy, grid, noises = args
    return [(float(np.sum(p.running)), p.terminal) for p in evolve_batch(bundle, policy, grid, noises)]


def path_costs(bundle: CoefficientBundle, policy, K: int, m: int, grid: Grid1D, seed=0,
               workers: int = 1) -> np.ndarray:
    """Per-path ``(running, terminal)`` costs, shape ``(K, 2)``; path ``j`` uses the noise seed ``(seed, j)``."""
    if K < 1:
        raise ValueError("need K >= 1")
    noises = noise_paths(K, m, bundle.T, seed)
    chunks = [noises[i:i + MC_CHUNK] for i in range(0, K, MC_CHUNK)]
    res = pmap(_chunk_costs, [(bundle, policy, grid, ch) for ch in chunks], workers)
    return np.array([p for ch in res for p in ch])


def mc_cost(bundle: CoefficientBundle, policy, K: int, m: int, grid: Grid1D, seed=0, workers: int = 1,
            parts: bool = False):
    """Monte-Carlo mean and standard error of the path cost over ``K`` common-noise paths.

    Path ``j`` uses the noise seed ``(seed, j)``. Paths are processed in
    fixed chunks so results do not depend on ``workers``.
    """
    pairs = path_costs(bundle, policy, K, m, grid, seed, workers)
    totals = pairs.sum(axis=1)
    mean, se = mean_stderr(totals)
    if parts:
        return mean, se, float(pairs[:, 0].mean()), float(pairs[:, 1].mean())
    return mean, se


# --------------------------------------------------------------------------
# export
# --------------------------------------------------------------------------


def write_heatmap_csv(path: SpdePath, filename) -> str:
    """Nodal densities as an ``(m + 1) x n`` matrix; header row holds the node positions."""
    with open(filename, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow([f"x={x!r}" for x in path.grid.interior.tolist()])
        for row in path.density:
            wr.writerow([repr(float(v)) for v in row])
    return str(filename)


def write_loss_csv(path: SpdePath, filename) -> str:
    with open(filename, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t", "loss", "mass", "lam_pair"])
        for row in zip(path.times, path.loss, path.mass, path.lam_pair):
            wr.writerow([repr(float(v)) for v in row])
    return str(filename)
