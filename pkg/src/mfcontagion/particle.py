"""Finite particle system with exponential-clock killing and contagion.

Each particle ``i`` follows an Euler-Maruyama discretisation of

    dX = b dt + sigma dW^i + sigma0 dW^0 - alpha dL^N,    dLambda = lambda dt,

and is killed at the first grid time where ``Lambda >= theta_i`` with
``theta_i ~ Exp(1)``. Every kill pushes the surviving particles down by
``alpha / N``. Kills detected in the same step are processed one at a time
in ascending particle index.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from ._util import derive_seed, mean_stderr, pmap, seed_repr
from .errors import NumericalBlowup
from .measures import AtomicSubProb
from .model import CoefficientBundle

__all__ = [
    "NoisePath",
    "make_noise",
    "noise_paths",
    "ParticleEnsemble",
    "ParticleRun",
    "simulate_particles",
    "particle_cost",
    "martingale_variance",
    "kill_gap_stats",
    "write_run_csv",
]


# --------------------------------------------------------------------------
# common noise
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class NoisePath:
    """Increments of the common Brownian motion on ``m`` uniform steps of ``[0, T]``."""

    dW0: np.ndarray
    T: float = 1.0
    seed: Optional[dict] = None

    def __post_init__(self):
        d = np.array(self.dW0, dtype=float).reshape(-1)
        d.setflags(write=False)
        object.__setattr__(self, "dW0", d)

    @property
    def m(self) -> int:
        return self.dW0.size

    @property
    def dt(self) -> float:
        return self.T / self.m

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.m + 1)

    @classmethod
    def zero(cls, m: int, T: float = 1.0) -> "NoisePath":
        return cls(np.zeros(m), T, None)


def make_noise(m: int, T: float = 1.0, seed=0) -> NoisePath:
    """Common-noise path drawn from ``seed`` (an int or a ``SeedSequence``)."""
    if m < 1:
        raise ValueError("need at least one time step")
    ss = derive_seed(seed)
    rng = np.random.default_rng(ss)
    return NoisePath(np.sqrt(T / m) * rng.standard_normal(m), T, seed_repr(ss))


def noise_paths(K: int, m: int, T: float = 1.0, seed=0) -> list[NoisePath]:
    """``K`` independent common-noise paths with derived seeds ``(seed, j)``."""
    return [make_noise(m, T, derive_seed(seed, j)) for j in range(K)]


# --------------------------------------------------------------------------
# particle state and runs
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ParticleEnsemble:
    """Snapshot of the particle system at time ``t``."""

    x: np.ndarray
    lambda_acc: np.ndarray
    theta: np.ndarray
    alive: np.ndarray
    kill_time: np.ndarray
    t: float

    @property
    def N(self) -> int:
        return self.x.size

    @property
    def loss(self) -> float:
        return float(np.count_nonzero(~self.alive) / self.N) if self.N else 0.0


@dataclass(frozen=True, eq=False)
class ParticleRun:
    """Output of :func:`simulate_particles`.

    ``kill_step[i]`` is the grid index at which particle ``i`` died
    (``m + 1`` if it survived). ``hit_time`` is the first grid time with
    ``x <= 0`` (``inf`` if never). ``x_path`` and ``lambda_path`` are
    ``(m + 1, N)`` arrays when paths were recorded. ``hazard_final`` sums
    ``1 - exp(-lambda dt)`` over the alive steps: the exact compensator of
    killing checked at grid times.
    """

    times: np.ndarray
    loss: np.ndarray
    mean_x: np.ndarray
    theta: np.ndarray
    kill_step: np.ndarray
    hit_time: np.ndarray
    lambda_final: np.ndarray
    x_final: np.ndarray
    running_cost: float
    x_path: Optional[np.ndarray]
    lambda_path: Optional[np.ndarray]
    noise: NoisePath
    hazard_final: Optional[np.ndarray] = None

    @property
    def N(self) -> int:
        return self.theta.size

    @property
    def m(self) -> int:
        return self.times.size - 1

    @property
    def kill_time(self) -> np.ndarray:
        return np.where(self.kill_step <= self.m, self.kill_step * self.noise.dt, np.inf)

    @property
    def mass(self) -> np.ndarray:
        return 1.0 - self.loss

    def alive_at(self, k: int) -> np.ndarray:
        return self.kill_step > k

    def positions(self, k: int) -> np.ndarray:
        if k == self.m:
            return self.x_final
        if self.x_path is None:
            raise ValueError("paths were not recorded; rerun with record_paths=True")
        return self.x_path[k]

    def empirical(self, k: int) -> AtomicSubProb:
        alive = self.alive_at(k)
        return AtomicSubProb(self.positions(k)[alive], np.full(int(alive.sum()), 1.0 / self.N))

    def ensemble(self, k: int) -> ParticleEnsemble:
        lam = self.lambda_final if k == self.m else self.lambda_path[k]
        return ParticleEnsemble(self.positions(k).copy(), lam.copy(), self.theta, self.alive_at(k),
                                self.kill_time, float(self.times[k]))


def _zero_control(bundle: CoefficientBundle) -> Callable:
    g0 = float(bundle.project_control(0.0))

    def control(t, x, nu):
        return np.full(np.shape(x), g0)

    return control


def _sample_init(bundle: CoefficientBundle, rng: np.random.Generator) -> float:
    if bundle.init_sampler is not None:
        return float(np.asarray(bundle.init_sampler(rng, 1)).reshape(-1)[0])
    # inverse transform on a fine grid of the (normalised) initial density
    nu = bundle.init(bundle.grid(2047))
    x = nu.grid.nodes
    rho = nu.padded()
    cdf = np.concatenate(([0.0], np.cumsum(0.5 * (rho[1:] + rho[:-1]) * np.diff(x))))
    return float(np.interp(rng.random() * cdf[-1], cdf, x))


def _particle_draws(bundle: CoefficientBundle, N: int, m: int, dt: float, seed):
    """Per-particle initial state, threshold and idiosyncratic increments."""
    x0 = np.empty(N)
    theta = np.empty(N)
    dW = np.empty((N, m))
    sq = np.sqrt(dt)
    for i in range(N):
        rng = np.random.default_rng(derive_seed(seed, i))
        x0[i] = _sample_init(bundle, rng)
        theta[i] = rng.standard_exponential()
        dW[i] = sq * rng.standard_normal(m)
    return x0, theta, dW


def simulate_particles(bundle: CoefficientBundle, policy: Optional[Callable], N: int, noise: NoisePath,
                       seed=0, record_paths: bool = True) -> ParticleRun:
    """Simulate one replica of the ``N``-particle system along a common-noise path.

    ``policy(t, x, nu)`` returns controls for the alive particles given the
    empirical subprobability ``nu``; ``None`` means the zero control.
    Particle ``i`` draws its initial position, threshold and Brownian
    increments from the stream ``(seed, i)``.
    """
    if N < 1:
        raise ValueError("need at least one particle")
    m, dt, T = noise.m, noise.dt, noise.T
    control = _zero_control(bundle) if policy is None else policy
    needs_measure = policy is not None or not bundle.measure_free
    x, theta, dW = _particle_draws(bundle, N, m, dt, seed)
    lam_acc = np.zeros(N)
    hazard = np.zeros(N)
    alive = np.ones(N, dtype=bool)
    kill_step = np.full(N, m + 1, dtype=np.int64)
    hit_time = np.where(x <= 0.0, 0.0, np.inf)
    loss = np.zeros(m + 1)
    mean_x = np.full(m + 1, np.nan)
    mean_x[0] = x.mean()
    x_path = np.empty((m + 1, N)) if record_paths else None
    lam_path = np.empty((m + 1, N)) if record_paths else None
    running = 0.0
    w = 1.0 / N

    def empirical():
        return AtomicSubProb(x[alive], np.full(int(alive.sum()), w)) if needs_measure else None

    for k in range(m):
        if record_paths:
            x_path[k] = x
            lam_path[k] = lam_acc
        t = k * dt
        idx = np.flatnonzero(alive)
        if idx.size:
            nu = empirical()
            xa = x[idx]
            g = np.asarray(control(t, xa, nu), dtype=float)
            running += dt * w * float(np.sum(bundle.f(t, xa, nu, g)))
            drift = bundle.b(t, xa, nu, g)
            lam = bundle.lam(t, xa, nu)
            x[idx] = (xa + drift * dt + bundle.sigma(t, xa, nu) * dW[idx, k]
                      + bundle.sigma0(t, xa, nu) * noise.dW0[k])
            lam_acc[idx] += lam * dt
            hazard[idx] -= np.expm1(-lam * dt)
            if not (np.all(np.isfinite(x[idx])) and np.all(np.isfinite(lam_acc[idx])) and np.isfinite(running)):
                raise NumericalBlowup("non-finite particle state", step=k)
            t1 = (k + 1) * dt
            for j in idx[lam_acc[idx] >= theta[idx]]:
                alive[j] = False
                kill_step[j] = k + 1
                recv = np.flatnonzero(alive)
                if recv.size:
                    x[recv] -= w * bundle.alpha(t1, x[recv], empirical())
        newly_hit = np.isinf(hit_time) & (x <= 0.0)
        hit_time[newly_hit] = (k + 1) * dt
        loss[k + 1] = 1.0 - np.count_nonzero(alive) * w
        mean_x[k + 1] = x[alive].mean() if alive.any() else np.nan
    if record_paths:
        x_path[m] = x
        lam_path[m] = lam_acc
    return ParticleRun(times=noise.times, loss=loss, mean_x=mean_x, theta=theta, kill_step=kill_step,
                       hit_time=hit_time, lambda_final=lam_acc, x_final=x, running_cost=running,
                       x_path=x_path, lambda_path=lam_path, noise=noise, hazard_final=hazard)


def particle_cost(run: ParticleRun, bundle: CoefficientBundle) -> float:
    """Running cost over alive segments (left-point rule) plus ``psi`` of the terminal empirical measure."""
    return run.running_cost + float(bundle.psi(run.empirical(run.m)))


def write_run_csv(run: ParticleRun, path, snapshot_steps: Sequence[int] = ()) -> list[str]:
    """Write ``t, loss, mass, mean_x`` and optional per-particle snapshots; returns written paths."""
    path = str(path)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t", "loss", "mass", "mean_x"])
        for row in zip(run.times, run.loss, run.mass, run.mean_x):
            wr.writerow([repr(float(v)) for v in row])
    written = [path]
    for k in snapshot_steps:
        snap = path.replace(".csv", "") + f"_particles_k{k}.csv"
        with open(snap, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["i", "x", "lambda_acc", "theta", "alive"])
            ens = run.ensemble(k)
            for i in range(run.N):
                wr.writerow([i, repr(float(ens.x[i])), repr(float(ens.lambda_acc[i])),
                             repr(float(ens.theta[i])), int(ens.alive[i])])
        written.append(snap)
    return written


# --------------------------------------------------------------------------
# statistics
# --------------------------------------------------------------------------


def _martingale_stat(args):
    bundle, N, m, seed, a, r = args
    noise = make_noise(m, bundle.T, derive_seed(seed, a, r, 1))
    run = simulate_particles(bundle, None, N, noise, derive_seed(seed, a, r, 0), record_paths=False)
    # M^i_T - 1 = I^i_T + (compensator at T) - 1, the compensator frozen after the kill
    alive_T = run.kill_step > m
    return float(np.mean(alive_T + run.hazard_final - 1.0) ** 2)


def martingale_variance(bundle: CoefficientBundle, N_list: Sequence[int], reps: int, seed=0, m: int = 128,
                        workers: int = 1) -> list[dict]:
    """Monte-Carlo estimate of ``E|N^-1 sum_i (M^i_T - 1)|^2`` for each ``N`` (zero control).

    The compensator is the discrete hazard ``sum (1 - exp(-lambda dt))``,
    which makes ``M`` an exact martingale of the time-stepped system; it
    agrees with ``int lambda dt`` to first order in ``dt``.
    """
    rows = []
    for a, N in enumerate(N_list):
        vals = pmap(_martingale_stat, [(bundle, int(N), m, seed, a, r) for r in range(reps)], workers)
        mean, se = mean_stderr(vals)
        rows.append({"N": int(N), "reps": int(reps), "estimate": mean, "stderr": se})
    return rows


def loglog_slope(rows: Sequence[dict]) -> float:
    """Least-squares slope of ``log(estimate)`` against ``log(N)``."""
    N = np.array([r["N"] for r in rows], dtype=float)
    v = np.array([r["estimate"] for r in rows], dtype=float)
    return float(np.polyfit(np.log(N), np.log(v), 1)[0])


def with_intensity(bundle: CoefficientBundle, lam0: float) -> CoefficientBundle:
    """Copy of ``bundle`` with ``lambda(t, x, nu) = lam0 * max(-x, 0)``."""

    def lam(t, x, nu):
        return lam0 * np.maximum(-np.asarray(x, dtype=float), 0.0)

    params = dict(bundle.params)
    params["lam0"] = lam0
    return bundle.replace(lam=lam, params=params)


def _gap_stat(args):
    bundle, N, m, seed, r = args
    noise = make_noise(m, bundle.T, derive_seed(seed, r, 1))
    run = simulate_particles(bundle, None, N, noise, derive_seed(seed, r, 0), record_paths=False)
    T = bundle.T
    return float(np.mean(np.minimum(run.kill_time, T) - np.minimum(run.hit_time, T)))


def kill_gap_stats(bundle: CoefficientBundle, lam0_list: Sequence[float], N: int, reps: int, seed=0,
                   m: int = 128, workers: int = 1) -> list[dict]:
    """Mean of ``min(tau, T) - min(tau_hit, T)`` per intensity scale.

    ``tau`` is the kill time and ``tau_hit`` the first time the state is
    ``<= 0``. All intensities share the same particle and noise seeds, so
    the per-rep ``values`` of two rows can be compared pairwise.
    """
    rows = []
    for lam0 in lam0_list:
        b = with_intensity(bundle, float(lam0))
        vals = pmap(_gap_stat, [(b, int(N), m, seed, r) for r in range(reps)], workers)
        mean, se = mean_stderr(vals)
        rows.append({"lam0": float(lam0), "N": int(N), "reps": int(reps), "mean_gap": mean, "stderr": se,
                     "dt": bundle.T / m, "values": [float(v) for v in vals]})
    return rows
