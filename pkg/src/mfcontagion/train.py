"""Policy-gradient training of neural feedback controls on the FEM cost.

:func:`grad_cost` differentiates the discrete map ``theta -> mean path
cost`` exactly, by a reverse sweep over the time steps. The implicit solve
is differentiated through its transpose system, the clipping steps through
their one-sided derivatives (zero on the inactive side of every kink).
"""
from __future__ import annotations

import csv
import hashlib
import os
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ._util import derive_seed, mean_stderr
from .errors import IllConditionedStep, NumericalBlowup
from .fem import (MC_CHUNK, Assembler, _point_fields, _run_batch, clip_normalize, get_assembler, mass_matrix,
                  mc_cost, path_costs)
from .measures import Grid1D
from .model import CoefficientBundle
from .particle import noise_paths
from .policy import (PolicyParams, _g1_inputs, mlp_backward, mlp_forward, params_for, pool_dens, pooling_rule,
                     save_checkpoint)
from .tridiag import TriDiag

__all__ = [
    "TrainConfig",
    "GradReport",
    "TrainResult",
    "TrainingAborted",
    "grad_cost",
    "fd_gradient",
    "kink_signature",
    "relative_errors",
    "train",
    "sweep",
    "write_history_csv",
    "write_sweep_csv",
]


# --------------------------------------------------------------------------
# adjoint of the clipping map  c -> d
# --------------------------------------------------------------------------


def _clip_forward(c: np.ndarray, grid: Grid1D, M: TriDiag) -> dict:
    h = grid.h
    p = M.matvec(c)
    q = np.maximum(p, 0.0)
    r = q.sum(axis=-1)
    w = q / np.maximum(r, 1.0)[..., None]
    chat = M.solve(w)
    floored = np.any(chat < 0.0, axis=-1)
    pos = np.maximum(chat, 0.0)
    raw_mass = h * chat.sum(axis=-1)
    pos_mass = h * pos.sum(axis=-1)
    target = np.clip(raw_mass, 0.0, 1.0)
    return dict(p=p, q=q, r=r, chat=chat, floored=floored, pos=pos, raw_mass=raw_mass, pos_mass=pos_mass,
                target=target)


def _clip_adjoint(st: dict, d_bar: np.ndarray, grid: Grid1D, M: TriDiag) -> np.ndarray:
    """Pull ``d_bar`` back to the nodal coefficients (batched over paths)."""
    h = grid.h
    chat, pos = st["chat"], st["pos"]
    chat_bar = np.empty_like(d_bar)
    for j in range(d_bar.shape[0]):
        db = d_bar[j]
        if st["floored"][j]:
            pm, tg = st["pos_mass"][j], st["target"][j]
            if pm <= 0.0:
                chat_bar[j] = 0.0
                continue
            dot = float(db @ pos[j])
            pos_bar = db * (tg / pm) - h * tg * dot / pm**2
            target_bar = dot / pm
            rm = st["raw_mass"][j]
            mass_bar = target_bar if 0.0 < rm < 1.0 else 0.0
            chat_bar[j] = pos_bar * (chat[j] > 0.0) + h * mass_bar
        else:
            rm = st["raw_mass"][j]
            if rm > 1.0:
                chat_bar[j] = db / rm - h * float(db @ chat[j]) / rm**2
            else:
                chat_bar[j] = db
    w_bar = M.solve(chat_bar)
    r = st["r"]
    q = st["q"]
    big = r > 1.0
    q_bar = w_bar.copy()
    if np.any(big):
        rb = r[big][:, None]
        q_bar[big] = w_bar[big] / rb - np.sum(w_bar[big] * q[big], axis=-1, keepdims=True) / rb**2
    p_bar = q_bar * (st["p"] > 0.0)
    return M.matvec(p_bar)


def kink_signature(c: np.ndarray, grid: Grid1D) -> bytes:
    """Digest of every branch taken by the clipping map for coefficients ``c`` (any batch shape)."""
    M = mass_matrix(grid)
    st = _clip_forward(np.asarray(c).reshape(-1, grid.n), grid, M)
    parts = [st["p"] > 0.0, st["r"] > 1.0, st["floored"], st["chat"] > 0.0,
             (st["raw_mass"] > 0.0) & (st["raw_mass"] < 1.0), st["raw_mass"] > 1.0]
    hsh = hashlib.sha1()
    for a in parts:
        hsh.update(np.packbits(a.astype(bool).ravel()).tobytes())
    return hsh.digest()


# --------------------------------------------------------------------------
# gradient of the Monte-Carlo cost
# --------------------------------------------------------------------------


@dataclass
class GradReport:
    grad: np.ndarray
    cost: float
    stderr: float
    fd: Optional[np.ndarray] = None
    rel_err: Optional[np.ndarray] = None
    max_rel_err: Optional[float] = None
    running: float = float("nan")
    terminal: float = float("nan")
    signature: Optional[bytes] = field(default=None, repr=False)

    def to_dict(self) -> dict:
        out = {"cost": self.cost, "stderr": self.stderr, "running": self.running, "terminal": self.terminal,
               "n_params": int(self.grad.size), "grad_norm": float(np.linalg.norm(self.grad)),
               "max_rel_err": self.max_rel_err}
        if self.rel_err is not None:
            worst = int(np.argmax(self.rel_err))
            out["worst_component"] = {"index": worst, "adjoint": float(self.grad[worst]),
                                      "finite_difference": float(self.fd[worst])}
        return out


def _check_differentiable(bundle: CoefficientBundle):
    if not bundle.measure_free:
        raise NotImplementedError("exact gradients need measure-free coefficients")
    if bundle.db_dg is None or bundle.df_dg is None or bundle.psi_grad is None:
        raise NotImplementedError("exact gradients need db_dg, df_dg and psi_grad on the bundle")


def _chunk_gradient(bundle: CoefficientBundle, params: PolicyParams, grid: Grid1D, dW0: np.ndarray,
                    weight: float):
    """Costs and ``weight * sum_paths dJ/dtheta`` for one chunk of paths."""
    K, m = dW0.shape
    T = bundle.T
    dt = T / m
    tr = _run_batch(bundle, params, grid, dW0, T)
    asm: Assembler = get_assembler(grid, bundle.kinks)
    prule = pooling_rule(grid)
    M = mass_matrix(grid)
    rule = asm.rule
    x = rule.x
    G0 = params.g0_on_rule(prule)
    layers1 = params.layers_g1
    link1 = params.spec_g1.output_link
    g1_grads = [(np.zeros_like(W), np.zeros_like(b)) for W, b in layers1]
    G0_bar = np.zeros_like(G0)

    d_m = tr.density[m]
    d_bar = weight * np.stack([bundle.psi_grad(_GridView(grid, d_m[j])) for j in range(K)])
    c_bar = np.zeros((K, grid.n))
    sig0 = np.broadcast_to(np.asarray(bundle.sigma0(0.0, x, None), dtype=float), x.shape)
    for k in range(m - 1, -1, -1):
        t = k * dt
        # pull the density adjoint of step k+1 back to its raw coefficients
        st = _clip_forward(tr.coeffs[k + 1], grid, M)
        c_bar = c_bar + _clip_adjoint(st, d_bar, grid, M)
        # recompute the step's inputs
        d = tr.density[k]
        feats = pool_dens(d, grid, params)
        inp = _g1_inputs(params, t, x, feats)
        out, cache = mlp_forward(layers1, inp, link1)
        u = out[..., 0] + params.lo
        fld = _point_fields(bundle, t, asm, d, u)
        rho = rule.interp(d)
        wr = rule.w * rho
        ell = np.sum(wr * fld["lam"], axis=-1)
        beta = fld["b"] - fld["alpha"] * ell[:, None]
        A = asm.drift_matrix(beta, fld["a"], fld["da"], fld["lam"])
        B = asm.noise_matrix(fld["sig0"] if np.ndim(fld["sig0"]) else sig0)
        # adjoint of (M - dt A) c_{k+1} = M c_k + dW B c_k
        y = TriDiag(M.upper - dt * A.upper, M.diag - dt * A.diag, M.lower - dt * A.lower).solve(c_bar)
        c_next = tr.coeffs[k + 1]
        A_bar = TriDiag(dt * y[:, 1:] * c_next[:, :-1], dt * y * c_next, dt * y[:, :-1] * c_next[:, 1:])
        c_bar = M.matvec(y) + dW0[:, k][:, None] * B.T.matvec(y)
        beta_bar = asm.beta_adjoint(A_bar)
        # running cost, drift and killing feedback
        run_w = weight * dt
        u_bar = beta_bar * bundle.db_dg(t, x, None, u) + run_w * wr * bundle.df_dg(t, x, None, u)
        ell_bar = -np.sum(beta_bar * fld["alpha"], axis=-1)
        rho_bar = run_w * rule.w * fld["f"] + ell_bar[:, None] * rule.w * fld["lam"]
        grads, dinp = mlp_backward(layers1, cache, u_bar[..., None])
        for (gW, gb), (aW, ab) in zip(grads, g1_grads):
            aW += gW
            ab += gb
        feats_bar = dinp[..., 2:].sum(axis=-2)
        prho = prule.interp(d)
        G0_bar += (prule.w * prho).T @ feats_bar
        prho_bar = prule.w * (feats_bar @ G0.T)
        d_bar = rule.interp_adjoint(rho_bar) + prule.interp_adjoint(prho_bar)
        if not (np.all(np.isfinite(c_bar)) and np.all(np.isfinite(d_bar))):
            raise NumericalBlowup("non-finite adjoint", step=k)
    # g0 is evaluated once at the pooling points; push its adjoint through
    layers0 = params.layers_g0
    _, cache0 = mlp_forward(layers0, params.scale_x(prule.x)[:, None], params.spec_g0.output_link)
    g0_grads, _ = mlp_backward(layers0, cache0, G0_bar, need_dx=False)
    grad = np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in g0_grads + g1_grads])
    running = tr.running.sum(axis=0)
    return grad, running, tr.terminal, tr.coeffs


class _GridView:
    """Minimal stand-in for a grid measure inside the adjoint (skips validation)."""

    def __init__(self, grid, c):
        self.grid = grid
        self.c = c

    @property
    def mass(self):
        return float(self.grid.h * self.c.sum())


def grad_cost(bundle: CoefficientBundle, params: PolicyParams, n: int, m: int, K: int, seed=0,
              signature: bool = False) -> GradReport:
    """Exact gradient of the ``K``-path Monte-Carlo cost (same noise paths as :func:`mc_cost`)."""
    _check_differentiable(bundle)
    grid = bundle.grid(n)
    noises = noise_paths(K, m, bundle.T, seed)
    grad = np.zeros(params.n_params)
    runs, terms, sigs = [], [], []
    for i in range(0, K, MC_CHUNK):
        dW0 = np.stack([nz.dW0 for nz in noises[i:i + MC_CHUNK]])
        g, run, term, coeffs = _chunk_gradient(bundle, params, grid, dW0, 1.0 / K)
        grad += g
        runs.extend(run.tolist())
        terms.extend(term.tolist())
        if signature:
            sigs.append(kink_signature(coeffs, grid))
    if not np.all(np.isfinite(grad)):
        raise NumericalBlowup("non-finite gradient")
    totals = np.add(runs, terms)
    mean, se = mean_stderr(totals)
    sig = hashlib.sha1(b"".join(sigs)).digest() if signature else None
    return GradReport(grad=grad, cost=mean, stderr=se, running=float(np.mean(runs)), terminal=float(np.mean(terms)),
                      signature=sig)


def _cost_and_signature(bundle, params, n, m, K, seed):
    grid = bundle.grid(n)
    noises = noise_paths(K, m, bundle.T, seed)
    dW0 = np.stack([nz.dW0 for nz in noises])
    tr = _run_batch(bundle, params, grid, dW0, bundle.T)
    cost = float(np.mean(tr.running.sum(axis=0) + tr.terminal))
    return cost, kink_signature(tr.coeffs, grid)


def fd_gradient(bundle: CoefficientBundle, params: PolicyParams, n: int, m: int, K: int, seed=0,
                h_step: float = 1e-5, objective: Optional[Callable[[np.ndarray], float]] = None,
                components: Optional[Sequence[int]] = None, return_signatures: bool = False):
    """Central finite differences of the Monte-Carlo cost with common random numbers.

    ``objective`` replaces the FEM cost by an arbitrary function of the flat
    parameter vector (used to test the differencing itself).
    ``return_signatures=True`` also returns, per component, whether the
    kink signature at ``theta +- h`` matched the one at ``theta``.
    """
    if h_step <= 0:
        raise ValueError("h_step must be positive")
    theta = params.theta
    idx = range(theta.size) if components is None else components
    grad = np.zeros(theta.size)
    stable = np.ones(theta.size, dtype=bool)
    if objective is None:
        base_sig = _cost_and_signature(bundle, params, n, m, K, seed)[1] if return_signatures else None

        def evaluate(th):
            return _cost_and_signature(bundle, params.with_theta(th), n, m, K, seed)
    else:
        base_sig = None

        def evaluate(th):
            return float(objective(th)), None

    for i in idx:
        tp = theta.copy()
        tm = theta.copy()
        tp[i] += h_step
        tm[i] -= h_step
        fp, sp = evaluate(tp)
        fm, sm = evaluate(tm)
        grad[i] = (fp - fm) / (2.0 * h_step)
        if base_sig is not None:
            stable[i] = sp == base_sig and sm == base_sig
    return (grad, stable) if return_signatures else grad


def relative_errors(g: np.ndarray, fd: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """``|g - fd| / (|fd| + floor * max|fd|)``; the floor keeps near-zero components meaningful."""
    scale = np.abs(fd) + floor * max(float(np.max(np.abs(fd))), 1e-300)
    return np.abs(g - fd) / scale


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    stages: tuple = ((500, 128, 128, 128), (100, 256, 256, 256))
    lr: float = 0.1
    optimizer: str = "sgd"
    momentum: float = 0.9
    betas: tuple = (0.9, 0.999)
    seed: int = 0
    init_seed: int = 0
    grad_mode: str = "adjoint"
    keep_trajectory: bool = False
    checkpoint_dir: Optional[str] = None

    def __post_init__(self):
        stages = tuple(tuple(int(v) for v in s) for s in self.stages)
        object.__setattr__(self, "stages", stages)
        if not stages:
            raise ValueError("need at least one training stage")
        for s in stages:
            if len(s) != 4 or s[0] < 1 or s[1] < 2 or s[2] < 1 or s[3] < 1:
                raise ValueError(f"stage must be (epochs >= 1, n >= 2, m >= 1, K >= 1), got {s}")
        if not (self.lr >= 0 and np.isfinite(self.lr)):
            raise ValueError("learning rate must be finite and nonnegative")
        if self.optimizer not in ("sgd", "momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.grad_mode not in ("adjoint", "fd"):
            raise ValueError(f"unknown gradient mode {self.grad_mode!r}")


@dataclass
class TrainResult:
    params: PolicyParams
    history: list
    trajectory: list
    checkpoints: list


class TrainingAborted(RuntimeError):
    def __init__(self, message, result: TrainResult):
        super().__init__(message)
        self.result = result


def train(bundle: CoefficientBundle, config: TrainConfig, params: Optional[PolicyParams] = None) -> TrainResult:
    """Gradient descent (plain, heavy-ball momentum or Adam) on the Monte-Carlo FEM cost.

    Epoch ``e`` of stage ``s`` draws its noise paths from the seed
    ``(config.seed, s, e)``. History rows hold the ``K``-path mean cost at
    the parameters before the update.
    """
    params = params_for(bundle, config.init_seed) if params is None else params
    history, traj, ckpts = [], [params.theta.copy()] if config.keep_trajectory else [], []
    velocity = np.zeros(params.n_params)
    second = np.zeros(params.n_params)
    n_steps = 0
    result = TrainResult(params, history, traj, ckpts)
    epoch_global = 0
    for s, (epochs, n, m, K) in enumerate(config.stages):
        for e in range(epochs):
            seed = derive_seed(config.seed, s, e)
            try:
                if config.grad_mode == "adjoint":
                    rep = grad_cost(bundle, params, n, m, K, seed)
                    g, cost, se = rep.grad, rep.cost, rep.stderr
                else:
                    g = fd_gradient(bundle, params, n, m, K, seed)
                    cost, se = mc_cost(bundle, params, K, m, bundle.grid(n), seed)
            except (NumericalBlowup, IllConditionedStep) as exc:
                raise TrainingAborted(f"stage {s} epoch {e}: {exc}", result) from exc
            history.append({"epoch": epoch_global, "stage": s, "n": n, "m": m, "K": K, "cost": cost, "stderr": se})
            n_steps += 1
            if config.optimizer == "momentum":
                velocity = config.momentum * velocity + g
                step = velocity
            elif config.optimizer == "adam":
                b1, b2 = config.betas
                velocity = b1 * velocity + (1 - b1) * g
                second = b2 * second + (1 - b2) * g * g
                step = (velocity / (1 - b1**n_steps)) / (np.sqrt(second / (1 - b2**n_steps)) + 1e-8)
            else:
                step = g
            params = params.with_theta(params.theta - config.lr * step)
            result.params = params
            if config.keep_trajectory:
                traj.append(params.theta.copy())
            epoch_global += 1
        if config.checkpoint_dir is not None:
            path = os.path.join(config.checkpoint_dir, f"policy_stage{s}.npz")
            save_checkpoint(params, path, extra={"stage": s, "epochs_done": epoch_global, "lr": config.lr,
                                                 "optimizer": config.optimizer})
            ckpts.append(path)
    return result


def sweep(factory: Callable[[float], CoefficientBundle], values: Sequence[float], config: TrainConfig,
          eval_K: Optional[int] = None, eval_seed: int = 12345, workers: int = 1) -> list[dict]:
    """Train one policy per parameter value and report its cost split.

    Costs are evaluated on fresh noise paths (seed ``eval_seed``) at the
    resolution of the last training stage; the zero-control cost on the
    same paths is reported for comparison.
    """
    _, n, m, K = config.stages[-1]
    K_eval = K if eval_K is None else eval_K
    rows = []
    for v in values:
        bundle = factory(v)
        res = train(bundle, config)
        grid = bundle.grid(n)
        trained = path_costs(bundle, res.params, K_eval, m, grid, eval_seed, workers)
        zero = path_costs(bundle, None, K_eval, m, grid, eval_seed, workers)
        mean, se = mean_stderr(trained.sum(axis=1))
        zmean, _ = mean_stderr(zero.sum(axis=1))
        # paired on shared noise paths
        gain, gain_se = mean_stderr(zero.sum(axis=1) - trained.sum(axis=1))
        rows.append({"param": float(v), "trained_cost": mean, "stderr": se,
                     "running": float(trained[:, 0].mean()), "terminal": float(trained[:, 1].mean()),
                     "zero_control_cost": zmean, "zero_control_terminal": float(zero[:, 1].mean()),
                     "gain": gain, "gain_stderr": gain_se, "final_train_cost": res.history[-1]["cost"]})
    return rows


def write_history_csv(history: Sequence[dict], path) -> str:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["epoch", "stage", "n", "m", "K", "mean_cost", "stderr"])
        for h in history:
            wr.writerow([h["epoch"], h["stage"], h["n"], h["m"], h["K"], repr(h["cost"]), repr(h["stderr"])])
    return str(path)


def write_sweep_csv(rows: Sequence[dict], path, param_name: str = "param") -> str:
    cols = ["param", "trained_cost", "stderr", "running", "terminal", "zero_control_cost", "zero_control_terminal",
            "gain", "gain_stderr", "final_train_cost"]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow([param_name] + cols[1:])
        for r in rows:
            wr.writerow([repr(float(r[c])) for c in cols])
    return str(path)
