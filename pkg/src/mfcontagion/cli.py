"""Batch experiment runner.

``python -m mfcontagion --config run.json --out results/`` validates the
JSON config against a strict schema, writes ``manifest.json`` and then the
subcommand's artifacts. The manifest is rewritten at the end with the
output list and wall-clock time, so it survives a numerical failure.

Exit codes: 0 ok, 2 config error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import os
import platform
import re
import sys
import time
from importlib import metadata
from typing import Optional, Sequence

import jsonschema
import numpy as np

from ._util import derive_seed, mean_stderr, pmap, seed_repr
from .errors import ConvergenceError, IllConditionedStep, NumericalBlowup
from .fem import evolve_spde, write_heatmap_csv, write_loss_csv
from .measures import dist_dp
from .model import PRESETS, CoefficientBundle, ScenarioConfig, sigmas_from_correlation, validate
from .particle import make_noise, simulate_particles, write_run_csv
from .policy import load_checkpoint, params_for
from .singular import intensity_sweep, minimal_iteration, monotone_limit, write_family_csv
from .train import (TrainConfig, TrainingAborted, fd_gradient, grad_cost, relative_errors, sweep, train,
                    write_history_csv, write_sweep_csv)

__all__ = ["CONFIG_SCHEMA", "ConfigError", "chaos", "chaos_table", "load_config", "main", "run"]

SUBCOMMANDS = ("particle", "fem", "train", "sweep-alpha", "sweep-rho", "sweep-lambda0", "singular", "gradcheck",
               "chaos")

# design choices echoed into every manifest
DESIGN_FLAGS = {
    "contagion_sign": "drift b - alpha * <nu, lambda> (push towards the killing region)",
    "noise_matrix": "B_ij = int sigma0 v_j v_i' (derivative on the test function)",
    "mass_matrix": "consistent, (h/6) tridiag(1, 4, 1)",
    "exogenous_feedback": "translation frame: coefficients evaluated at x - alpha * L_fb",
    "activation": "tanh",
    "output_link": "softplus, shifted to the control set lower bound",
    "pooling_quadrature": "kink-free rule of the policy grid",
}

_count = {"type": "integer", "minimum": 1}
_counts = {"type": "array", "items": _count, "minItems": 1}
_reals = {"type": "array", "items": {"type": "number"}, "minItems": 1}
_seed = {"type": "integer", "minimum": 0, "maximum": 2**64 - 1}


def _obj(props: dict, required: Sequence[str] = ()) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


CONFIG_SCHEMA = _obj({
    "subcommand": {"enum": list(SUBCOMMANDS)},
    "scenario": _obj({
        "name": {"enum": sorted(PRESETS)},
        "overrides": {"type": "object", "additionalProperties": {"type": "number"}},
    }, ["name"]),
    "grid": _obj({"n": {"type": "integer", "minimum": 2}, "x_lo": {"type": "number", "exclusiveMaximum": 0},
                  "x_hi": {"type": "number", "exclusiveMinimum": 0}}),
    "m": _count,
    "K": _count,
    "N": _count,
    "seed": _seed,
    "out": {"type": "string"},
    "policy": {"type": "string"},
    "particle": _obj({"snapshot_steps": {"type": "array", "items": {"type": "integer", "minimum": 0}}}),
    "train": _obj({
        "stages": {"type": "array", "minItems": 1,
                   "items": {"type": "array", "items": _count, "minItems": 4, "maxItems": 4}},
        "lr": {"type": "number", "minimum": 0},
        "optimizer": {"enum": ["sgd", "momentum", "adam"]},
        "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "init_seed": _seed,
        "grad_mode": {"enum": ["adjoint", "fd"]},
        "eval_K": _count,
        "eval_seed": _seed,
    }),
    "sweep": _obj({"values": _reals}),
    "singular": _obj({
        "lam0": _reals,
        "gap_reps": _count,
        "gap_m": _count,
        "tol": {"type": "number", "exclusiveMinimum": 0},
        "max_iter": _count,
        "iteration_lam0": {"type": "number", "exclusiveMinimum": 0},
    }),
    "gradcheck": _obj({
        "params_seed": _seed,
        "h_step": {"type": "number", "exclusiveMinimum": 0},
        "components": _count,
    }),
    "chaos": _obj({"N": _counts, "reps": _count}),
}, ["subcommand", "scenario"])

SWEEP_DEFAULTS = {
    "sweep-alpha": [0.5, 1.0, 1.5, 2.0, 2.5],
    "sweep-rho": [0.2, 0.4, 0.6, 0.8],
    "sweep-lambda0": [5.0, 10.0, 25.0, 50.0],
}


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending line when it can."""


def _line_of(text: str, path: Sequence) -> Optional[int]:
    """Best-effort line number of the value at ``path`` in the JSON source."""
    pos = 0
    for key in path:
        if isinstance(key, int):
            continue
        m = re.compile(r'"' + re.escape(str(key)) + r'"\s*:').search(text, pos)
        if m is None:
            break
        pos = m.start()
    return text.count("\n", 0, pos) + 1 if pos else None


def load_config(path: str) -> dict:
    with open(path) as fh:
        text = fh.read()
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from None
    errors = sorted(jsonschema.Draft202012Validator(CONFIG_SCHEMA).iter_errors(cfg), key=lambda e: list(e.path))
    if errors:
        err = errors[0]
        path_list = list(err.path)
        if err.validator == "additionalProperties":
            # point at the unknown key itself
            extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
            path_list = path_list + extra[:1]
        line = _line_of(text, path_list) or 1
        where = "/".join(str(p) for p in path_list) or "<root>"
        raise ConfigError(f"{path}:{line}: {where}: {err.message}")
    return cfg


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _bundle(cfg: dict, **extra) -> CoefficientBundle:
    sc = cfg["scenario"]
    params = dict(sc.get("overrides", {}))
    params.update(extra)
    try:
        bundle = ScenarioConfig(preset=sc["name"], params=params).build()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"scenario: {exc}") from None
    grid = cfg.get("grid", {})
    if "x_lo" in grid or "x_hi" in grid:
        bundle = bundle.replace(x_lo=float(grid.get("x_lo", bundle.x_lo)), x_hi=float(grid.get("x_hi", bundle.x_hi)))
    problems = validate(bundle)
    if problems:
        raise ConfigError("scenario: " + "; ".join(problems))
    return bundle


def _n(cfg):
    return int(cfg.get("grid", {}).get("n", 128))


def _policy(cfg: dict):
    return load_checkpoint(cfg["policy"]) if "policy" in cfg else None


def _train_config(cfg: dict, seed: int) -> TrainConfig:
    tc = cfg.get("train", {})
    stages = tuple(tuple(s) for s in tc.get("stages", [[100, 32, 32, 32]]))
    return TrainConfig(stages=stages, lr=float(tc.get("lr", 0.1)), optimizer=tc.get("optimizer", "sgd"),
                       momentum=float(tc.get("momentum", 0.9)), seed=seed, init_seed=int(tc.get("init_seed", 0)),
                       grad_mode=tc.get("grad_mode", "adjoint"))


def _write_json(path: str, obj) -> str:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    return path


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, bytes):
        return obj.hex()
    raise TypeError(f"not serialisable: {type(obj).__name__}")


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


# --------------------------------------------------------------------------
# propagation of chaos
# --------------------------------------------------------------------------


def _chaos_rep(args):
    bundle, policy, N_list, n, m, seed, r = args
    noise = make_noise(m, bundle.T, derive_seed(seed, r, 1))
    fem = evolve_spde(bundle, policy, bundle.grid(n), m, noise=noise)
    out = []
    for N in N_list:
        run = simulate_particles(bundle, policy, N, noise, derive_seed(seed, r, 0, N))
        d = [dist_dp(run.empirical(k), fem.clipped(k), 1) for k in range(m + 1)]
        out.append(float(np.mean(d)))
    return out


def chaos_table(bundle: CoefficientBundle, N_list: Sequence[int], reps: int, n: int, m: int, seed=0,
                policy=None, workers: int = 1) -> list[dict]:
    """Mean time-averaged ``d_1`` between particle and FEM measures per particle count.

    Rep ``r`` shares one common-noise path (seed ``(seed, r, 1)``) between
    the FEM run and every particle count.
    """
    vals = np.array(pmap(_chaos_rep, [(bundle, policy, tuple(N_list), n, m, seed, r) for r in range(reps)],
                         workers))
    rows = []
    for i, N in enumerate(N_list):
        mean, se = mean_stderr(vals[:, i])
        rows.append({"N": int(N), "reps": int(reps), "mean_d1": mean, "stderr": se})
    return rows


def chaos(cfg: dict, seed: int = 0, workers: int = 1) -> list[dict]:
    ch = cfg.get("chaos", {})
    return chaos_table(_bundle(cfg), ch.get("N", [64, 256, 1024]), int(ch.get("reps", 20)), _n(cfg),
                       int(cfg.get("m", 128)), seed=seed, policy=_policy(cfg), workers=workers)


# --------------------------------------------------------------------------
# subcommands; each returns (output files, diagnostics)
# --------------------------------------------------------------------------


def _cmd_particle(cfg, out, seed, workers):
    bundle = _bundle(cfg)
    m = int(cfg.get("m", 128))
    noise = make_noise(m, bundle.T, derive_seed(seed, 1))
    run = simulate_particles(bundle, _policy(cfg), int(cfg.get("N", 256)), noise, derive_seed(seed, 0))
    snaps = cfg.get("particle", {}).get("snapshot_steps", [])
    if any(k > m for k in snaps):
        raise ConfigError(f"particle/snapshot_steps: steps must be <= m = {m}")
    files = write_run_csv(run, os.path.join(out, "run.csv"), snaps)
    return files, {"terminal_loss": float(run.loss[-1]), "noise_seed": seed_repr(derive_seed(seed, 1)),
                   "particle_seed": seed_repr(derive_seed(seed, 0))}


def _cmd_fem(cfg, out, seed, workers):
    bundle = _bundle(cfg)
    m = int(cfg.get("m", 128))
    noise = make_noise(m, bundle.T, derive_seed(seed, 1))
    path = evolve_spde(bundle, _policy(cfg), bundle.grid(_n(cfg)), m, noise=noise)
    files = [write_heatmap_csv(path, os.path.join(out, "density.csv")),
             write_loss_csv(path, os.path.join(out, "loss.csv"))]
    return files, {"terminal_loss": float(path.loss[-1]), "heatmap_shape": [m + 1, path.grid.n],
                   "noise_seed": seed_repr(derive_seed(seed, 1))}


def _cmd_train(cfg, out, seed, workers):
    bundle = _bundle(cfg)
    tc = _train_config(cfg, seed)
    tc = TrainConfig(**{**tc.__dict__, "checkpoint_dir": out})
    res = train(bundle, tc)
    files = [write_history_csv(res.history, os.path.join(out, "history.csv"))] + list(res.checkpoints)
    return files, {"final_cost": res.history[-1]["cost"], "epochs": len(res.history)}


def _sweep_factory(cfg, sub):
    if sub == "sweep-alpha":
        return lambda v: _bundle(cfg, alpha=float(v))
    if sub == "sweep-lambda0":
        return lambda v: _bundle(cfg, lam0=float(v))

    def rho_bundle(v):
        sigma, sigma0 = sigmas_from_correlation(float(v))
        return _bundle(cfg, sigma=sigma, sigma0=sigma0)

    return rho_bundle


def _cmd_sweep(cfg, out, seed, workers, sub):
    values = cfg.get("sweep", {}).get("values", SWEEP_DEFAULTS[sub])
    if sub == "sweep-rho" and any(not 0.0 < v < 1.0 for v in values):
        raise ConfigError("sweep/values: correlations must lie strictly between 0 and 1")
    tc = _train_config(cfg, seed)
    tcfg = cfg.get("train", {})
    rows = sweep(_sweep_factory(cfg, sub), values, tc, eval_K=tcfg.get("eval_K"),
                 eval_seed=int(tcfg.get("eval_seed", 12345)), workers=workers)
    name = {"sweep-alpha": "alpha", "sweep-rho": "rho", "sweep-lambda0": "lam0"}[sub]
    files = [write_sweep_csv(rows, os.path.join(out, f"sweep_{name}.csv"), param_name=name)]
    return files, {"rows": rows}


def _cmd_singular(cfg, out, seed, workers):
    bundle = _bundle(cfg)
    sg = cfg.get("singular", {})
    lam0 = sg.get("lam0", [5.0, 10.0, 25.0, 50.0])
    if any(b <= a for a, b in zip(lam0, lam0[1:])) or min(lam0) <= 0:
        raise ConfigError("singular/lam0: intensities must be positive and strictly increasing")
    m = int(cfg.get("m", 128))
    grid = bundle.grid(_n(cfg))
    fam = intensity_sweep(bundle, lam0, grid, m, int(cfg.get("K", 16)), seed, N=int(cfg.get("N", 256)),
                          gap_reps=int(sg.get("gap_reps", 40)), gap_m=int(sg.get("gap_m", 128)), workers=workers)
    lim = monotone_limit(fam)
    files = [write_family_csv(fam, os.path.join(out, "loss_family.csv"))]
    it_lam0 = float(sg.get("iteration_lam0", lam0[0]))
    try:
        it = minimal_iteration(bundle, it_lam0, grid, m, noise=make_noise(m, bundle.T, derive_seed(seed, 0)),
                               tol=float(sg.get("tol", 1e-8)), max_iter=int(sg.get("max_iter", 50)))
        it_diag = {"converged": True}
    except ConvergenceError as exc:
        it = exc.result
        it_diag = {"converged": False, "message": str(exc)}
    it_diag.update({"lam0": it_lam0, "iterations": it.iterations, "gaps": it.gaps,
                    "monotonicity_violation": it.monotonicity_violation()})
    gap_rows = [{k: v for k, v in r.items() if k != "values"} for r in fam.kill_gap]
    return files, {"monotone_limit": lim.to_dict(), "monotonicity_violation": fam.monotonicity_violation(),
                   "mean_terminal_loss": fam.mean_terminal_loss(), "kill_gap": gap_rows,
                   "minimal_iteration": it_diag}


def _cmd_gradcheck(cfg, out, seed, workers):
    bundle = _bundle(cfg)
    gc = cfg.get("gradcheck", {})
    n, m, K = _n(cfg), int(cfg.get("m", 16)), int(cfg.get("K", 4))
    params = params_for(bundle, int(gc.get("params_seed", 0)))
    rep = grad_cost(bundle, params, n, m, K, seed, signature=True)
    n_comp = min(int(gc.get("components", 60)), params.n_params)
    comps = np.random.default_rng(derive_seed(seed, 7)).choice(params.n_params, size=n_comp, replace=False)
    fd, stable = fd_gradient(bundle, params, n, m, K, seed, h_step=float(gc.get("h_step", 1e-5)),
                             components=comps, return_signatures=True)
    rel = relative_errors(rep.grad[comps], fd[comps])
    rel = np.where(stable[comps], rel, np.nan)
    rep.fd = fd[comps]
    rep.rel_err = np.nan_to_num(rel, nan=0.0)
    rep.max_rel_err = float(np.nanmax(rel)) if np.any(stable[comps]) else None
    report = rep.to_dict()
    report.update({"components": comps.tolist(), "kink_stable": stable[comps].tolist(),
                   "signature": rep.signature.hex() if rep.signature is not None else None})
    files = [_write_json(os.path.join(out, "gradcheck.json"), report)]
    return files, {"max_rel_err": report["max_rel_err"]}


def _cmd_chaos(cfg, out, seed, workers):
    rows = chaos(cfg, seed=seed, workers=workers)
    path = os.path.join(out, "chaos.csv")
    with open(path, "w") as fh:
        fh.write("N,reps,mean_d1,stderr\n")
        for r in rows:
            fh.write(f"{r['N']},{r['reps']},{r['mean_d1']!r},{r['stderr']!r}\n")
    return [path], {"rows": rows}


_DISPATCH = {
    "particle": _cmd_particle,
    "fem": _cmd_fem,
    "train": _cmd_train,
    "singular": _cmd_singular,
    "gradcheck": _cmd_gradcheck,
    "chaos": _cmd_chaos,
}


def run(config_path: str, out: Optional[str] = None, workers: int = 1, seed: Optional[int] = None) -> int:
    """Execute one configured run; returns the process exit code."""
    try:
        cfg = load_config(config_path)
    except (OSError, ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = out or cfg.get("out")
    if not out:
        print("config error: no output directory (use --out or the 'out' key)", file=sys.stderr)
        return 2
    seed = int(cfg.get("seed", 0) if seed is None else seed)
    os.makedirs(out, exist_ok=True)
    sub = cfg["subcommand"]
    manifest = {
        "config": cfg,
        "config_path": os.path.abspath(config_path),
        "version": _version(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "seed": seed,
        "derived_seeds": {"noise": seed_repr(derive_seed(seed, 1)), "particles": seed_repr(derive_seed(seed, 0))},
        "design_flags": dict(DESIGN_FLAGS, learning_rate=cfg.get("train", {}).get("lr", 0.1),
                             optimizer=cfg.get("train", {}).get("optimizer", "sgd")),
        "workers": workers,
        "status": "running",
        "outputs": [],
    }
    mpath = os.path.join(out, "manifest.json")
    _write_json(mpath, manifest)
    t0 = time.perf_counter()
    code = 0
    try:
        if sub.startswith("sweep-"):
            files, diag = _cmd_sweep(cfg, out, seed, workers, sub)
        else:
            files, diag = _DISPATCH[sub](cfg, out, seed, workers)
        manifest.update(status="ok", outputs=[os.path.relpath(f, out) for f in files], diagnostics=diag)
    except ConfigError as exc:
        manifest.update(status="config_error", error=str(exc))
        print(f"config error: {exc}", file=sys.stderr)
        code = 2
    except (NumericalBlowup, IllConditionedStep, TrainingAborted, FloatingPointError) as exc:
        manifest.update(status="numerical_failure", error=f"{type(exc).__name__}: {exc}",
                        step=getattr(exc, "step", None))
        print(f"numerical failure: {exc}", file=sys.stderr)
        code = 3
    manifest["wall_clock_s"] = time.perf_counter() - t0
    _write_json(mpath, manifest)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = argparse.ArgumentParser(prog="mfcontagion", description="Run a configured contagion experiment.")
    ap.add_argument("--config", required=True, help="JSON run configuration")
    ap.add_argument("--out", help="output directory (overrides the config)")
    ap.add_argument("--workers", type=int, default=1, help="worker processes")
    ap.add_argument("--seed", type=int, help="seed override (unsigned 64-bit)")
    args = ap.parse_args(argv)
    if args.workers < 1:
        ap.error("--workers must be >= 1")
    if args.seed is not None and not 0 <= args.seed < 2**64:
        ap.error("--seed must be an unsigned 64-bit integer")
    return run(args.config, out=args.out, workers=args.workers, seed=args.seed)
