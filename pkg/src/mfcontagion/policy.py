"""Neural feedback controls ``g(t, x, nu) = g1(t, x, <nu, g0>)``.

``g0`` maps a (rescaled) position to a feature vector that is integrated
against the measure; ``g1`` maps time, position and the pooled features to
a raw output, which a softplus link sends into the control set ``[lo, inf)``.
Time and space inputs are affinely rescaled to ``[-1, 1]``.

Networks use tanh hidden layers. Parameters live in one flat vector,
layer by layer, each layer as its weight matrix (row-major, shape
``(fan_out, fan_in)``) followed by its bias.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from .measures import AtomicSubProb, Grid1D, QuadRule, SubProbGrid, quad_rule

__all__ = [
    "MlpSpec",
    "PolicyParams",
    "DEFAULT_G0",
    "DEFAULT_G1",
    "init_params",
    "params_for",
    "pool_features",
    "policy_eval",
    "policy_eval_grid",
    "policy_dx",
    "lipschitz_bound_x",
    "save_checkpoint",
    "load_checkpoint",
    "mlp_forward",
    "mlp_backward",
]

CHECKPOINT_VERSION = 1
_ACTIVATIONS = ("tanh",)
_LINKS = ("identity", "softplus")


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    output_dim: int
    hidden: tuple = (10, 10)
    activation: str = "tanh"
    output_link: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden):
            raise ValueError(f"all layer widths must be >= 1: {self}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.output_link not in _LINKS:
            raise ValueError(f"unknown output link {self.output_link!r}")

    @property
    def shapes(self) -> list[tuple[int, int]]:
        dims = (self.input_dim,) + self.hidden + (self.output_dim,)
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.shapes)

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "output_dim": self.output_dim, "hidden": list(self.hidden),
                "activation": self.activation, "output_link": self.output_link}


DEFAULT_G0 = MlpSpec(1, 10, (10, 10), "tanh", "identity")
DEFAULT_G1 = MlpSpec(12, 1, (50, 50), "tanh", "softplus")


def _unflatten(theta: np.ndarray, spec: MlpSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    layers, pos = [], 0
    for o, i in spec.shapes:
        W = theta[pos:pos + o * i].reshape(o, i)
        pos += o * i
        b = theta[pos:pos + o]
        pos += o
        layers.append((W, b))
    return layers


def _flatten(layers) -> np.ndarray:
    return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in layers])


def mlp_forward(layers, x: np.ndarray, link: str = "identity"):
    """Forward pass on inputs ``(..., in)``; returns ``(output, cache)``.

    For the softplus link the cache keeps the pre-link output so the
    backward pass can apply its derivative.
    """
    acts = [x]
    h = x
    for W, b in layers[:-1]:
        h = np.tanh(h @ W.T + b)
        acts.append(h)
    W, b = layers[-1]
    z = h @ W.T + b
    out = np.logaddexp(0.0, z) if link == "softplus" else z
    return out, (acts, z, link)


def mlp_backward(layers, cache, dout: np.ndarray, need_dx: bool = True):
    """Reverse pass; returns ``(grads as [(dW, db), ...], d_input)``."""
    acts, z, link = cache
    g = dout * expit(z) if link == "softplus" else dout
    grads = []
    lead = int(np.prod(g.shape[:-1])) if g.ndim > 1 else 1
    for li in range(len(layers) - 1, -1, -1):
        W, _ = layers[li]
        a = acts[li]
        g2 = g.reshape(lead, -1)
        a2 = a.reshape(lead, -1)
        grads.append((g2.T @ a2, g2.sum(axis=0)))
        if li == 0 and not need_dx:
            g = None
            break
        g = g @ W
        if li > 0:
            g = g * (1.0 - a * a)
    grads.reverse()
    return grads, g


@dataclass(frozen=True, eq=False)
class PolicyParams:
    """Flat parameter vector of ``(g0, g1)`` plus the input scaling it was built for."""

    theta: np.ndarray
    spec_g0: MlpSpec = DEFAULT_G0
    spec_g1: MlpSpec = DEFAULT_G1
    seed: Optional[int] = None
    T: float = 1.0
    x_lo: float = -1.0
    x_hi: float = 1.0
    lo: float = 0.0
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        th = np.array(self.theta, dtype=float).reshape(-1)
        if self.spec_g1.input_dim != 2 + self.spec_g0.output_dim:
            raise ValueError("g1 must take (t, x) plus the g0 features as input")
        if self.spec_g0.input_dim != 1 or self.spec_g1.output_dim != 1:
            raise ValueError("g0 must be scalar-input and g1 scalar-output")
        if th.size != self.n_params:
            raise ValueError(f"theta has {th.size} entries, specs need {self.n_params}")
        if not np.all(np.isfinite(th)):
            raise ValueError("theta must be finite")
        th.setflags(write=False)
        object.__setattr__(self, "theta", th)

    @property
    def n_params(self) -> int:
        return self.spec_g0.n_params + self.spec_g1.n_params

    @property
    def d0(self) -> int:
        return self.spec_g0.output_dim

    @property
    def layers_g0(self):
        return _unflatten(self.theta[: self.spec_g0.n_params], self.spec_g0)

    @property
    def layers_g1(self):
        return _unflatten(self.theta[self.spec_g0.n_params:], self.spec_g1)

    def with_theta(self, theta: np.ndarray) -> "PolicyParams":
        return PolicyParams(np.asarray(theta, dtype=float).copy(), self.spec_g0, self.spec_g1, self.seed,
                            self.T, self.x_lo, self.x_hi, self.lo)

    def scale_t(self, t):
        return 2.0 * np.asarray(t, dtype=float) / self.T - 1.0

    def scale_x(self, x):
        return 2.0 * (np.asarray(x, dtype=float) - self.x_lo) / (self.x_hi - self.x_lo) - 1.0

    def g0(self, x: np.ndarray) -> np.ndarray:
        """Feature map at raw positions ``x``; shape ``x.shape + (d0,)``."""
        out, _ = mlp_forward(self.layers_g0, self.scale_x(x)[..., None], self.spec_g0.output_link)
        return out

    def g0_on_rule(self, rule: QuadRule) -> np.ndarray:
        key = ("g0", rule.grid, rule.size)
        if key not in self._cache:
            self._cache[key] = self.g0(rule.x)
        return self._cache[key]

    def __call__(self, t, x, nu):
        return policy_eval(t, x, nu, self)

    def grid_values(self, t: float, dens: np.ndarray, rule: QuadRule) -> np.ndarray:
        """Batched controls at the points of ``rule`` for nodal densities ``dens`` of shape ``(K, n)``."""
        feats = pool_dens(dens, rule.grid, self)
        return _g1_eval(self, t, rule.x, feats)


def init_params(spec_g0: MlpSpec = DEFAULT_G0, spec_g1: MlpSpec = DEFAULT_G1, seed: int = 0, *,
                T: float = 1.0, x_lo: float = -1.0, x_hi: float = 1.0, lo: float = 0.0) -> PolicyParams:
    """Glorot-uniform weights and zero biases, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    parts = []
    for spec in (spec_g0, spec_g1):
        for o, i in spec.shapes:
            lim = np.sqrt(6.0 / (i + o))
            parts.append(rng.uniform(-lim, lim, size=o * i))
            parts.append(np.zeros(o))
    return PolicyParams(np.concatenate(parts), spec_g0, spec_g1, seed, T, x_lo, x_hi, lo)


def params_for(bundle, seed: int = 0, spec_g0: MlpSpec = DEFAULT_G0, spec_g1: MlpSpec = DEFAULT_G1) -> PolicyParams:
    """Initial parameters scaled to a bundle's horizon, domain and control set."""
    return init_params(spec_g0, spec_g1, seed, T=bundle.T, x_lo=bundle.x_lo, x_hi=bundle.x_hi,
                       lo=bundle.control_set_lo)


# --------------------------------------------------------------------------
# pooling and evaluation
# --------------------------------------------------------------------------


def pooling_rule(grid: Grid1D) -> QuadRule:
    """Quadrature used for pooled features (no kinks: the networks are smooth)."""
    return quad_rule(grid, ())


def pool_dens(dens: np.ndarray, grid: Grid1D, params: PolicyParams) -> np.ndarray:
    """Pooled features for nodal densities ``(..., n)``; returns ``(..., d0)``."""
    rule = pooling_rule(grid)
    G0 = params.g0_on_rule(rule)
    return (rule.w * rule.interp(dens)) @ G0


def pool_features(nu, params: PolicyParams) -> np.ndarray:
    """``<nu, g0>`` for a grid or atomic measure."""
    if isinstance(nu, SubProbGrid):
        return pool_dens(nu.c, nu.grid, params)
    if isinstance(nu, AtomicSubProb):
        if nu.locations.size == 0:
            return np.zeros(params.d0)
        return nu.weights @ params.g0(nu.locations)
    raise TypeError(f"cannot pool against {type(nu).__name__}")


def _g1_inputs(params: PolicyParams, t, x: np.ndarray, feats: np.ndarray) -> np.ndarray:
    """Stack ``(t~, x~, features)`` to shape ``feats.shape[:-1] + x.shape + (2 + d0,)``."""
    x = np.asarray(x, dtype=float)
    lead = feats.shape[:-1]
    shape = lead + x.shape
    inp = np.empty(shape + (2 + params.d0,))
    inp[..., 0] = params.scale_t(t)
    inp[..., 1] = np.broadcast_to(params.scale_x(x), shape)
    inp[..., 2:] = feats.reshape(lead + (1,) * x.ndim + (params.d0,))
    return inp


def _g1_eval(params: PolicyParams, t, x, feats) -> np.ndarray:
    out, _ = mlp_forward(params.layers_g1, _g1_inputs(params, t, x, feats), params.spec_g1.output_link)
    return out[..., 0] + params.lo


def policy_eval(t, x, nu, params: PolicyParams) -> np.ndarray:
    """Control ``g(t, x, nu)`` for an array of positions ``x``."""
    return _g1_eval(params, t, x, pool_features(nu, params))


def policy_eval_grid(t, nu: SubProbGrid, params: PolicyParams, rule: Optional[QuadRule] = None) -> np.ndarray:
    """Controls at every quadrature point of ``rule`` (default: the kink-free rule of ``nu.grid``)."""
    rule = pooling_rule(nu.grid) if rule is None else rule
    return _g1_eval(params, t, rule.x, pool_features(nu, params))


def policy_dx(t, x, nu, params: PolicyParams) -> np.ndarray:
    """Exact derivative ``dg/dx`` at fixed ``nu`` via a reverse pass through ``g1``."""
    feats = pool_features(nu, params)
    inp = _g1_inputs(params, t, x, feats)
    layers = params.layers_g1
    out, cache = mlp_forward(layers, inp, params.spec_g1.output_link)
    _, dinp = mlp_backward(layers, cache, np.ones_like(out))
    return dinp[..., 1] * 2.0 / (params.x_hi - params.x_lo)


def lipschitz_bound_x(params: PolicyParams) -> float:
    """Upper bound on ``|dg/dx|`` from spectral norms (tanh and softplus are 1-Lipschitz)."""
    layers = params.layers_g1
    bound = np.linalg.norm(layers[0][0][:, 1])
    for W, _ in layers[1:]:
        bound *= np.linalg.norm(W, 2)
    return float(bound * 2.0 / (params.x_hi - params.x_lo))


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def _header(params: PolicyParams) -> dict:
    return {"version": CHECKPOINT_VERSION, "spec_g0": params.spec_g0.to_dict(), "spec_g1": params.spec_g1.to_dict(),
            "seed": params.seed, "T": params.T, "x_lo": params.x_lo, "x_hi": params.x_hi, "lo": params.lo,
            "n_params": params.n_params}


def save_checkpoint(params: PolicyParams, path, extra: Optional[dict] = None) -> str:
    """Write ``theta`` (float64, bit-exact) and a JSON header to an ``.npz`` file."""
    header = _header(params)
    if extra:
        header["extra"] = extra
    with open(path, "wb") as fh:
        np.savez(fh, theta=params.theta, header=np.array(json.dumps(header)))
    return str(path)


def load_checkpoint(path) -> PolicyParams:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        theta = data["theta"].copy()
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('version')!r}")
    s0 = header["spec_g0"]
    s1 = header["spec_g1"]
    return PolicyParams(theta, MlpSpec(s0["input_dim"], s0["output_dim"], tuple(s0["hidden"]), s0["activation"],
                                       s0["output_link"]),
                        MlpSpec(s1["input_dim"], s1["output_dim"], tuple(s1["hidden"]), s1["activation"],
                                s1["output_link"]),
                        header["seed"], header["T"], header["x_lo"], header["x_hi"], header["lo"])
