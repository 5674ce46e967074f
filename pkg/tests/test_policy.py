import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfcontagion.measures import AtomicSubProb, Grid1D, SubProbGrid
from mfcontagion.model import gamma_init, gaussian_init, scenario_bailout
from mfcontagion.policy import (DEFAULT_G0, DEFAULT_G1, MlpSpec, PolicyParams, init_params, lipschitz_bound_x,
                                load_checkpoint, params_for, pool_features, policy_dx, policy_eval,
                                policy_eval_grid, save_checkpoint)

SMALL_G0 = MlpSpec(1, 3, (4,), "tanh", "identity")
SMALL_G1 = MlpSpec(5, 1, (6, 5), "tanh", "softplus")


def layer_count(spec):
    dims = [spec.input_dim, *spec.hidden, spec.output_dim]
    return sum((i + 1) * o for i, o in zip(dims[:-1], dims[1:]))


def test_default_parameter_count():
    p = init_params()
    assert p.n_params == layer_count(DEFAULT_G0) + layer_count(DEFAULT_G1)
    # 1 -> 10 -> 10 -> 10 and 12 -> 50 -> 50 -> 1
    assert p.n_params == (20 + 110 + 110) + (650 + 2550 + 51)
    assert p.d0 == 10


def test_same_seed_same_theta():
    np.testing.assert_array_equal(init_params(seed=3).theta, init_params(seed=3).theta)
    assert not np.array_equal(init_params(seed=3).theta, init_params(seed=4).theta)


def test_zero_width_forbidden():
    with pytest.raises(ValueError):
        MlpSpec(1, 10, (0,))
    with pytest.raises(ValueError):
        MlpSpec(1, 10, (10,), activation="relu")
    with pytest.raises(ValueError):
        PolicyParams(np.zeros(3))


def test_params_for_uses_bundle_scaling():
    b = scenario_bailout(T=2.0)
    p = params_for(b, seed=1)
    assert p.T == 2.0 and p.lo == b.control_set_lo and (p.x_lo, p.x_hi) == (b.x_lo, b.x_hi)


# ---------------------------------------------------------------- pooling


def test_pool_zero_measure():
    p = init_params(seed=0)
    assert not np.any(pool_features(SubProbGrid.zero(Grid1D(-1, 1, 20)), p))
    assert not np.any(pool_features(AtomicSubProb(np.zeros(0), np.zeros(0)), p))


def frozen_g0(params, const):
    """Zero the last g0 layer and set its bias to ``const``."""
    th = params.theta.copy()
    n0 = params.spec_g0.n_params
    d0 = params.d0
    last_in = params.spec_g0.hidden[-1]
    th[n0 - d0 - d0 * last_in: n0 - d0] = 0.0
    th[n0 - d0: n0] = const
    return params.with_theta(th)


def test_pool_constant_features():
    c = np.linspace(-1, 1, 10)
    p = frozen_g0(init_params(seed=2), c)
    nu = gamma_init(6, 1 / 60, Grid1D(-1, 1, 63)).scaled(0.7)
    np.testing.assert_allclose(pool_features(nu, p), nu.mass * c, atol=1e-14)


def test_pool_against_sampled_atoms():
    p = init_params(seed=5)
    grid = Grid1D(-1, 1, 255)
    nu = gaussian_init(0.1, 0.2, grid, mass=0.8)
    # stratified inverse-CDF sample of 10^4 atoms carrying the same total mass
    x = grid.nodes
    rho = nu.padded()
    cdf = np.concatenate(([0.0], np.cumsum(0.5 * (rho[1:] + rho[:-1]) * np.diff(x))))
    u = (np.arange(10_000) + 0.5) / 10_000 * cdf[-1]
    atoms = AtomicSubProb(np.interp(u, cdf, x), np.full(10_000, nu.mass / 10_000))
    np.testing.assert_allclose(pool_features(atoms, p), pool_features(nu, p), atol=1e-2)


def test_pool_is_linear():
    p = init_params(seed=1)
    grid = Grid1D(-1, 1, 40)
    n1 = gaussian_init(0.2, 0.1, grid, 0.5)
    n2 = gaussian_init(-0.3, 0.2, grid, 0.4)
    comb = SubProbGrid(grid, 0.6 * n1.c + 0.9 * n2.c)
    np.testing.assert_allclose(pool_features(comb, p), 0.6 * pool_features(n1, p) + 0.9 * pool_features(n2, p),
                               atol=1e-12)


def test_pool_rejects_unknown_measures():
    with pytest.raises(TypeError):
        pool_features([0.1, 0.2], init_params())


def test_atomic_relabel_invariance():
    p = init_params(seed=1)
    x = np.array([0.1, -0.4, 0.7, 0.2])
    w = np.array([0.1, 0.2, 0.3, 0.15])
    perm = [2, 0, 3, 1]
    a = policy_eval(0.3, x, AtomicSubProb(x, w), p)
    b = policy_eval(0.3, x, AtomicSubProb(x[perm], w[perm]), p)
    np.testing.assert_allclose(a, b, atol=1e-14)


# ---------------------------------------------------------------- evaluation


def test_zeroed_final_layer_gives_log2():
    p = init_params(seed=0, lo=0.25)
    th = p.theta.copy()
    th[-51:] = 0.0
    p = p.with_theta(th)
    nu = gamma_init(6, 1 / 60, Grid1D(-1, 1, 31))
    np.testing.assert_allclose(policy_eval(0.5, np.linspace(-1, 1, 7), nu, p), np.log(2) + 0.25, atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(1.0, 50.0), st.floats(0, 1), st.floats(-5, 5))
def test_outputs_in_control_set(seed, scale, t, x):
    p = init_params(SMALL_G0, SMALL_G1, seed=seed, lo=0.1)
    p = p.with_theta(p.theta * scale)
    nu = AtomicSubProb.from_pairs([(x, 0.5)])
    g = policy_eval(t, np.array([x, -x]), nu, p)
    assert np.all(np.isfinite(g)) and np.all(g >= 0.1)


def test_grid_matches_scalar_evaluation():
    p = init_params(seed=7)
    grid = Grid1D(-1, 1, 50)
    nu = gamma_init(6, 1 / 60, grid)
    from mfcontagion.measures import quad_rule
    rule = quad_rule(grid, ())
    vals = policy_eval_grid(0.4, nu, p, rule)
    idx = np.random.default_rng(0).choice(rule.size, 5, replace=False)
    for q in idx:
        assert vals[q] == pytest.approx(float(policy_eval(0.4, rule.x[q:q + 1], nu, p)[0]), abs=1e-14)
    batched = p.grid_values(0.4, nu.c[None, :], rule)
    np.testing.assert_allclose(batched[0], vals, atol=1e-14)


def test_refinement_keeps_values_at_shared_nodes():
    p = init_params(seed=2)
    coarse = Grid1D(-1, 1, 31)
    fine = Grid1D(-1, 1, 63)
    nu_c = gaussian_init(0.1, 0.2, coarse, 0.9)
    # the piecewise-linear density is represented exactly on the refined grid
    nu_f = SubProbGrid(fine, nu_c.density(fine.interior))
    a = policy_eval(0.2, coarse.interior, nu_c, p)
    b = policy_eval(0.2, fine.interior[1::2], nu_f, p)
    np.testing.assert_allclose(a, b, atol=1e-9)
    z = policy_eval(0.2, coarse.interior, SubProbGrid.zero(coarse), p)
    np.testing.assert_array_equal(z, policy_eval(0.2, fine.interior[1::2], SubProbGrid.zero(fine), p))


def test_lipschitz_bound_dominates_derivative():
    for seed in range(5):
        p = init_params(seed=seed)
        nu = gamma_init(6, 1 / 60, Grid1D(-1, 1, 31))
        x = np.linspace(-1, 1, 201)
        dx = policy_dx(0.3, x, nu, p)
        # the analytic derivative matches central differences
        fd = (policy_eval(0.3, x + 1e-6, nu, p) - policy_eval(0.3, x - 1e-6, nu, p)) / 2e-6
        np.testing.assert_allclose(dx, fd, atol=1e-7)
        assert np.max(np.abs(dx)) <= lipschitz_bound_x(p)
        d = 1e-3
        assert np.max(np.abs(policy_eval(0.3, x + d, nu, p) - policy_eval(0.3, x, nu, p))) <= lipschitz_bound_x(p) * d


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path):
    p = init_params(SMALL_G0, SMALL_G1, seed=11, T=2.0, lo=0.5)
    f = save_checkpoint(p, tmp_path / "p.npz", extra={"note": 1})
    q = load_checkpoint(f)
    assert q.theta.tobytes() == p.theta.tobytes()
    assert q.spec_g0 == p.spec_g0 and q.spec_g1 == p.spec_g1
    assert (q.T, q.lo, q.seed) == (2.0, 0.5, 11)


def test_checkpoint_version_check(tmp_path):
    p = init_params(SMALL_G0, SMALL_G1, seed=1)
    header = {"version": 99}
    np.savez(tmp_path / "bad.npz", theta=p.theta, header=np.array(json.dumps(header)))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.npz")
