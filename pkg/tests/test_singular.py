import csv

import numpy as np
import pytest

from mfcontagion.errors import ConvergenceError
from mfcontagion.fem import evolve_spde
from mfcontagion.model import scenario_bailout
from mfcontagion.particle import make_noise, noise_paths, with_intensity
from mfcontagion.singular import (LossPathFamily, intensity_sweep, minimal_iteration, monotone_limit,
                                  write_family_csv)

LAM0 = [5.0, 10.0, 25.0, 50.0]


@pytest.fixture(scope="module")
def family():
    b = scenario_bailout()
    return intensity_sweep(b, LAM0, b.grid(64), 64, 8, seed=0, N=None)


# ---------------------------------------------------------------- sweeps


def test_sweep_is_monotone_in_intensity(family):
    assert family.loss.shape == (4, 8, 65)
    assert family.monotonicity_violation() <= 1e-3
    assert np.all(np.diff(family.mean_terminal_loss()) >= 0)


def test_single_scale_reduces_to_evolve_spde():
    b = scenario_bailout()
    grid = b.grid(32)
    fam = intensity_sweep(b, [7.0], grid, 32, 2, seed=3, N=None)
    for j, nz in enumerate(noise_paths(2, 32, 1.0, 3)):
        path = evolve_spde(with_intensity(b, 7.0), None, grid, 32, noise=nz)
        np.testing.assert_allclose(fam.loss[0, j], path.loss, rtol=0, atol=1e-14)
    assert fam.monotonicity_violation() == 0.0 and fam.kill_gap == []


def test_sweep_rejects_unsorted_scales():
    b = scenario_bailout()
    with pytest.raises(ValueError):
        intensity_sweep(b, [10.0, 5.0], b.grid(8), 8, 1)
    with pytest.raises(ValueError):
        intensity_sweep(b, [], b.grid(8), 8, 1)


def test_sweep_attaches_kill_gaps():
    b = scenario_bailout()
    fam = intensity_sweep(b, [5.0, 50.0], b.grid(16), 16, 2, N=32, gap_reps=3, gap_m=16)
    assert [r["lam0"] for r in fam.kill_gap] == [5.0, 50.0]
    assert all(len(r["values"]) == 3 for r in fam.kill_gap)


def test_feedback_toggle_irrelevant_without_contagion():
    b = scenario_bailout(alpha=1e-300).replace(alpha=lambda t, x, nu: np.zeros(np.shape(x)))
    grid = b.grid(32)
    nz = make_noise(32, 1.0, 1)
    plain = evolve_spde(b, None, grid, 32, noise=nz)
    pushed = evolve_spde(b, None, grid, 32, noise=nz, feedback=np.linspace(0, 0.7, 33))
    np.testing.assert_array_equal(plain.loss, pushed.loss)


def test_family_csv(tmp_path, family):
    f = write_family_csv(family, tmp_path / "fam.csv")
    with open(f) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["lam0", "path", "t", "L_t"]
    assert len(rows) == 1 + 4 * 8 * 65


def test_family_shape_check():
    with pytest.raises(ValueError):
        LossPathFamily(np.array([1.0, 2.0]), np.linspace(0, 1, 5), np.zeros((3, 1, 5)))
    fam = LossPathFamily(np.array([1.0]), np.linspace(0, 1, 5), np.zeros((1, 5)))
    assert fam.n_paths == 1


# ---------------------------------------------------------------- minimal iteration


def test_no_contagion_is_fixed_after_one_iteration():
    b = scenario_bailout(alpha=1e-300).replace(alpha=lambda t, x, nu: np.zeros(np.shape(x)))
    res = minimal_iteration(b, 10.0, b.grid(32), 32, make_noise(32, 1.0, 0), tol=1e-12)
    assert res.converged and res.iterations == 2
    for it in res.iterates[1:]:
        np.testing.assert_allclose(it, res.iterates[1], rtol=0, atol=1e-12)


def test_iteration_converges_monotonically():
    b = scenario_bailout(alpha=1.5, sigma0=0.1)
    res = minimal_iteration(b, 10.0, b.grid(64), 64, make_noise(64, 1.0, 2), tol=1e-8, max_iter=50)
    assert res.converged and res.iterations <= 50 and res.last_gap <= 1e-8
    assert res.monotonicity_violation() <= 1e-12
    assert not np.any(res.iterates[0])


def test_fixed_point_reproduces_itself():
    b = scenario_bailout(alpha=1.5, sigma0=0.1)
    grid = b.grid(64)
    nz = make_noise(64, 1.0, 4)
    tol = 1e-9
    res = minimal_iteration(b, 10.0, grid, 64, nz, tol=tol)
    again = evolve_spde(with_intensity(b, 10.0), None, grid, 64, noise=nz, feedback=res.fixed_point).loss
    assert np.max(np.abs(again - res.fixed_point)) <= 2 * tol


def test_iteration_reports_non_convergence():
    b = scenario_bailout(alpha=2.5)
    with pytest.raises(ConvergenceError) as err:
        minimal_iteration(b, 10.0, b.grid(32), 32, make_noise(32, 1.0, 0), tol=1e-14, max_iter=2)
    part = err.value.result
    assert part.iterations == 2 and not part.converged and len(part.iterates) == 3
    assert "last gap" in str(err.value)


def test_iteration_keeps_bundle_intensity_when_unset():
    b = scenario_bailout(lam0=10.0)
    nz = make_noise(16, 1.0, 0)
    a = minimal_iteration(b, None, b.grid(16), 16, nz)
    c = minimal_iteration(b, 10.0, b.grid(16), 16, nz)
    np.testing.assert_array_equal(a.fixed_point, c.fixed_point)


# ---------------------------------------------------------------- limit


def test_constant_family_limit():
    path = np.minimum(np.linspace(0, 0.4, 11), 0.3)
    fam = LossPathFamily(np.full(3, 10.0), np.linspace(0, 1, 11), np.stack([path[None]] * 3))
    res = monotone_limit(fam)
    np.testing.assert_array_equal(res.limit[0], path)
    assert not np.any(res.pair_gaps) and res.diagnostic == 0.0


def test_perturbed_family_is_flagged(family):
    loss = family.loss.copy()
    loss[2, 3, 40] -= 0.5
    with pytest.raises(ValueError):
        monotone_limit(LossPathFamily(family.lam0, family.times, loss))


def test_limit_is_upper_envelope(family):
    res = monotone_limit(family)
    assert np.all(res.limit >= family.loss.max(axis=0) - 1e-15)
    assert np.all(np.diff(res.limit, axis=-1) >= 0)
    assert res.diagnostic_pair == (25.0, 50.0)
    assert res.to_dict()["diagnostic_pair"] == [25.0, 50.0]
    assert len(res.pair_gaps) == 3


@pytest.mark.xfail(strict=True, reason="loss paths develop cascade jumps whose timing moves with the intensity; "
                                       "sup-norm gaps between consecutive scales stay near the jump size instead "
                                       "of shrinking")
def test_gaps_decrease_across_pairs(family):
    gaps = monotone_limit(family).pair_gaps
    assert np.all(np.diff(gaps) < 0)
