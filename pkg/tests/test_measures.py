import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate
from scipy.optimize import linprog

from mfcontagion.measures import (AtomicSubProb, Grid1D, SubProbGrid, dist_dp, empirical_of, mass_and_loss, moment,
                                  pair, wasserstein)
from mfcontagion.particle import ParticleEnsemble


def hat_uniform(a, b, h, x_lo, x_hi, mass=1.0):
    """Piecewise-linear interpolant of the indicator of [a, b], rescaled to ``mass``.

    ``a`` and ``b`` must be grid nodes; the interpolant has linear ramps of
    width ``h`` outside [a, b], so its raw mass is ``b - a + h``.
    """
    n = int(round((x_hi - x_lo) / h)) - 1
    grid = Grid1D(x_lo, x_hi, n)
    x = grid.interior
    c = ((x >= a - 1e-12) & (x <= b + 1e-12)).astype(float)
    return SubProbGrid(grid, c * mass / (b - a + h))


def quad_oracle(nu, phi):
    """Adaptive quadrature of ``phi * density`` with breakpoints at every node."""
    f = lambda x: phi(x) * nu.density(x)
    pts = nu.grid.nodes
    return sum(integrate.quad(f, lo, hi, epsabs=1e-14, epsrel=1e-14)[0] for lo, hi in zip(pts[:-1], pts[1:]))


def transport_w1(nu1, nu2):
    """Brute-force W1 of the zero-compensated measures by linear programming."""
    def comp(nu):
        x = np.append(nu.locations, 0.0)
        w = np.append(nu.weights, 1.0 - nu.mass)
        return x, w

    x1, w1 = comp(nu1)
    x2, w2 = comp(nu2)
    n1, n2 = x1.size, x2.size
    cost = np.abs(x1[:, None] - x2[None, :]).ravel()
    A = []
    for i in range(n1):
        row = np.zeros((n1, n2))
        row[i] = 1
        A.append(row.ravel())
    for j in range(n2):
        row = np.zeros((n1, n2))
        row[:, j] = 1
        A.append(row.ravel())
    res = linprog(cost, A_eq=np.array(A), b_eq=np.concatenate([w1, w2]), bounds=(0, None), method="highs")
    return res.fun


# ---------------------------------------------------------------- grid basics


def test_grid_rejects_bad_domains():
    with pytest.raises(ValueError):
        Grid1D(0.0, 1.0, 8)
    with pytest.raises(ValueError):
        Grid1D(-1.0, 1.0, 1)


def test_subprob_rejects_negative_and_excess_mass():
    g = Grid1D(-1, 1, 9)
    with pytest.raises(ValueError):
        SubProbGrid(g, -np.ones(9))
    with pytest.raises(ValueError):
        SubProbGrid(g, np.full(9, 10.0))


# ---------------------------------------------------------------- mass and loss


def test_mass_and_loss_atomic():
    assert mass_and_loss(AtomicSubProb.from_pairs([(0.1, 0.25), (0.3, 0.25)])) == (0.5, 0.5)


def test_mass_and_loss_zero_grid():
    assert mass_and_loss(SubProbGrid.zero(Grid1D(-1, 1, 7))) == (0.0, 1.0)


def test_mass_and_loss_empirical_dead_fraction():
    N, k = 8, 3
    ens = ParticleEnsemble(np.linspace(0, 1, N), np.zeros(N), np.ones(N), np.arange(N) < k, np.full(N, np.inf), 0.0)
    assert mass_and_loss(empirical_of(ens))[1] == pytest.approx(1 - k / N, abs=1e-15)


# ---------------------------------------------------------------- moments


def test_moment_atomic_examples():
    assert moment(AtomicSubProb.from_pairs([(2.0, 1.0)]), 2) == pytest.approx(2.0, abs=1e-15)
    assert moment(AtomicSubProb.from_pairs([(-1.0, 0.5), (1.0, 0.5)]), 1) == pytest.approx(1.0, abs=1e-15)


def test_moment_uniform_second_moment():
    # interpolant of the uniform law on [0, 1]; exact second moment of the trapezoid:
    # (1/3 + h/2 + h^2/3 + h^3/6) / (1 + h)
    for n in (95, 383, 1535):
        h = 3.0 / (n + 1)
        nu = hat_uniform(0.0, 1.0, h, -1.0, 2.0)
        exact = (1 / 3 + h / 2 + h**2 / 3 + h**3 / 6) / (1 + h)
        assert moment(nu, 2) ** 2 == pytest.approx(exact, abs=1e-12)
        assert moment(nu, 2) ** 2 == pytest.approx(quad_oracle(nu, lambda x: x * x), abs=1e-10)
    # converges to sqrt(1/3) as the ramps shrink
    assert abs(moment(nu, 2) - np.sqrt(1 / 3)) < 2 * h


def test_moment_rejects_unsupported_order():
    with pytest.raises(ValueError):
        moment(AtomicSubProb.from_pairs([(1.0, 1.0)]), 3)


# ---------------------------------------------------------------- pairing


def test_pair_constant_is_mass():
    g = Grid1D(-1, 1, 31)
    c = np.abs(np.sin(np.arange(31))) * 0.5
    nu = SubProbGrid(g, c)
    assert pair(nu, lambda x: np.ones_like(x)) == pytest.approx(nu.mass, abs=1e-12)


def test_pair_mean_of_uniform():
    # the interpolant is symmetric about 1/2, so the mean is exactly 1/2
    nu = hat_uniform(0.0, 1.0, 1 / 64, -1.0, 2.0)
    assert pair(nu, lambda x: x) == pytest.approx(0.5, abs=1e-12)


def test_pair_negative_part_with_kink():
    # uniform on [-1, 1]; exact value for the trapezoid is (1/2 + h/2 + h^2/6) / (2 + h)
    h = 1 / 64
    nu = hat_uniform(-1.0, 1.0, h, -2.0, 2.0)
    exact = (0.5 + h / 2 + h**2 / 6) / (2 + h)
    neg = lambda x: np.maximum(-x, 0.0)
    assert pair(nu, neg, kinks=(0.0,)) == pytest.approx(exact, abs=1e-12)
    # a kink between nodes needs the split
    g = Grid1D(-1, 1, 10)
    nu2 = SubProbGrid(g, np.full(10, 0.4))
    shifted = lambda x: np.maximum(0.05 - x, 0.0)
    assert pair(nu2, shifted, kinks=(0.05,)) == pytest.approx(quad_oracle(nu2, shifted), abs=1e-12)
    assert abs(pair(nu2, shifted) - quad_oracle(nu2, shifted)) > 1e-8


def test_pair_exact_for_quartics_and_ignores_outside_kinks():
    g = Grid1D(-1, 1, 12)
    nu = SubProbGrid(g, np.linspace(0.1, 0.5, 12))
    p4 = lambda x: 1 - 2 * x + 3 * x**3 - x**4
    assert pair(nu, p4, kinks=(5.0,)) == pytest.approx(quad_oracle(nu, p4), abs=1e-13)


def test_pair_matches_moment():
    g = Grid1D(-1, 1, 40)
    nu = SubProbGrid(g, np.exp(-np.linspace(-2, 2, 40) ** 2) * 0.8)
    for p in (1, 2):
        assert pair(nu, lambda x: np.abs(x) ** p, kinks=(0.0,)) == pytest.approx(moment(nu, p) ** p, abs=1e-10)


# ---------------------------------------------------------------- empirical measures


def test_empirical_examples():
    ens = ParticleEnsemble(np.array([0.1, 0.2]), np.zeros(2), np.ones(2), np.array([True, True]),
                           np.full(2, np.inf), 0.0)
    e = empirical_of(ens)
    assert e.locations.tolist() == [0.1, 0.2] and e.weights.tolist() == [0.5, 0.5]
    ens = ParticleEnsemble(np.array([0.1, 0.2]), np.zeros(2), np.ones(2), np.array([True, False]),
                           np.array([np.inf, 0.3]), 0.0)
    e = empirical_of(ens)
    assert e.weights.tolist() == [0.5] and mass_and_loss(e)[1] == 0.5
    empty = ParticleEnsemble(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0, bool), np.zeros(0), 0.0)
    assert empirical_of(empty).mass == 0.0


# ---------------------------------------------------------------- metric


def test_dist_examples():
    d0 = AtomicSubProb.from_pairs([(0.0, 1.0)])
    d0_half = AtomicSubProb.from_pairs([(0.0, 0.5)])
    assert dist_dp(d0, d0_half, 1) == pytest.approx(0.5, abs=1e-15)
    a, b = -0.3, 0.7
    assert dist_dp(AtomicSubProb.from_pairs([(a, 1.0)]), AtomicSubProb.from_pairs([(b, 1.0)]), 1) == \
        pytest.approx(1.0, abs=1e-15)
    two = AtomicSubProb.from_pairs([(-1.0, 0.5), (1.0, 0.5)])
    assert dist_dp(two, d0, 1) == pytest.approx(transport_w1(two, d0), abs=1e-12)
    assert dist_dp(two, d0, 1) == pytest.approx(1.0, abs=1e-15)


def test_w1_grid_against_quadrature():
    g = Grid1D(-1, 1, 63)
    nu1 = SubProbGrid(g, np.maximum(0, 1 - np.abs(g.interior - 0.2) * 4) * 2.0)
    nu2 = SubProbGrid(g, np.maximum(0, 1 - np.abs(g.interior + 0.1) * 5) * 2.5)

    # the densities are piecewise linear, so trapezoid cumulation on a refinement of the nodes is exact
    xs = np.linspace(-1, 1, 64 * 64 + 1)
    F1 = integrate.cumulative_trapezoid(nu1.density(xs), xs, initial=0.0) + (1 - nu1.mass) * (xs >= 0)
    F2 = integrate.cumulative_trapezoid(nu2.density(xs), xs, initial=0.0) + (1 - nu2.mass) * (xs >= 0)
    w1 = integrate.trapezoid(np.abs(F1 - F2), xs)
    assert wasserstein(nu1, nu2, 1) == pytest.approx(w1, abs=2e-4)


def test_w2_atomic_exact():
    nu1 = AtomicSubProb.from_pairs([(0.0, 0.5), (1.0, 0.5)])
    nu2 = AtomicSubProb.from_pairs([(0.5, 0.5), (1.5, 0.5)])
    assert wasserstein(nu1, nu2, 2) == pytest.approx(0.5, abs=1e-14)
    with pytest.raises(ValueError):
        wasserstein(nu1, nu2, 3)


atoms = st.lists(st.tuples(st.floats(-2, 2, allow_nan=False), st.floats(0.01, 1.0)), min_size=1, max_size=5)


def measure_from(pairs, total):
    x, w = zip(*pairs)
    w = np.array(w)
    return AtomicSubProb(np.array(x), w / w.sum() * total)


@settings(max_examples=60, deadline=None)
@given(atoms, atoms, atoms, st.floats(0.05, 1.0), st.floats(0.05, 1.0), st.floats(0.05, 1.0))
def test_metric_axioms_against_lp(a1, a2, a3, m1, m2, m3):
    nu1, nu2, nu3 = measure_from(a1, m1), measure_from(a2, m2), measure_from(a3, m3)
    d12, d21 = dist_dp(nu1, nu2, 1), dist_dp(nu2, nu1, 1)
    assert d12 == d21
    assert dist_dp(nu1, nu1, 1) == 0.0
    assert d12 <= dist_dp(nu1, nu3, 1) + dist_dp(nu3, nu2, 1) + 1e-10
    assert wasserstein(nu1, nu2, 1) == pytest.approx(transport_w1(nu1, nu2), abs=1e-9)
    # loss is 1-Lipschitz for d1
    assert abs(nu1.mass - nu2.mass) <= d12 + 1e-15


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=8, max_size=8), st.lists(st.floats(0, 1), min_size=8, max_size=8))
def test_grid_metric_symmetry_and_loss_lipschitz(c1, c2):
    g = Grid1D(-1, 1, 8)
    nu1 = SubProbGrid(g, np.array(c1) * 0.5)
    nu2 = SubProbGrid(g, np.array(c2) * 0.5)
    for p in (1, 2):
        assert dist_dp(nu1, nu2, p) == dist_dp(nu2, nu1, p)
        assert dist_dp(nu1, nu1, p) == 0.0
    assert abs(nu1.mass - nu2.mass) <= dist_dp(nu1, nu2, 1) + 1e-15
