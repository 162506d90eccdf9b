import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from repmmd import kernels as kn
from repmmd.errors import ConfigurationError, ShapeError
from repmmd.numcore import finite_diff_grad

ROLES = list(kn.BlockRole)
SIDES = [kn.LossSide.ATTRACTIVE, kn.LossSide.REPULSIVE]
SPECS = [kn.rbf(1.0), kn.rbf(0.5), kn.rq(0.5), kn.rq(2.0), kn.rbf_mixture(), kn.rq_mixture()]

points = hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.just(3)),
                    elements=st.floats(-5, 5))


def test_pairwise_examples():
    s = kn.pairwise_sq_dists([[0.0, 0.0], [3.0, 4.0]])
    assert np.array_equal(s, [[0.0, 25.0], [25.0, 0.0]])
    assert np.array_equal(kn.pairwise_sq_dists([[1.0, 1.0]], [[1.0, 1.0]]), [[0.0]])
    with pytest.raises(ShapeError):
        kn.pairwise_sq_dists(np.zeros((2, 2)), np.zeros((2, 3)))


@given(points, points)
def test_pairwise_matches_direct_differences(a, b):
    direct = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    got = kn.pairwise_sq_dists(a, b)
    assert np.all(got >= 0)
    assert np.allclose(got, direct, atol=1e-9 * (1 + direct.max()))


def test_pairwise_grad_matches_fd(rng):
    a, b = rng.standard_normal((4, 3)), rng.standard_normal((5, 3))
    G = rng.standard_normal((4, 5))
    da, db = kn.pairwise_sq_dists_grad(a, b, G)
    fa = finite_diff_grad(lambda v: float((G * kn.pairwise_sq_dists(v, b)).sum()), a)
    fb = finite_diff_grad(lambda v: float((G * kn.pairwise_sq_dists(a, v)).sum()), b)
    assert np.allclose(da, fa, atol=1e-7) and np.allclose(db, fb, atol=1e-7)


def test_kernel_values():
    assert kn.kernel_matrix(kn.rbf(1.0), np.array([[0.0]]))[0, 0] == 1.0
    assert kn.kernel_matrix(kn.rq(1.0), np.array([[2.0]]))[0, 0] == pytest.approx(0.5, abs=1e-15)
    v = kn.kernel_matrix(kn.rbf_b(1.0, 0.25, 4.0), np.array([[9.0]]),
                         kn.BlockRole.REAL_REAL, kn.LossSide.REPULSIVE)
    assert v[0, 0] == pytest.approx(0.1353352832366127, abs=1e-15)
    assert kn.kernel_matrix(kn.rbf_mixture(), np.array([[0.0]]))[0, 0] == 5.0
    assert kn.DEFAULT_MIXTURE_SCALES == pytest.approx((1, math.sqrt(2), 2, 2 * math.sqrt(2), 4))


def test_kernel_slopes():
    g = kn.kernel_matrix_grad(kn.rbf(1.0), np.array([[2.0]]))
    assert g[0, 0] == pytest.approx(-0.18393972058572117, abs=1e-15)
    g = kn.kernel_matrix_grad(kn.rbf_b(), np.array([[9.0]]), kn.BlockRole.REAL_REAL,
                              kn.LossSide.REPULSIVE)
    assert g[0, 0] == 0.0


def test_bounded_kernel_needs_a_discriminator_side():
    with pytest.raises(ConfigurationError):
        kn.kernel_matrix(kn.rbf_b(), np.zeros((1, 1)), kn.BlockRole.REAL_REAL,
                         kn.LossSide.UNBOUNDED)


@pytest.mark.parametrize("spec", SPECS)
def test_slope_matches_fd_in_s(spec):
    s = np.linspace(0.1, 12.0, 40)
    g = kn.kernel_matrix_grad(spec, s)
    h = 1e-6
    fd = (kn.kernel_matrix(spec, s + h) - kn.kernel_matrix(spec, s - h)) / (2 * h)
    assert np.max(np.abs(g - fd)) < 1e-8


@pytest.mark.parametrize("role", ROLES)
@pytest.mark.parametrize("side", SIDES)
def test_bounded_slope_matches_fd_off_boundaries(role, side):
    spec = kn.rbf_b()
    s = np.linspace(0.0, 10.0, 1001)
    s = s[(np.abs(s - spec.b_l) > 1e-3) & (np.abs(s - spec.b_u) > 1e-3)]
    h = 1e-7
    g = kn.kernel_matrix_grad(spec, s, role, side)
    fd = (kn.kernel_matrix(spec, s + h, role, side)
          - kn.kernel_matrix(spec, np.maximum(s - h, 0), role, side)) / (s + h - np.maximum(s - h, 0))
    keep = s > h
    assert np.max(np.abs(g[keep] - fd[keep])) < 1e-6


@given(points, st.sampled_from(SPECS))
def test_self_gram_symmetric_unit_diagonal(a, spec):
    K = kn.kernel_matrix(spec, kn.pairwise_sq_dists(a))
    n_members = len(spec.members) if spec.variant == "mixture" else 1
    assert np.array_equal(K, K.T)
    assert np.allclose(np.diag(K), n_members)


@pytest.mark.parametrize("spec", SPECS + [kn.rbf_b()])
@pytest.mark.parametrize("role", ROLES)
@pytest.mark.parametrize("side", SIDES)
def test_non_increasing_in_distance(spec, role, side):
    s = np.linspace(0.0, 20.0, 2001)
    k = kn.kernel_matrix(spec, s, role, side)
    assert np.all(np.diff(k) <= 0)


@pytest.mark.parametrize("role", ROLES)
@pytest.mark.parametrize("side", SIDES)
def test_bounded_equals_rbf_inside_bounds(role, side):
    s = np.linspace(0.25, 4.0, 500)
    assert np.array_equal(kn.kernel_matrix(kn.rbf_b(), s, role, side),
                          kn.kernel_matrix(kn.rbf(1.0), s))


def test_clamp_modes_per_block():
    # attractive: within-group lower clamp, cross upper clamp; repulsive: real_gen unclamped
    s = np.array([0.0, 100.0])
    rbf = kn.kernel_matrix(kn.rbf(1.0), s)
    lo, hi = math.exp(-0.125), math.exp(-2.0)
    cases = {
        (kn.BlockRole.REAL_REAL, kn.LossSide.ATTRACTIVE): [lo, rbf[1]],
        (kn.BlockRole.GEN_GEN, kn.LossSide.ATTRACTIVE): [lo, rbf[1]],
        (kn.BlockRole.REAL_GEN, kn.LossSide.ATTRACTIVE): [1.0, hi],
        (kn.BlockRole.GEN_GEN, kn.LossSide.REPULSIVE): [lo, rbf[1]],
        (kn.BlockRole.REAL_REAL, kn.LossSide.REPULSIVE): [1.0, hi],
        (kn.BlockRole.REAL_GEN, kn.LossSide.REPULSIVE): list(rbf),
    }
    for (role, side), want in cases.items():
        assert np.allclose(kn.kernel_matrix(kn.rbf_b(), s, role, side), want, rtol=0, atol=1e-15)


def test_curves_saturate_at_both_ends(tmp_path):
    e = np.linspace(0.0, 10.0, 1001)
    labels, table = kn.kernel_curves(kn.rbf_mixture(), e, derivative=True)
    assert labels[0] == "e" and labels[-1] == "mean" and len(labels) == 7
    mean = np.abs(table[:, -1])
    peak = mean.max()
    assert mean[0] == 0.0
    assert mean[-1] < 0.05 * peak
    assert 0 < np.argmax(mean) < len(e) - 1
    path = tmp_path / "curves.csv"
    kn.write_curves_csv(path, kn.rbf_mixture(), e, derivative=True)
    rows = path.read_text().splitlines()
    assert len(rows) == 1002
    assert float(rows[500].split(",")[-1]) == table[499, -1]
