import numpy as np
import pytest
from hypothesis import given, strategies as st

from repmmd import numcore as nc
from repmmd import specnorm as sn
from repmmd.errors import ConfigurationError, ShapeError


def random_kernel(r, h=3, w=3, ci=2, co=2, stride=1, padding="zero_same", H=8, W=8):
    return sn.ConvKernel(r.standard_normal((h, w, ci, co)), (H, W, ci), stride, padding)


def converged(k, seed=0, iters=20000):
    state = sn.init_pico_state(k, np.random.default_rng(seed))
    return sn.run_power_iteration(sn.pico_step, k, state, iters, tol=1e-13)[0]


def test_pim_diagonal():
    W = np.diag([3.0, 4.0])
    state = sn.init_pim_state(W, np.random.default_rng(0))
    sigma, state = sn.run_power_iteration(sn.pim_step, W, state, 50)
    assert abs(sigma - 4.0) / 4.0 < 1e-6
    assert state.iterations_done == 50


def test_pim_scaled_identity_one_step():
    W = -2.5 * np.eye(3)
    sigma, _ = sn.pim_step(W, sn.init_pim_state(W, np.random.default_rng(1)))
    assert sigma == pytest.approx(2.5, rel=1e-15)


def test_pim_random_matrix(rng):
    W = rng.standard_normal((8, 8))
    state = sn.init_pim_state(W, np.random.default_rng(3))
    sigma, _ = sn.run_power_iteration(sn.pim_step, W, state, 20000, tol=1e-13)
    assert abs(sigma - sn.exact_sigma(W)) / sn.exact_sigma(W) < 1e-4


def test_zero_kernel_is_degenerate():
    k = sn.ConvKernel(np.zeros((3, 3, 1, 1)), (5, 5, 1))
    sigma, _ = sn.pico_step(k, sn.init_pico_state(k, np.random.default_rng(0)))
    assert sigma == 0.0


def test_scalar_conv_operator():
    k = sn.ConvKernel(np.full((1, 1, 1, 1), 2.5), (4, 4, 1))
    v = np.random.default_rng(0).standard_normal((4, 4, 1))
    assert np.allclose(sn.conv2d_apply(k, v), 2.5 * v)
    assert np.allclose(sn.conv2d_adjoint(k, v), 2.5 * v)
    sigma, _ = sn.pico_step(k, sn.init_pico_state(k, np.random.default_rng(0)))
    assert sigma == pytest.approx(2.5, rel=1e-14)


@pytest.mark.parametrize("padding", nc.PADDINGS)
@pytest.mark.parametrize("stride", [1, 2])
def test_adjoint_identity(rng, padding, stride):
    k = random_kernel(rng, 3, 2, 2, 3, stride, padding, 6, 6)
    v = rng.standard_normal(k.input_shape)
    u = rng.standard_normal(k.output_shape)
    lhs = float((sn.conv2d_apply(k, v) * u).sum())
    rhs = float((v * sn.conv2d_adjoint(k, u)).sum())
    assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))


def test_delta_input_stamps_the_kernel():
    W = np.arange(9.0).reshape(3, 3, 1, 1)
    k = sn.ConvKernel(W, (7, 7, 1))
    v = np.zeros((7, 7, 1))
    v[3, 3, 0] = 1.0
    out = sn.conv2d_apply(k, v)[..., 0]
    # cross-correlation: output (i, j) reads input (i + a - 1, j + b - 1)
    assert np.array_equal(out[2:5, 2:5], W[::-1, ::-1, 0, 0])
    assert out.sum() == W.sum()


def test_all_ones_circular_kernel():
    k = sn.ConvKernel(np.ones((3, 3, 1, 1)), (8, 8, 1), 1, "circular")
    assert converged(k) == pytest.approx(9.0, rel=1e-10)
    assert sn.exact_sigma(sn.dbc_materialize(k)) == pytest.approx(9.0, rel=1e-12)


def test_random_kernel_within_500_iterations():
    k = random_kernel(np.random.default_rng(11))
    state = sn.init_pico_state(k, np.random.default_rng(0))
    sigma, _ = sn.run_power_iteration(sn.pico_step, k, state, 500)
    exact = sn.exact_sigma(sn.dbc_materialize(k))
    assert abs(sigma - exact) / exact < 1e-4


def test_dbc_materialize(rng):
    k1 = sn.ConvKernel(np.full((1, 1, 1, 1), -1.5), (3, 3, 1))
    assert np.array_equal(sn.dbc_materialize(k1), -1.5 * np.eye(9))
    for padding in nc.PADDINGS:
        k = random_kernel(rng, 3, 3, 2, 3, 2, padding, 6, 8)
        M = sn.dbc_materialize(k)
        assert M.shape == (3 * 4 * 3, 6 * 8 * 2)
        v = rng.standard_normal(k.input_shape)
        assert np.max(np.abs(M @ v.ravel() - sn.conv2d_apply(k, v).ravel())) < 1e-12


def test_dbc_cap():
    k = sn.ConvKernel(np.ones((3, 3, 8, 8)), (24, 24, 8))
    with pytest.raises(ConfigurationError):
        sn.dbc_materialize(k)


def test_exact_sigma(rng):
    assert sn.exact_sigma(np.diag([3.0, 4.0])) == pytest.approx(4.0, rel=1e-15)
    assert sn.exact_sigma(-7.0 * np.eye(4)) == pytest.approx(7.0, rel=1e-15)
    W = rng.standard_normal((8, 8))
    state = sn.init_pim_state(W, np.random.default_rng(2))
    long_run = sn.run_power_iteration(sn.pim_step, W, state, 20000, tol=1e-14)[0]
    assert abs(sn.exact_sigma(W) - long_run) / long_run < 1e-6


def test_state_shape_mismatch(rng):
    k = random_kernel(rng)
    other = random_kernel(rng, H=6, W=6)
    with pytest.raises(ShapeError):
        sn.pico_step(k, sn.init_pico_state(other, rng))
    with pytest.raises(ShapeError):
        sn.conv2d_apply(k, np.zeros((6, 6, 2)))


kernel_params = st.tuples(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3),
                          st.integers(1, 3), st.sampled_from([1, 2]), st.sampled_from(nc.PADDINGS),
                          st.integers(4, 8), st.integers(4, 8), st.integers(0, 10 ** 6))


def _kernel(p):
    h, w, ci, co, s, pad, H, W, seed = p
    return random_kernel(np.random.default_rng(seed), h, w, ci, co, s, pad, H, W)


@given(kernel_params)
def test_pim_lower_and_overlap_upper_bound(p):
    k = _kernel(p)
    op = sn.exact_sigma(sn.dbc_materialize(k))
    pim = sn.exact_sigma(k.reshaped())
    assert pim <= op * (1 + 1e-12)
    assert op <= sn.overlap_bound(k) * pim * (1 + 1e-12)


def test_overlap_bound_without_wraparound():
    k = sn.ConvKernel(np.ones((3, 2, 1, 1)), (8, 8, 1), 2, "zero_same")
    assert sn.overlap_bound(k) == pytest.approx(np.sqrt(2 * 1))
    k = sn.ConvKernel(np.ones((3, 3, 1, 1)), (8, 8, 1), 1, "circular")
    assert sn.overlap_bound(k) == pytest.approx(3.0)
    assert sn.range_bound(k) == pytest.approx(3.0)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_pico_seed_invariance(seed):
    r = np.random.default_rng(100 + seed)
    k = random_kernel(r, 3, 3, 2, 2, 1, "zero_same", 6, 6)
    # perturb to break ties in the top singular values
    k = sn.ConvKernel(k.weights + 1e-3 * r.standard_normal(k.weights.shape), k.input_shape)
    vals = [converged(k, s) for s in range(3)]
    assert max(vals) - min(vals) < 1e-6


def test_normalize_and_scale_is_functional(rng):
    layer = nc.init_conv2d(rng, 3, 3, 2, 2, (6, 6, 2), stride=1)
    before = layer.weights.copy()
    config = sn.NormalizerConfig("pico", warmup_iters=2000)
    state = sn.init_layer_state(layer, config, rng)
    out = sn.normalize_and_scale(layer, config, state)
    assert np.array_equal(layer.weights, before)
    assert np.array_equal(out.layer.bias, layer.bias)
    got = sn.estimate_sigma(out.layer, "pico", iters=20000, tol=1e-13)
    assert abs(got - sn.DEFAULT_C) / sn.DEFAULT_C < 1e-3
    assert out.state.iterations_done == state.iterations_done + 1


def test_normalize_dense_with_pim(rng):
    layer = nc.init_dense(rng, 5, 4)
    config = sn.NormalizerConfig("pim", constant=1.0, warmup_iters=200)
    out = sn.normalize_and_scale(layer, config, sn.init_layer_state(layer, config, rng))
    assert sn.exact_sigma(out.layer.weights) == pytest.approx(1.0, rel=1e-6)


def test_degenerate_layer_left_unchanged(rng):
    layer = nc.dense(np.zeros((3, 2)))
    config = sn.NormalizerConfig("pim")
    out = sn.normalize_and_scale(layer, config, sn.init_layer_state(layer, config, rng))
    assert out.degenerate and out.layer is layer


def test_normalizer_config_validation():
    with pytest.raises(ConfigurationError):
        sn.NormalizerConfig("fft")
    with pytest.raises(ConfigurationError):
        sn.NormalizerConfig(constant=0.0)
    with pytest.raises(ConfigurationError):
        sn.layer_operator(nc.tanh(), "pico")
