"""Spectral-norm estimation by power iteration.

Two estimators:

* PIM runs power iteration on a matrix. For a convolution kernel this means
  the ``(h*w*c_in) x c_out`` reshape of the weights.
* PICO runs power iteration on the convolution operator itself, alternating
  the convolution and its adjoint (a transposed convolution) over a fixed
  input shape.

Dense oracles (:func:`dbc_materialize`, :func:`exact_sigma`) exist for
verification at small scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigurationError, ShapeError
from .numcore import (Layer, PADDINGS, _axis_plan, conv_backward_input, conv_forward,
                      conv_output_hw)

DEFAULT_C = 1.0 / 0.55
ORACLE_CAP = 4096


@dataclass(frozen=True)
class ConvKernel:
    weights: np.ndarray
    input_shape: tuple[int, int, int]
    stride: int = 1
    padding: str = "zero_same"

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if w.ndim != 4:
            raise ShapeError("conv kernel must be h x w x c_in x c_out")
        if self.padding not in PADDINGS:
            raise ConfigurationError(f"unknown padding {self.padding!r}")
        H, W, c = self.input_shape
        if c != w.shape[2]:
            raise ShapeError("input channels do not match the kernel")
        if w.shape[0] > H or w.shape[1] > W:
            raise ShapeError("receptive field larger than the input")
        if self.stride < 1:
            raise ShapeError("stride must be a positive integer")

    @property
    def output_shape(self) -> tuple[int, int, int]:
        oh, ow = conv_output_hw(self.input_shape[:2], self.stride)
        return oh, ow, self.weights.shape[3]

    def reshaped(self) -> np.ndarray:
        """The ``(h*w*c_in) x c_out`` matrix used by PIM."""
        return self.weights.reshape(-1, self.weights.shape[3])

    @classmethod
    def from_layer(cls, layer: Layer) -> "ConvKernel":
        return cls(layer.weights, layer.input_shape, layer.stride, layer.padding)


@dataclass(frozen=True)
class PowerIterState:
    u: np.ndarray
    v: np.ndarray
    iterations_done: int = 0


@dataclass(frozen=True)
class NormalizerConfig:
    method: str = "pico"
    constant: float = DEFAULT_C
    power_iters_per_step: int = 1
    warmup_iters: int = 50

    def __post_init__(self):
        if self.method not in ("pim", "pico"):
            raise ConfigurationError(f"unknown normalizer method {self.method!r}")
        if not self.constant > 0:
            raise ConfigurationError("normalization constant C must be positive")
        if self.power_iters_per_step < 1:
            raise ConfigurationError("power_iters_per_step must be positive")
        if self.warmup_iters < 0:
            raise ConfigurationError("warmup_iters must be non-negative")


def _unit(rng: np.random.Generator, shape) -> np.ndarray:
    x = rng.standard_normal(shape)
    return x / np.linalg.norm(x)


def init_state(in_shape, out_shape, rng: np.random.Generator) -> PowerIterState:
    """Seeded unit-Gaussian start vectors (v: operator input, u: output)."""
    return PowerIterState(_unit(rng, out_shape), _unit(rng, in_shape), 0)


def init_pim_state(W, rng) -> PowerIterState:
    W = np.asarray(W)
    return init_state((W.shape[1],), (W.shape[0],), rng)


def init_pico_state(k: ConvKernel, rng) -> PowerIterState:
    return init_state(k.input_shape, k.output_shape, rng)


def _iterate(apply, adjoint, state: PowerIterState):
    wv = apply(state.v)
    nu = np.linalg.norm(wv)
    if nu == 0.0:
        return 0.0, state
    u = wv / nu
    v_hat = adjoint(u)
    nv = np.linalg.norm(v_hat)
    if nv == 0.0:
        return 0.0, state
    v = v_hat / nv
    sigma = float(np.linalg.norm(apply(v)))
    return sigma, PowerIterState(u, v, state.iterations_done + 1)


def pim_step(W, state: PowerIterState):
    """One u/v alternation on a matrix; returns ``(sigma_estimate, state)``."""
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise ShapeError("PIM needs a 2-axis matrix")
    return _iterate(lambda v: W @ v, lambda u: W.T @ u, state)


def conv2d_apply(k: ConvKernel, v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != k.input_shape:
        raise ShapeError(f"expected input {k.input_shape}, got {v.shape}")
    return conv_forward(v[None], k.weights, k.stride, k.padding)[0]


def conv2d_adjoint(k: ConvKernel, u) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if u.shape != k.output_shape:
        raise ShapeError(f"expected output-shaped array {k.output_shape}, got {u.shape}")
    return conv_backward_input(u[None], k.weights, k.input_shape, k.stride, k.padding)[0]


def pico_step(k: ConvKernel, state: PowerIterState):
    """One convolution / transposed-convolution alternation."""
    if state.v.shape != k.input_shape or state.u.shape != k.output_shape:
        raise ShapeError("power-iteration state does not match the kernel's shapes")
    return _iterate(lambda v: conv2d_apply(k, v), lambda u: conv2d_adjoint(k, u), state)


def run_power_iteration(step, operator, state: PowerIterState, iters: int, tol: float = 0.0):
    """Repeat ``step`` up to ``iters`` times; stop early once the relative
    change of the estimate drops below ``tol`` (``tol=0`` runs all of them)."""
    sigma = 0.0
    for _ in range(iters):
        prev = sigma
        sigma, state = step(operator, state)
        if tol > 0 and sigma > 0 and abs(sigma - prev) <= tol * sigma:
            break
    return sigma, state


def dbc_materialize(k: ConvKernel) -> np.ndarray:
    """Dense matrix of the convolution on flattened (row-major) inputs."""
    n_in = int(np.prod(k.input_shape))
    n_out = int(np.prod(k.output_shape))
    if n_in > ORACLE_CAP or n_out > ORACLE_CAP:
        raise ConfigurationError(
            f"operator {n_out}x{n_in} exceeds the {ORACLE_CAP}x{ORACLE_CAP} oracle cap")
    basis = np.eye(n_in).reshape((n_in,) + k.input_shape)
    cols = conv_forward(basis, k.weights, k.stride, k.padding)
    return cols.reshape(n_in, n_out).T


def exact_sigma(M) -> float:
    """Largest singular value from a dense LAPACK SVD."""
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise ShapeError("exact_sigma needs a matrix")
    if max(M.shape) > ORACLE_CAP:
        raise ConfigurationError("matrix exceeds the oracle cap")
    if M.size == 0:
        return 0.0
    return float(np.linalg.svd(M, compute_uv=False)[0])


def range_bound(k: ConvKernel) -> float:
    """sqrt(h*w)/stride: the claimed upper ratio of the PICO to the PIM estimate."""
    h, w = k.weights.shape[:2]
    return math.sqrt(h * w) / k.stride


def overlap_bound(k: ConvKernel) -> float:
    """sqrt of the largest number of output windows sharing one input pixel.

    Every window's response is bounded by the PIM norm, so this multiplicity
    bounds the PICO/PIM ratio from above. Without wrap-around it is
    ``ceil(h/s) * ceil(w/s)``.
    """
    def axis_max(size, taps):
        idx, pad = _axis_plan(size, taps, k.stride, k.padding)
        idx = idx.ravel() - pad[0]
        idx = idx[(idx >= 0) & (idx < size)]
        return int(np.bincount(idx, minlength=size).max())

    H, W = k.input_shape[:2]
    h, w = k.weights.shape[:2]
    return math.sqrt(axis_max(H, h) * axis_max(W, w))


# ---------------------------------------------------------------------------
# normalization of layers

def layer_operator(layer: Layer, method: str):
    """``(step_fn, operator)`` pair estimating the layer's spectral norm."""
    if layer.kind == "dense":
        return pim_step, layer.weights
    if layer.kind == "conv2d":
        if method == "pico":
            return pico_step, ConvKernel.from_layer(layer)
        return pim_step, layer.weights.reshape(-1, layer.weights.shape[3])
    raise ConfigurationError(f"layer kind {layer.kind!r} has no weights to normalize")


def init_layer_state(layer: Layer, config: NormalizerConfig, rng) -> PowerIterState:
    step, op = layer_operator(layer, config.method)
    if step is pico_step:
        state = init_pico_state(op, rng)
    else:
        state = init_pim_state(op, rng)
    if config.warmup_iters:
        _, state = run_power_iteration(step, op, state, config.warmup_iters)
    return state


@dataclass(frozen=True)
class Normalized:
    layer: Layer
    state: PowerIterState
    sigma: float
    scale: float
    degenerate: bool = False


def normalize_and_scale(layer: Layer, config: NormalizerConfig,
                        state: PowerIterState) -> Normalized:
    """Run this step's power iterations, then return ``W * C / sigma``.

    The input layer is left untouched, so the raw weights keep receiving
    optimizer updates. ``scale`` is the factor applied to the weights (the
    bias is not scaled).
    """
    step, op = layer_operator(layer, config.method)
    sigma, state = run_power_iteration(step, op, state, config.power_iters_per_step)
    if sigma == 0.0:
        return Normalized(layer, state, 0.0, 1.0, degenerate=True)
    scale = config.constant / sigma
    return Normalized(replace(layer, weights=layer.weights * scale), state, sigma, scale)


def estimate_sigma(layer: Layer, method: str = "pico", iters: int = 500, seed: int = 0,
                   tol: float = 1e-12) -> float:
    """Fresh, long-run estimate of a layer's spectral norm."""
    step, op = layer_operator(layer, method)
    rng = np.random.default_rng(seed)
    state = init_pico_state(op, rng) if step is pico_step else init_pim_state(op, rng)
    return run_power_iteration(step, op, state, iters, tol)[0]
