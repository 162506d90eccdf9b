"""Dense-array arithmetic for sequential networks.

Tensors are plain ``float64`` numpy arrays. A network is an ordered list of
:class:`Layer` objects; :func:`forward` returns the output together with a
:class:`ForwardCache`, and :func:`backward` consumes that cache. There is no
global tape, so independent forward/backward pairs can run concurrently.

Forward passes can optionally carry tangent directions (a forward-mode
Jacobian-vector product) alongside the primal values. Backward then also
accepts cotangents for those tangents, which is what makes input-gradient
penalties differentiable with respect to the parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .errors import OracleError, ShapeError, UsageError

LAYER_KINDS = ("dense", "conv2d", "leaky_relu", "tanh")
PADDINGS = ("zero_same", "circular")
_EMPTY = np.zeros(0)


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


@dataclass(frozen=True)
class Layer:
    kind: str
    weights: np.ndarray = field(default_factory=lambda: _EMPTY)
    bias: np.ndarray = field(default_factory=lambda: _EMPTY)
    stride: int = 1
    padding: str = "zero_same"
    lrelu_slope: float = 0.2
    # conv only: (H, W, c_in) of a single input sample
    input_shape: tuple[int, int, int] | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ShapeError(f"unknown layer kind {self.kind!r}")
        if self.kind == "dense" and self.weights.ndim != 2:
            raise ShapeError("dense weights must be 2-axis (n_in, n_out)")
        if self.kind == "conv2d":
            if self.weights.ndim != 4:
                raise ShapeError("conv2d weights must be 4-axis (h, w, c_in, c_out)")
            if self.padding not in PADDINGS:
                raise ShapeError(f"unknown padding {self.padding!r}")
            if self.stride < 1:
                raise ShapeError("stride must be a positive integer")
            if self.input_shape is None or self.input_shape[2] != self.weights.shape[2]:
                raise ShapeError("conv2d needs input_shape (H, W, c_in) matching its weights")
            h, w = self.weights.shape[:2]
            if h > self.input_shape[0] or w > self.input_shape[1]:
                raise ShapeError("receptive field larger than the input")
        if self.kind == "leaky_relu" and not 0.0 < self.lrelu_slope < 1.0:
            raise ShapeError("leaky_relu slope must lie in (0, 1)")

    @property
    def has_params(self) -> bool:
        return self.kind in ("dense", "conv2d")

    def output_shape(self) -> tuple[int, ...] | None:
        """Per-sample output shape for parametric layers, None for activations."""
        if self.kind == "dense":
            return (self.weights.shape[1],)
        if self.kind == "conv2d":
            oh, ow = conv_output_hw(self.input_shape[:2], self.stride)
            return (oh, ow, self.weights.shape[3])
        return None


def dense(weights, bias=None) -> Layer:
    weights = as_tensor(weights)
    if weights.ndim != 2:
        raise ShapeError("dense weights must be 2-axis (n_in, n_out)")
    bias = np.zeros(weights.shape[1]) if bias is None else as_tensor(bias)
    if bias.shape != (weights.shape[1],):
        raise ShapeError("dense bias must have one entry per output")
    return Layer("dense", weights, bias)


def conv2d(weights, input_shape, bias=None, stride: int = 1, padding: str = "zero_same") -> Layer:
    weights = as_tensor(weights)
    if weights.ndim != 4:
        raise ShapeError("conv2d weights must be 4-axis (h, w, c_in, c_out)")
    bias = np.zeros(weights.shape[3]) if bias is None else as_tensor(bias)
    if bias.shape != (weights.shape[3],):
        raise ShapeError("conv2d bias must have one entry per output channel")
    return Layer("conv2d", weights, bias, stride=stride, padding=padding,
                 input_shape=tuple(int(v) for v in input_shape))


def leaky_relu(slope: float = 0.2) -> Layer:
    return Layer("leaky_relu", lrelu_slope=slope)


def tanh() -> Layer:
    return Layer("tanh")


def init_dense(rng: np.random.Generator, n_in: int, n_out: int) -> Layer:
    """He-style Gaussian init, zero bias."""
    w = rng.standard_normal((n_in, n_out)) * math.sqrt(2.0 / n_in)
    return dense(w, np.zeros(n_out))


def init_conv2d(rng: np.random.Generator, h: int, w: int, c_in: int, c_out: int,
                input_shape, stride: int = 1, padding: str = "zero_same") -> Layer:
    fan_in = h * w * c_in
    weights = rng.standard_normal((h, w, c_in, c_out)) * math.sqrt(2.0 / fan_in)
    return conv2d(weights, input_shape, np.zeros(c_out), stride=stride, padding=padding)


# ---------------------------------------------------------------------------
# parameters as flat lists (the optimizer's view of a network)

def parameters(net: Sequence[Layer]) -> list[np.ndarray]:
    out = []
    for layer in net:
        if layer.has_params:
            out.extend((layer.weights, layer.bias))
    return out


def with_parameters(net: Sequence[Layer], params: Sequence[np.ndarray]) -> list[Layer]:
    params = list(params)
    if len(params) != len(parameters(net)):
        raise ShapeError(f"expected {len(parameters(net))} parameter arrays, got {len(params)}")
    out, i = [], 0
    for layer in net:
        if layer.has_params:
            w, b = params[i], params[i + 1]
            if w.shape != layer.weights.shape or b.shape != layer.bias.shape:
                raise ShapeError(f"parameter shape mismatch at layer {layer.kind}")
            out.append(replace(layer, weights=w, bias=b))
            i += 2
        else:
            out.append(layer)
    return out


def num_parameters(net: Sequence[Layer]) -> int:
    return sum(p.size for p in parameters(net))


# ---------------------------------------------------------------------------
# convolution primitives (NHWC, weights h x w x c_in x c_out)

def conv_output_hw(hw: tuple[int, int], stride: int) -> tuple[int, int]:
    return -(-hw[0] // stride), -(-hw[1] // stride)


def _axis_plan(size: int, k: int, stride: int, padding: str):
    """Index table (out, k) into the padded (zero) or raw (circular) axis."""
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    before = total // 2
    idx = np.arange(out)[:, None] * stride + np.arange(k)[None, :] - before
    if padding == "circular":
        return idx % size, (0, 0)
    return idx + before, (before, total - before)


def _conv_plan(in_shape, kshape, stride, padding):
    H, W = in_shape[:2]
    h, w = kshape[:2]
    rows, pad_r = _axis_plan(H, h, stride, padding)
    cols, pad_c = _axis_plan(W, w, stride, padding)
    return rows, cols, pad_r, pad_c


def _padded(x, pad_r, pad_c):
    if pad_r == (0, 0) and pad_c == (0, 0):
        return x
    return np.pad(x, ((0, 0), pad_r, pad_c, (0, 0)))


def conv_forward(x: np.ndarray, weights: np.ndarray, stride: int = 1,
                 padding: str = "zero_same") -> np.ndarray:
    """Cross-correlation of a batch ``(B, H, W, c_in)`` with ``weights``."""
    rows, cols, pad_r, pad_c = _conv_plan(x.shape[1:], weights.shape, stride, padding)
    xp = _padded(x, pad_r, pad_c)
    patches = xp[:, rows[:, None, :, None], cols[None, :, None, :], :]
    return np.tensordot(patches, weights, axes=([3, 4, 5], [0, 1, 2]))


def conv_backward_input(g: np.ndarray, weights: np.ndarray, in_shape, stride: int = 1,
                        padding: str = "zero_same") -> np.ndarray:
    """Adjoint of :func:`conv_forward` in its input (a transposed convolution)."""
    H, W = in_shape[:2]
    rows, cols, pad_r, pad_c = _conv_plan(in_shape, weights.shape, stride, padding)
    dxp = np.zeros((g.shape[0], H + sum(pad_r), W + sum(pad_c), weights.shape[2]))
    h, w = weights.shape[:2]
    for di in range(h):
        r = rows[:, di][:, None]
        for dj in range(w):
            c = cols[:, dj][None, :]
            # indices are distinct within one tap, so fancy += does not drop updates
            dxp[:, r, c, :] += g @ weights[di, dj].T
    if pad_r == (0, 0) and pad_c == (0, 0):
        return dxp
    return dxp[:, pad_r[0]:pad_r[0] + H, pad_c[0]:pad_c[0] + W, :]


def conv_backward_weights(x: np.ndarray, g: np.ndarray, kshape, stride: int = 1,
                          padding: str = "zero_same") -> np.ndarray:
    rows, cols, pad_r, pad_c = _conv_plan(x.shape[1:], kshape, stride, padding)
    xp = _padded(x, pad_r, pad_c)
    patches = xp[:, rows[:, None, :, None], cols[None, :, None, :], :]
    return np.tensordot(patches, g, axes=([0, 1, 2], [0, 1, 2]))


# ---------------------------------------------------------------------------
# forward / backward

@dataclass
class ForwardCache:
    """Per-call record of layer inputs (and pre-activations) for backward."""

    net_ids: tuple
    inputs: list
    tangents: list | None
    input_shape: tuple
    output: np.ndarray
    output_tangents: np.ndarray | None = None


def _net_fingerprint(net):
    return tuple((layer.kind, id(layer.weights), id(layer.bias)) for layer in net)


def _to_layer_input(layer: Layer, x: np.ndarray, index: int) -> np.ndarray:
    if layer.kind == "dense":
        x2 = x.reshape(x.shape[0], -1)
        if x2.shape[1] != layer.weights.shape[0]:
            raise ShapeError(
                f"layer {index} (dense) expects {layer.weights.shape[0]} features, got {x2.shape[1]}")
        return x2
    if layer.kind == "conv2d":
        n = int(np.prod(layer.input_shape))
        if int(np.prod(x.shape[1:])) != n:
            raise ShapeError(
                f"layer {index} (conv2d) expects input {layer.input_shape}, got {x.shape[1:]}")
        return x.reshape((x.shape[0],) + layer.input_shape)
    return x


def _linear_apply(layer: Layer, x: np.ndarray) -> np.ndarray:
    """The bias-free linear part of a parametric layer."""
    if layer.kind == "dense":
        return x @ layer.weights
    return conv_forward(x, layer.weights, layer.stride, layer.padding)


def _act(layer: Layer, h: np.ndarray):
    """Activation value, first and second derivative."""
    if layer.kind == "leaky_relu":
        pos = h >= 0  # derivative at exactly 0 taken from the positive side
        d1 = np.where(pos, 1.0, layer.lrelu_slope)
        return h * d1, d1, None
    t = np.tanh(h)
    d1 = 1.0 - t * t
    return t, d1, -2.0 * t * d1


def forward(net: Sequence[Layer], x, tangents=None):
    """Run ``x`` (batch-first) through ``net``.

    Args:
        net: ordered layers.
        x: input batch; the leading axis is the batch axis.
        tangents: optional ``(B, K, *sample_shape)`` array of K tangent
            directions per sample, pushed forward alongside ``x``.

    Returns:
        ``(output, cache)``; ``cache.output_tangents`` holds the pushed-forward
        tangents when ``tangents`` was given.
    """
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError("input must have a leading batch axis")
    track = tangents is not None
    t = as_tensor(tangents) if track else None
    if track and (t.shape[0] != x.shape[0] or t.shape[2:] != x.shape[1:]):
        raise ShapeError(f"tangents shape {t.shape} incompatible with input {x.shape}")
    B = x.shape[0]
    inputs, tans = [], [] if track else None
    cur = x
    for i, layer in enumerate(net):
        cur = _to_layer_input(layer, cur, i)
        if track:
            K = t.shape[1]
            t = t.reshape((B, K) + cur.shape[1:])
        inputs.append(cur)
        if track:
            tans.append(t)
        if layer.has_params:
            nxt = _linear_apply(layer, cur) + layer.bias
            if track:
                flat = t.reshape((B * K,) + cur.shape[1:])
                t = _linear_apply(layer, flat).reshape((B, K) + nxt.shape[1:])
        else:
            nxt, d1, _ = _act(layer, cur)
            if track:
                t = t * d1[:, None]
        cur = nxt
    cache = ForwardCache(_net_fingerprint(net), inputs, tans, x.shape, cur, t)
    return cur, cache


def backward(net: Sequence[Layer], cache: ForwardCache, output_cotangent,
             tangent_cotangent=None):
    """Reverse accumulation through a cached forward pass.

    Returns:
        ``(input_cotangent, parameter_gradients)`` where the gradients follow
        the order of :func:`parameters`.
    """
    if cache is None:
        raise UsageError("backward called without a forward cache")
    if cache.net_ids != _net_fingerprint(net):
        raise UsageError("forward cache is stale or belongs to a different network")
    g = as_tensor(output_cotangent)
    if g.shape != cache.output.shape:
        raise ShapeError(f"cotangent shape {g.shape} != output shape {cache.output.shape}")
    if tangent_cotangent is not None and cache.tangents is None:
        raise UsageError("tangent cotangent given but forward ran without tangents")
    gt = None if tangent_cotangent is None else as_tensor(tangent_cotangent)
    B = g.shape[0]
    grads: list[np.ndarray] = []
    for i in range(len(net) - 1, -1, -1):
        layer = net[i]
        x = cache.inputs[i]
        tx = cache.tangents[i] if gt is not None else None
        if layer.has_params:
            if layer.kind == "dense":
                gw = x.T @ g
                if gt is not None:
                    K = tx.shape[1]
                    gw = gw + tx.reshape(B * K, -1).T @ gt.reshape(B * K, -1)
                gb = g.sum(axis=0)
                gx = g @ layer.weights.T
                if gt is not None:
                    gt = gt @ layer.weights.T
            else:
                kshape = layer.weights.shape
                gw = conv_backward_weights(x, g, kshape, layer.stride, layer.padding)
                gx = conv_backward_input(g, layer.weights, layer.input_shape,
                                         layer.stride, layer.padding)
                gb = g.sum(axis=(0, 1, 2))
                if gt is not None:
                    K = tx.shape[1]
                    tflat = tx.reshape((B * K,) + layer.input_shape)
                    gtflat = gt.reshape((B * K,) + gt.shape[2:])
                    gw = gw + conv_backward_weights(tflat, gtflat, kshape, layer.stride,
                                                    layer.padding)
                    gt = conv_backward_input(gtflat, layer.weights, layer.input_shape,
                                             layer.stride, layer.padding)
                    gt = gt.reshape((B, K) + layer.input_shape)
            grads.append(gb)
            grads.append(gw)
        else:
            _, d1, d2 = _act(layer, x)
            gx = g * d1
            if gt is not None:
                if d2 is not None:
                    gx = gx + d2 * (gt * tx).sum(axis=1)
                gt = gt * d1[:, None]
        g = gx
        if i > 0:
            prev_out_shape = (B,) + _prev_output_shape(net, cache, i)
            g = g.reshape(prev_out_shape)
            if gt is not None:
                gt = gt.reshape((B, gt.shape[1]) + prev_out_shape[1:])
    g = g.reshape(cache.input_shape)
    grads.reverse()
    return g, grads


def _prev_output_shape(net, cache, i):
    """Per-sample shape of layer i-1's output (before layer i reshaped it)."""
    prev = net[i - 1]
    shape = prev.output_shape()
    return shape if shape is not None else cache.inputs[i - 1].shape[1:]


def input_gradient_sq_norms(net: Sequence[Layer], x):
    """Per-sample squared Frobenius norm of the Jacobian dD(x)/dx.

    Returns ``(norms_sq, cache)``; pass the cache to
    :func:`input_gradient_penalty_backward` to differentiate the norms.
    """
    x = as_tensor(x)
    B = x.shape[0]
    d = int(np.prod(x.shape[1:]))
    eye = np.broadcast_to(np.eye(d), (B, d, d)).reshape((B, d) + x.shape[1:])
    out, cache = forward(net, x, tangents=eye)
    jt = cache.output_tangents.reshape(B, d, -1)
    return (jt * jt).sum(axis=(1, 2)), cache


def input_gradient_penalty_backward(net, cache: ForwardCache, norms_cotangent):
    """Parameter gradients of ``sum_b c_b * ||dD(x_b)/dx||_F^2``."""
    c = as_tensor(norms_cotangent)
    jt = cache.output_tangents
    gt = 2.0 * c.reshape((-1,) + (1,) * (jt.ndim - 1)) * jt
    return backward(net, cache, np.zeros_like(cache.output), tangent_cotangent=gt)


# ---------------------------------------------------------------------------
# finite differences and Adam

def finite_diff_grad(f: Callable[[np.ndarray], float], point, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    if not step > 0:
        raise ValueError("step must be positive")
    p = as_tensor(point).copy()
    grad = np.zeros_like(p)
    flat_p = p.reshape(-1)
    flat_g = grad.reshape(-1)
    for i in range(flat_p.size):
        orig = flat_p[i]
        flat_p[i] = orig + step
        fp = float(f(p))
        flat_p[i] = orig - step
        fm = float(f(p))
        flat_p[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise OracleError(f"non-finite function value at coordinate {i}", index=i)
        flat_g[i] = (fp - fm) / (2.0 * step)
    return grad


@dataclass(frozen=True)
class AdamState:
    learning_rate: float
    beta1: float = 0.5
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: tuple = ()
    second_moment: tuple = ()

    @classmethod
    def create(cls, params, learning_rate: float, beta1: float = 0.5,
               beta2: float = 0.999, epsilon: float = 1e-8) -> "AdamState":
        zeros = tuple(np.zeros_like(p) for p in params)
        return cls(learning_rate, beta1, beta2, epsilon, 0, zeros,
                   tuple(np.zeros_like(p) for p in params))


def adam_update(params, grads, state: AdamState):
    """One bias-corrected Adam step; returns ``(new_params, new_state)``."""
    params, grads = list(params), list(grads)
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ShapeError("params, grads and optimizer state disagree in length")
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"shape mismatch {p.shape} vs {g.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        step = state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        new_p.append(p - step)
        new_m.append(m)
        new_v.append(v)
    return new_p, replace(state, step_count=t, first_moment=tuple(new_m),
                          second_moment=tuple(new_v))
