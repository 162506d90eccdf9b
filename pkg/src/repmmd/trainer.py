"""Desk-scale adversarial training on synthetic data.

The discriminator is spectrally normalized layer by layer before every
forward pass; both players are updated with Adam (two learning rates, one
per player). Progress is tracked with a held-out MMD estimate and, for the
Gaussian-mixture datasets, the number of mixture modes the generator hits.
"""

from __future__ import annotations

import math
import time
import zlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import numcore as nc
from .errors import ConfigurationError, NonFiniteError
from .kernels import KernelSpec, pairwise_sq_dists, rbf, rbf_b, rbf_mixture, kernel_matrix
from .losses import LossSpec, loss_and_grad, mmd2_unbiased
from .specnorm import NormalizerConfig, init_layer_state, normalize_and_scale

DATASETS = ("ring8", "grid25", "image_blobs")
LAMBDA_SWEEP = (-1.0, -0.5, 0.0, 0.5, 1.0, 2.0)
LR_GRID = (1e-4, 2e-4, 5e-4, 1e-3)
RING_RADIUS = 2.0
MODE_STD = 0.05
GRID_SPACING = 2.0
IMAGE_SIDE = 16


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one purpose ("init", "data", ...)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


# ---------------------------------------------------------------------------
# datasets

def mode_centers(name: str) -> np.ndarray:
    if name == "ring8":
        a = 2.0 * np.pi * np.arange(8) / 8
        return RING_RADIUS * np.column_stack([np.cos(a), np.sin(a)])
    if name == "grid25":
        g = GRID_SPACING * (np.arange(5) - 2.0)
        return np.array([(x, y) for x in g for y in g])
    raise ConfigurationError(f"dataset {name!r} has no mode centers")


def _blob_images(rng, n):
    imgs = -np.ones((n, IMAGE_SIDE, IMAGE_SIDE, 1))
    for i in range(n):
        for _ in range(rng.integers(1, 4)):
            r0, c0 = rng.integers(0, IMAGE_SIDE - 2, size=2)
            h, w = rng.integers(2, 7, size=2)
            imgs[i, r0:r0 + h, c0:c0 + w, 0] = 1.0
    return imgs


def make_dataset(name: str, n: int, seed=None, rng: np.random.Generator | None = None):
    """Draw ``n`` samples; pass either ``seed`` or a generator."""
    if n <= 0:
        raise ConfigurationError("n must be positive")
    if name not in DATASETS:
        raise ConfigurationError(f"unknown dataset {name!r}; choose from {DATASETS}")
    if rng is None:
        rng = rng_stream(0 if seed is None else seed, "dataset")
    if name == "image_blobs":
        return _blob_images(rng, n)
    centers = mode_centers(name)
    k = rng.integers(0, len(centers), size=n)
    return centers[k] + MODE_STD * rng.standard_normal((n, 2))


def mode_coverage(samples, centers, radius: float = 0.5) -> int:
    """How many centers have at least one sample within ``radius``."""
    if not radius > 0:
        raise ConfigurationError("radius must be positive")
    s = np.asarray(samples, dtype=np.float64).reshape(len(samples), -1)
    c = np.asarray(centers, dtype=np.float64).reshape(len(centers), -1)
    d2 = pairwise_sq_dists(c, s)
    return int((d2.min(axis=1) <= radius * radius).sum())


# ---------------------------------------------------------------------------
# configuration and records

@dataclass(frozen=True)
class TrainConfig:
    dataset: str = "ring8"
    disc_loss: LossSpec = LossSpec("disc_lambda", rbf_b(), lam=1.0)
    gen_loss: LossSpec = LossSpec("gen_mmd", rbf(1.0))
    lr_d: float = 1e-3
    lr_g: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 64
    n_dis: int = 1
    total_steps: int = 2000
    disc_output_dim: int = 16
    latent_dim: int = 8
    hidden: int = 64
    normalizer: NormalizerConfig = NormalizerConfig(method="pico")
    eval_interval: int = 100
    n_eval: int = 512
    coverage_radius: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise ConfigurationError(f"unknown dataset {self.dataset!r}")
        if self.batch_size < 4 or self.batch_size % 2:
            raise ConfigurationError("batch_size must be an even integer >= 4")
        for name in ("n_dis", "total_steps", "disc_output_dim", "latent_dim", "hidden",
                     "eval_interval"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be a positive integer")
        if self.lr_d < 0 or self.lr_g < 0:
            raise ConfigurationError("learning rates must be non-negative")
        if self.n_eval < 2:
            raise ConfigurationError("n_eval must be at least 2")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigurationError("seed must be a 64-bit unsigned integer")
        if self.gen_loss.family not in ("gen_mmd", "minimax_g", "nonsat_g", "hinge_g", "wass_g"):
            raise ConfigurationError(f"{self.gen_loss.family} is not a generator loss")
        if self.disc_loss.family in ("gen_mmd", "minimax_g", "nonsat_g", "hinge_g", "wass_g"):
            raise ConfigurationError(f"{self.disc_loss.family} is not a discriminator loss")
        if self.gen_loss.family == "gen_mmd" and self.gen_loss.kernel.is_bounded:
            raise ConfigurationError("the generator loss must use an unbounded kernel")
        classical = (self.disc_loss.family in ("minimax_d", "hinge_d", "wass_d")
                     or self.gen_loss.family != "gen_mmd")
        if classical and self.disc_output_dim != 1:
            raise ConfigurationError("classical losses need disc_output_dim = 1")

    @property
    def half(self) -> int:
        return self.batch_size // 2


@dataclass(frozen=True)
class RunRecord:
    step: int
    disc_loss_value: float | None
    gen_loss_value: float | None
    heldout_mmd2: float
    modes_covered: int | None
    wall_time: float

    def as_dict(self, with_time: bool = False) -> dict:
        d = asdict(self)
        if not with_time:
            d.pop("wall_time")
        return d


class TrainingAborted(NonFiniteError):
    """Raised when a loss or parameter goes non-finite; keeps the records so far."""

    def __init__(self, message, context, records):
        super().__init__(message, context)
        self.records = records


# ---------------------------------------------------------------------------
# networks

def build_generator(config: TrainConfig, rng) -> list[nc.Layer]:
    h = config.hidden
    if config.dataset == "image_blobs":
        c = 4
        return [nc.init_dense(rng, config.latent_dim, h), nc.leaky_relu(),
                nc.init_dense(rng, h, IMAGE_SIDE * IMAGE_SIDE * c), nc.leaky_relu(),
                nc.init_conv2d(rng, 3, 3, c, 1, (IMAGE_SIDE, IMAGE_SIDE, c)), nc.tanh()]
    # linear output: a tanh head cannot reach the radius-2 mixture modes
    return [nc.init_dense(rng, config.latent_dim, h), nc.leaky_relu(),
            nc.init_dense(rng, h, h), nc.leaky_relu(),
            nc.init_dense(rng, h, 2)]


def build_discriminator(config: TrainConfig, rng) -> list[nc.Layer]:
    h, s = config.hidden, config.disc_output_dim
    if config.dataset == "image_blobs":
        return [nc.init_conv2d(rng, 3, 3, 1, 8, (IMAGE_SIDE, IMAGE_SIDE, 1), stride=2),
                nc.leaky_relu(),
                nc.init_conv2d(rng, 3, 3, 8, 8, (IMAGE_SIDE // 2, IMAGE_SIDE // 2, 8), stride=2),
                nc.leaky_relu(),
                nc.init_dense(rng, (IMAGE_SIDE // 4) ** 2 * 8, s)]
    return [nc.init_dense(rng, 2, h), nc.leaky_relu(),
            nc.init_dense(rng, h, h), nc.leaky_relu(),
            nc.init_dense(rng, h, s)]


def sample_latent(rng, n: int, dim: int) -> np.ndarray:
    return rng.standard_normal((n, dim))


def generate(gen_net, rng, n: int, latent_dim: int) -> np.ndarray:
    return nc.forward(gen_net, sample_latent(rng, n, latent_dim))[0]


# ---------------------------------------------------------------------------
# evaluation

def eval_kernel() -> KernelSpec:
    return rbf_mixture()


def eval_heldout_mmd2(gen_params, dataset, n_eval: int, kernel: KernelSpec | None = None,
                      gen_net=None, latent_dim: int = 8, seed: int = 0) -> float:
    """Unbiased MMD^2 between fresh generated samples and held-out reals.

    Args:
        gen_params: generator parameter list (applied to ``gen_net``), or a
            callable ``(rng, n) -> samples`` standing in for the generator.
        dataset: dataset name, or an array of held-out real samples.
        n_eval: samples per side.
        kernel: defaults to the five-scale rbf mixture.
        gen_net: architecture the parameters belong to.
        latent_dim: latent width of ``gen_net``.
        seed: run seed; the held-out and evaluation streams derive from it.
    """
    if n_eval < 2:
        raise ConfigurationError("n_eval must be at least 2")
    kernel = eval_kernel() if kernel is None else kernel
    if isinstance(dataset, str):
        real = make_dataset(dataset, n_eval, rng=rng_stream(seed, "heldout"))
    else:
        real = np.asarray(dataset, dtype=np.float64)[:n_eval]
    rng = rng_stream(seed, "eval")
    if callable(gen_params):
        fake = np.asarray(gen_params(rng, n_eval), dtype=np.float64)
    else:
        net = nc.with_parameters(gen_net, gen_params)
        fake = generate(net, rng, n_eval, latent_dim)
    real = real.reshape(n_eval, -1)
    fake = fake.reshape(n_eval, -1)
    Kxx = kernel_matrix(kernel, pairwise_sq_dists(real))
    Kyy = kernel_matrix(kernel, pairwise_sq_dists(fake))
    Kxy = kernel_matrix(kernel, pairwise_sq_dists(real, fake))
    return mmd2_unbiased(Kxx, Kyy, Kxy)


# ---------------------------------------------------------------------------
# training

def _normalized(disc, states, config: TrainConfig):
    """Spectrally normalized copy of the discriminator, its scales and new states."""
    layers, scales, new_states = [], [], []
    j = 0
    for layer in disc:
        if layer.has_params:
            out = normalize_and_scale(layer, config.normalizer, states[j])
            layers.append(out.layer)
            scales.append(out.scale)
            new_states.append(out.state)
            j += 1
        else:
            layers.append(layer)
    return layers, scales, new_states


def _raw_grads(grads, scales):
    # d/dW of f(W * c) with the estimate c held fixed; biases are unscaled
    out = []
    for i, g in enumerate(grads):
        out.append(g * scales[i // 2] if i % 2 == 0 else g)
    return out


def _add(a, b):
    return [x + y for x, y in zip(a, b)]


def _check_finite(step, what, value, params, records):
    if math.isfinite(value) and all(np.all(np.isfinite(p)) for p in params):
        return
    norm = float(math.sqrt(sum(float(np.sum(p * p)) for p in params)))
    ctx = {"step": step, "where": what, "loss": value, "param_norm": norm}
    raise TrainingAborted(f"non-finite {what} at step {step}", ctx, records)


def disc_step(config: TrainConfig, dnet, real, fake):
    """Loss value, parameter gradients (w.r.t. the normalized layers)."""
    spec = config.disc_loss
    n = real.shape[0]
    if spec.needs_grad_norms:
        gn, cache_r = nc.input_gradient_sq_norms(dnet, real)
        dr = cache_r.output
    else:
        dr, cache_r = nc.forward(dnet, real)
        gn = None
    dg, cache_g = nc.forward(dnet, fake)
    res = loss_and_grad(spec, dr, dg, gn)
    if gn is not None:
        jt = cache_r.output_tangents
        gt = 2.0 * res.d_grad_norms_sq.reshape((n,) + (1,) * (jt.ndim - 1)) * jt
        _, gr = nc.backward(dnet, cache_r, res.d_real, tangent_cotangent=gt)
    else:
        _, gr = nc.backward(dnet, cache_r, res.d_real)
    _, gg = nc.backward(dnet, cache_g, res.d_gen)
    return res.value, _add(gr, gg)


def gen_step(config: TrainConfig, gnet, dnet, z, real):
    fake, cache_f = nc.forward(gnet, z)
    dr, _ = nc.forward(dnet, real)
    dg, cache_d = nc.forward(dnet, fake)
    res = loss_and_grad(config.gen_loss, dr, dg)
    dx, _ = nc.backward(dnet, cache_d, res.d_gen)
    _, grads = nc.backward(gnet, cache_f, dx)
    return res.value, grads


@dataclass
class TrainResult:
    records: list[RunRecord]
    gen_params: list[np.ndarray]
    disc_params: list[np.ndarray]
    gen_net: list[nc.Layer]
    baseline_mmd2: float
    power_states: list = field(default_factory=list)


def train(config: TrainConfig, on_record=None) -> TrainResult:
    """Run the alternating Adam loop; deterministic per ``config.seed``.

    ``on_record`` (optional) receives each :class:`RunRecord` as it is made.
    Raises :class:`TrainingAborted` on the first non-finite loss or parameter.
    """
    t0 = time.perf_counter()
    init_rng = rng_stream(config.seed, "init")
    data_rng = rng_stream(config.seed, "data")
    latent_rng = rng_stream(config.seed, "latent")
    pi_rng = rng_stream(config.seed, "power-iteration")

    gen = build_generator(config, init_rng)
    disc = build_discriminator(config, init_rng)
    states = [init_layer_state(l, config.normalizer, pi_rng) for l in disc if l.has_params]
    gp, dp = nc.parameters(gen), nc.parameters(disc)
    opt_g = nc.AdamState.create(gp, config.lr_g, config.beta1, config.beta2)
    opt_d = nc.AdamState.create(dp, config.lr_d, config.beta1, config.beta2)
    centers = mode_centers(config.dataset) if config.dataset != "image_blobs" else None
    records: list[RunRecord] = []

    def evaluate(step, ld, lg):
        gnet = nc.with_parameters(gen, gp)
        mmd = eval_heldout_mmd2(gp, config.dataset, config.n_eval, gen_net=gen,
                                latent_dim=config.latent_dim, seed=config.seed)
        covered = None
        if centers is not None:
            samples = generate(gnet, rng_stream(config.seed, "eval"), config.n_eval,
                               config.latent_dim)
            covered = mode_coverage(samples, centers, config.coverage_radius)
        rec = RunRecord(step, ld, lg, mmd, covered, time.perf_counter() - t0)
        _check_finite(step, "held-out MMD", mmd, [], records)
        records.append(rec)
        if on_record is not None:
            on_record(rec)
        return rec

    baseline = evaluate(0, None, None).heldout_mmd2
    n = config.half
    ld = lg = float("nan")
    for step in range(1, config.total_steps + 1):
        dnet_raw = nc.with_parameters(disc, dp)
        for _ in range(config.n_dis):
            real = make_dataset(config.dataset, n, rng=data_rng)
            z = sample_latent(latent_rng, n, config.latent_dim)
            fake = nc.forward(nc.with_parameters(gen, gp), z)[0]
            dnet, scales, states = _normalized(dnet_raw, states, config)
            ld, grads = disc_step(config, dnet, real, fake)
            dp, opt_d = nc.adam_update(dp, _raw_grads(grads, scales), opt_d)
            _check_finite(step, "discriminator loss", ld, dp, records)
            dnet_raw = nc.with_parameters(disc, dp)
        dnet, _, states = _normalized(dnet_raw, states, config)
        real = make_dataset(config.dataset, n, rng=data_rng)
        z = sample_latent(latent_rng, n, config.latent_dim)
        lg, grads = gen_step(config, nc.with_parameters(gen, gp), dnet, z, real)
        gp, opt_g = nc.adam_update(gp, grads, opt_g)
        _check_finite(step, "generator loss", lg, gp, records)
        if step % config.eval_interval == 0 or step == config.total_steps:
            evaluate(step, ld, lg)
    return TrainResult(records, gp, dp, gen, baseline, states)


def lambda_sweep(config: TrainConfig, lambdas=LAMBDA_SWEEP):
    """One run per lambda, differing only in the discriminator LossSpec."""
    out = {}
    for lam in lambdas:
        spec = replace(config.disc_loss, family="disc_lambda", lam=float(lam))
        out[float(lam)] = train(replace(config, disc_loss=spec))
    return out
