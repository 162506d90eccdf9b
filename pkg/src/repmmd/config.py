"""Experiment configuration: one YAML document, four optional sections.

Grammar: a YAML mapping with optional top-level keys ``seed``, ``train``,
``stability``, ``specnorm`` and ``mmd_test``. Every key inside a section is
optional and defaults to the value shown by ``repmmd show-config``. Unknown
keys anywhere are rejected with their dotted path. Example::

    seed: 7
    train:
      dataset: ring8
      disc_loss: {family: disc_lambda, lam: -1, kernel: {variant: rbf_b}}
      total_steps: 500
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import kernels as kn
from .errors import ConfigurationError
from .losses import CLASSICAL_FAMILIES, DEFAULT_GP_WEIGHT, MMD_FAMILIES, LossSpec
from .specnorm import DEFAULT_C, ConvKernel, NormalizerConfig
from .stability import SimConfig
from .trainer import LAMBDA_SWEEP, LR_GRID, TrainConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class KernelModel(_Strict):
    variant: Literal["rbf", "rq", "rbf_b", "rbf_mixture", "rq_mixture"] = "rbf"
    sigma: float = 1.0
    alpha: float = 1.0
    b_l: float = 0.25
    b_u: float = 4.0
    scales: Optional[list[float]] = None

    def build(self) -> kn.KernelSpec:
        if self.variant == "rbf":
            return kn.rbf(self.sigma)
        if self.variant == "rq":
            return kn.rq(self.alpha)
        if self.variant == "rbf_b":
            return kn.rbf_b(self.sigma, self.b_l, self.b_u)
        if self.variant == "rbf_mixture":
            return kn.rbf_mixture(self.scales or kn.DEFAULT_MIXTURE_SCALES)
        return kn.rq_mixture(self.scales or kn.RQ_MIXTURE_ALPHAS)


class LossModel(_Strict):
    family: Literal[MMD_FAMILIES + CLASSICAL_FAMILIES] = "disc_lambda"
    kernel: KernelModel = KernelModel(variant="rbf_b")
    lam: float = 1.0
    lam_gp: float = DEFAULT_GP_WEIGHT

    @model_validator(mode="before")
    @classmethod
    def _default_kernel(cls, data):
        # the generator side always uses the plain rbf kernel unless told otherwise
        if isinstance(data, dict) and "kernel" not in data and data.get("family") == "gen_mmd":
            data = {**data, "kernel": {"variant": "rbf"}}
        return data

    def build(self) -> LossSpec:
        return LossSpec(self.family, self.kernel.build(), self.lam, self.lam_gp)


class NormalizerModel(_Strict):
    method: Literal["pim", "pico"] = "pico"
    constant: float = DEFAULT_C
    power_iters_per_step: int = 1
    warmup_iters: int = 50

    def build(self) -> NormalizerConfig:
        return NormalizerConfig(self.method, self.constant, self.power_iters_per_step,
                                self.warmup_iters)


class TrainSection(_Strict):
    dataset: Literal["ring8", "grid25", "image_blobs"] = "ring8"
    disc_loss: LossModel = LossModel()
    gen_loss: LossModel = LossModel(family="gen_mmd")
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
    normalizer: NormalizerModel = NormalizerModel()
    eval_interval: int = 100
    n_eval: int = 512
    coverage_radius: float = 0.5
    run_sweep: bool = False
    sweep: Literal["lambda", "lr"] = "lambda"
    lambdas: list[float] = Field(default_factory=lambda: list(LAMBDA_SWEEP))
    lr_grid: list[float] = Field(default_factory=lambda: list(LR_GRID))

    def build(self, seed: int) -> TrainConfig:
        return TrainConfig(
            dataset=self.dataset, disc_loss=self.disc_loss.build(),
            gen_loss=self.gen_loss.build(), lr_d=self.lr_d, lr_g=self.lr_g,
            beta1=self.beta1, beta2=self.beta2, batch_size=self.batch_size,
            n_dis=self.n_dis, total_steps=self.total_steps,
            disc_output_dim=self.disc_output_dim, latent_dim=self.latent_dim,
            hidden=self.hidden, normalizer=self.normalizer.build(),
            eval_interval=self.eval_interval, n_eval=self.n_eval,
            coverage_radius=self.coverage_radius, seed=seed)


class StabilitySection(_Strict):
    data_law: Literal["uniform", "gaussian"] = "gaussian"
    disc_loss: Literal["attractive", "repulsive"] = "attractive"
    kernel_sigma: float = 0.5
    n_quadrature: int = 192
    w1_range: tuple[float, float] = (-2.5, 2.5)
    w2_range: tuple[float, float] = (-1.5, 1.5)
    resolution: int = 21
    integrator_step: float = 0.1
    g_rate: float = 1.0
    trajectory_starts: list[tuple[float, float]] = Field(
        default_factory=lambda: [(0.5, 0.5), (1.2, -0.8), (2.4, 0.05)])
    trajectory_steps: int = 400
    equilibrium_guesses: list[tuple[float, float]] = Field(
        default_factory=lambda: [(1.2, 0.5)])

    def build(self) -> SimConfig:
        return SimConfig(self.data_law, self.disc_loss, self.kernel_sigma, self.n_quadrature,
                         tuple(self.w1_range), tuple(self.w2_range), self.resolution,
                         self.integrator_step, self.g_rate)


class ConvKernelModel(_Strict):
    h: int = 3
    w: int = 3
    c_in: int = 1
    c_out: int = 1
    stride: int = 1
    padding: Literal["zero_same", "circular"] = "zero_same"
    input_hw: tuple[int, int] = (8, 8)
    seed: int = 0
    weights_file: Optional[str] = None
    fill: Optional[float] = None

    def build(self) -> ConvKernel:
        import numpy as np
        if self.weights_file is not None:
            weights = np.load(self.weights_file)
            if weights.ndim != 4:
                raise ConfigurationError(f"{self.weights_file}: expected a 4-axis array")
        elif self.fill is not None:
            weights = np.full((self.h, self.w, self.c_in, self.c_out), float(self.fill))
        else:
            rng = np.random.default_rng(self.seed)
            weights = rng.standard_normal((self.h, self.w, self.c_in, self.c_out))
        H, W = self.input_hw
        return ConvKernel(weights, (H, W, weights.shape[2]), self.stride, self.padding)


def _bundled_kernels() -> list[ConvKernelModel]:
    return [
        ConvKernelModel(h=1, w=1, fill=2.5),
        ConvKernelModel(h=3, w=3, fill=1.0, padding="circular"),
        ConvKernelModel(h=3, w=3, c_in=2, c_out=2, seed=1),
        ConvKernelModel(h=3, w=3, c_in=3, c_out=2, stride=2, seed=2),
        ConvKernelModel(h=2, w=3, c_in=2, c_out=3, stride=2, padding="circular", seed=3),
        ConvKernelModel(h=3, w=1, c_in=1, c_out=3, input_hw=(6, 7), seed=4),
    ]


class SpecnormSection(_Strict):
    kernels: list[ConvKernelModel] = Field(default_factory=_bundled_kernels)
    methods: list[Literal["pim", "pico"]] = Field(default_factory=lambda: ["pim", "pico"])
    max_iters: int = 20000
    tol: float = 1e-13


class MmdTestSection(_Strict):
    x: Optional[str] = None
    y: Optional[str] = None
    kernel: KernelModel = KernelModel()
    permutations: int = 0


class ExperimentConfig(_Strict):
    seed: int = 0
    train: TrainSection = TrainSection()
    stability: StabilitySection = StabilitySection()
    specnorm: SpecnormSection = SpecnormSection()
    mmd_test: MmdTestSection = MmdTestSection()


def _format_errors(err: ValidationError, source: str) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{source}: {loc}: {e['msg']}")
    return "\n".join(lines)


def from_mapping(data, source: str = "<config>") -> ExperimentConfig:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{source}: top level must be a mapping")
    try:
        cfg = ExperimentConfig.model_validate(data)
    except ValidationError as err:
        raise ConfigurationError(_format_errors(err, source)) from None
    validate_ranges(cfg, source)
    return cfg


def parse_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Load and validate a config file (or just the defaults when ``path`` is None).

    ``overrides`` maps top-level keys (e.g. ``{"seed": 3}``) to values applied
    after the file is read.
    """
    data: dict = {}
    source = "<defaults>"
    if path is not None:
        p = Path(path)
        source = str(p)
        if not p.is_file():
            raise ConfigurationError(f"{source}: config file not found")
        try:
            data = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as err:
            raise ConfigurationError(f"{source}: malformed YAML: {err}") from None
        if not isinstance(data, dict):
            raise ConfigurationError(f"{source}: top level must be a mapping")
    if overrides:
        data = _merge(data, overrides)
    return from_mapping(data, source)


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        elif v is not None:
            out[k] = v
    return out


def validate_ranges(cfg: ExperimentConfig, source: str = "<config>") -> None:
    """Build every section's domain object so range errors surface at load time."""
    sections = (("train", lambda: cfg.train.build(cfg.seed)),
                ("stability", cfg.stability.build),
                ("specnorm", lambda: [k.build() for k in cfg.specnorm.kernels]))
    for name, build in sections:
        try:
            build()
        except ConfigurationError as err:
            raise ConfigurationError(f"{source}: {name}: {err}") from None
    if not cfg.seed >= 0 or cfg.seed >= 2 ** 64:
        raise ConfigurationError(f"{source}: seed: must be a 64-bit unsigned integer")
    if cfg.mmd_test.permutations < 0:
        raise ConfigurationError(f"{source}: mmd_test.permutations: must be >= 0")
    if not (cfg.specnorm.max_iters >= 1 and math.isfinite(cfg.specnorm.tol)):
        raise ConfigurationError(f"{source}: specnorm: max_iters >= 1 and finite tol required")


def dump(cfg: ExperimentConfig) -> str:
    """Canonical YAML rendering of a resolved config (round-trips through parse_config)."""
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=True)
