"""Adversarial losses on discriminator score batches.

All MMD-type losses use the off-diagonal (unbiased) block means, including the
cross block, so the attractive discriminator loss is exactly the negative of
the generator MMD loss on any batch.

Each public loss has a value-only function and goes through
:func:`loss_and_grad`, which returns gradients with respect to both score
tensors (and the per-sample gradient norms for the penalized variants).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, EstimatorError, ShapeError
from .kernels import (BlockRole, KernelSpec, LossSide, kernel_matrix, kernel_matrix_grad,
                      pairwise_sq_dists, pairwise_sq_dists_grad, rbf)

MMD_FAMILIES = ("gen_mmd", "disc_lambda", "disc_rep_gp", "disc_smmd")
CLASSICAL_FAMILIES = ("minimax_d", "minimax_g", "nonsat_g", "hinge_d", "hinge_g",
                      "wass_d", "wass_g")
PENALIZED_FAMILIES = ("disc_rep_gp", "disc_smmd")
DEFAULT_GP_WEIGHT = 0.1


@dataclass(frozen=True)
class LossSpec:
    family: str
    kernel: KernelSpec = rbf(1.0)
    lam: float = 1.0
    lam_gp: float = DEFAULT_GP_WEIGHT

    def __post_init__(self):
        if self.family not in MMD_FAMILIES + CLASSICAL_FAMILIES:
            raise ConfigurationError(f"unknown loss family {self.family!r}")
        if self.family in PENALIZED_FAMILIES and not self.lam_gp >= 0:
            raise ConfigurationError("gradient penalty weight must be non-negative")

    @property
    def weights(self) -> tuple[float, float, float]:
        """Coefficients on the (real-real, real-gen, gen-gen) block means."""
        return self.lam, -(self.lam - 1.0), -1.0

    @property
    def needs_grad_norms(self) -> bool:
        return self.family in PENALIZED_FAMILIES


@dataclass(frozen=True)
class ScoreBatch:
    real: np.ndarray
    gen: np.ndarray

    def __post_init__(self):
        real = np.asarray(self.real, dtype=np.float64)
        gen = np.asarray(self.gen, dtype=np.float64)
        if real.ndim == 1:
            real = real[:, None]
        if gen.ndim == 1:
            gen = gen[:, None]
        object.__setattr__(self, "real", real)
        object.__setattr__(self, "gen", gen)
        if real.shape[0] < 2 or gen.shape[0] < 2:
            raise EstimatorError("the unbiased estimator needs at least two samples per group")
        if real.shape[0] != gen.shape[0]:
            raise ShapeError("real and generated groups must have equal size")
        if real.shape[1:] != gen.shape[1:]:
            raise ShapeError("real and generated scores differ in output dimension")

    @property
    def n(self) -> int:
        return self.real.shape[0]

    @property
    def dim(self) -> int:
        return self.real.shape[1]


@dataclass
class LossResult:
    value: float
    d_real: np.ndarray
    d_gen: np.ndarray
    d_grad_norms_sq: np.ndarray | None = None


def offdiag_mean(K) -> float:
    K = np.asarray(K, dtype=np.float64)
    n, m = K.shape
    if n < 2 or m < 2:
        raise EstimatorError("off-diagonal mean needs at least a 2x2 block")
    # the i != j convention also applies to the cross block (square blocks only)
    count = n * (m - 1) if n <= m else m * (n - 1)
    return float((K.sum() - np.trace(K)) / count)


def mmd2_unbiased(Kxx, Kyy, Kxy) -> float:
    """Unbiased squared-MMD estimate from the three kernel blocks."""
    Kxx, Kyy, Kxy = (np.asarray(k, dtype=np.float64) for k in (Kxx, Kyy, Kxy))
    n, m = Kxx.shape[0], Kyy.shape[0]
    if n < 2 or m < 2:
        raise EstimatorError("the unbiased estimator needs at least two samples per group")
    if Kxx.shape != (n, n) or Kyy.shape != (m, m) or Kxy.shape != (n, m):
        raise ShapeError("kernel blocks have inconsistent shapes")
    if n != m:
        raise ShapeError("the estimator is defined for equal group sizes")
    return offdiag_mean(Kxx) + offdiag_mean(Kyy) - 2.0 * offdiag_mean(Kxy)


def _offdiag_weights(n: int) -> np.ndarray:
    w = np.full((n, n), 1.0 / (n * (n - 1)))
    np.fill_diagonal(w, 0.0)
    return w


def _block_terms(batch: ScoreBatch, kernel: KernelSpec, side: LossSide, coef):
    """Weighted sum of the three block means and its score gradients."""
    x, y = batch.real, batch.gen
    n = batch.n
    W = _offdiag_weights(n)
    c_xx, c_xy, c_yy = coef
    value = 0.0
    dx = np.zeros_like(x)
    dy = np.zeros_like(y)
    blocks = ((c_xx, x, None, BlockRole.REAL_REAL),
              (c_xy, x, y, BlockRole.REAL_GEN),
              (c_yy, y, None, BlockRole.GEN_GEN))
    for c, a, b, role in blocks:
        if c == 0.0:
            continue
        s = pairwise_sq_dists(a, b)
        K = kernel_matrix(kernel, s, role, side)
        value += c * float((W * K).sum())
        gs = kernel_matrix_grad(kernel, s, role, side, c * W)
        ga, gb = pairwise_sq_dists_grad(a, a if b is None else b, gs)
        if role is BlockRole.REAL_REAL:
            dx += ga + gb
        elif role is BlockRole.GEN_GEN:
            dy += ga + gb
        else:
            dx += ga
            dy += gb
    return value, dx, dy


def disc_side(lam: float) -> LossSide:
    # lam = 0 has no clear sign; it keeps the cross term, so treat it as repulsive
    return LossSide.ATTRACTIVE if lam < 0 else LossSide.REPULSIVE


def _penalized(base: float, dx, dy, grad_norms_sq, lam_gp: float, shift: float):
    g = np.asarray(grad_norms_sq, dtype=np.float64).reshape(-1)
    if np.any(g < 0):
        raise ConfigurationError("gradient norms must be non-negative")
    den = 1.0 + lam_gp * float(g.mean())
    num = base - shift
    value = num / den
    dg = np.full(g.shape, -num * lam_gp / (g.size * den * den))
    return LossResult(value, dx / den, dy / den, dg)


def _softplus(t):
    return np.logaddexp(0.0, t)


def _sigmoid(t):
    return 0.5 * (1.0 + np.tanh(0.5 * t))


def _classical(real, gen, family: str) -> LossResult:
    dr = real.reshape(-1)
    dg = gen.reshape(-1)
    nr, ng = dr.size, dg.size
    zr = np.zeros_like(dr)
    zg = np.zeros_like(dg)
    if family in ("minimax_d", "minimax_g"):
        v = _softplus(-dr).mean() + _softplus(dg).mean()
        gr = -_sigmoid(-dr) / nr
        gg = _sigmoid(dg) / ng
        if family == "minimax_g":
            v, gr, gg = -v, -gr, -gg
    elif family == "nonsat_g":
        v = _softplus(-dg).mean()
        gr, gg = zr, -_sigmoid(-dg) / ng
    elif family == "hinge_d":
        v = np.maximum(1.0 - dr, 0.0).mean() + np.maximum(1.0 + dg, 0.0).mean()
        gr = -(1.0 - dr > 0).astype(float) / nr
        gg = (1.0 + dg > 0).astype(float) / ng
    elif family in ("hinge_g", "wass_g"):
        v = -dg.mean()
        gr, gg = zr, np.full_like(dg, -1.0 / ng)
    else:  # wass_d
        v = dg.mean() - dr.mean()
        gr, gg = np.full_like(dr, -1.0 / nr), np.full_like(dg, 1.0 / ng)
    return LossResult(float(v), np.asarray(gr, float).reshape(real.shape),
                      np.asarray(gg, float).reshape(gen.shape))


def loss_and_grad(spec: LossSpec, real, gen, grad_norms_sq=None) -> LossResult:
    """Value and score gradients of any loss family."""
    if spec.family in CLASSICAL_FAMILIES:
        real = np.asarray(real, dtype=np.float64)
        gen = np.asarray(gen, dtype=np.float64)
        if (real.ndim > 1 and real.shape[1] != 1) or (gen.ndim > 1 and gen.shape[1] != 1):
            raise ConfigurationError(f"{spec.family} needs scalar scores (output dimension 1)")
        return _classical(real, gen, spec.family)

    batch = ScoreBatch(real, gen)
    if spec.family == "gen_mmd":
        if spec.kernel.is_bounded:
            raise ConfigurationError("the generator loss must use an unbounded kernel")
        v, dx, dy = _block_terms(batch, spec.kernel, LossSide.UNBOUNDED, (1.0, -2.0, 1.0))
        return LossResult(v, dx, dy)
    if spec.family == "disc_lambda":
        v, dx, dy = _block_terms(batch, spec.kernel, disc_side(spec.lam), spec.weights)
        return LossResult(v, dx, dy)
    if grad_norms_sq is None:
        raise ConfigurationError(f"{spec.family} needs per-sample gradient norms")
    if spec.family == "disc_rep_gp":
        v, dx, dy = _block_terms(batch, spec.kernel, LossSide.REPULSIVE, (1.0, 0.0, -1.0))
        return _penalized(v, dx, dy, grad_norms_sq, spec.lam_gp, shift=1.0)
    v, dx, dy = _block_terms(batch, spec.kernel, LossSide.ATTRACTIVE, (-1.0, 2.0, -1.0))
    return _penalized(v, dx, dy, grad_norms_sq, spec.lam_gp, shift=0.0)


def lambda_combination(kxx_mean: float, kxy_mean: float, kyy_mean: float, lam: float) -> float:
    """The discriminator lambda-loss from precomputed block means."""
    return lam * kxx_mean - (lam - 1.0) * kxy_mean - kyy_mean


def loss_gen_mmd(batch: ScoreBatch, kernel: KernelSpec) -> float:
    return loss_and_grad(LossSpec("gen_mmd", kernel), batch.real, batch.gen).value


def loss_disc_lambda(batch: ScoreBatch, kernel: KernelSpec, lam: float) -> float:
    return loss_and_grad(LossSpec("disc_lambda", kernel, lam=lam), batch.real, batch.gen).value


def loss_disc_rep_gp(batch: ScoreBatch, kernel: KernelSpec, grad_norms_sq,
                     lam_gp: float = DEFAULT_GP_WEIGHT) -> float:
    spec = LossSpec("disc_rep_gp", kernel, lam_gp=lam_gp)
    return loss_and_grad(spec, batch.real, batch.gen, grad_norms_sq).value


def loss_disc_smmd(batch: ScoreBatch, kernel: KernelSpec, grad_norms_sq,
                   lam_gp: float = DEFAULT_GP_WEIGHT) -> float:
    spec = LossSpec("disc_smmd", kernel, lam_gp=lam_gp)
    return loss_and_grad(spec, batch.real, batch.gen, grad_norms_sq).value


def classical_losses(real_scores, gen_scores, family: str) -> float:
    if family not in CLASSICAL_FAMILIES:
        raise ConfigurationError(f"{family!r} is not a classical loss")
    return loss_and_grad(LossSpec(family), real_scores, gen_scores).value
