"""Pairwise distances and kernel matrices (RBF, RQ, bounded RBF, mixtures).

Every kernel here is a function of the squared distance ``s = ||a - b||^2``.
The bounded RBF kernel clamps ``s`` before exponentiating; the clamp depends
on which score groups the two arguments come from (:class:`BlockRole`) and on
whether the discriminator loss using it is attractive or repulsive
(:class:`LossSide`).
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, ShapeError

DEFAULT_MIXTURE_SCALES = (1.0, math.sqrt(2.0), 2.0, 2.0 * math.sqrt(2.0), 4.0)
RQ_MIXTURE_ALPHAS = (0.2, 0.5, 1.0, 2.0, 5.0)


class BlockRole(str, enum.Enum):
    REAL_REAL = "real_real"
    GEN_GEN = "gen_gen"
    REAL_GEN = "real_gen"


class LossSide(str, enum.Enum):
    ATTRACTIVE = "attractive"
    REPULSIVE = "repulsive"
    UNBOUNDED = "unbounded"


@dataclass(frozen=True)
class KernelSpec:
    variant: str
    sigma: float = 1.0
    alpha: float = 1.0
    b_l: float = 0.25
    b_u: float = 4.0
    members: tuple["KernelSpec", ...] = ()

    def __post_init__(self):
        if self.variant not in ("rbf", "rq", "rbf_b", "mixture"):
            raise ConfigurationError(f"unknown kernel variant {self.variant!r}")
        if self.variant in ("rbf", "rbf_b") and not self.sigma > 0:
            raise ConfigurationError("kernel sigma must be positive")
        if self.variant == "rq" and not self.alpha > 0:
            raise ConfigurationError("rq alpha must be positive")
        if self.variant == "rbf_b" and not 0 <= self.b_l < self.b_u:
            raise ConfigurationError("rbf_b bounds need 0 <= b_l < b_u")
        if self.variant == "mixture" and not self.members:
            raise ConfigurationError("mixture needs at least one member")

    @property
    def is_bounded(self) -> bool:
        if self.variant == "mixture":
            return any(m.is_bounded for m in self.members)
        return self.variant == "rbf_b"

    def describe(self) -> str:
        if self.variant == "rbf":
            return f"rbf(sigma={self.sigma:g})"
        if self.variant == "rq":
            return f"rq(alpha={self.alpha:g})"
        if self.variant == "rbf_b":
            return f"rbf_b(sigma={self.sigma:g}, b_l={self.b_l:g}, b_u={self.b_u:g})"
        return "mixture(" + ", ".join(m.describe() for m in self.members) + ")"


def rbf(sigma: float = 1.0) -> KernelSpec:
    return KernelSpec("rbf", sigma=sigma)


def rq(alpha: float = 1.0) -> KernelSpec:
    return KernelSpec("rq", alpha=alpha)


def rbf_b(sigma: float = 1.0, b_l: float = 0.25, b_u: float = 4.0) -> KernelSpec:
    return KernelSpec("rbf_b", sigma=sigma, b_l=b_l, b_u=b_u)


def mixture(members: Iterable[KernelSpec]) -> KernelSpec:
    return KernelSpec("mixture", members=tuple(members))


def rbf_mixture(scales: Sequence[float] = DEFAULT_MIXTURE_SCALES) -> KernelSpec:
    return mixture(rbf(s) for s in scales)


def rq_mixture(alphas: Sequence[float] = RQ_MIXTURE_ALPHAS) -> KernelSpec:
    return mixture(rq(a) for a in alphas)


def pairwise_sq_dists(A, B=None) -> np.ndarray:
    """Squared Euclidean distances between the rows of ``A`` and ``B``.

    Uses ``|a|^2 + |b|^2 - 2 a.b`` clipped at zero. Passing ``B=None`` (or the
    same array object) marks the block as a self-block and zeroes the diagonal.
    """
    A = np.asarray(A, dtype=np.float64)
    alias = B is None or B is A
    B = A if B is None else np.asarray(B, dtype=np.float64)
    A = A.reshape(A.shape[0], -1)
    B = B.reshape(B.shape[0], -1)
    if A.shape[1] != B.shape[1]:
        raise ShapeError(f"feature dimensions differ: {A.shape[1]} vs {B.shape[1]}")
    na = (A * A).sum(axis=1)
    nb = (B * B).sum(axis=1)
    s = na[:, None] + nb[None, :] - 2.0 * (A @ B.T)
    np.maximum(s, 0.0, out=s)
    if alias:
        np.fill_diagonal(s, 0.0)
    return s


def pairwise_sq_dists_grad(A, B, cotangent):
    """Gradients of ``sum(G * pairwise_sq_dists(A, B))`` w.r.t. ``A`` and ``B``.

    For a self-block add the two results.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    G = np.asarray(cotangent, dtype=np.float64)
    A2 = A.reshape(A.shape[0], -1)
    B2 = B.reshape(B.shape[0], -1)
    dA = 2.0 * (G.sum(axis=1)[:, None] * A2 - G @ B2)
    dB = 2.0 * (G.sum(axis=0)[:, None] * B2 - G.T @ A2)
    return dA.reshape(A.shape), dB.reshape(B.shape)


def _clamp_mode(role: BlockRole, side: LossSide) -> str | None:
    """'lower', 'upper' or None for the bounded kernel."""
    role, side = BlockRole(role), LossSide(side)
    if side is LossSide.ATTRACTIVE:
        return "upper" if role is BlockRole.REAL_GEN else "lower"
    if side is LossSide.REPULSIVE:
        return {BlockRole.GEN_GEN: "lower", BlockRole.REAL_REAL: "upper"}.get(role)
    raise ConfigurationError(
        "the bounded rbf kernel is discriminator-only; the generator uses plain rbf")


def _leaf_value_and_slope(spec: KernelSpec, s: np.ndarray, role, side):
    if spec.variant == "rbf":
        c = 1.0 / (2.0 * spec.sigma ** 2)
        k = np.exp(-c * s)
        return k, -c * k
    if spec.variant == "rq":
        a = spec.alpha
        base = 1.0 + s / (2.0 * a)
        k = base ** (-a)
        return k, -0.5 * base ** (-a - 1.0)
    mode = _clamp_mode(role, side)
    c = 1.0 / (2.0 * spec.sigma ** 2)
    if mode == "lower":
        active = s <= spec.b_l
        se = np.where(active, spec.b_l, s)
    elif mode == "upper":
        active = s >= spec.b_u
        se = np.where(active, spec.b_u, s)
    else:
        active = np.zeros(s.shape, dtype=bool)
        se = s
    k = np.exp(-c * se)
    return k, np.where(active, 0.0, -c * k)


def _value_and_slope(spec, s, role, side):
    if spec.variant == "mixture":
        total_k = np.zeros_like(s)
        total_d = np.zeros_like(s)
        for m in spec.members:
            k, d = _value_and_slope(m, s, role, side)
            total_k += k
            total_d += d
        return total_k, total_d
    return _leaf_value_and_slope(spec, s, role, side)


def _check(spec: KernelSpec, side) -> None:
    if LossSide(side) is LossSide.UNBOUNDED and spec.is_bounded:
        raise ConfigurationError(
            "the bounded rbf kernel is discriminator-only; the generator uses plain rbf")


def kernel_matrix(spec: KernelSpec, sq_dists, role=BlockRole.REAL_REAL,
                  loss_side=LossSide.UNBOUNDED) -> np.ndarray:
    """Evaluate ``spec`` entrywise on a matrix of squared distances."""
    _check(spec, loss_side)
    s = np.asarray(sq_dists, dtype=np.float64)
    return _value_and_slope(spec, s, role, loss_side)[0]


def kernel_matrix_grad(spec: KernelSpec, sq_dists, role=BlockRole.REAL_REAL,
                       loss_side=LossSide.UNBOUNDED, cotangent=None) -> np.ndarray:
    """``cotangent * dk/ds`` entrywise; exactly zero where a clamp is active."""
    _check(spec, loss_side)
    s = np.asarray(sq_dists, dtype=np.float64)
    slope = _value_and_slope(spec, s, role, loss_side)[1]
    return slope if cotangent is None else slope * np.asarray(cotangent, dtype=np.float64)


def kernel_curves(spec: KernelSpec, e_values, derivative: bool = False):
    """Kernel (or d/de) of each mixture member as a function of distance ``e``.

    Returns ``(labels, table)`` where ``table`` has columns e, one per member,
    and the member mean.
    """
    members = spec.members if spec.variant == "mixture" else (spec,)
    e = np.asarray(e_values, dtype=np.float64)
    s = e * e
    cols = []
    for m in members:
        k, dk_ds = _value_and_slope(m, s, BlockRole.REAL_REAL, LossSide.UNBOUNDED)
        cols.append(dk_ds * 2.0 * e if derivative else k)
    cols = np.stack(cols, axis=1)
    table = np.column_stack([e, cols, cols.mean(axis=1)])
    labels = ["e"] + [m.describe() for m in members] + ["mean"]
    return labels, table


def write_curves_csv(path, spec: KernelSpec, e_values, derivative: bool = False) -> None:
    labels, table = kernel_curves(spec, e_values, derivative)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(labels)
        for row in table:
            w.writerow([format_float(v) for v in row])


def format_float(v: float) -> str:
    """17 significant digits, '.' decimal; round-trips a float64 exactly."""
    return format(float(v), ".17g")
