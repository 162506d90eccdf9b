"""Two-parameter MMD-GAN dynamics: G(z) = w1 z, D(x) = w2 x^2.

The latent code is uniform on [-1, 1]; the data is either uniform on [-1, 1]
or standard Gaussian. Scores are compared with a single Gaussian kernel
(scale 0.5 by default). The vector field is the negative gradient of the
population losses: the generator MMD loss in ``w1`` and the discriminator
loss (attractive, lambda=-1, or repulsive, lambda=1) in ``w2``.

Expectations over independent pairs are computed with tensor-product
Gauss-Legendre quadrature. Gaussian data is truncated at +-5 standard
deviations and the truncated density renormalized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field, replace

import numpy as np
from numpy.polynomial.legendre import leggauss

from .errors import ConfigurationError, NonConvergenceError, NonFiniteError

DATA_LAWS = ("uniform", "gaussian")
GAUSS_TRUNCATION = 5.0


@dataclass(frozen=True)
class SimConfig:
    data_law: str = "gaussian"
    disc_loss: str = "attractive"
    kernel_sigma: float = 0.5
    n_quadrature: int = 192
    w1_range: tuple[float, float] = (-2.5, 2.5)
    w2_range: tuple[float, float] = (-1.5, 1.5)
    resolution: int = 21
    integrator_step: float = 0.1
    g_rate: float = 1.0

    def __post_init__(self):
        if self.data_law not in DATA_LAWS:
            raise ConfigurationError(f"unknown data law {self.data_law!r}")
        if self.disc_loss not in ("attractive", "repulsive"):
            raise ConfigurationError(f"unknown discriminator loss {self.disc_loss!r}")
        if not self.kernel_sigma > 0:
            raise ConfigurationError("kernel_sigma must be positive")
        if self.n_quadrature < 2 or self.n_quadrature % 2:
            raise ConfigurationError("n_quadrature must be an even integer >= 2")
        for name in ("w1_range", "w2_range"):
            lo, hi = getattr(self, name)
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                raise ConfigurationError(f"{name} must be a finite increasing pair")
        if self.resolution < 2:
            raise ConfigurationError("resolution must be at least 2")
        if not self.integrator_step > 0:
            raise ConfigurationError("integrator_step must be positive")

    @property
    def lam(self) -> float:
        return -1.0 if self.disc_loss == "attractive" else 1.0


@dataclass(frozen=True)
class FieldSample:
    w1: float
    w2: float
    dw1: float
    dw2: float


def quadrature(law: str, n: int):
    """Nodes (symmetric about 0) and probability weights for ``law``."""
    x, w = leggauss(n)
    if law == "uniform":
        return x, w / 2.0
    x = x * GAUSS_TRUNCATION
    w = w * np.exp(-0.5 * x * x)
    return x, w / w.sum()


def _folded(law: str, n: int):
    """Squared nodes with paired weights; valid because the model only
    depends on x^2 and the nodes come in +-x pairs."""
    x, w = quadrature(law, n)
    half = n // 2
    # leggauss returns ascending nodes, so x[i] and x[n-1-i] are mirror images
    return x[half:] ** 2, w[half:] + w[:half][::-1]


class _Model:
    """Cached quadrature for one configuration."""

    def __init__(self, config: SimConfig):
        self.config = config
        self.u, self.wu = _folded(config.data_law, config.n_quadrature)  # data x^2
        self.v, self.wv = _folded("uniform", config.n_quadrature)         # latent z^2
        self.c = 1.0 / (2.0 * config.kernel_sigma ** 2)

    def _pair(self, p, wp, q, wq, w2):
        """E[k], E[k * (p-q)^2] for scores w2*p, w2*q."""
        diff = p[:, None] - q[None, :]
        d2 = diff * diff
        k = np.exp(-self.c * w2 * w2 * d2)
        return wp @ k @ wq, wp @ (k * d2) @ wq, diff, k

    def field(self, w1: float, w2: float):
        c = self.c
        u, wu, v, wv = self.u, self.wu, self.v, self.wv
        gv = w1 * w1 * v  # generated x^2
        # generator: d/dw1 of E_xx' - 2 E_xg + E_gg' with g-score w2 * w1^2 z^2
        _, _, diff_xg, k_xg = self._pair(u, wu, gv, wv, w2)
        # dk(a,b)/db = 2c (a-b) k, db/dw1 = 2 w2 w1 z^2
        d_cross = wu @ (2.0 * c * w2 * diff_xg * k_xg * (2.0 * w2 * w1 * v)[None, :]) @ wv
        _, _, diff_gg, k_gg = self._pair(gv, wv, gv, wv, w2)
        dv = 2.0 * w2 * w1 * v
        d_gg = wv @ (-2.0 * c * w2 * diff_gg * k_gg * (dv[:, None] - dv[None, :])) @ wv
        dLG_dw1 = -2.0 * d_cross + d_gg
        # discriminator: d/dw2 E[k(w2 p, w2 q)] = -2 c w2 E[(p-q)^2 k]
        lam = self.config.lam
        _, m_xx, _, _ = self._pair(u, wu, u, wu, w2)
        m_xg = wu @ (k_xg * diff_xg * diff_xg) @ wv
        m_gg = wv @ (k_gg * diff_gg * diff_gg) @ wv
        dLD_dw2 = -2.0 * c * w2 * (lam * m_xx - (lam - 1.0) * m_xg - m_gg)
        return -self.config.g_rate * float(dLG_dw1), -float(dLD_dw2)

    def losses(self, w1: float, w2: float):
        """(L_G, L_D) at a point; used as an independent check of the field."""
        gv = w1 * w1 * self.v
        e_xx = self._pair(self.u, self.wu, self.u, self.wu, w2)[0]
        e_xg = self._pair(self.u, self.wu, gv, self.wv, w2)[0]
        e_gg = self._pair(gv, self.wv, gv, self.wv, w2)[0]
        lam = self.config.lam
        return e_xx - 2.0 * e_xg + e_gg, lam * e_xx - (lam - 1.0) * e_xg - e_gg


_MODELS: dict = {}


def _model(config: SimConfig) -> _Model:
    m = _MODELS.get(config)
    if m is None:
        m = _MODELS[config] = _Model(config)
    return m


def field(config: SimConfig, w1: float, w2: float) -> tuple[float, float]:
    """(dw1, dw2): negative loss gradients at (w1, w2)."""
    dw1, dw2 = _model(config).field(float(w1), float(w2))
    if not (math.isfinite(dw1) and math.isfinite(dw2)):
        raise NonFiniteError(f"non-finite field at (w1={w1}, w2={w2})",
                             {"w1": w1, "w2": w2})
    return dw1, dw2


def population_losses(config: SimConfig, w1: float, w2: float) -> tuple[float, float]:
    return _model(config).losses(float(w1), float(w2))


def grid_field(config: SimConfig) -> list[FieldSample]:
    """Field samples on the resolution x resolution grid, w1-major order."""
    w1s = np.linspace(*config.w1_range, config.resolution)
    w2s = np.linspace(*config.w2_range, config.resolution)
    out = []
    for a in w1s:
        for b in w2s:
            d1, d2 = field(config, a, b)
            out.append(FieldSample(float(a), float(b), d1, d2))
    return out


@dataclass
class Trajectory:
    samples: list[FieldSample] = dc_field(default_factory=list)
    escaped: bool = False

    @property
    def end(self) -> tuple[float, float]:
        s = self.samples[-1]
        return s.w1, s.w2


def _rk4(config, p, h):
    f = lambda q: np.array(field(config, q[0], q[1]))
    k1 = f(p)
    k2 = f(p + 0.5 * h * k1)
    k3 = f(p + 0.5 * h * k2)
    k4 = f(p + h * k3)
    return p + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4), k1


def _inside(config, p):
    (a0, a1), (b0, b1) = config.w1_range, config.w2_range
    return a0 <= p[0] <= a1 and b0 <= p[1] <= b1


def integrate_trajectory(config: SimConfig, start, n_steps: int,
                         step: float | None = None) -> Trajectory:
    """Classical RK4 on the field; stops early if the path leaves the grid."""
    h = config.integrator_step if step is None else step
    p = np.array(start, dtype=np.float64)
    if not _inside(config, p):
        raise ConfigurationError(f"start {tuple(p)} lies outside the grid")
    traj = Trajectory()
    for _ in range(n_steps):
        nxt, k1 = _rk4(config, p, h)
        traj.samples.append(FieldSample(float(p[0]), float(p[1]), float(k1[0]), float(k1[1])))
        if not _inside(config, nxt):
            traj.escaped = True
            return traj
        p = nxt
    d1, d2 = field(config, p[0], p[1])
    traj.samples.append(FieldSample(float(p[0]), float(p[1]), d1, d2))
    return traj


def jacobian(config: SimConfig, w1: float, w2: float, h: float = 1e-5) -> np.ndarray:
    J = np.zeros((2, 2))
    for j, (e1, e2) in enumerate(((h, 0.0), (0.0, h))):
        fp = field(config, w1 + e1, w2 + e2)
        fm = field(config, w1 - e1, w2 - e2)
        J[:, j] = (np.array(fp) - np.array(fm)) / (2.0 * h)
    return J


def jacobian_eigs(config: SimConfig, w1: float, w2: float, h: float = 1e-5):
    """Central-difference Jacobian of the field and its eigenvalues."""
    J = jacobian(config, w1, w2, h)
    return J, np.linalg.eigvals(J)


@dataclass(frozen=True)
class Equilibrium:
    w1: float
    w2: float
    residual: float
    iterations: int


def _residual(config, p) -> float:
    return float(np.hypot(*field(config, p[0], p[1])))


def find_equilibrium(config: SimConfig, initial_guess, tol: float = 1e-8,
                     max_rounds: int = 60, steps_per_round: int = 200,
                     newton_radius: float = 1e-3) -> Equilibrium:
    """Locate a stable equilibrium reachable from ``initial_guess``.

    Follows the flow with RK4, halving the step whenever a round fails to
    reduce the residual. Once the residual is below ``newton_radius`` the
    point is refined with damped Newton steps on the field.
    """
    p = np.array(initial_guess, dtype=np.float64)
    if not _inside(config, p):
        raise ConfigurationError(f"initial guess {tuple(p)} lies outside the grid")
    h = config.integrator_step
    res = _residual(config, p)
    best, best_res = p.copy(), res
    for rnd in range(max_rounds):
        if res < tol:
            return Equilibrium(float(p[0]), float(p[1]), res, rnd)
        if res < newton_radius:
            p_new = _newton(config, p, tol)
        else:
            p_new = p.copy()
            for _ in range(steps_per_round):
                p_new, _ = _rk4(config, p_new, h)
                if not _inside(config, p_new):
                    break
        new_res = _residual(config, p_new) if _inside(config, p_new) else math.inf
        if new_res < res:
            p, res = p_new, new_res
            if res < best_res:
                best, best_res = p.copy(), res
        else:
            h *= 0.5
            newton_radius *= 0.1
    if res < tol:
        return Equilibrium(float(p[0]), float(p[1]), res, max_rounds)
    raise NonConvergenceError(
        f"no equilibrium within {max_rounds} rounds (residual {best_res:.3e})",
        best=(float(best[0]), float(best[1])), residual=best_res)


def _newton(config, p, tol, max_iter: int = 20):
    res = _residual(config, p)
    for _ in range(max_iter):
        if res < tol:
            break
        J = jacobian(config, p[0], p[1])
        f = np.array(field(config, p[0], p[1]))
        try:
            delta = np.linalg.solve(J, -f)
        except np.linalg.LinAlgError:
            break
        t = 1.0
        while t > 1e-4:
            q = p + t * delta
            r = _residual(config, q)
            if r < res:
                p, res = q, r
                break
            t *= 0.5
        else:
            break
    return p


def with_(config: SimConfig, **kw) -> SimConfig:
    return replace(config, **kw)
