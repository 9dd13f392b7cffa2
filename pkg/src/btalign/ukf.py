"""Filtering engine: scaled unscented time update plus a standard linear
measurement update, and a plain linearized Kalman filter for the
linear-model baselines.

The measurement equation of the alignment problem is linear (GNSS
velocity/position difference), so only the time update needs sigma
points. All operations are deterministic: no hidden randomness anywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errmodel import DVEL, EPS, NABLA, ALPHA, N_STATES, SensorBudget
from .errors import CholeskyFailure, SingularInnovation
from .geokin import EarthModel, GeoPosition

_CHOL_JITTER = 1e-12


@dataclass(frozen=True)
class UtParams:
    """Scaled unscented transform parameters."""

    alpha: float = 1e-2
    beta: float = 2.0
    kappa: float = 0.0

    def scaling(self, n: int) -> float:
        lam = self.alpha**2 * (n + self.kappa) - n
        if n + lam <= 0:
            raise ValueError("UT scaling requires n + lambda > 0")
        return lam


@dataclass
class GaussianState:
    """Mean and covariance of the error state."""

    mean: np.ndarray
    cov: np.ndarray

    def copy(self) -> "GaussianState":
        return GaussianState(self.mean.copy(), self.cov.copy())


@dataclass(frozen=True)
class GnssSigma:
    """1-sigma GNSS accuracy: velocity per axis (m/s), horizontal/vertical position (m)."""

    vel: float = 0.1
    pos_h: float = 3.0
    pos_v: float = 5.0


@dataclass(frozen=True)
class NoiseConfig:
    """Process noise PSD (15x15, units^2/s) and measurement covariance (6x6)."""

    process_psd: np.ndarray
    meas_cov: np.ndarray

    @classmethod
    def assemble(
        cls,
        budget: SensorBudget,
        gnss: GnssSigma,
        pos: GeoPosition,
        em: EarthModel,
    ) -> "NoiseConfig":
        """Map a sensor budget and GNSS accuracies into filter noise terms.

        Gyro angular random walk drives the attitude-error block and accel
        velocity random walk the velocity-error block (white-noise mapping
        through the orthonormal attitude leaves isotropic blocks
        unchanged); bias states are random constants with no process
        noise. GNSS position sigmas (meters) are converted to the state's
        (rad, rad, m) units at the given position.
        """
        q = np.zeros((N_STATES, N_STATES))
        q[ALPHA, ALPHA] = budget.gyro_arw**2 * np.eye(3)
        q[DVEL, DVEL] = budget.accel_vrw**2 * np.eye(3)

        rh = em.radius + pos.alt
        r = np.diag(
            [
                gnss.vel**2,
                gnss.vel**2,
                gnss.vel**2,
                (gnss.pos_h / rh) ** 2,
                (gnss.pos_h / (rh * math.cos(pos.lat))) ** 2,
                gnss.pos_v**2,
            ]
        )
        return cls(process_psd=q, meas_cov=r)


def symmetrize(p: np.ndarray) -> np.ndarray:
    return 0.5 * (p + p.T)


def _cholesky_repaired(p: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(p)
    except np.linalg.LinAlgError:
        pass
    try:
        return np.linalg.cholesky(p + _CHOL_JITTER * np.eye(len(p)))
    except np.linalg.LinAlgError as exc:
        raise CholeskyFailure(
            "covariance not positive definite after jitter repair"
        ) from exc


def sigma_points(g: GaussianState, p: UtParams):
    """Scaled-UT sigma set: (2n+1, n) points and (mean, cov) weight vectors.

    The weighted sample mean and covariance of the returned set reproduce
    ``g`` exactly (up to the Cholesky roundoff).
    """
    n = len(g.mean)
    lam = p.scaling(n)
    spread = math.sqrt(n + lam)
    root = _cholesky_repaired(symmetrize(g.cov))

    pts = np.empty((2 * n + 1, n))
    pts[0] = g.mean
    pts[1 : n + 1] = g.mean + spread * root.T
    pts[n + 1 :] = g.mean - spread * root.T

    wm = np.full(2 * n + 1, 0.5 / (n + lam))
    wc = wm.copy()
    wm[0] = lam / (n + lam)
    wc[0] = lam / (n + lam) + (1.0 - p.alpha**2 + p.beta)
    return pts, wm, wc


def _rk4(dynamics, x: np.ndarray, dt: float) -> np.ndarray:
    """One classical RK4 step of the (possibly time-varying) dynamics.

    ``dynamics(x, frac)`` gets the fraction of the interval the stage sits
    at (0, 1/2 or 1), so callers can refresh frozen coefficients per
    stage.
    """
    k1 = dynamics(x, 0.0)
    k2 = dynamics(x + 0.5 * dt * k1, 0.5)
    k3 = dynamics(x + 0.5 * dt * k2, 0.5)
    k4 = dynamics(x + dt * k3, 1.0)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def ut_time_update(
    g: GaussianState,
    dynamics,
    dt: float,
    noise: NoiseConfig,
    params: UtParams = UtParams(),
) -> GaussianState:
    """Unscented time update: one RK4 step of ``dynamics`` per sigma point.

    ``dynamics`` maps a batch (m, n) of states plus the RK4 stage fraction
    to state derivatives. Process noise enters as ``process_psd * dt``.
    """
    pts, wm, wc = sigma_points(g, params)
    prop = _rk4(dynamics, pts, dt)
    mean = wm @ prop
    dev = prop - mean
    cov = (wc[:, None] * dev).T @ dev + noise.process_psd * dt
    return GaussianState(mean=mean, cov=symmetrize(cov))


def kf_time_update(
    g: GaussianState,
    f: np.ndarray,
    dt: float,
    noise: NoiseConfig,
) -> GaussianState:
    """Linear baseline time update with first-order transition Phi = I + F dt."""
    phi = np.eye(len(g.mean)) + f * dt
    mean = phi @ g.mean
    cov = phi @ g.cov @ phi.T + noise.process_psd * dt
    return GaussianState(mean=mean, cov=symmetrize(cov))


@dataclass(frozen=True)
class UpdateDiagnostics:
    innovation: np.ndarray
    innovation_cov: np.ndarray
    gain: np.ndarray


def linear_measurement_update(
    g: GaussianState,
    z: np.ndarray,
    h: np.ndarray,
    r: np.ndarray,
) -> tuple[GaussianState, UpdateDiagnostics]:
    """Standard Kalman update with Joseph-form covariance.

    Returns the posterior and the (innovation, innovation covariance,
    gain) diagnostics.
    """
    s = h @ g.cov @ h.T + r
    # the measurement mixes m/s and rad, so judge conditioning on the
    # correlation-normalized matrix (scale-free), not on raw units
    d = np.sqrt(np.diag(s))
    if not np.all(np.isfinite(d)) or np.any(d <= 0.0):
        raise SingularInnovation("innovation covariance has non-positive diagonal")
    s_norm = s / np.outer(d, d)
    cond = np.linalg.cond(s_norm)
    if not np.isfinite(cond) or cond > 1e12:
        raise SingularInnovation(f"innovation covariance ill-conditioned (cond={cond:.3e})")
    k = np.linalg.solve(s, h @ g.cov).T
    nu = z - h @ g.mean
    mean = g.mean + k @ nu
    i_kh = np.eye(len(g.mean)) - k @ h
    cov = i_kh @ g.cov @ i_kh.T + k @ r @ k.T
    return GaussianState(mean=mean, cov=symmetrize(cov)), UpdateDiagnostics(nu, s, k)
