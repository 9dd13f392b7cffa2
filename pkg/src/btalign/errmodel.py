"""15-state SINS error models.

State vector order (fixed; everything downstream relies on it):

    x = [ alpha (3)   Euler platform error angles, rad
          dvel  (3)   velocity error, m/s
          dpos  (3)   latitude error (rad), longitude error (rad), altitude error (m)
          eps   (3)   gyro bias, rad/s
          nabla (3)   accel bias, m/s^2 ]

Errors are "computed minus true". The nonlinear model is exact in alpha
(valid for arbitrarily large misalignment) and first order in the small
velocity/position errors through the earth-rate Jacobians. The linear
model is its Taylor expansion at alpha = 0 and serves as the baseline in
comparisons.

In a reverse-navigation pass the same dynamics body is evaluated on the
reversed trajectory with the earth rate negated; the gyro-bias state then
holds the negated physical bias (the sign bookkeeping lives in
:mod:`btalign.backtrack`), so no direction branch is needed here.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import GimbalSingularity
from .geokin import EarthModel, skew, _rot_zxy
from .mech import Direction, GnssFix, ImuSample, NavState

N_STATES = 15
ALPHA = slice(0, 3)
DVEL = slice(3, 6)
DPOS = slice(6, 9)
EPS = slice(9, 12)
NABLA = slice(12, 15)

#: C_omega becomes non-invertible as |cos(alpha_x)| -> 0.
GIMBAL_TOL = 1e-6

#: Standard gravity for mg-style unit conversions, m/s^2.
G0 = 9.80665
DEG = math.pi / 180.0


class ModelKind(enum.Enum):
    LINEAR = "linear"
    NONLINEAR = "nonlinear"


@dataclass(frozen=True)
class ErrorState:
    """Structured view of the 15-element error vector."""

    alpha: np.ndarray
    dvel: np.ndarray
    dpos: np.ndarray
    gyro_bias: np.ndarray
    accel_bias: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate(
            [self.alpha, self.dvel, self.dpos, self.gyro_bias, self.accel_bias]
        )

    @classmethod
    def from_vector(cls, x) -> "ErrorState":
        x = np.asarray(x, dtype=float)
        return cls(
            alpha=x[ALPHA].copy(),
            dvel=x[DVEL].copy(),
            dpos=x[DPOS].copy(),
            gyro_bias=x[EPS].copy(),
            accel_bias=x[NABLA].copy(),
        )

    @classmethod
    def zero(cls) -> "ErrorState":
        return cls.from_vector(np.zeros(N_STATES))


@dataclass(frozen=True)
class SensorBudget:
    """1-sigma sensor error budget in SI units.

    gyro_bias_sigma: rad/s, gyro_arw: rad/sqrt(s),
    accel_bias_sigma: m/s^2, accel_vrw: (m/s^2)/sqrt(Hz).
    """

    gyro_bias_sigma: float
    gyro_arw: float
    accel_bias_sigma: float
    accel_vrw: float

    @classmethod
    def from_common_units(
        cls,
        gyro_bias_deg_h: float,
        gyro_arw_deg_sqrt_h: float,
        accel_bias_mg: float,
        accel_vrw_mg_sqrt_hz: float,
    ) -> "SensorBudget":
        """Build from the units sensor datasheets use (deg/h, deg/sqrt(h), mg, mg/sqrt(Hz))."""
        return cls(
            gyro_bias_sigma=gyro_bias_deg_h * DEG / 3600.0,
            gyro_arw=gyro_arw_deg_sqrt_h * DEG / 60.0,
            accel_bias_sigma=accel_bias_mg * 1e-3 * G0,
            accel_vrw=accel_vrw_mg_sqrt_hz * 1e-3 * G0,
        )

    def scaled(self, factor: float) -> "SensorBudget":
        return replace(
            self,
            gyro_bias_sigma=self.gyro_bias_sigma * factor,
            gyro_arw=self.gyro_arw * factor,
            accel_bias_sigma=self.accel_bias_sigma * factor,
            accel_vrw=self.accel_vrw * factor,
        )


def cn_to_nprime(alpha) -> np.ndarray:
    """Transform from the true nav frame to the computed frame for EPEA ``alpha``.

    Accepts a single (3,) vector or a batch (..., 3); returns (..., 3, 3).
    """
    alpha = np.asarray(alpha, dtype=float)
    if alpha.ndim == 1:
        return _rot_zxy(alpha)
    sx, cx = np.sin(alpha[..., 0]), np.cos(alpha[..., 0])
    sy, cy = np.sin(alpha[..., 1]), np.cos(alpha[..., 1])
    sz, cz = np.sin(alpha[..., 2]), np.cos(alpha[..., 2])
    m = np.empty(alpha.shape[:-1] + (3, 3))
    m[..., 0, 0] = cy * cz - sy * sx * sz
    m[..., 0, 1] = cy * sz + sy * sx * cz
    m[..., 0, 2] = -sy * cx
    m[..., 1, 0] = -cx * sz
    m[..., 1, 1] = cx * cz
    m[..., 1, 2] = sx
    m[..., 2, 0] = sy * cz + cy * sx * sz
    m[..., 2, 1] = sy * sz - cy * sx * cz
    m[..., 2, 2] = cy * cx
    return m


def c_omega(alpha) -> np.ndarray:
    """Transfer matrix from computed-frame angular rate to the EPEA rate.

    Singular as cos(alpha_x) -> 0 (det = cos(alpha_x)); raises
    :class:`GimbalSingularity` inside the guard band.
    """
    alpha = np.asarray(alpha, dtype=float)
    cx = np.cos(alpha[..., 0])
    if np.any(np.abs(cx) < GIMBAL_TOL):
        raise GimbalSingularity("C_omega singular: |cos(alpha_x)| below 1e-6")
    sx = np.sin(alpha[..., 0])
    sy, cy = np.sin(alpha[..., 1]), np.cos(alpha[..., 1])
    m = np.zeros(alpha.shape[:-1] + (3, 3))
    m[..., 0, 0] = cy
    m[..., 0, 2] = -sy * cx
    m[..., 1, 1] = 1.0
    m[..., 1, 2] = sx
    m[..., 2, 0] = sy
    m[..., 2, 2] = cy * cx
    return m


def c_omega_inv(alpha) -> np.ndarray:
    """Closed-form inverse of :func:`c_omega` (same gimbal guard)."""
    alpha = np.asarray(alpha, dtype=float)
    cx = np.cos(alpha[..., 0])
    if np.any(np.abs(cx) < GIMBAL_TOL):
        raise GimbalSingularity("C_omega singular: |cos(alpha_x)| below 1e-6")
    sx = np.sin(alpha[..., 0])
    sy, cy = np.sin(alpha[..., 1]), np.cos(alpha[..., 1])
    m = np.zeros(alpha.shape[:-1] + (3, 3))
    m[..., 0, 0] = cy
    m[..., 0, 2] = sy
    m[..., 1, 0] = sx * sy / cx
    m[..., 1, 1] = 1.0
    m[..., 1, 2] = -sx * cy / cx
    m[..., 2, 0] = -sy / cx
    m[..., 2, 2] = cy / cx
    return m


def _cross(a, b):
    """Row-wise cross product of (..., 3) arrays (broadcasting like np.cross)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    out[..., 0] = a1 * b2 - a2 * b1
    out[..., 1] = a2 * b0 - a0 * b2
    out[..., 2] = a0 * b1 - a1 * b0
    return out


def _rate_jacobians(nav: NavState, em: EarthModel):
    """Earth-rate and transport-rate values and Jacobians at the computed state.

    With w_ie^n = [0, W cosL, W sinL] and
    w_en^n = [-vN/(R+h), vE/(R+h), vE tanL/(R+h)]:

      d(w_ie)/dL = [0, -W sinL, W cosL]          (no v or h dependence)

      d(w_en)/dv = [[0, -1/(R+h), 0],
                    [1/(R+h), 0, 0],
                    [tanL/(R+h), 0, 0]]
      d(w_en)/dL = [0, 0, vE sec^2 L/(R+h)]
      d(w_en)/dh = [vN, -vE, -vE tanL] / (R+h)^2
    """
    lat = nav.pos.lat
    rh = em.radius + nav.pos.alt
    sin_lat, cos_lat = math.sin(lat), math.cos(lat)
    tan_lat = sin_lat / cos_lat
    ve, vn, vu = nav.vel.east, nav.vel.north, nav.vel.up

    w_ie = np.array([0.0, em.rate * cos_lat, em.rate * sin_lat])
    w_en = np.array([-vn / rh, ve / rh, ve * tan_lat / rh])

    j_ie_p = np.zeros((3, 3))
    j_ie_p[1, 0] = -em.rate * sin_lat
    j_ie_p[2, 0] = em.rate * cos_lat

    j_en_v = np.array(
        [
            [0.0, -1.0 / rh, 0.0],
            [1.0 / rh, 0.0, 0.0],
            [tan_lat / rh, 0.0, 0.0],
        ]
    )
    j_en_p = np.zeros((3, 3))
    j_en_p[2, 0] = ve / (cos_lat**2) / rh
    j_en_p[0, 2] = vn / rh**2
    j_en_p[1, 2] = -ve / rh**2
    j_en_p[2, 2] = -ve * tan_lat / rh**2
    return w_ie, w_en, j_ie_p, j_en_v, j_en_p


def nonlinear_dynamics(
    x,
    nav: NavState,
    imu: ImuSample,
    direction: Direction,
    em: EarthModel,
) -> np.ndarray:
    """Continuous-time derivative of the error state (exact-in-alpha model).

    ``x`` may be a single 15-vector or a batch (..., 15); the result has
    the same shape. ``nav`` and ``imu`` are the computed trajectory state
    and the measured specific force feeding it. For a reverse pass the
    caller supplies the reversed-trajectory ``nav``, the reverse-pass
    ``em`` (earth rate negated) and a state whose gyro-bias entries hold
    the negated physical bias; ``direction`` only documents that intent,
    the dynamics body is identical in both directions.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = x[None, :] if single else x

    alpha = xb[..., ALPHA]
    dvel = xb[..., DVEL]
    dpos = xb[..., DPOS]
    eps = xb[..., EPS]
    nabla = xb[..., NABLA]

    w_ie, w_en, j_ie_p, j_en_v, j_en_p = _rate_jacobians(nav, em)
    w_in = w_ie + w_en
    cor = 2.0 * w_ie + w_en
    v_n = nav.vel.as_array()
    c_bn = nav.att
    f_n = c_bn @ imu.accel  # specific force resolved in the computed frame

    c_nnp = cn_to_nprime(alpha)
    cw_inv = c_omega_inv(alpha)

    # first-order expansion of the computed-minus-true inertial rates
    dw_ie = dpos @ j_ie_p.T
    dw_en = dvel @ j_en_v.T + dpos @ j_en_p.T
    dw_in = dw_ie + dw_en

    # attitude error rate
    rhs = (
        w_in
        - np.einsum("nij,j->ni", c_nnp, w_in)
        + np.einsum("nij,nj->ni", c_nnp, dw_in)
        - eps @ c_bn.T
    )
    alpha_dot = np.einsum("nij,nj->ni", cw_inv, rhs)

    # velocity error rate
    dcor = 2.0 * dw_ie + dw_en
    f_err = f_n - np.einsum("nji,j->ni", c_nnp, f_n)  # (I - C^T) f
    f_bias = np.einsum("nji,nj->ni", c_nnp, nabla @ c_bn.T)  # C^T C_bn nabla
    dvel_dot = f_err + f_bias - _cross(dcor, v_n) - _cross(cor, dvel) + _cross(dcor, dvel)

    # position error rates
    lat = nav.pos.lat
    rh = em.radius + nav.pos.alt
    sec_lat = 1.0 / math.cos(lat)
    tan_lat = math.tan(lat)
    ve, vn = v_n[0], v_n[1]
    dlat_dot = dvel[..., 1] / rh - vn / rh**2 * dpos[..., 2]
    dlon_dot = (
        sec_lat / rh * dvel[..., 0]
        + ve * sec_lat * tan_lat / rh * dpos[..., 0]
        - ve * sec_lat / rh**2 * dpos[..., 2]
    )
    dalt_dot = dvel[..., 2]

    out = np.zeros_like(xb)
    out[..., ALPHA] = alpha_dot
    out[..., DVEL] = dvel_dot
    out[..., 6] = dlat_dot
    out[..., 7] = dlon_dot
    out[..., 8] = dalt_dot
    # biases are random constants: zero derivative
    return out[0] if single else out


def linear_dynamics(nav: NavState, imu: ImuSample, em: EarthModel) -> np.ndarray:
    """Continuous-time 15x15 Jacobian of the nonlinear model at x = 0.

    This is the small-misalignment (phi-angle) baseline:
    phi_dot = -w_in x phi + dw_in - C eps,
    dv_dot  = f^n x phi - (2 w_ie + w_en) x dv + C nabla + position couplings.
    """
    w_ie, w_en, j_ie_p, j_en_v, j_en_p = _rate_jacobians(nav, em)
    w_in = w_ie + w_en
    cor = 2.0 * w_ie + w_en
    v_n = nav.vel.as_array()
    c_bn = nav.att
    f_n = c_bn @ imu.accel

    f = np.zeros((N_STATES, N_STATES))
    f[ALPHA, ALPHA] = -skew(w_in)
    f[ALPHA, DVEL] = j_en_v
    f[ALPHA, DPOS] = j_ie_p + j_en_p
    f[ALPHA, EPS] = -c_bn

    f[DVEL, ALPHA] = skew(f_n)
    f[DVEL, DVEL] = -skew(cor) + skew(v_n) @ j_en_v
    f[DVEL, DPOS] = skew(v_n) @ (2.0 * j_ie_p + j_en_p)
    f[DVEL, NABLA] = c_bn

    lat = nav.pos.lat
    rh = em.radius + nav.pos.alt
    sec_lat = 1.0 / math.cos(lat)
    tan_lat = math.tan(lat)
    ve, vn = v_n[0], v_n[1]
    f[6, 4] = 1.0 / rh
    f[6, 8] = -vn / rh**2
    f[7, 3] = sec_lat / rh
    f[7, 6] = ve * sec_lat * tan_lat / rh
    f[7, 8] = -ve * sec_lat / rh**2
    f[8, 5] = 1.0
    return f


def measurement_model():
    """GNSS aiding: H selects [dvel; dpos]; the map forms z = INS - GNSS.

    Velocity residuals are m/s; position residuals are (rad, rad, m),
    matching the state units.
    """
    h = np.zeros((6, N_STATES))
    h[0:3, DVEL] = np.eye(3)
    h[3:6, DPOS] = np.eye(3)

    def innovation(nav: NavState, fix: GnssFix) -> np.ndarray:
        return np.array(
            [
                nav.vel.east - fix.vel.east,
                nav.vel.north - fix.vel.north,
                nav.vel.up - fix.vel.up,
                nav.pos.lat - fix.pos.lat,
                nav.pos.lon - fix.pos.lon,
                nav.pos.alt - fix.pos.alt,
            ]
        )

    return h, innovation


def flip_gyro_bias(x: ErrorState) -> ErrorState:
    """Negate the gyro-bias block, everything else untouched (an involution)."""
    return replace(x, gyro_bias=-x.gyro_bias)


def flip_gyro_bias_vector(x: np.ndarray) -> np.ndarray:
    out = np.array(x, dtype=float)
    out[EPS] = -out[EPS]
    return out


def flip_gyro_bias_cov(p: np.ndarray) -> np.ndarray:
    """Similarity transform of the covariance matching the mean flip.

    S = diag(1...1, -1,-1,-1, 1,1,1) with the -1s on the gyro-bias block;
    orthogonal, so eigenvalues are preserved.
    """
    out = np.array(p, dtype=float)
    out[EPS, :] = -out[EPS, :]
    out[:, EPS] = -out[:, EPS]
    return out
