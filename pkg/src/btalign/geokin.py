"""Earth model, frame conventions and kinematic rates.

Conventions used throughout the package:

* Navigation frame is East-North-Up (ENU).
* Attitude is carried as a direction cosine matrix C (body -> nav), a
  plain 3x3 ``numpy`` array.
* Euler angles are ``(pitch, roll, yaw)`` = rotations about the E, N and
  U axes, applied in yaw -> pitch -> roll order (Z, then X, then Y).
  With this sequence ``dcm_from_euler`` has ``sin(pitch)`` in the (2,3)
  entry of the nav->body matrix.
* The earth is a sphere with a single radius; gravity is a constant
  vector ``[0, 0, -g]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import NotNearOrthogonal, PolarSingularity

#: Default equatorial radius, m.
EARTH_RADIUS = 6378137.0
#: Default earth rotation rate, rad/s.
EARTH_RATE = 7.292115e-5

#: Latitude guard band around the poles for the transport rate, rad.
DEFAULT_POLE_GUARD = 1e-6


def normal_gravity(lat: float) -> float:
    """Normal gravity magnitude (m/s^2) at geodetic latitude ``lat`` (rad)."""
    return 9.7803267714 * (1.0 + 0.00527094 * math.sin(lat) ** 2)


@dataclass(frozen=True)
class EarthModel:
    """Spherical earth parameters consumed by mechanization and error models.

    All three fields are strictly positive for user-constructed models;
    the reverse navigation pass internally carries a copy with the earth
    rate negated (see :meth:`reversed`).
    """

    radius: float = EARTH_RADIUS
    rate: float = EARTH_RATE
    gravity: float = 9.8

    @classmethod
    def default(cls, lat: float = 0.0) -> "EarthModel":
        """Model with normal gravity evaluated at ``lat`` (rad), constant thereafter."""
        return cls(radius=EARTH_RADIUS, rate=EARTH_RATE, gravity=normal_gravity(lat))

    def reversed(self) -> "EarthModel":
        """Copy with the earth rotation rate negated (reverse-pass convention)."""
        return replace(self, rate=-self.rate)

    def validate(self) -> None:
        if not (self.radius > 0 and self.gravity > 0 and self.rate > 0):
            raise ValueError("EarthModel fields must be strictly positive")
        if not all(map(math.isfinite, (self.radius, self.rate, self.gravity))):
            raise ValueError("EarthModel fields must be finite")


@dataclass(frozen=True)
class GeoPosition:
    """Geodetic position: latitude (rad), longitude (rad), altitude (m)."""

    lat: float
    lon: float
    alt: float

    def as_array(self) -> np.ndarray:
        return np.array([self.lat, self.lon, self.alt])


@dataclass(frozen=True)
class VelocityEnu:
    """Velocity components in the ENU navigation frame, m/s."""

    east: float
    north: float
    up: float

    def as_array(self) -> np.ndarray:
        return np.array([self.east, self.north, self.up])

    @classmethod
    def from_array(cls, v) -> "VelocityEnu":
        return cls(float(v[0]), float(v[1]), float(v[2]))


def skew(v) -> np.ndarray:
    """Cross-product (skew-symmetric) matrix of a 3-vector."""
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def earth_rate_n(lat: float, em: EarthModel) -> np.ndarray:
    """Earth rotation rate resolved in ENU: ``[0, rate*cos(lat), rate*sin(lat)]``."""
    return np.array([0.0, em.rate * math.cos(lat), em.rate * math.sin(lat)])


def transport_rate_n(
    vel: np.ndarray,
    pos: GeoPosition,
    em: EarthModel,
    eps_pole: float = DEFAULT_POLE_GUARD,
) -> np.ndarray:
    """Rotation rate of the ENU frame due to motion over the curved earth.

    Parameters
    ----------
    vel : array-like
        ENU velocity, m/s.
    pos : GeoPosition
        Current position (tan(lat) must be finite).
    em : EarthModel
        Earth parameters (radius).
    eps_pole : float
        Guard band: raises :class:`PolarSingularity` when
        ``|lat| >= pi/2 - eps_pole``.

    Returns
    -------
    ndarray
        ``[-v_N/(R+h), v_E/(R+h), v_E*tan(lat)/(R+h)]`` in rad/s.
    """
    if abs(pos.lat) >= math.pi / 2.0 - eps_pole:
        raise PolarSingularity(f"transport rate undefined at lat={pos.lat!r} rad")
    rh = em.radius + pos.alt
    return np.array(
        [-vel[1] / rh, vel[0] / rh, vel[0] * math.tan(pos.lat) / rh]
    )


def gravity_n(em: EarthModel) -> np.ndarray:
    """Gravity vector in ENU: ``[0, 0, -g]``."""
    return np.array([0.0, 0.0, -em.gravity])


def _newton_orthonormalize(c: np.ndarray) -> np.ndarray:
    """One Newton-Schulz step toward the polar (orthogonal) factor of ``c``."""
    return c @ (1.5 * np.eye(3) - 0.5 * (c.T @ c))


def dcm_renormalize(c: np.ndarray, tol: float = 1e-13, max_iter: int = 8) -> np.ndarray:
    """Project a slightly-drifted DCM back onto the rotation group.

    Uses Newton-Schulz iteration, which converges quadratically to the
    nearest orthogonal matrix (polar factor) for inputs already close to
    orthonormal. Inputs further than ~1e-3 from the group are rejected.

    Raises
    ------
    NotNearOrthogonal
        If ``c`` violates the closeness precondition or has det <= 0.
    """
    c = np.asarray(c, dtype=float)
    defect = np.linalg.norm(c.T @ c - np.eye(3))
    if not np.isfinite(defect) or defect > 5e-3 or np.linalg.det(c) <= 0.0:
        raise NotNearOrthogonal(f"input is not near a rotation (defect={defect:.3e})")
    for _ in range(max_iter):
        if defect <= tol:
            break
        c = _newton_orthonormalize(c)
        defect = np.linalg.norm(c.T @ c - np.eye(3))
    return c


def dcm_is_orthonormal(c: np.ndarray, tol: float = 1e-9) -> bool:
    return (
        np.linalg.norm(c.T @ c - np.eye(3)) <= tol
        and abs(np.linalg.det(c) - 1.0) <= tol
    )


def _rot_zxy(angles) -> np.ndarray:
    """Frame-rotation matrix for the Z (yaw), X (pitch), Y (roll) sequence.

    Returns the coordinate-transform matrix from the original frame to the
    rotated frame, i.e. ``R_y(roll) @ R_x(pitch) @ R_z(yaw)`` with
    ``angles = (pitch, roll, yaw)``. This is both the nav->body attitude
    matrix and the shape of the misalignment transform used by the error
    model.
    """
    sx, cx = math.sin(angles[0]), math.cos(angles[0])
    sy, cy = math.sin(angles[1]), math.cos(angles[1])
    sz, cz = math.sin(angles[2]), math.cos(angles[2])
    return np.array(
        [
            [cy * cz - sy * sx * sz, cy * sz + sy * sx * cz, -sy * cx],
            [-cx * sz, cx * cz, sx],
            [sy * cz + cy * sx * sz, sy * sz - cy * sx * cz, cy * cx],
        ]
    )


def _zxy_angles(m: np.ndarray) -> np.ndarray:
    """Inverse of :func:`_rot_zxy` away from pitch = +-pi/2."""
    sx = min(1.0, max(-1.0, m[1, 2]))
    pitch = math.asin(sx)
    yaw = math.atan2(-m[1, 0], m[1, 1])
    roll = math.atan2(-m[0, 2], m[2, 2])
    return np.array([pitch, roll, yaw])


def rotvec_from_dcm(m: np.ndarray) -> np.ndarray:
    """Rotation vector (axis * angle, rad) of a rotation matrix.

    Well conditioned for small and moderate angles; not intended for
    angles near pi (the increments this package feeds it are tiny).
    """
    axis2 = np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])
    sin_th = 0.5 * math.sqrt(float(axis2 @ axis2))
    cos_th = 0.5 * (np.trace(m) - 1.0)
    theta = math.atan2(sin_th, cos_th)
    if sin_th < 1e-12:
        return 0.5 * axis2
    return axis2 * (0.5 * theta / sin_th)


def dcm_rotation_angle(a: np.ndarray, b: np.ndarray) -> float:
    """Total rotation angle (rad) between two DCMs."""
    return float(np.linalg.norm(rotvec_from_dcm(a.T @ b)))


def dcm_from_euler(angles) -> np.ndarray:
    """Body->nav DCM from ``(pitch, roll, yaw)`` in radians."""
    return _rot_zxy(angles).T


def euler_from_dcm(c: np.ndarray) -> np.ndarray:
    """``(pitch, roll, yaw)`` in radians from a body->nav DCM."""
    return _zxy_angles(np.asarray(c).T)
