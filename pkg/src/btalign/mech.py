"""Strapdown mechanization over stored IMU records, forward and reverse.

The forward update is the first-order recursion

    C_k   = renorm( C_{k-1} [I + dt (w_nb x)] ),
            w_nb = gyro - C_{k-1}^T (w_ie^n + w_en^n)
    v_k   = v_{k-1} + dt [ C_{k-1} f^b - (2 w_ie^n + w_en^n) x v_{k-1} + g^n ]
    lat_k = lat_{k-1} + dt v_N / (R + h),   and similarly lon, alt

with every rate on the right-hand side evaluated at the k-1 state.

The reverse pass is the same code path run over sign-transformed inputs:
gyro negated, sample order reversed, initial velocity negated, earth
rotation rate negated (see :func:`reverse_transform`). A literal
implementation of the derived backward recursion exists only in the test
suite as an oracle.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyRecord, PolarSingularity
from .geokin import (
    DEFAULT_POLE_GUARD,
    EarthModel,
    GeoPosition,
    VelocityEnu,
)


class Direction(enum.Enum):
    FORWARD = "forward"
    BACKWARD = "backward"


@dataclass(frozen=True)
class ImuSample:
    """One IMU sample: time tag (s), body angular rate (rad/s), specific force (m/s^2).

    The sample is the (assumed constant) rate over the interval
    ``[t, t + dt)``.
    """

    t: float
    gyro: np.ndarray
    accel: np.ndarray


@dataclass(frozen=True)
class NavState:
    """Full mechanization state at one epoch: attitude DCM (body->nav), ENU velocity, position."""

    t: float
    att: np.ndarray
    vel: VelocityEnu
    pos: GeoPosition


@dataclass(frozen=True)
class GnssFix:
    """One GNSS epoch: ENU velocity and geodetic position."""

    t: float
    vel: VelocityEnu
    pos: GeoPosition


@dataclass(frozen=True)
class ImuRecord:
    """Uniformly sampled IMU record stored as arrays.

    ``t`` has shape (n,), ``gyro`` and ``accel`` shape (n, 3). Sample ``i``
    covers ``[t[i], t[i] + dt)``; the record spans ``[t[0], t[-1] + dt]``.
    """

    t: np.ndarray
    gyro: np.ndarray
    accel: np.ndarray
    dt: float

    def __len__(self) -> int:
        return len(self.t)

    @property
    def start(self) -> float:
        return float(self.t[0])

    @property
    def end(self) -> float:
        """End of the record span (one dt past the last sample tag)."""
        return float(self.t[-1]) + self.dt

    @property
    def duration(self) -> float:
        return len(self.t) * self.dt

    def sample(self, i: int) -> ImuSample:
        return ImuSample(float(self.t[i]), self.gyro[i], self.accel[i])

    def validate(self) -> None:
        """Check shapes, finiteness and dt-uniformity (1e-9 s tolerance)."""
        if len(self.t) == 0:
            raise EmptyRecord("IMU record has no samples")
        if self.gyro.shape != (len(self.t), 3) or self.accel.shape != (len(self.t), 3):
            raise ValueError("gyro/accel must have shape (n, 3)")
        if not (np.isfinite(self.gyro).all() and np.isfinite(self.accel).all()):
            raise ValueError("non-finite IMU samples")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        gaps = np.diff(self.t)
        bad = np.nonzero(np.abs(gaps - self.dt) > 1e-9)[0]
        if bad.size:
            k = int(bad[0])
            raise ValueError(
                f"non-uniform sampling at index {k + 1}: gap {gaps[k]:.12g} s, expected {self.dt:.12g} s"
            )


def _step(att, vel, lat, lon, alt, gyro, accel, dt, radius, rate, gravity, eps_pole):
    """One forward mechanization step on raw arrays/floats.

    Shared by the public single-step API and the batch driver; all
    right-hand-side quantities are taken from the incoming state. Written
    allocation-light: it runs ~10^5 times per pass.
    """
    if abs(lat) >= math.pi / 2.0 - eps_pole:
        raise PolarSingularity(f"transport rate undefined at lat={lat!r} rad")
    rh = radius + alt
    sin_lat = math.sin(lat)
    cos_lat = math.cos(lat)
    ve, vn, vu = vel

    w_ie_n = rate * cos_lat
    w_ie_u = rate * sin_lat
    w_in = np.empty(3)
    w_in[0] = -vn / rh
    w_in[1] = w_ie_n + ve / rh
    w_in[2] = w_ie_u + ve * sin_lat / cos_lat / rh
    w_nb = gyro - att.T @ w_in

    # attitude: first-order DCM update, then two Newton-Schulz
    # orthonormalization steps (enough for ~machine-level orthonormality
    # from the O((w dt)^2) drift of the first-order update)
    upd = np.empty((3, 3))
    k0, k1, k2 = dt * w_nb[0], dt * w_nb[1], dt * w_nb[2]
    upd[0, 0] = 1.0
    upd[0, 1] = -k2
    upd[0, 2] = k1
    upd[1, 0] = k2
    upd[1, 1] = 1.0
    upd[1, 2] = -k0
    upd[2, 0] = -k1
    upd[2, 1] = k0
    upd[2, 2] = 1.0
    att_new = att @ upd
    for _ in range(2):
        b = att_new.T @ att_new
        b *= -0.5
        b.flat[::4] += 1.5
        att_new = att_new @ b

    cor0 = -vn / rh
    cor1 = 2.0 * w_ie_n + ve / rh
    cor2 = 2.0 * w_ie_u + ve * sin_lat / cos_lat / rh
    acc = att @ accel
    vel_new = np.empty(3)
    vel_new[0] = ve + dt * (acc[0] - (cor1 * vu - cor2 * vn))
    vel_new[1] = vn + dt * (acc[1] - (cor2 * ve - cor0 * vu))
    vel_new[2] = vu + dt * (acc[2] - (cor0 * vn - cor1 * ve) - gravity)

    lat_new = lat + dt * vn / rh
    lon_new = lon + dt * ve / cos_lat / rh
    alt_new = alt + dt * vu

    return att_new, vel_new, lat_new, lon_new, alt_new


def forward_step(
    s: NavState,
    imu: ImuSample,
    dt: float,
    em: EarthModel,
    eps_pole: float = DEFAULT_POLE_GUARD,
) -> NavState:
    """Advance one navigation state by one IMU sample (time increases by dt)."""
    att, vel, lat, lon, alt = _step(
        s.att,
        s.vel.as_array(),
        s.pos.lat,
        s.pos.lon,
        s.pos.alt,
        imu.gyro,
        imu.accel,
        dt,
        em.radius,
        em.rate,
        em.gravity,
        eps_pole,
    )
    return NavState(
        t=s.t + dt,
        att=att,
        vel=VelocityEnu.from_array(vel),
        pos=GeoPosition(lat, lon, alt),
    )


def backward_step(
    s: NavState,
    imu: ImuSample,
    dt: float,
    em: EarthModel,
    eps_pole: float = DEFAULT_POLE_GUARD,
) -> NavState:
    """Step one navigation state backward in time (t decreases by dt).

    ``imu`` must already carry the reverse-transformed sample (gyro
    negated, accel unchanged); ``em`` is the physical earth model. The
    implementation mirrors the state (velocity negated), delegates to
    :func:`forward_step` with the earth rate negated, and mirrors back.
    """
    mirrored = NavState(
        t=s.t,
        att=s.att,
        vel=VelocityEnu(-s.vel.east, -s.vel.north, -s.vel.up),
        pos=s.pos,
    )
    out = forward_step(mirrored, imu, dt, em.reversed(), eps_pole)
    return NavState(
        t=s.t - dt,
        att=out.att,
        vel=VelocityEnu(-out.vel.east, -out.vel.north, -out.vel.up),
        pos=out.pos,
    )


def reverse_transform(record: ImuRecord, terminal: NavState) -> tuple[ImuRecord, NavState]:
    """Sign/order transform that turns reverse navigation into a forward run.

    Returns the record with samples reversed in time order and gyro
    negated (accel and time tags unchanged), and the state with velocity
    negated (attitude, position, time unchanged). Applying the transform
    twice restores both inputs bit-exactly. The matching earth-rate
    negation is the caller's job (``em.reversed()``).
    """
    if len(record) == 0:
        raise EmptyRecord("cannot reverse an empty record")
    rev = ImuRecord(
        t=record.t,
        gyro=-record.gyro[::-1],
        accel=record.accel[::-1],
        dt=record.dt,
    )
    state = NavState(
        t=terminal.t,
        att=terminal.att,
        vel=VelocityEnu(-terminal.vel.east, -terminal.vel.north, -terminal.vel.up),
        pos=terminal.pos,
    )
    return rev, state


class NavTrajectory:
    """Sequence of NavStates backed by arrays (one entry per IMU sample)."""

    def __init__(self, t, att, vel, lat, lon, alt):
        self.t = t
        self.att = att
        self.vel = vel
        self.lat = lat
        self.lon = lon
        self.alt = alt

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, i: int) -> NavState:
        if not isinstance(i, (int, np.integer)):
            raise TypeError("NavTrajectory indices must be integers")
        if i < 0:
            i += len(self.t)
        return NavState(
            t=float(self.t[i]),
            att=self.att[i],
            vel=VelocityEnu.from_array(self.vel[i]),
            pos=GeoPosition(float(self.lat[i]), float(self.lon[i]), float(self.alt[i])),
        )


def _mechanize_arrays(record: ImuRecord, init: NavState, em: EarthModel, accel_lag: int = 0):
    """Batch forward driver. ``accel_lag`` shifts which accel sample feeds step i."""
    n = len(record)
    t_out = record.t + record.dt if accel_lag == 0 else None
    att = np.empty((n, 3, 3))
    vel = np.empty((n, 3))
    lat = np.empty(n)
    lon = np.empty(n)
    alt = np.empty(n)

    a = init.att
    v = init.vel.as_array()
    la, lo, al = init.pos.lat, init.pos.lon, init.pos.alt
    gyro = record.gyro
    accel = record.accel
    dt = record.dt
    radius, rate, grav = em.radius, em.rate, em.gravity
    for i in range(n):
        j = i - accel_lag
        if j < 0:
            j = 0
        a, v, la, lo, al = _step(
            a, v, la, lo, al, gyro[i], accel[j], dt, radius, rate, grav, DEFAULT_POLE_GUARD
        )
        att[i] = a
        vel[i] = v
        lat[i] = la
        lon[i] = lo
        alt[i] = al
    return t_out, att, vel, lat, lon, alt


def run_mechanization(
    record: ImuRecord,
    init: NavState,
    direction: Direction,
    em: EarthModel,
) -> NavTrajectory:
    """Mechanize a whole record, producing one NavState per sample.

    Forward: ``init.t`` must match the record start; output state i is at
    ``t[i] + dt``. Backward: ``init.t`` must match the record end (span
    end); output state i is at the original time ``t[n-1-i]`` (decreasing),
    with velocities reported in the physical forward sense.

    The backward driver lags the reversed accel stream by one sample:
    each undo then evaluates the specific-force product at the same
    (attitude, accel) pairs the forward pass evaluated, while the gyro
    stream stays naturally paired so each attitude rotor is undone by its
    own negation. This keeps the forward/backward round trip free of the
    first-order velocity defect a plain reversal would leave through
    turns.
    """
    if len(record) == 0:
        raise EmptyRecord("cannot mechanize an empty record")
    tol = max(1e-6, 0.01 * record.dt)
    if direction is Direction.FORWARD:
        if abs(init.t - record.start) > tol:
            raise ValueError(
                f"initial state at t={init.t} does not match record start {record.start}"
            )
        t, att, vel, lat, lon, alt = _mechanize_arrays(record, init, em)
        return NavTrajectory(t, att, vel, lat, lon, alt)

    if abs(init.t - record.end) > tol:
        raise ValueError(
            f"initial state at t={init.t} does not match record end {record.end}"
        )
    rev, state = reverse_transform(record, init)
    _, att, vel, lat, lon, alt = _mechanize_arrays(rev, state, em.reversed(), accel_lag=1)
    t = record.t[::-1].copy()
    return NavTrajectory(t, att, -vel, lat, lon, alt)
