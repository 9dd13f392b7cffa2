"""Trajectory simulator, sensor synthesis and the Monte-Carlo harness.

The truth generator integrates the same discrete position recursion the
mechanization uses, so an inverse-mechanized IMU record replayed through
:func:`btalign.mech.run_mechanization` reproduces the truth to numerical
precision (the self-consistency requirement the tests pin down).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .errors import InconsistentScenario
from .geokin import EarthModel, GeoPosition, VelocityEnu, rotvec_from_dcm
from .mech import GnssFix, ImuRecord, NavState, NavTrajectory
from .ukf import GnssSigma

if TYPE_CHECKING:  # pragma: no cover
    from .backtrack import AlignmentConfig
    from .errmodel import SensorBudget

MASK64 = (1 << 64) - 1
_SPLITMIX_GAMMA = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    """One splitmix64 output for a 64-bit input (documented in docs/formats.md)."""
    z = (x + _SPLITMIX_GAMMA) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return (z ^ (z >> 31)) & MASK64


def run_seed(master_seed: int, run_index: int) -> int:
    """Per-run seed: splitmix64 of the master seed advanced run_index+1 steps."""
    return splitmix64((master_seed + (run_index + 1) * _SPLITMIX_GAMMA) & MASK64)


def stream_seed(seed: int, stream: int) -> int:
    """Sub-stream seed (IMU noise, GNSS noise...) derived from a run seed."""
    return splitmix64((seed ^ stream) & MASK64)


class SegmentKind(enum.Enum):
    CRUISE = "cruise"
    ACCELERATE = "accelerate"
    DECELERATE = "decelerate"
    TURN = "turn"


@dataclass(frozen=True)
class ManeuverSegment:
    """One piece of the trajectory: constant speed, speed ramp, or constant-rate arc."""

    kind: SegmentKind
    duration: float
    target_speed: float | None = None
    turn_angle: float | None = None


@dataclass(frozen=True)
class MonteCarloSpec:
    """Everything a reproducible Monte-Carlo campaign needs."""

    n_runs: int
    seed: int
    segments: tuple
    start: NavState
    imu_rate: float
    budget: "SensorBudget"
    gnss: GnssSigma
    algorithms: tuple  # of (name, AlignmentConfig)
    em: EarthModel


def start_state(
    lat: float,
    lon: float,
    alt: float,
    speed: float,
    yaw: float,
    t: float = 0.0,
) -> NavState:
    """Level start state moving at ``speed`` along heading ``yaw`` (rad, N->W positive)."""
    from .geokin import dcm_from_euler

    vel = VelocityEnu(-speed * math.sin(yaw), speed * math.cos(yaw), 0.0)
    return NavState(t=t, att=dcm_from_euler([0.0, 0.0, yaw]), vel=vel, pos=GeoPosition(lat, lon, alt))


def benchmark_segments() -> tuple:
    """The 600 s moving-base benchmark: 290 s cruise at 10 m/s, acceleration to
    20 m/s, a 180 deg U-turn, then three speed maneuvers finishing before 500 s."""
    c, a, d, t = (
        SegmentKind.CRUISE,
        SegmentKind.ACCELERATE,
        SegmentKind.DECELERATE,
        SegmentKind.TURN,
    )
    return (
        ManeuverSegment(c, 290.0),
        ManeuverSegment(a, 10.0, target_speed=20.0),
        ManeuverSegment(t, 10.0, turn_angle=math.pi),
        ManeuverSegment(c, 20.0),
        ManeuverSegment(d, 10.0, target_speed=10.0),
        ManeuverSegment(c, 40.0),
        ManeuverSegment(a, 10.0, target_speed=20.0),
        ManeuverSegment(c, 40.0),
        ManeuverSegment(d, 10.0, target_speed=10.0),
        ManeuverSegment(c, 160.0),
    )


def _segment_steps(duration: float, dt: float) -> int:
    n = int(round(duration / dt))
    if abs(n * dt - duration) > 1e-6:
        raise InconsistentScenario(
            f"segment duration {duration} s is not a multiple of dt={dt} s"
        )
    if n < 0 or duration < 0:
        raise InconsistentScenario("segment duration must be nonnegative")
    return n


def _speed_yaw_profile(segments, dt, speed0, yaw0):
    """Per-sample speed and yaw node arrays (length n_steps+1)."""
    speeds = [speed0]
    yaws = [yaw0]
    s, y = speed0, yaw0
    for k, seg in enumerate(segments):
        n = _segment_steps(seg.duration, dt)
        if seg.kind is SegmentKind.CRUISE:
            speeds.extend([s] * n)
            yaws.extend([y] * n)
        elif seg.kind in (SegmentKind.ACCELERATE, SegmentKind.DECELERATE):
            if seg.target_speed is None:
                raise InconsistentScenario(f"segment {k}: {seg.kind.value} needs target_speed")
            if seg.kind is SegmentKind.ACCELERATE and seg.target_speed <= s:
                raise InconsistentScenario(
                    f"segment {k}: accelerate target {seg.target_speed} <= current speed {s}"
                )
            if seg.kind is SegmentKind.DECELERATE and seg.target_speed >= s:
                raise InconsistentScenario(
                    f"segment {k}: decelerate target {seg.target_speed} >= current speed {s}"
                )
            ramp = s + (seg.target_speed - s) * np.arange(1, n + 1) / n
            speeds.extend(ramp.tolist())
            yaws.extend([y] * n)
            s = seg.target_speed
        elif seg.kind is SegmentKind.TURN:
            if seg.turn_angle is None:
                raise InconsistentScenario(f"segment {k}: turn needs turn_angle")
            sweep = y + seg.turn_angle * np.arange(1, n + 1) / n
            yaws.extend(sweep.tolist())
            speeds.extend([s] * n)
            y = y + seg.turn_angle
        else:  # pragma: no cover
            raise InconsistentScenario(f"segment {k}: unknown kind {seg.kind}")
    return np.array(speeds), np.array(yaws)


def generate_truth(
    segments: Sequence[ManeuverSegment],
    dt: float,
    start: NavState,
    em: EarthModel,
) -> NavTrajectory:
    """Kinematically consistent truth trajectory on the IMU grid.

    Velocity follows the segment speed/heading profile; position is the
    discrete integral of velocity through the spherical-earth geometry;
    attitude is level with yaw equal to the velocity heading.
    """
    v0 = start.vel.as_array()
    speed0 = math.hypot(v0[0], v0[1])
    if abs(v0[2]) > 1e-12:
        raise InconsistentScenario("start state must have zero vertical velocity")
    from .geokin import euler_from_dcm

    yaw0 = euler_from_dcm(start.att)[2]
    if speed0 > 1e-12:
        heading = math.atan2(-v0[0], v0[1])
        if abs(math.remainder(heading - yaw0, 2 * math.pi)) > 1e-9:
            raise InconsistentScenario("start attitude yaw does not match velocity heading")

    speed, yaw = _speed_yaw_profile(segments, dt, speed0, yaw0)
    n = len(speed)

    t = start.t + np.arange(n) * dt
    ve = -speed * np.sin(yaw)
    vn = speed * np.cos(yaw)
    vel = np.column_stack([ve, vn, np.zeros(n)])

    lat = np.empty(n)
    lon = np.empty(n)
    alt = np.empty(n)
    la, lo, al = start.pos.lat, start.pos.lon, start.pos.alt
    radius = em.radius
    for i in range(n):
        lat[i], lon[i], alt[i] = la, lo, al
        if i + 1 < n:
            rh = radius + al
            la = la + dt * vn[i] / rh
            lo = lo + dt * ve[i] / math.cos(lat[i]) / rh
            al = al + dt * vel[i, 2]

    cy, sy = np.cos(yaw), np.sin(yaw)
    att = np.zeros((n, 3, 3))
    att[:, 0, 0] = cy
    att[:, 0, 1] = -sy
    att[:, 1, 0] = sy
    att[:, 1, 1] = cy
    att[:, 2, 2] = 1.0
    return NavTrajectory(t, att, vel, lat, lon, alt)


def synthesize_imu(truth: NavTrajectory, em: EarthModel) -> ImuRecord:
    """Invert the mechanization: IMU samples that replay the truth exactly.

    For each step the body rate is the SO(3) log of the attitude increment
    plus the projected earth/transport rates, and the specific force is
    the algebraic inverse of the velocity update, both evaluated the way
    the forward stepper evaluates them.
    """
    n = len(truth) - 1
    if n < 1:
        raise InconsistentScenario("truth must contain at least two states")
    dt = float(truth.t[1] - truth.t[0])
    gyro = np.empty((n, 3))
    accel = np.empty((n, 3))
    g_n = np.array([0.0, 0.0, -em.gravity])
    for i in range(n):
        c0 = truth.att[i]
        c1 = truth.att[i + 1]
        w_nb = rotvec_from_dcm(c0.T @ c1) / dt

        lat = truth.lat[i]
        rh = em.radius + truth.alt[i]
        v = truth.vel[i]
        w_ie = np.array([0.0, em.rate * math.cos(lat), em.rate * math.sin(lat)])
        w_en = np.array([-v[1] / rh, v[0] / rh, v[0] * math.tan(lat) / rh])
        gyro[i] = w_nb + c0.T @ (w_ie + w_en)

        dv = (truth.vel[i + 1] - v) / dt
        accel[i] = c0.T @ (dv + np.cross(2.0 * w_ie + w_en, v) - g_n)
    return ImuRecord(t=truth.t[:-1].copy(), gyro=gyro, accel=accel, dt=dt)


def corrupt_imu(clean: ImuRecord, budget: "SensorBudget", seed: int) -> ImuRecord:
    """Add per-run constant biases and white noise per the sensor budget.

    Draw order (each skipped entirely when its sigma is zero, keeping a
    zero budget bit-exact): gyro bias (3), accel bias (3), gyro noise
    (n x 3), accel noise (n x 3). Deterministic per seed.
    """
    rng = np.random.default_rng(seed)
    n = len(clean)
    gyro = clean.gyro
    accel = clean.accel
    sq_dt = math.sqrt(clean.dt)
    if budget.gyro_bias_sigma > 0:
        gyro = gyro + budget.gyro_bias_sigma * rng.standard_normal(3)
    if budget.accel_bias_sigma > 0:
        accel = accel + budget.accel_bias_sigma * rng.standard_normal(3)
    if budget.gyro_arw > 0:
        gyro = gyro + (budget.gyro_arw / sq_dt) * rng.standard_normal((n, 3))
    if budget.accel_vrw > 0:
        accel = accel + (budget.accel_vrw / sq_dt) * rng.standard_normal((n, 3))
    return ImuRecord(t=clean.t, gyro=gyro, accel=accel, dt=clean.dt)


def synthesize_gnss(
    truth: NavTrajectory,
    sigma: GnssSigma,
    rate: float = 1.0,
    seed: int = 0,
    em: EarthModel | None = None,
) -> list[GnssFix]:
    """Sample the truth at the GNSS rate and add Gaussian noise.

    Position noise is applied in meters and converted to (rad, rad, m)
    through the local earth geometry. Draw order: velocity (m x 3), then
    position (m x 3); zero-sigma components are skipped so a zero-noise
    fix list equals the truth samples exactly.
    """
    em = em or EarthModel.default()
    dt = float(truth.t[1] - truth.t[0])
    stride = int(round(1.0 / rate / dt))
    if abs(stride * dt * rate - 1.0) > 1e-9:
        raise InconsistentScenario(f"GNSS rate {rate} Hz does not divide the IMU rate")
    idx = np.arange(0, len(truth), stride)
    m = len(idx)
    rng = np.random.default_rng(seed)
    vel = truth.vel[idx].copy()
    lat = truth.lat[idx].copy()
    lon = truth.lon[idx].copy()
    alt = truth.alt[idx].copy()
    if sigma.vel > 0:
        vel += sigma.vel * rng.standard_normal((m, 3))
    if sigma.pos_h > 0 or sigma.pos_v > 0:
        pos_noise = rng.standard_normal((m, 3))
        rh = em.radius + alt
        lat += sigma.pos_h * pos_noise[:, 0] / rh
        lon += sigma.pos_h * pos_noise[:, 1] / (rh * np.cos(lat))
        alt += sigma.pos_v * pos_noise[:, 2]
    return [
        GnssFix(
            t=float(truth.t[i]),
            vel=VelocityEnu.from_array(vel[k]),
            pos=GeoPosition(float(lat[k]), float(lon[k]), float(alt[k])),
        )
        for k, i in enumerate(idx)
    ]


@dataclass
class RunOutcome:
    """Result of one algorithm on one Monte-Carlo run."""

    run: int
    algorithm: str
    error_arcmin: np.ndarray | None  # residual misalignment per axis
    failure: str | None = None


@dataclass
class MonteCarloResult:
    spec: MonteCarloSpec
    outcomes: list[RunOutcome] = field(default_factory=list)

    def rms_arcmin(self, algorithm: str) -> np.ndarray:
        errs = [
            o.error_arcmin
            for o in self.outcomes
            if o.algorithm == algorithm and o.error_arcmin is not None
        ]
        if not errs:
            return np.full(3, np.nan)
        e = np.array(errs)
        return np.sqrt(np.mean(e * e, axis=0))

    def failures(self, algorithm: str) -> int:
        return sum(1 for o in self.outcomes if o.algorithm == algorithm and o.failure)

    def table(self) -> list[tuple[str, np.ndarray]]:
        return [(name, self.rms_arcmin(name)) for name, _ in self.spec.algorithms]


def _single_run(spec: MonteCarloSpec, truth, clean_imu, run_index: int) -> list[RunOutcome]:
    from .backtrack import align
    from .errors import NumericalError

    rseed = run_seed(spec.seed, run_index)
    record = corrupt_imu(clean_imu, spec.budget, stream_seed(rseed, 1))
    gnss = synthesize_gnss(truth, spec.gnss, 1.0, stream_seed(rseed, 2), spec.em)

    outcomes = []
    for name, cfg in spec.algorithms:
        try:
            report = align(
                record,
                gnss,
                cfg,
                initial_attitude=_misaligned(truth.att[0], cfg.initial_misalignment),
                truth=truth,
            )
            err = report.final_error_arcmin
            if err is None or not np.all(np.isfinite(err)):
                outcomes.append(RunOutcome(run_index, name, None, "diverged (non-finite)"))
            else:
                outcomes.append(RunOutcome(run_index, name, err))
        except NumericalError as exc:
            outcomes.append(RunOutcome(run_index, name, None, f"diverged ({exc})"))
    return outcomes


def _misaligned(att_true: np.ndarray, alpha) -> np.ndarray:
    """Apply a misalignment (EPEA Euler angles) to a true attitude."""
    from .errmodel import cn_to_nprime

    return cn_to_nprime(np.asarray(alpha, dtype=float)) @ att_true


def run_monte_carlo(spec: MonteCarloSpec, jobs: int = 1) -> MonteCarloResult:
    """Run the campaign: same truth every run, fresh sensor errors per run.

    Per-run failures are recorded as diverged outcomes, not raised.
    Aggregation is order-independent, so any job count gives identical
    results for the same spec.
    """
    if spec.n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    dt = 1.0 / spec.imu_rate
    truth = generate_truth(spec.segments, dt, spec.start, spec.em)
    clean = synthesize_imu(truth, spec.em)

    result = MonteCarloResult(spec)
    if jobs <= 1:
        for r in range(spec.n_runs):
            result.outcomes.extend(_single_run(spec, truth, clean, r))
    else:
        import concurrent.futures as cf

        with cf.ProcessPoolExecutor(max_workers=jobs) as pool:
            futs = {
                pool.submit(_single_run, spec, truth, clean, r): r
                for r in range(spec.n_runs)
            }
            collected = {}
            for fut in cf.as_completed(futs):
                collected[futs[fut]] = fut.result()
        for r in range(spec.n_runs):
            result.outcomes.extend(collected[r])
    return result
