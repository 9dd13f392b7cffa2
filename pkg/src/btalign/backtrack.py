"""Alternating forward/backward alignment over a stored record.

One alignment job stores the full IMU/GNSS data once and re-filters it in
alternating directions. Between passes the navigation state is handed off
through the reverse-transform conventions (velocity negated, attitude and
position kept) and the filter state through the gyro-bias sign flip: a
backward pass sees negated gyro data, so the bias it estimates is the
negated physical bias. The estimated misalignment is fed back into the
attitude at each pass boundary and the attitude-error states are zeroed;
everything else stays in the filter.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .errmodel import (
    ALPHA,
    DPOS,
    DVEL,
    EPS,
    NABLA,
    N_STATES,
    ModelKind,
    SensorBudget,
    cn_to_nprime,
    flip_gyro_bias_cov,
    flip_gyro_bias_vector,
    linear_dynamics,
    measurement_model,
    nonlinear_dynamics,
)
from .errors import ConfigError, TimeAlignmentError
from .geokin import (
    EarthModel,
    GeoPosition,
    VelocityEnu,
    dcm_renormalize,
    euler_from_dcm,
    _zxy_angles,
)
from .mech import Direction, GnssFix, ImuRecord, ImuSample, NavState, _step
from .ukf import (
    GaussianState,
    GnssSigma,
    NoiseConfig,
    UtParams,
    kf_time_update,
    linear_measurement_update,
    ut_time_update,
)

ARCMIN = math.pi / 180.0 / 60.0

#: Between-pass attitude-correction change regarded as converged.
CONVERGENCE_ARCMIN = 0.1

#: Floor on the initial attitude-error standard deviation.
ALPHA_SIGMA_FLOOR = math.pi / 180.0


@dataclass(frozen=True)
class AlignmentConfig:
    """Which model, how many passes, and all filter tuning knobs."""

    model: ModelKind = ModelKind.NONLINEAR
    use_backtracking: bool = True
    n_passes: int = 3
    initial_misalignment: tuple = (0.0, 0.0, 0.0)
    ut: UtParams = UtParams()
    budget: SensorBudget = SensorBudget.from_common_units(1.0, 0.1, 2.0, 1.0)
    gnss: GnssSigma = GnssSigma()
    em: EarthModel | None = None
    reset_covariance: bool = False
    early_stop: bool = False
    time_update_substeps: int = 1

    def __post_init__(self):
        if self.n_passes < 1:
            raise ConfigError("n_passes must be >= 1")
        if not self.use_backtracking and self.n_passes != 1:
            raise ConfigError("use_backtracking=false forces n_passes=1")
        if self.time_update_substeps < 1:
            raise ConfigError("time_update_substeps must be >= 1")


@dataclass
class PassResult:
    """Per-epoch filter history of one directed pass plus its terminal states.

    Means and the terminal filter are in the pass's own sense: for a
    backward pass the velocity-error and gyro-bias entries refer to the
    reversed (mirrored) run.
    """

    direction: Direction
    epoch_t: np.ndarray  # original record times of the measurement epochs
    means: np.ndarray  # (m, 15) posterior means
    cov_diag: np.ndarray  # (m, 15)
    nav_euler: np.ndarray  # (m, 3) computed attitude at each epoch
    terminal_filter: GaussianState
    terminal_nav: NavState
    correction_arcmin: np.ndarray | None = None  # feedback applied at pass end


@dataclass
class AlignmentReport:
    """Outcome of a whole alignment job."""

    final_attitude: np.ndarray
    final_epoch: float
    final_euler: np.ndarray
    gyro_bias: np.ndarray
    accel_bias: np.ndarray
    converged: bool
    passes: list[PassResult] = field(default_factory=list)
    final_error_arcmin: np.ndarray | None = None


def epea_angles(att_est: np.ndarray, att_true: np.ndarray) -> np.ndarray:
    """Euler platform error angles of an estimated attitude w.r.t. truth."""
    return _zxy_angles(att_est @ att_true.T)


def initial_covariance(cfg: AlignmentConfig, pos: GeoPosition, em: EarthModel) -> np.ndarray:
    """Diagonal P0 from the configured misalignment scale, GNSS accuracy and budget."""
    mis = np.abs(np.asarray(cfg.initial_misalignment, dtype=float))
    sig_a = np.maximum(mis, ALPHA_SIGMA_FLOOR)
    rh = em.radius + pos.alt
    p0 = np.zeros(N_STATES)
    p0[ALPHA] = sig_a**2
    p0[DVEL] = cfg.gnss.vel**2
    p0[DPOS] = [
        (cfg.gnss.pos_h / rh) ** 2,
        (cfg.gnss.pos_h / (rh * math.cos(pos.lat))) ** 2,
        cfg.gnss.pos_v**2,
    ]
    p0[EPS] = cfg.budget.gyro_bias_sigma**2
    p0[NABLA] = cfg.budget.accel_bias_sigma**2
    return np.diag(p0)


def run_pass(
    record: ImuRecord,
    gnss: list[GnssFix],
    init_nav: NavState,
    init_filter: GaussianState,
    direction: Direction,
    cfg: AlignmentConfig,
    em: EarthModel | None = None,
    noise: NoiseConfig | None = None,
) -> PassResult:
    """One directed filtering pass over a (pre-transformed) record.

    For ``direction=BACKWARD`` the caller supplies the reverse-transformed
    record, GNSS sequence (reversed, velocity negated, times mapped onto
    the record's grid) and initial state; this function then simply runs
    the forward machinery with the earth rate negated. Navigation steps at
    the IMU rate; the filter updates at every GNSS epoch after the record
    start (time update, then measurement update).
    """
    em = em or cfg.em or EarthModel.default(init_nav.pos.lat)
    em_pass = em.reversed() if direction is Direction.BACKWARD else em
    noise = noise or NoiseConfig.assemble(cfg.budget, cfg.gnss, init_nav.pos, em)
    accel_lag = 1 if direction is Direction.BACKWARD else 0
    h, innovation = measurement_model()

    dt = record.dt
    start = record.start
    end = record.end
    tol = min(1e-6, 0.01 * dt)
    epochs = [f for f in gnss if f.t > start + tol]
    if not epochs:
        raise TimeAlignmentError("no GNSS epochs inside the record span")
    for f in epochs:
        if f.t > end + tol:
            raise TimeAlignmentError(f"GNSS fix at t={f.t} outside record span [{start}, {end}]")
        steps = (f.t - start) / dt
        if abs(steps - round(steps)) > 1e-6:
            raise TimeAlignmentError(f"GNSS fix at t={f.t} not on an IMU sample boundary")

    att = init_nav.att
    vel = init_nav.vel.as_array()
    lat, lon, alt = init_nav.pos.lat, init_nav.pos.lon, init_nav.pos.alt
    filt = init_filter.copy()

    m = len(epochs)
    means = np.empty((m, N_STATES))
    cov_diag = np.empty((m, N_STATES))
    nav_euler = np.empty((m, 3))
    epoch_t = np.array([f.t for f in epochs])

    gyro = record.gyro
    accel = record.accel
    i = 0
    t_prev = start
    n_sub = cfg.time_update_substeps
    for k, fix in enumerate(epochs):
        i0 = i
        i_end = int(round((fix.t - start) / dt))

        # the attitude can sweep many degrees per GNSS interval during
        # maneuvers, so the filter's frozen dynamics coefficients are
        # snapshotted along the interval (RK4 stage points of every
        # substep) and refreshed per stage
        marks = [
            i0 + int(round(q * (i_end - i0) / (2 * n_sub)))
            for q in range(2 * n_sub + 1)
        ]
        snaps: list[tuple[NavState, ImuSample]] = []

        def _snapshot(win_lo, win_hi):
            lo = max(min(win_lo, len(accel) - 1), 0)
            hi = max(win_hi, lo + 1)
            snaps.append(
                (
                    NavState(
                        t=start + i * dt,
                        att=att,
                        vel=VelocityEnu.from_array(vel),
                        pos=GeoPosition(lat, lon, alt),
                    ),
                    ImuSample(
                        t=start + i * dt,
                        gyro=np.zeros(3),
                        accel=accel[lo:hi].mean(axis=0),
                    ),
                )
            )

        half = max((i_end - i0) // (4 * n_sub), 1)
        while True:
            if len(snaps) < len(marks) and i == marks[len(snaps)]:
                _snapshot(i - half, i + half)
                continue
            if i >= i_end:
                break
            j = i - accel_lag
            if j < 0:
                j = 0
            att, vel, lat, lon, alt = _step(
                att, vel, lat, lon, alt,
                gyro[i], accel[j], dt,
                em_pass.radius, em_pass.rate, em_pass.gravity, 1e-6,
            )
            i += 1
        while len(snaps) < len(marks):
            _snapshot(i - half, i + half)

        dt_epoch = fix.t - t_prev
        if cfg.model is ModelKind.NONLINEAR:
            for s in range(n_sub):
                def dyn(x, frac, _s=s):
                    nav_s, imu_s = snaps[2 * _s + int(round(2 * frac))]
                    return nonlinear_dynamics(x, nav_s, imu_s, direction, em_pass)

                filt = ut_time_update(filt, dyn, dt_epoch / n_sub, noise, cfg.ut)
        else:
            for s in range(n_sub):
                f_mat = linear_dynamics(*snaps[2 * s + 1], em_pass)
                filt = kf_time_update(filt, f_mat, dt_epoch / n_sub, noise)

        nav_now = NavState(
            t=fix.t, att=att, vel=VelocityEnu.from_array(vel), pos=GeoPosition(lat, lon, alt)
        )
        z = innovation(nav_now, fix)
        filt, _ = linear_measurement_update(filt, z, h, noise.meas_cov)

        means[k] = filt.mean.copy()
        cov_diag[k] = np.diag(filt.cov)
        nav_euler[k] = euler_from_dcm(att)

        # feed the measured error states back into the navigation solution
        # (pure state recentering: covariance unchanged). Left open-loop,
        # the velocity error grows past 100 m/s over a 600 s pass at 1 deg
        # of tilt, far outside any filter's consistent regime; attitude
        # and bias states stay in the filter per the backtracking scheme.
        vel = vel - filt.mean[DVEL]
        lat -= filt.mean[6]
        lon -= filt.mean[7]
        alt -= filt.mean[8]
        filt.mean[DVEL] = 0.0
        filt.mean[DPOS] = 0.0
        t_prev = fix.t

    terminal_nav = NavState(
        t=t_prev, att=att, vel=VelocityEnu.from_array(vel), pos=GeoPosition(lat, lon, alt)
    )
    return PassResult(
        direction=direction,
        epoch_t=epoch_t,
        means=means,
        cov_diag=cov_diag,
        nav_euler=nav_euler,
        terminal_filter=filt,
        terminal_nav=terminal_nav,
    )


def _mirror_filter(g: GaussianState) -> GaussianState:
    """Filter-state transform across a direction change.

    Time reversal negates both the navigation velocity and its true
    counterpart, so the velocity-error state flips sign together with the
    gyro bias (negated gyro data); attitude, position and accel-bias
    errors are invariant. The covariance gets the matching orthogonal
    similarity S P S with S = diag(I, -I, I, -I, I), which preserves the
    eigenvalues. An involution.
    """
    mean = flip_gyro_bias_vector(g.mean)
    mean[DVEL] = -mean[DVEL]
    cov = flip_gyro_bias_cov(g.cov)
    cov[DVEL, :] = -cov[DVEL, :]
    cov[:, DVEL] = -cov[:, DVEL]
    return GaussianState(mean=mean, cov=cov)


def handoff(prev: PassResult, next_direction: Direction) -> tuple[NavState, GaussianState]:
    """Initial conditions for the next pass from the previous pass's terminals.

    Navigation: velocity negated, attitude/position kept (the reverse
    initial-value convention; it also maps a mirrored backward terminal
    back to the physical sense). Filter: gyro-bias and velocity-error
    entries negated with the matching covariance similarity (see
    :func:`_mirror_filter`), keeping (mean, covariance) jointly consistent
    with the sign conventions of the next pass. Applying the handoff twice
    restores the original pair bit-exactly.
    """
    if next_direction is prev.direction:
        raise ValueError("handoff requires alternating directions")
    nav = prev.terminal_nav
    nav_next = NavState(
        t=nav.t,
        att=nav.att,
        vel=VelocityEnu(-nav.vel.east, -nav.vel.north, -nav.vel.up),
        pos=nav.pos,
    )
    return nav_next, _mirror_filter(prev.terminal_filter)


def _reverse_gnss(gnss: list[GnssFix], start: float, end: float) -> list[GnssFix]:
    """GNSS sequence for a backward pass: reversed, velocity negated, times mirrored."""
    out = []
    for fix in reversed(gnss):
        out.append(
            GnssFix(
                t=start + end - fix.t,
                vel=VelocityEnu(-fix.vel.east, -fix.vel.north, -fix.vel.up),
                pos=fix.pos,
            )
        )
    return out


def _record_digest(record: ImuRecord) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(record.t).tobytes())
    h.update(np.ascontiguousarray(record.gyro).tobytes())
    h.update(np.ascontiguousarray(record.accel).tobytes())
    return h.hexdigest()


def _apply_feedback(result: PassResult) -> np.ndarray:
    """Rotate the terminal attitude by the estimated EPEA and zero those states."""
    alpha_hat = result.terminal_filter.mean[ALPHA].copy()
    nav = result.terminal_nav
    att = dcm_renormalize(cn_to_nprime(alpha_hat).T @ nav.att)
    result.terminal_nav = NavState(t=nav.t, att=att, vel=nav.vel, pos=nav.pos)
    result.terminal_filter.mean[ALPHA] = 0.0
    result.correction_arcmin = alpha_hat / ARCMIN
    return alpha_hat


def align(
    record: ImuRecord,
    gnss: list[GnssFix],
    cfg: AlignmentConfig,
    initial_attitude: np.ndarray,
    truth=None,
) -> AlignmentReport:
    """Full backtracking alignment over one stored record.

    ``initial_attitude`` is the attitude guess the first pass starts from
    (in simulation: the true attitude with the configured misalignment
    applied). Initial velocity and position come from the first GNSS fix,
    which must sit at the record start. ``truth`` may be a NavTrajectory
    on the IMU grid; when given, the report carries per-axis residual
    misalignment in arcminutes.

    Passes strictly alternate starting forward. At each pass boundary the
    estimated misalignment is fed back into the attitude (the
    attitude-error states are zeroed) and the remaining state crosses the
    handoff with the gyro-bias sign flip.
    """
    if len(record) == 0:
        raise TimeAlignmentError("empty IMU record")
    if not gnss:
        raise TimeAlignmentError("empty GNSS sequence")
    start, end = record.start, record.end
    if abs(gnss[0].t - start) > 1e-6:
        raise TimeAlignmentError(
            f"first GNSS fix at t={gnss[0].t} must coincide with record start {start}"
        )
    if record.duration < 60.0:
        import warnings

        warnings.warn("alignment record shorter than 60 s", stacklevel=2)

    em = cfg.em or EarthModel.default(gnss[0].pos.lat)
    noise = NoiseConfig.assemble(cfg.budget, cfg.gnss, gnss[0].pos, em)
    p0 = initial_covariance(cfg, gnss[0].pos, em)

    nav = NavState(t=start, att=np.array(initial_attitude, dtype=float), vel=gnss[0].vel, pos=gnss[0].pos)
    filt = GaussianState(mean=np.zeros(N_STATES), cov=p0.copy())
    digest = _record_digest(record)

    passes: list[PassResult] = []
    converged = False
    mirrored = False
    from .mech import reverse_transform

    n_passes = cfg.n_passes if cfg.use_backtracking else 1
    for k in range(n_passes):
        direction = Direction.FORWARD if k % 2 == 0 else Direction.BACKWARD
        assert _record_digest(record) == digest, "stored record mutated between passes"

        if direction is Direction.FORWARD:
            rec_pass, gnss_pass, init_nav = record, gnss, nav
        else:
            rec_pass, _ = reverse_transform(record, nav)
            gnss_pass = _reverse_gnss(gnss, start, end)
            init_nav = nav  # velocity already negated by the handoff

        result = run_pass(rec_pass, gnss_pass, init_nav, filt, direction, cfg, em, noise)
        if direction is Direction.BACKWARD:
            result.epoch_t = start + end - result.epoch_t
        correction = _apply_feedback(result)
        passes.append(result)

        small = np.linalg.norm(correction) < CONVERGENCE_ARCMIN * ARCMIN
        if k > 0 and small:
            converged = True
            if cfg.early_stop:
                mirrored = direction is Direction.BACKWARD
                break
        if k + 1 < n_passes:
            nav, filt = handoff(result, Direction.BACKWARD if direction is Direction.FORWARD else Direction.FORWARD)
            if cfg.reset_covariance:
                filt = GaussianState(mean=filt.mean, cov=p0.copy())
        mirrored = direction is Direction.BACKWARD

    last = passes[-1]
    final_att = last.terminal_nav.att
    final_epoch = start + end - last.terminal_nav.t if mirrored else last.terminal_nav.t
    mean = last.terminal_filter.mean
    gyro_bias = -mean[EPS] if mirrored else mean[EPS].copy()
    accel_bias = mean[NABLA].copy()

    report = AlignmentReport(
        final_attitude=final_att,
        final_epoch=final_epoch,
        final_euler=euler_from_dcm(final_att),
        gyro_bias=gyro_bias,
        accel_bias=accel_bias,
        converged=converged,
        passes=passes,
    )
    if truth is not None:
        idx = int(round((final_epoch - float(truth.t[0])) / (float(truth.t[1]) - float(truth.t[0]))))
        idx = max(0, min(idx, len(truth) - 1))
        report.final_error_arcmin = epea_angles(final_att, truth.att[idx]) / ARCMIN
    return report
