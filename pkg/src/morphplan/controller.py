"""Tracking stack: receding-horizon thrust/torque optimizer, external-force
estimation with thrust compensation, incremental torque compensation,
allocation inversion and the servo proportional loop.

The horizon solver linearizes the rigid-body rollout around the current
input sequence and solves a box-constrained least-squares step, repeating
until the step stalls; attitude error enters the cost as the vector part of
the reference-relative quaternion.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field as _field

import numpy as np
from scipy.optimize import lsq_linear

from .dynamics import (
    GRAVITY,
    RigidBodyState,
    VehicleParams,
    Wrench,
    allocation_matrix,
    inertia_of,
    quat_mul,
    quat_to_rot,
    rot_to_quat,
    step,
)

log = logging.getLogger(__name__)


@dataclass(eq=False)
class ControlInput:
    thrust: float          # collective [N]
    torque: np.ndarray     # body frame [N m]

    def __post_init__(self):
        self.torque = np.asarray(self.torque, dtype=float).reshape(3)
        if self.thrust < 0.0:
            raise ValueError("collective thrust must be non-negative")


@dataclass
class NmpcConfig:
    horizon: int = 20
    dt: float = 0.05
    q_pos: float = 40.0
    q_vel: float = 8.0
    q_att: float = 16.0
    q_omega: float = 1.0
    terminal_scale: float = 2.0
    w_input: np.ndarray = _field(default_factory=lambda: np.array([0.02, 0.4, 0.4, 0.4]))
    u_min: np.ndarray = _field(default_factory=lambda: np.array([0.0, -1.5, -1.5, -0.5]))
    u_max: np.ndarray = _field(default_factory=lambda: np.array([32.0, 1.5, 1.5, 0.5]))
    max_iters: int = 30
    tol: float = 1e-6

    def __post_init__(self):
        self.w_input = np.asarray(self.w_input, dtype=float).reshape(4)
        self.u_min = np.asarray(self.u_min, dtype=float).reshape(4)
        self.u_max = np.asarray(self.u_max, dtype=float).reshape(4)
        if self.horizon < 2:
            raise ValueError("horizon must be at least 2")


@dataclass(eq=False)
class DisturbanceEstimate:
    force: np.ndarray
    torque_filtered: np.ndarray
    omega_dot_filtered: np.ndarray


class LowPassFilter:
    """First-order discrete low-pass; state starts at zero."""

    def __init__(self, cutoff_hz: float, dt: float, dim: int = 3):
        self.alpha = 1.0 - np.exp(-2.0 * np.pi * cutoff_hz * dt)
        self.value = np.zeros(dim)

    def update(self, x) -> np.ndarray:
        self.value = self.value + self.alpha * (np.asarray(x, dtype=float) - self.value)
        return self.value.copy()


class SecondOrderLowPass:
    """Two cascaded first-order sections."""

    def __init__(self, cutoff_hz: float, dt: float, dim: int = 3):
        self.a = LowPassFilter(cutoff_hz, dt, dim)
        self.b = LowPassFilter(cutoff_hz, dt, dim)

    def update(self, x) -> np.ndarray:
        return self.b.update(self.a.update(x))


# ---------------------------------------------------------------------------
# batched discrete model used by the horizon solver

def _z_body_batch(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    return np.stack([2 * (x * z + w * y), 2 * (y * z - w * x), 1 - 2 * (x * x + y * y)], axis=1)


def _quat_mul_omega(q: np.ndarray, w: np.ndarray) -> np.ndarray:
    """q (B,4) times the pure quaternion (0, w), batched."""
    qw, qx, qy, qz = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    wx, wy, wz = w[:, 0], w[:, 1], w[:, 2]
    return np.stack([
        -qx * wx - qy * wy - qz * wz,
        qw * wx + qy * wz - qz * wy,
        qw * wy - qx * wz + qz * wx,
        qw * wz + qx * wy - qy * wx,
    ], axis=1)


def _deriv_batch(x: np.ndarray, u: np.ndarray, mass: float,
                 inertia: np.ndarray, inertia_inv: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    out[:, 0:3] = x[:, 3:6]
    out[:, 3:6] = (u[:, 0:1] * _z_body_batch(x[:, 6:10])) / mass + GRAVITY
    out[:, 6:10] = 0.5 * _quat_mul_omega(x[:, 6:10], x[:, 10:13])
    w = x[:, 10:13]
    jw = w @ inertia.T
    out[:, 10:13] = (u[:, 1:4] - np.cross(w, jw)) @ inertia_inv.T
    return out


def _model_step(x: np.ndarray, u: np.ndarray, mass: float, inertia: np.ndarray,
                inertia_inv: np.ndarray, dt: float) -> np.ndarray:
    k1 = _deriv_batch(x, u, mass, inertia, inertia_inv)
    k2 = _deriv_batch(x + 0.5 * dt * k1, u, mass, inertia, inertia_inv)
    k3 = _deriv_batch(x + 0.5 * dt * k2, u, mass, inertia, inertia_inv)
    k4 = _deriv_batch(x + dt * k3, u, mass, inertia, inertia_inv)
    out = x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    out[:, 6:10] /= np.linalg.norm(out[:, 6:10], axis=1, keepdims=True)
    return out


def _quat_error_matrix(q_ref: np.ndarray) -> np.ndarray:
    """Rows 1..3 of the left-multiplication matrix of conj(q_ref): the map
    q -> vec(q_ref^-1 * q), exact because it is linear in q."""
    w, x, y, z = q_ref[0], -q_ref[1], -q_ref[2], -q_ref[3]
    return np.array([
        [x, w, -z, y],
        [y, z, w, -x],
        [z, -y, x, w],
    ])


@dataclass(eq=False)
class NmpcInfo:
    converged: bool
    iterations: int
    inputs: np.ndarray  # (N, 4) solution sequence (warm start for the next tick)


def nmpc_solve(x_now: np.ndarray, x_ref: np.ndarray, u_ref: np.ndarray,
               config: NmpcConfig, params: VehicleParams, r: float,
               warm_start: np.ndarray | None = None) -> tuple[ControlInput, NmpcInfo]:
    """Finite-horizon tracking solve; returns the first input.

    x_now (13,), x_ref (N+1, 13), u_ref (N, 4) or (N+1, 4).  The model is the
    disturbance-free rigid body at the given radius, discretized with RK4 at
    config.dt.  Warm starts shift the previous solution by one stage.
    """
    n = config.horizon
    x_now = np.asarray(x_now, dtype=float).reshape(13)
    x_ref = np.asarray(x_ref, dtype=float)
    if x_ref.shape != (n + 1, 13):
        raise ValueError(f"reference must be ({n + 1}, 13)")
    u_ref = np.asarray(u_ref, dtype=float)[:n]

    inertia = inertia_of(params, r)
    inertia_inv = np.linalg.inv(inertia)
    mass = params.mass

    if warm_start is not None and warm_start.shape == (n, 4):
        u_seq = np.vstack([warm_start[1:], warm_start[-1:]])
    else:
        u_seq = u_ref.copy()
    u_seq = np.clip(u_seq, config.u_min, config.u_max)

    sq = np.sqrt
    w_state = np.concatenate([np.full(3, sq(config.q_pos)), np.full(3, sq(config.q_vel)),
                              np.full(3, sq(config.q_att)), np.full(3, sq(config.q_omega))])
    w_term = w_state * sq(config.terminal_scale)
    w_in = sq(config.w_input)

    def rollout(useq):
        xs = np.empty((n + 1, 13))
        xs[0] = x_now
        for k in range(n):
            xs[k + 1] = _model_step(xs[k][None, :], useq[k][None, :], mass,
                                    inertia, inertia_inv, config.dt)[0]
        return xs

    def residuals(xs, useq):
        rows = []
        for k in range(1, n + 1):
            wk = w_term if k == n else w_state
            q_r = x_ref[k, 6:10]
            if q_r @ xs[k, 6:10] < 0.0:
                q_r = -q_r
            e_q = _quat_error_matrix(q_r) @ xs[k, 6:10]
            rows.append(np.concatenate([
                wk[0:3] * (xs[k, 0:3] - x_ref[k, 0:3]),
                wk[3:6] * (xs[k, 3:6] - x_ref[k, 3:6]),
                wk[6:9] * e_q,
                wk[9:12] * (xs[k, 10:13] - x_ref[k, 10:13]),
            ]))
        for k in range(n):
            rows.append(w_in * (useq[k] - u_ref[k]))
        return np.concatenate(rows)

    eps = 1e-6
    n_u = 4 * n
    converged = False
    it = 0
    xs = rollout(u_seq)
    cost = float(residuals(xs, u_seq) @ residuals(xs, u_seq))

    for it in range(1, config.max_iters + 1):
        # linearize the one-step model at every stage in one batch
        base_x = xs[:n]
        base_u = u_seq
        pert = np.zeros((n, 18, 13 + 4))
        pert[:, 1:, :] = np.eye(17)[None, :, :] * eps
        xb = base_x[:, None, :] + pert[:, :, :13]
        ub = base_u[:, None, :] + pert[:, :, 13:]
        nom_next = _model_step(xb.reshape(-1, 13), ub.reshape(-1, 4), mass,
                               inertia, inertia_inv, config.dt).reshape(n, 18, 13)
        a_mats = (nom_next[:, 1:14] - nom_next[:, :1]) / eps   # (n, 13, 13) transposed
        b_mats = (nom_next[:, 14:18] - nom_next[:, :1]) / eps  # (n, 4, 13)

        # sensitivities of x_k w.r.t. the stacked inputs
        jac = np.zeros((16 * n, n_u))
        s_k = np.zeros((13, n_u))
        row = 0
        for k in range(n):
            s_k = a_mats[k].T @ s_k
            s_k[:, 4 * k:4 * k + 4] += b_mats[k].T
            wk = w_term if k == n - 1 else w_state
            q_r = x_ref[k + 1, 6:10]
            if q_r @ xs[k + 1, 6:10] < 0.0:
                q_r = -q_r
            c_block = np.zeros((12, 13))
            c_block[0:3, 0:3] = np.diag(wk[0:3])
            c_block[3:6, 3:6] = np.diag(wk[3:6])
            c_block[6:9, 6:10] = wk[6:9, None] * _quat_error_matrix(q_r)
            c_block[9:12, 10:13] = np.diag(wk[9:12])
            jac[row:row + 12] = c_block @ s_k
            row += 12
        for k in range(n):
            jac[row:row + 4, 4 * k:4 * k + 4] = np.diag(w_in)
            row += 4

        res = residuals(xs, u_seq)
        lo = np.tile(config.u_min, n) - u_seq.ravel()
        hi = np.tile(config.u_max, n) - u_seq.ravel()
        du, _ = _bounded_lsq(jac, -res, lo, hi)

        # backtracking keeps the iteration monotone
        improved = False
        for alpha in (1.0, 0.5, 0.25, 0.125):
            u_try = np.clip(u_seq + alpha * du.reshape(n, 4), config.u_min, config.u_max)
            xs_try = rollout(u_try)
            r_try = residuals(xs_try, u_try)
            c_try = float(r_try @ r_try)
            if c_try <= cost:
                improved = True
                step_norm = float(np.max(np.abs(u_try - u_seq)))
                u_seq, xs, cost = u_try, xs_try, c_try
                break
        if not improved:
            converged = True
            break
        if step_norm < config.tol:
            converged = True
            break

    if not converged:
        log.debug("horizon solver hit the iteration cap (cost %.3e)", cost)
    u0 = u_seq[0]
    return (ControlInput(thrust=max(float(u0[0]), 0.0), torque=u0[1:]),
            NmpcInfo(converged=converged, iterations=it, inputs=u_seq))


def _bounded_lsq(a: np.ndarray, b: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    """Least squares with box bounds; unconstrained solve first, falling back
    to the bounded solver only when a bound is hit."""
    x, *_ = np.linalg.lstsq(a, b, rcond=None)
    if np.all(x >= lo - 1e-12) and np.all(x <= hi + 1e-12):
        return np.clip(x, lo, hi), True
    res = lsq_linear(a, b, bounds=(lo, hi), method="bvls")
    return res.x, res.success


# ---------------------------------------------------------------------------
# estimation and compensation

def estimate_external_force(mass: float, accel_meas, thrust: float, z_body,
                            lp: LowPassFilter | None = None) -> np.ndarray:
    """World-frame external force from the translational force balance,
    low-pass filtered when a filter is supplied."""
    if mass <= 0.0:
        raise ValueError("mass must be positive")
    raw = mass * np.asarray(accel_meas, dtype=float) - mass * GRAVITY \
        - thrust * np.asarray(z_body, dtype=float)
    return lp.update(raw) if lp is not None else raw


def compensate_thrust(thrust_cmd: float, z_body, f_ext) -> float:
    """Desired collective after cancelling the estimated external force."""
    if thrust_cmd < 0.0:
        raise ValueError("thrust command must be non-negative")
    return float(np.linalg.norm(thrust_cmd * np.asarray(z_body, dtype=float)
                                - np.asarray(f_ext, dtype=float)))


def indi_torque(torque_cmd, omega, inertia, torque_filtered, omega_dot_filtered) -> np.ndarray:
    """Increment the filtered applied torque by the inertia-scaled angular
    acceleration error."""
    torque_cmd = np.asarray(torque_cmd, dtype=float).reshape(3)
    omega = np.asarray(omega, dtype=float).reshape(3)
    inertia = np.asarray(inertia, dtype=float).reshape(3, 3)
    omega_dot_des = np.linalg.solve(inertia, torque_cmd - np.cross(omega, inertia @ omega))
    return np.asarray(torque_filtered, dtype=float) \
        + inertia @ (omega_dot_des - np.asarray(omega_dot_filtered, dtype=float))


def allocate(thrust_des: float, torque, h_mat, thrust_min: float = 0.0,
             thrust_max: float = 8.0):
    """Invert the allocation; on saturation the torque shrinks uniformly while
    the collective is preserved.  Returns (rotor thrusts, clamped flag)."""
    torque = np.asarray(torque, dtype=float).reshape(3)
    h_mat = np.asarray(h_mat, dtype=float).reshape(4, 4)
    clamped = False
    f = float(thrust_des)
    f_feasible = float(np.clip(f, 4.0 * thrust_min, 4.0 * thrust_max))
    if f_feasible != f:
        clamped = True
        f = f_feasible
    base = np.linalg.solve(h_mat, np.array([f, 0.0, 0.0, 0.0]))
    full = np.linalg.solve(h_mat, np.concatenate([[f], torque]))
    direction = full - base
    scale = 1.0
    for j in range(4):
        d = direction[j]
        if d > 1e-12:
            scale = min(scale, (thrust_max - base[j]) / d)
        elif d < -1e-12:
            scale = min(scale, (thrust_min - base[j]) / d)
    scale = max(scale, 0.0)
    if scale < 1.0:
        clamped = True
    return base + scale * direction, clamped


def servo_command(radius_des: float, theta_est: float, params: VehicleParams,
                  rate_limit: float = 6.0) -> float:
    """Proportional servo rate toward the angle matching the desired radius."""
    if params.servo_tau <= 0.0:
        raise ValueError("servo time constant must be positive")
    rate = (params.servo_angle_of_radius(radius_des) - theta_est) / params.servo_tau
    return float(np.clip(rate, -rate_limit, rate_limit))


# ---------------------------------------------------------------------------
# differential-flatness reference and the closed-loop harness

def flat_reference(traj, t: float, params: VehicleParams):
    """Full reference state and input from the flat trajectory at time t
    (yaw fixed to zero); clamps beyond the trajectory end."""
    t = float(np.clip(t, 0.0, traj.total_time))
    sig = traj.sample([t], orders=(0, 1, 2, 3))[0]
    pos, vel, acc, jerk = sig[0], sig[1], sig[2], sig[3]
    thrust_vec = acc[:3] - GRAVITY
    f_ref = params.mass * float(np.linalg.norm(thrust_vec))
    z_b = thrust_vec / np.linalg.norm(thrust_vec)
    x_c = np.array([1.0, 0.0, 0.0])
    y_b = np.cross(z_b, x_c)
    if np.linalg.norm(y_b) < 1e-6:
        x_c = np.array([0.0, 1.0, 0.0])
        y_b = np.cross(z_b, x_c)
    y_b /= np.linalg.norm(y_b)
    x_b = np.cross(y_b, z_b)
    rot = np.column_stack([x_b, y_b, z_b])
    quat = rot_to_quat(rot)
    if quat[0] < 0.0:
        quat = -quat
    h_vec = (params.mass / f_ref) * (jerk[:3] - (z_b @ jerk[:3]) * z_b)
    omega_ref = np.array([-h_vec @ y_b, h_vec @ x_b, 0.0])
    x_ref = np.concatenate([pos[:3], vel[:3], quat, omega_ref])
    u_ref = np.array([f_ref, 0.0, 0.0, 0.0])
    return x_ref, u_ref, float(pos[3])


@dataclass
class TrackingConfig:
    sim_dt: float = 0.005
    control_dt: float = 0.01
    force_compensation: bool = True
    indi: bool = True
    force_cutoff_hz: float = 5.0
    omega_cutoff_hz: float = 20.0
    servo_rate_limit: float = 6.0
    accel_noise_std: float = 0.0
    duration_pad: float = 0.5
    seed: int = 0


@dataclass(eq=False)
class TrackingResult:
    times: np.ndarray
    positions: np.ndarray
    references: np.ndarray
    force_estimates: np.ndarray
    radii: np.ndarray
    rmse: float
    log_rows: list


def run_tracking(traj, params: VehicleParams, nmpc: NmpcConfig,
                 config: TrackingConfig, disturbance=None) -> TrackingResult:
    """Closed-loop tracking of a flat trajectory on the simulator.

    Tick order per control step: estimate, horizon solve, thrust
    compensation; torque compensation and allocation run at the simulation
    rate.  Returns the position RMSE over the run.
    """
    if traj.total_time <= 0.0:
        raise ValueError("trajectory must have positive duration")
    rng = np.random.default_rng(config.seed)
    x0, _, r0 = flat_reference(traj, 0.0, params)
    state = RigidBodyState(position=x0[0:3], velocity=x0[3:6], quaternion=x0[6:10],
                           omega=x0[10:13], radius=r0,
                           servo_angle=params.servo_angle_of_radius(r0))
    n_steps = int(np.ceil((traj.total_time + config.duration_pad) / config.sim_dt))
    ticks_per_control = max(1, int(round(config.control_dt / config.sim_dt)))

    force_lp = LowPassFilter(config.force_cutoff_hz, config.control_dt, 3)
    omega_lp = SecondOrderLowPass(config.omega_cutoff_hz, config.sim_dt, 3)
    thrust_lp = SecondOrderLowPass(config.omega_cutoff_hz, config.sim_dt, 4)

    warm = None
    u_cmd = ControlInput(thrust=params.hover_thrust, torque=np.zeros(3))
    f_ext_est = np.zeros(3)
    last_thrusts = np.full(4, params.hover_thrust / 4.0)
    omega_prev = state.omega.copy()

    times = np.empty(n_steps)
    positions = np.empty((n_steps, 3))
    references = np.empty((n_steps, 3))
    estimates = np.empty((n_steps, 3))
    radii = np.empty(n_steps)
    log_rows = []
    sq_err = 0.0

    for k in range(n_steps):
        t = k * config.sim_dt
        wrench = disturbance(t) if disturbance is not None else None

        if k % ticks_per_control == 0:
            z_b = state.z_body
            accel = (np.sum(last_thrusts) * z_b
                     + (wrench.force if wrench is not None else 0.0)) / params.mass + GRAVITY
            if config.accel_noise_std > 0.0:
                accel = accel + rng.normal(scale=config.accel_noise_std, size=3)
            f_ext_est = estimate_external_force(params.mass, accel,
                                                float(np.sum(last_thrusts)), z_b, force_lp)
            refs = [flat_reference(traj, t + i * nmpc.dt, params) for i in range(nmpc.horizon + 1)]
            x_refs = np.stack([r[0] for r in refs])
            u_refs = np.stack([r[1] for r in refs])
            x13 = np.concatenate([state.position, state.velocity, state.quaternion, state.omega])
            u_cmd, info = nmpc_solve(x13, x_refs, u_refs, nmpc, params, state.radius,
                                     warm_start=warm)
            warm = info.inputs

        h_mat = allocation_matrix(params, state.radius)
        inertia = inertia_of(params, state.radius)
        omega_dot_raw = (state.omega - omega_prev) / config.sim_dt
        omega_prev = state.omega.copy()
        omega_dot_f = omega_lp.update(omega_dot_raw)
        tau_f = h_mat[1:] @ thrust_lp.update(last_thrusts)

        if config.force_compensation:
            f_des = compensate_thrust(u_cmd.thrust, state.z_body, f_ext_est)
        else:
            f_des = u_cmd.thrust
        if config.indi:
            tau_cmd = indi_torque(u_cmd.torque, state.omega, inertia, tau_f, omega_dot_f)
        else:
            tau_cmd = u_cmd.torque

        thrusts, _ = allocate(f_des, tau_cmd, h_mat, params.thrust_min, params.thrust_max)
        _, _, r_des = flat_reference(traj, t, params)
        kappa = servo_command(r_des, state.servo_angle, params, config.servo_rate_limit)

        ref_now, _, _ = flat_reference(traj, t, params)
        err = state.position - ref_now[0:3]
        sq_err += float(err @ err)
        times[k] = t
        positions[k] = state.position
        references[k] = ref_now[0:3]
        estimates[k] = f_ext_est
        radii[k] = state.radius
        log_rows.append([t, *ref_now[0:3], *state.position, *state.velocity,
                         *state.quaternion, *state.omega, state.radius,
                         state.servo_angle, *f_ext_est, f_des, *tau_cmd, *thrusts])

        state = step(state, thrusts, kappa, wrench, params, config.sim_dt)
        last_thrusts = thrusts

    rmse = float(np.sqrt(sq_err / n_steps))
    return TrackingResult(times=times, positions=positions, references=references,
                          force_estimates=estimates, radii=radii, rmse=rmse,
                          log_rows=log_rows)


TRACKING_LOG_HEADER = (
    "t,ref_x,ref_y,ref_z,x,y,z,vx,vy,vz,qw,qx,qy,qz,wx,wy,wz,r,theta,"
    "fext_x,fext_y,fext_z,f_des,tau_x,tau_y,tau_z,t1,t2,t3,t4"
)


def write_tracking_csv(result: TrackingResult, path) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(TRACKING_LOG_HEADER + "\n")
        for row in result.log_rows:
            fh.write(",".join(format(v, ".17g") for v in row) + "\n")
