"""6-DoF rigid-body simulation of the morphing quadrotor.

The vehicle is four rotors on arms that scale with the deformation radius,
plus a central body.  Collective thrust and body torque follow from the
radius-dependent allocation matrix; translational and rotational dynamics
integrate with RK4 at a fixed step; the servo angle integrates the
commanded rate and maps affinely back to the radius.
"""

from __future__ import annotations

from dataclasses import dataclass, field as _field

import numpy as np

GRAVITY = np.array([0.0, 0.0, -9.81])


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    qv = np.array([0.0, *v])
    return quat_mul(quat_mul(q, qv), quat_conj(q))[1:]


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rot_to_quat(r: np.ndarray) -> np.ndarray:
    t = np.trace(r)
    if t > 0.0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array([0.25 * s, (r[2, 1] - r[1, 2]) / s,
                      (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(r)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(r[i, i] - r[j, j] - r[k, k] + 1.0) * 2.0
        q = np.empty(4)
        q[0] = (r[k, j] - r[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (r[j, i] + r[i, j]) / s
        q[1 + k] = (r[k, i] + r[i, k]) / s
    return q / np.linalg.norm(q)


@dataclass(eq=False)
class Wrench:
    force: np.ndarray = _field(default_factory=lambda: np.zeros(3))   # world frame [N]
    torque: np.ndarray = _field(default_factory=lambda: np.zeros(3))  # body frame [N m]

    def __post_init__(self):
        self.force = np.asarray(self.force, dtype=float).reshape(3)
        self.torque = np.asarray(self.torque, dtype=float).reshape(3)
        if not (np.all(np.isfinite(self.force)) and np.all(np.isfinite(self.torque))):
            raise ValueError("wrench components must be finite")


@dataclass(eq=False)
class RigidBodyState:
    position: np.ndarray
    velocity: np.ndarray
    quaternion: np.ndarray  # (w, x, y, z), world from body
    omega: np.ndarray       # body frame [rad/s]
    radius: float
    servo_angle: float

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        self.velocity = np.asarray(self.velocity, dtype=float).reshape(3)
        self.quaternion = np.asarray(self.quaternion, dtype=float).reshape(4)
        self.omega = np.asarray(self.omega, dtype=float).reshape(3)

    def copy(self) -> "RigidBodyState":
        return RigidBodyState(self.position.copy(), self.velocity.copy(),
                              self.quaternion.copy(), self.omega.copy(),
                              self.radius, self.servo_angle)

    @property
    def z_body(self) -> np.ndarray:
        return quat_to_rot(self.quaternion)[:, 2]


@dataclass
class VehicleParams:
    mass: float = 1.0
    central_mass_fraction: float = 0.6
    central_radius: float = 0.06
    height: float = 0.12
    thrust_coeff: float = 1.0e-5   # rotor speed^2 -> thrust
    torque_coeff: float = 1.6e-7   # rotor speed^2 -> drag torque (ratio 0.016 m)
    spin_dirs: tuple = (1.0, 1.0, -1.0, -1.0)
    r_min: float = 0.131
    r_max: float = 0.211
    thrust_min: float = 0.0
    thrust_max: float = 8.0
    servo_tau: float = 0.1  # first-order servo time constant [s]

    def __post_init__(self):
        if self.mass <= 0.0 or self.thrust_coeff <= 0.0 or self.torque_coeff <= 0.0:
            raise ValueError("mass and rotor coefficients must be positive")
        if not (self.thrust_min >= 0.0 < self.thrust_max):
            raise ValueError("invalid thrust limits")

    def motor_positions(self, r: float) -> np.ndarray:
        """X layout: arms scale linearly with the deformation radius."""
        d = r / np.sqrt(2.0)
        return np.array([[d, d, 0.0], [-d, -d, 0.0], [d, -d, 0.0], [-d, d, 0.0]])

    def servo_angle_of_radius(self, r: float) -> float:
        """Affine map [r_min, r_max] -> [0, pi]."""
        return np.pi * (r - self.r_min) / (self.r_max - self.r_min)

    def radius_of_servo_angle(self, theta: float) -> float:
        r = self.r_min + (self.r_max - self.r_min) * theta / np.pi
        return float(np.clip(r, self.r_min, self.r_max))

    @property
    def hover_thrust(self) -> float:
        return self.mass * 9.81


def allocation_matrix(params: VehicleParams, r: float) -> np.ndarray:
    """Rows map per-rotor thrusts to (collective force, body torque)."""
    if not (params.r_min <= r <= params.r_max):
        raise ValueError(f"radius {r} outside [{params.r_min}, {params.r_max}]")
    pos = params.motor_positions(r)
    c = params.torque_coeff / params.thrust_coeff
    h = np.empty((4, 4))
    h[0] = 1.0
    h[1] = pos[:, 1]    # thrust along +z: torque_x = +l_y * t
    h[2] = -pos[:, 0]   # torque_y = -l_x * t
    h[3] = np.asarray(params.spin_dirs, dtype=float) * c
    return h


def inertia_of(params: VehicleParams, r: float) -> np.ndarray:
    """Central solid cylinder plus four arm point masses at the motors."""
    m_c = params.central_mass_fraction * params.mass
    rc, hgt = params.central_radius, params.height
    j = np.diag([
        m_c * (3 * rc * rc + hgt * hgt) / 12.0,
        m_c * (3 * rc * rc + hgt * hgt) / 12.0,
        m_c * rc * rc / 2.0,
    ])
    m_arm = (params.mass - m_c) / 4.0
    for l in params.motor_positions(r):
        j += m_arm * (np.dot(l, l) * np.eye(3) - np.outer(l, l))
    return j


def arm_inertia(params: VehicleParams, r: float) -> np.ndarray:
    """Point-mass arm contribution alone (diagnostics and tests)."""
    m_arm = (params.mass - params.central_mass_fraction * params.mass) / 4.0
    j = np.zeros((3, 3))
    for l in params.motor_positions(r):
        j += m_arm * (np.dot(l, l) * np.eye(3) - np.outer(l, l))
    return j


def _derivative(x: np.ndarray, force_world: np.ndarray, torque_body: np.ndarray,
                mass: float, inertia: np.ndarray, inertia_inv: np.ndarray) -> np.ndarray:
    """State layout [p(3), v(3), q(4), w(3)]."""
    out = np.empty(13)
    out[0:3] = x[3:6]
    out[3:6] = force_world / mass + GRAVITY
    q = x[6:10]
    w = x[10:13]
    out[6:10] = 0.5 * quat_mul(q, np.array([0.0, *w]))
    out[10:13] = inertia_inv @ (torque_body - np.cross(w, inertia @ w))
    return out


def step(state: RigidBodyState, thrusts, servo_rate: float, disturbance: Wrench | None,
         params: VehicleParams, dt: float, info: dict | None = None) -> RigidBodyState:
    """One RK4 step under constant rotor thrusts and servo rate.

    Thrusts outside the rotor limits are clamped (flagged via info, when
    given).  The radius, allocation and inertia are held at their
    start-of-step values; the servo angle integrates the commanded rate and
    the radius follows the servo map.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    thrusts = np.asarray(thrusts, dtype=float).reshape(4)
    if not np.all(np.isfinite(thrusts)) or not np.isfinite(servo_rate):
        raise ValueError("non-finite control input")
    clamped = np.clip(thrusts, params.thrust_min, params.thrust_max)
    if info is not None:
        info["thrust_clamped"] = bool(np.any(clamped != thrusts))

    h_k = allocation_matrix(params, state.radius)
    general = h_k @ clamped
    collective, torque = general[0], general[1:]

    q = state.quaternion / np.linalg.norm(state.quaternion)
    z_b = quat_to_rot(q)[:, 2]
    force_world = collective * z_b
    torque_body = torque.copy()
    if disturbance is not None:
        force_world = force_world + disturbance.force
        torque_body = torque_body + disturbance.torque

    inertia = inertia_of(params, state.radius)
    inertia_inv = np.linalg.inv(inertia)
    x = np.concatenate([state.position, state.velocity, q, state.omega])

    def f(xk):
        # thrust direction follows the instantaneous attitude inside the step
        zb = quat_to_rot(xk[6:10] / np.linalg.norm(xk[6:10]))[:, 2]
        fw = collective * zb
        if disturbance is not None:
            fw = fw + disturbance.force
        return _derivative(xk, fw, torque_body, params.mass, inertia, inertia_inv)

    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    x_new = x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)

    q_new = x_new[6:10]
    q_new = q_new / np.linalg.norm(q_new)
    theta = float(np.clip(state.servo_angle + servo_rate * dt, 0.0, np.pi))
    return RigidBodyState(
        position=x_new[0:3], velocity=x_new[3:6], quaternion=q_new,
        omega=x_new[10:13], radius=params.radius_of_servo_angle(theta),
        servo_angle=theta,
    )


def power(thrust: float, radius: float, params: VehicleParams,
          c1: float = 1.0, c2: float = 1.0) -> float:
    """Instantaneous power model: c1 * F^1.5 plus a shrink penalty term."""
    if thrust < 0.0:
        raise ValueError("thrust must be non-negative")
    shrink = (radius - params.r_max) / params.r_max
    return c1 * thrust**1.5 + c2 * shrink * shrink


def trajectory_energy(traj, params: VehicleParams, c1: float = 1.0, c2: float = 1.0,
                      hz: float = 100.0) -> float:
    """Model energy of a flat trajectory: Simpson integral of the power over
    the fixed-rate sample grid, with thrust from differential flatness."""
    from scipy.integrate import simpson

    n = int(np.floor(traj.total_time * hz)) + 1
    times = np.arange(n) / hz
    if times[-1] < traj.total_time - 1e-9:
        times = np.append(times, traj.total_time)
    data = traj.sample(times, orders=(0, 2))
    acc = data[:, 1, :3]
    radius = data[:, 0, 3]
    thrust = params.mass * np.linalg.norm(acc - GRAVITY, axis=1)
    shrink = (radius - params.r_max) / params.r_max
    p = c1 * thrust**1.5 + c2 * shrink**2
    return float(simpson(p, x=times))


def constant_wrench(force, torque):
    w = Wrench(force=np.asarray(force, dtype=float), torque=np.asarray(torque, dtype=float))
    return lambda t: w


def ramp_wrench(force, torque, t_ramp: float):
    force = np.asarray(force, dtype=float)
    torque = np.asarray(torque, dtype=float)

    def profile(t):
        a = min(max(t / t_ramp, 0.0), 1.0) if t_ramp > 0 else 1.0
        return Wrench(force=a * force, torque=a * torque)

    return profile


def noise_wrench(force_std, torque_std, cutoff_hz: float, dt: float,
                 duration: float, seed: int = 0):
    """Band-limited noise: white gaussian per step, first-order low-passed.
    Pre-generated on a fixed grid so runs are reproducible."""
    rng = np.random.default_rng(seed)
    n = int(np.ceil(duration / dt)) + 2
    alpha = 1.0 - np.exp(-2.0 * np.pi * cutoff_hz * dt)
    raw_f = rng.normal(scale=force_std, size=(n, 3))
    raw_t = rng.normal(scale=torque_std, size=(n, 3))
    f = np.zeros((n, 3))
    tq = np.zeros((n, 3))
    for k in range(1, n):
        f[k] = f[k - 1] + alpha * (raw_f[k] - f[k - 1])
        tq[k] = tq[k - 1] + alpha * (raw_t[k] - tq[k - 1])

    def profile(t):
        k = min(int(t / dt), n - 1)
        return Wrench(force=f[k], torque=tq[k])

    return profile
