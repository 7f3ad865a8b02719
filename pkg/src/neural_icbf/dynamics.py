"""Ground-truth benchmark systems, classical RK4 integration, and trajectory
rollout. The same integrator serves as simulator, as the discretization inside
the receding-horizon expert, and as the transition map for generated data.

Vector fields operate on the last axis, so a field evaluated on an (B, n)
batch of states returns (B, n) derivatives; single vectors work unchanged.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

GRAVITY = 9.81

ATTITUDE_MARGIN = 1e-3  # pitch/roll must stay this far from +-pi/2


class IntegrationOverflowError(RuntimeError):
    """Raised when an integration step produces non-finite values."""


class SingularAttitudeError(ValueError):
    """Raised when pitch or roll approaches gimbal lock."""


@dataclass(frozen=True)
class SystemSpec:
    """A controlled system: state dim, input dim, vector field, and its
    Jacobians d(field)/dx, d(field)/du (used by adjoint gradients)."""

    name: str
    n: int
    m: int
    field: Callable
    jac: Callable
    params: dict = field(default_factory=dict)


@dataclass
class Trajectory:
    """Uniformly sampled (state, input) sequence; one more state than inputs."""

    dt: float
    states: np.ndarray   # (N+1, n)
    inputs: np.ndarray   # (N, m)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.inputs = np.asarray(self.inputs, dtype=float)
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if len(self.states) != len(self.inputs) + 1:
            raise ValueError("need exactly one more state than inputs")

    @property
    def n_steps(self) -> int:
        return len(self.inputs)


def vehicle_field(x, u):
    """Planar vehicle commanded by speed and heading: (u1 cos u2, u1 sin u2).

    Not affine in the input (the heading enters through trig terms)."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    speed = u[..., 0]
    heading = u[..., 1]
    out = np.empty_like(x)
    out[..., 0] = speed * np.cos(heading)
    out[..., 1] = speed * np.sin(heading)
    return out


def vehicle_jac(x, u):
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    batch = x.shape[:-1]
    dfdx = np.zeros(batch + (2, 2))
    dfdu = np.empty(batch + (2, 2))
    speed = u[..., 0]
    c, s = np.cos(u[..., 1]), np.sin(u[..., 1])
    dfdu[..., 0, 0] = c
    dfdu[..., 0, 1] = -speed * s
    dfdu[..., 1, 0] = s
    dfdu[..., 1, 1] = speed * c
    return dfdx, dfdu


def vehicle_spec() -> SystemSpec:
    return SystemSpec("vehicle", n=2, m=2, field=vehicle_field, jac=vehicle_jac)


def _check_attitude(x):
    roll = np.asarray(x, dtype=float)[..., 6]
    pitch = np.asarray(x, dtype=float)[..., 7]
    limit = np.pi / 2 - ATTITUDE_MARGIN
    if np.any(np.abs(roll) >= limit) or np.any(np.abs(pitch) >= limit):
        raise SingularAttitudeError("attitude too close to gimbal lock")


def quadrotor_field(x, u, mass=1.0, inertia=(0.01, 0.01, 0.02), gravity=GRAVITY):
    """12-state rigid-body quadrotor.

    State: position (3), inertial velocity (3), roll/pitch/yaw (3), body
    rates (3). Input: total thrust along the body z axis plus three body
    torques. Diagonal inertia; z is up.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    _check_attitude(x)
    jx, jy, jz = inertia

    vel = x[..., 3:6]
    roll, pitch, yaw = x[..., 6], x[..., 7], x[..., 8]
    p, q, r = x[..., 9], x[..., 10], x[..., 11]
    thrust = u[..., 0]

    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    tp = sp / cp

    a = thrust / mass
    out = np.empty_like(x)
    out[..., 0:3] = vel
    out[..., 3] = a * (cr * sp * cy + sr * sy)
    out[..., 4] = a * (cr * sp * sy - sr * cy)
    out[..., 5] = a * cr * cp - gravity
    out[..., 6] = p + tp * (sr * q + cr * r)
    out[..., 7] = cr * q - sr * r
    out[..., 8] = (sr * q + cr * r) / cp
    out[..., 9] = ((jy - jz) / jx) * q * r + u[..., 1] / jx
    out[..., 10] = ((jz - jx) / jy) * p * r + u[..., 2] / jy
    out[..., 11] = ((jx - jy) / jz) * p * q + u[..., 3] / jz
    return out


def quadrotor_jac(x, u, mass=1.0, inertia=(0.01, 0.01, 0.02), gravity=GRAVITY):
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    _check_attitude(x)
    jx, jy, jz = inertia
    batch = x.shape[:-1]

    roll, pitch, yaw = x[..., 6], x[..., 7], x[..., 8]
    p, q, r = x[..., 9], x[..., 10], x[..., 11]
    thrust = u[..., 0]

    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    tp = sp / cp

    a = thrust / mass
    dfdx = np.zeros(batch + (12, 12))
    dfdu = np.zeros(batch + (12, 4))

    idx = np.arange(3)
    dfdx[..., idx, idx + 3] = 1.0

    dfdx[..., 3, 6] = a * (-sr * sp * cy + cr * sy)
    dfdx[..., 3, 7] = a * cr * cp * cy
    dfdx[..., 3, 8] = a * (-cr * sp * sy + sr * cy)
    dfdx[..., 4, 6] = a * (-sr * sp * sy - cr * cy)
    dfdx[..., 4, 7] = a * cr * cp * sy
    dfdx[..., 4, 8] = a * (cr * sp * cy + sr * sy)
    dfdx[..., 5, 6] = -a * sr * cp
    dfdx[..., 5, 7] = -a * cr * sp

    dfdx[..., 6, 6] = tp * (cr * q - sr * r)
    dfdx[..., 6, 7] = (sr * q + cr * r) / cp ** 2
    dfdx[..., 6, 9] = 1.0
    dfdx[..., 6, 10] = sr * tp
    dfdx[..., 6, 11] = cr * tp
    dfdx[..., 7, 6] = -sr * q - cr * r
    dfdx[..., 7, 10] = cr
    dfdx[..., 7, 11] = -sr
    dfdx[..., 8, 6] = (cr * q - sr * r) / cp
    dfdx[..., 8, 7] = (sr * q + cr * r) * sp / cp ** 2
    dfdx[..., 8, 10] = sr / cp
    dfdx[..., 8, 11] = cr / cp

    dfdx[..., 9, 10] = ((jy - jz) / jx) * r
    dfdx[..., 9, 11] = ((jy - jz) / jx) * q
    dfdx[..., 10, 9] = ((jz - jx) / jy) * r
    dfdx[..., 10, 11] = ((jz - jx) / jy) * p
    dfdx[..., 11, 9] = ((jx - jy) / jz) * q
    dfdx[..., 11, 10] = ((jx - jy) / jz) * p

    dfdu[..., 3, 0] = (cr * sp * cy + sr * sy) / mass
    dfdu[..., 4, 0] = (cr * sp * sy - sr * cy) / mass
    dfdu[..., 5, 0] = cr * cp / mass
    dfdu[..., 9, 1] = 1.0 / jx
    dfdu[..., 10, 2] = 1.0 / jy
    dfdu[..., 11, 3] = 1.0 / jz
    return dfdx, dfdu


def quadrotor_spec(mass=1.0, inertia=(0.01, 0.01, 0.02), gravity=GRAVITY) -> SystemSpec:
    inertia = tuple(float(j) for j in inertia)

    def field(x, u):
        return quadrotor_field(x, u, mass=mass, inertia=inertia, gravity=gravity)

    def jac(x, u):
        return quadrotor_jac(x, u, mass=mass, inertia=inertia, gravity=gravity)

    return SystemSpec(
        "quadrotor", n=12, m=4, field=field, jac=jac,
        params={"mass": mass, "inertia": inertia, "gravity": gravity},
    )


def hover_input(spec: SystemSpec) -> np.ndarray:
    mass = spec.params.get("mass", 1.0)
    gravity = spec.params.get("gravity", GRAVITY)
    return np.array([mass * gravity, 0.0, 0.0, 0.0])


def rk4_step(spec: SystemSpec, x, u, dt: float, check: bool = True):
    """Classical fourth-order step; the input is held constant over dt.

    With check=False, non-finite values are returned instead of raising so a
    batched caller can contain divergence per problem."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    k1 = spec.field(x, u)
    k2 = spec.field(x + 0.5 * dt * k1, u)
    k3 = spec.field(x + 0.5 * dt * k2, u)
    k4 = spec.field(x + dt * k3, u)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if check and not np.all(np.isfinite(out)):
        raise IntegrationOverflowError(f"non-finite state after rk4 step of {spec.name}")
    return out


def rk4_step_vjp(spec: SystemSpec, x, u, dt: float, x_bar):
    """Vector-Jacobian product of one rk4 step.

    Given the adjoint of the next state, returns the adjoints of (x, u).
    Recomputes the four stages, then runs the chain in reverse using the
    field's analytic Jacobians. Batched over leading axes.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    x_bar = np.asarray(x_bar, dtype=float)

    k1 = spec.field(x, u)
    a2 = x + 0.5 * dt * k1
    k2 = spec.field(a2, u)
    a3 = x + 0.5 * dt * k2
    k3 = spec.field(a3, u)
    a4 = x + dt * k3

    def vjp(point, k_bar):
        dfdx, dfdu = spec.jac(point, u)
        ax = np.einsum("...ij,...i->...j", dfdx, k_bar)
        au = np.einsum("...ij,...i->...j", dfdu, k_bar)
        return ax, au

    u_bar = np.zeros_like(u)
    k4_bar = (dt / 6.0) * x_bar
    a4_bar, du = vjp(a4, k4_bar)
    u_bar += du
    k3_bar = (dt / 3.0) * x_bar + dt * a4_bar
    a3_bar, du = vjp(a3, k3_bar)
    u_bar += du
    k2_bar = (dt / 3.0) * x_bar + 0.5 * dt * a3_bar
    a2_bar, du = vjp(a2, k2_bar)
    u_bar += du
    k1_bar = (dt / 6.0) * x_bar + 0.5 * dt * a2_bar
    a1_bar, du = vjp(x, k1_bar)
    u_bar += du

    x_bar_prev = x_bar + a1_bar + a2_bar + a3_bar + a4_bar
    return x_bar_prev, u_bar


def rollout(spec: SystemSpec, x0, inputs, dt: float) -> Trajectory:
    """Fold rk4_step over an input sequence."""
    x0 = np.asarray(x0, dtype=float)
    inputs = np.asarray(inputs, dtype=float).reshape(-1, spec.m)
    states = np.empty((len(inputs) + 1, spec.n))
    states[0] = x0
    for k, u in enumerate(inputs):
        states[k + 1] = rk4_step(spec, states[k], u, dt)
    return Trajectory(dt=dt, states=states, inputs=inputs)


def save_trajectory_csv(traj: Trajectory, path) -> None:
    """Header `t,x1..xn,u1..um`; the final row has empty input columns."""
    n = traj.states.shape[1]
    m = traj.inputs.shape[1] if traj.inputs.size else 0
    header = ["t"] + [f"x{i+1}" for i in range(n)] + [f"u{j+1}" for j in range(m)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for k, state in enumerate(traj.states):
            row = [repr(k * traj.dt)] + [repr(float(v)) for v in state]
            if k < len(traj.inputs):
                row += [repr(float(v)) for v in traj.inputs[k]]
            else:
                row += [""] * m
            writer.writerow(row)


def load_trajectory_csv(path) -> Trajectory:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    n = sum(1 for name in header if name.startswith("x"))
    m = sum(1 for name in header if name.startswith("u"))
    times, states, inputs = [], [], []
    for row in rows[1:]:
        times.append(float(row[0]))
        states.append([float(v) for v in row[1:1 + n]])
        u_cells = row[1 + n:1 + n + m]
        if any(cell != "" for cell in u_cells):
            inputs.append([float(v) for v in u_cells])
    if len(times) > 1:
        dt = times[1] - times[0]
    else:
        dt = 1.0
    return Trajectory(dt=dt, states=np.asarray(states), inputs=np.asarray(inputs).reshape(-1, m))
