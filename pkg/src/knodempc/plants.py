"""Ground-truth and nominal dynamics for the two case studies.

Pendulum state is ``[angle, angular rate]`` with the angle measured from the
upright vertical (unwrapped), input is the applied torque.

Quadrotor state is ``[r, r_dot, q, omega]`` in R^13 with a scalar-first unit
quaternion; input is ``[thrust, moments]`` in R^4.  Quaternion kinematics are
``q_dot = 0.5 * q (x) [0, omega]`` and integration steps are followed by a
renormalization (see :func:`quadrotor_renormalize`).

All fields broadcast over leading batch dimensions and ignore the time
argument (both plants are time-invariant).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .ode import DynamicsFn

__all__ = [
    "PendulumParams",
    "QuadrotorParams",
    "pendulum_dynamics",
    "quadrotor_dynamics",
    "quadrotor_renormalize",
    "hover_state",
    "hover_input",
    "quat_multiply",
    "step_reference",
    "hold_segments",
    "circle_reference",
]

GRAVITY = 9.81

# quadrotor state layout
POS = slice(0, 3)
VEL = slice(3, 6)
QUAT = slice(6, 10)
OMEGA = slice(10, 13)


@dataclass(frozen=True)
class PendulumParams:
    """Inverted pendulum: point of zero angle is the (unstable) upright."""

    m: float = 1.0  # kg
    l: float = 1.0  # m
    g: float = GRAVITY  # m/s^2

    def __post_init__(self) -> None:
        if self.m <= 0 or self.l <= 0:
            raise ValueError("mass and length must be positive")


def pendulum_dynamics(p: PendulumParams) -> DynamicsFn:
    """``theta_ddot = 3 g sin(theta) / (2 l) + 3 tau / (m l^2)``."""
    grav = 3.0 * p.g / (2.0 * p.l)
    gain = 3.0 / (p.m * p.l**2)

    def f(x: np.ndarray, u: np.ndarray, t) -> np.ndarray:
        x = np.asarray(x, float)
        u = np.asarray(u, float)
        theta = x[..., 0]
        ddot = grav * np.sin(theta) + gain * u[..., 0]
        return np.stack([x[..., 1], ddot], axis=-1)

    return f


@dataclass(frozen=True)
class QuadrotorParams:
    """Palm-scale vehicle; hover thrust m*g must sit inside the input box."""

    m: float = 0.03  # kg
    inertia_diag: tuple[float, float, float] = (1.43e-5, 1.43e-5, 2.17e-5)  # kg m^2
    g: float = GRAVITY  # m/s^2
    drag_diag: tuple[float, float, float] = (0.02, 0.02, 0.04)  # N s/m

    def __post_init__(self) -> None:
        if self.m <= 0 or any(v <= 0 for v in self.inertia_diag):
            raise ValueError("mass and inertia must be positive")

    @property
    def inertia(self) -> np.ndarray:
        return np.diag(self.inertia_diag)

    @property
    def drag(self) -> np.ndarray:
        return np.diag(self.drag_diag)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product of scalar-first quaternions (broadcasts)."""
    aw, ax, ay, az = (a[..., i] for i in range(4))
    bw, bx, by, bz = (b[..., i] for i in range(4))
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def _body_z_axis(q: np.ndarray) -> np.ndarray:
    # third column of the rotation matrix of a scalar-first quaternion
    w, x, y, z = (q[..., i] for i in range(4))
    return np.stack([2.0 * (x * z + w * y), 2.0 * (y * z - w * x), 1.0 - 2.0 * (x**2 + y**2)], axis=-1)


def _cross3(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # np.cross carries too much axis gymnastics for a hot loop
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    return np.stack([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0], axis=-1)


def quadrotor_dynamics(p: QuadrotorParams, disturbed: bool = False) -> DynamicsFn:
    """Rigid-body quadrotor field; ``disturbed`` adds the velocity drag force.

    The drag term lives only in the true plant; the nominal model inside the
    controller keeps ``disturbed=False``.
    """
    inv_inertia = np.linalg.inv(p.inertia)
    inertia = p.inertia
    drag = np.asarray(p.drag_diag)
    g_vec = np.array([0.0, 0.0, -p.g])

    def f(x: np.ndarray, u: np.ndarray, t) -> np.ndarray:
        x = np.asarray(x, float)
        u = np.asarray(u, float)
        vel = x[..., VEL]
        q = x[..., QUAT]
        omega = x[..., OMEGA]
        thrust = u[..., 0]
        torque = u[..., 1:4]

        accel = g_vec + _body_z_axis(q) * (thrust[..., None] / p.m)
        if disturbed:
            accel = accel - (drag * vel) / p.m
        omega_q = np.concatenate([np.zeros_like(thrust)[..., None], omega], axis=-1)
        q_dot = 0.5 * quat_multiply(q, omega_q)
        iw = omega @ inertia.T
        gyro = _cross3(omega, iw)
        omega_dot = (torque - gyro) @ inv_inertia.T
        return np.concatenate([vel, accel, q_dot, omega_dot], axis=-1)

    return f


def quadrotor_renormalize(x: np.ndarray) -> np.ndarray:
    """Post-step projection keeping the quaternion on the unit sphere."""
    x = np.asarray(x, float).copy()
    q = x[..., QUAT]
    x[..., QUAT] = q / np.linalg.norm(q, axis=-1, keepdims=True)
    return x


def hover_state(position: np.ndarray | None = None) -> np.ndarray:
    x = np.zeros(13)
    x[QUAT][0] = 1.0
    if position is not None:
        x[POS] = np.asarray(position, float)
    return x


def hover_input(p: QuadrotorParams) -> np.ndarray:
    return np.array([p.m * p.g, 0.0, 0.0, 0.0])


def step_reference(
    seed: int,
    duration: float,
    dt: float,
    magnitude_range: tuple[float, float] = (-1.0, 1.0),
    hold_range: tuple[float, float] = (2.0, 4.0),
) -> np.ndarray:
    """Piecewise-constant angle commands with random magnitudes and hold times.

    Returns one reference value per sampling instant (``round(duration/dt)``
    samples); the rate reference is identically zero.
    """
    if duration <= 0 or dt <= 0:
        raise ValueError("duration and dt must be positive")
    rng = np.random.default_rng(seed)
    n = int(round(duration / dt))
    out = np.empty(n)
    k = 0
    while k < n:
        magnitude = rng.uniform(*magnitude_range)
        hold = rng.uniform(*hold_range)
        span = max(1, int(round(hold / dt)))
        out[k : k + span] = magnitude
        k += span
    return out


def hold_segments(reference: np.ndarray) -> list[tuple[int, int]]:
    """Index ranges ``[start, stop)`` of the constant segments of a step reference."""
    ref = np.asarray(reference)
    if ref.size == 0:
        return []
    changes = np.flatnonzero(np.diff(ref) != 0.0) + 1
    bounds = [0, *changes.tolist(), ref.size]
    return [(bounds[i], bounds[i + 1]) for i in range(len(bounds) - 1)]


def circle_reference(
    radius: float,
    speed: float,
    seed: int,
    duration: float,
    dt: float,
    altitude: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Planar circle at constant speed: positions and their exact velocities.

    The seed randomizes the starting phase on the circle.  ``speed = 0``
    degenerates to a constant hover point.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    if speed < 0:
        raise ValueError("speed must be nonnegative")
    if duration <= 0 or dt <= 0:
        raise ValueError("duration and dt must be positive")
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    n = int(round(duration / dt))
    t = np.arange(n) * dt
    rate = speed / radius
    ang = rate * t + phase
    pos = np.stack([radius * np.cos(ang), radius * np.sin(ang), np.full(n, altitude)], axis=-1)
    vel = np.stack([-radius * rate * np.sin(ang), radius * rate * np.cos(ang), np.zeros(n)], axis=-1)
    return pos, vel
