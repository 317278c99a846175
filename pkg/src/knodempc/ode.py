"""Fixed-step RK4 integration of controlled vector fields.

Conventions shared across the package:

* a continuous-time dynamics function has the signature
  ``f(x, u, t) -> dx/dt`` and must be pure and deterministic,
* fields are written with numpy broadcasting, so ``x`` and ``u`` may carry
  a leading batch dimension (``t`` is then a scalar or a matching batch),
* control inputs are zero-order held across an integration step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

DynamicsFn = Callable[[np.ndarray, np.ndarray, float], np.ndarray]
Controller = Callable[[np.ndarray, int], np.ndarray]

__all__ = [
    "DynamicsFn",
    "Controller",
    "IntegrationError",
    "SimulationAborted",
    "IntegratorConfig",
    "Trajectory",
    "rk4_step",
    "integrate_interval",
    "discretize",
    "simulate_closed_loop",
]


class IntegrationError(RuntimeError):
    """A derivative evaluation produced non-finite values.

    ``stage`` names the offending RK4 stage (``k1`` .. ``k4``) so that a
    divergence can be located inside a step, not only at its output.
    """

    def __init__(self, stage: str, t: float):
        self.stage = stage
        self.t = float(t)
        super().__init__(f"non-finite derivative at RK4 stage {stage} (t={t:g})")


class SimulationAborted(RuntimeError):
    """Closed-loop simulation failed; the partial trajectory is attached."""

    def __init__(self, reason: str, partial: "Trajectory"):
        self.partial = partial
        super().__init__(f"closed-loop simulation aborted: {reason}")


@dataclass(frozen=True)
class IntegratorConfig:
    """Sampling interval and method of the fixed-step integrator."""

    dt: float
    method: str = "rk4"

    def __post_init__(self) -> None:
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.method != "rk4":
            raise ValueError(f"unsupported integration method {self.method!r}")


@dataclass(frozen=True)
class Trajectory:
    """A closed-loop run: ``steps + 1`` states and ``steps`` held inputs."""

    t: np.ndarray  # (steps + 1,)
    x: np.ndarray  # (steps + 1, n)
    u: np.ndarray  # (steps, m)

    @property
    def steps(self) -> int:
        return self.u.shape[0]


def _stage(f: DynamicsFn, x: np.ndarray, u: np.ndarray, t, name: str) -> np.ndarray:
    k = np.asarray(f(x, u, t), dtype=float)
    if not np.all(np.isfinite(k)):
        raise IntegrationError(name, np.min(t) if np.ndim(t) else t)
    return k


def rk4_step(f: DynamicsFn, x: np.ndarray, u: np.ndarray, t: float, dt: float) -> np.ndarray:
    """One classical Runge-Kutta step of size ``dt`` with ``u`` held constant."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    x = np.asarray(x, dtype=float)
    k1 = _stage(f, x, u, t, "k1")
    k2 = _stage(f, x + 0.5 * dt * k1, u, t + 0.5 * dt, "k2")
    k3 = _stage(f, x + 0.5 * dt * k2, u, t + 0.5 * dt, "k3")
    k4 = _stage(f, x + dt * k3, u, t + dt, "k4")
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate_interval(
    f: DynamicsFn,
    x: np.ndarray,
    u: np.ndarray,
    t0: float,
    t1: float,
    substeps: int = 1,
) -> np.ndarray:
    """Integrate over ``[t0, t1]`` with ``substeps`` equal RK4 steps.

    The input ``u`` is zero-order held across the whole interval.
    """
    if not t1 > t0:
        raise ValueError(f"need t1 > t0, got [{t0}, {t1}]")
    if substeps < 1:
        raise ValueError(f"substeps must be >= 1, got {substeps}")
    h = (t1 - t0) / substeps
    for i in range(substeps):
        x = rk4_step(f, x, u, t0 + i * h, h)
    return x


def discretize(
    f: DynamicsFn,
    dt: float,
    substeps: int = 1,
    project: Callable[[np.ndarray], np.ndarray] | None = None,
) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    """Turn a continuous field into a discrete map ``x -> x_next`` at step ``dt``.

    ``project`` is an optional post-step state projection (e.g. quaternion
    renormalization); it is applied after every step.
    """

    def step(x: np.ndarray, u: np.ndarray) -> np.ndarray:
        xn = integrate_interval(f, x, u, 0.0, dt, substeps)
        return xn if project is None else project(xn)

    return step


def simulate_closed_loop(
    f: DynamicsFn,
    x0: np.ndarray,
    controller: Controller,
    steps: int,
    cfg: IntegratorConfig,
    substeps: int = 1,
    project: Callable[[np.ndarray], np.ndarray] | None = None,
) -> Trajectory:
    """Run ``controller`` against ``f`` for ``steps`` sampling intervals.

    On a controller or integration failure the partial trajectory is attached
    to the raised :class:`SimulationAborted`.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    x0 = np.asarray(x0, dtype=float)
    n = x0.shape[0]
    ts = np.arange(steps + 1) * cfg.dt
    xs = np.empty((steps + 1, n))
    xs[0] = x0
    us: list[np.ndarray] = []

    def partial(k: int) -> Trajectory:
        m = us[0].shape[0] if us else 0
        return Trajectory(ts[: k + 1].copy(), xs[: k + 1].copy(), np.array(us).reshape(len(us), m))

    for k in range(steps):
        try:
            u = np.atleast_1d(np.asarray(controller(xs[k], k), dtype=float))
        except Exception as exc:
            raise SimulationAborted(f"controller failed at step {k}: {exc}", partial(k)) from exc
        if not np.all(np.isfinite(u)):
            raise SimulationAborted(f"controller returned non-finite input at step {k}", partial(k))
        us.append(u)
        try:
            xn = integrate_interval(f, xs[k], u, ts[k], ts[k] + cfg.dt, substeps)
        except IntegrationError as exc:
            raise SimulationAborted(f"integration failed at step {k}: {exc}", partial(k)) from exc
        if project is not None:
            xn = project(xn)
        xs[k + 1] = xn

    return Trajectory(ts, xs, np.array(us))
