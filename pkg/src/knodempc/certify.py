"""Terminal ingredients and numerical certification of the local MPC law.

Pipeline, all in discrete time and about an equilibrium shifted to the
origin:

1. linearize the discrete map ``f`` by central differences -> ``(A, B)``,
2. DLQR gain ``K`` (convention ``u = K x``, ``A_cl = A + B K`` stable),
3. terminal weight ``P`` from ``A_cl' P A_cl + rho (Q + K' R K) - P = 0``
   with ``rho > 1``,
4. a sampled certificate: the linearization-error rate ``S`` over a ball,
   the largest input-feasible ball radius, a bisection for the terminal
   radius ``epsilon``, the sublevel size ``gamma = lambda_min(P) eps^2``,
   and a direct sampled check of the terminal descent inequality
   ``p(f(x, Kx)) - p(x) <= -x'(Q + K'RK)x`` on the sublevel set.

Checks are sample-based: a nonnegative ``descent_margin`` is the pass
criterion, and the report records sample counts and the seed.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

__all__ = [
    "DiscreteMap",
    "LinearModel",
    "TerminalIngredients",
    "CertificationReport",
    "EquilibriumError",
    "StabilizabilityError",
    "linearize",
    "dlqr",
    "solve_dlyap",
    "make_terminal_ingredients",
    "shift_equilibrium",
    "input_ball_radius",
    "certify_terminal_set",
    "descent_check",
    "sample_sublevel",
    "apply_certificate",
]

DiscreteMap = Callable[[np.ndarray, np.ndarray], np.ndarray]

SAFETY_FACTOR = 1.25  # applied to the sampled error rate before sizing epsilon


class EquilibriumError(ValueError):
    """The supplied point is not a fixed point of the discrete map."""


class StabilizabilityError(RuntimeError):
    """The Riccati fixed-point iteration failed to converge."""


@dataclass(frozen=True)
class LinearModel:
    A: np.ndarray
    B: np.ndarray


@dataclass(frozen=True)
class TerminalIngredients:
    """Everything the terminal-cost/terminal-set construction produces."""

    A: np.ndarray
    B: np.ndarray
    K: np.ndarray
    A_cl: np.ndarray
    P: np.ndarray
    rho: float
    Q: np.ndarray
    R: np.ndarray
    gamma: float | None = None
    epsilon: float | None = None

    @property
    def q_bar(self) -> np.ndarray:
        """Effective stage weight ``Q + K' R K`` under the local law."""
        return self.Q + self.K.T @ self.R @ self.K

    def terminal_cost(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, float)
        return np.einsum("...i,ij,...j->...", x, self.P, x)


@dataclass(frozen=True)
class CertificationReport:
    """Sampled certificate for one (model, ingredients, input box) triple."""

    S_delta: float  # sampled sup of ||e(x)||/||x|| over the delta-ball
    e_delta_bound: float  # sampled Hessian-norm bound (report only)
    delta: float
    delta1: float  # largest ball radius keeping K x inside the input box
    epsilon: float
    gamma: float
    descent_margin: float  # min over samples of (descent rhs - lhs); >= 0 passes
    samples_checked: int
    seed: int

    @property
    def passed(self) -> bool:
        return bool(self.epsilon > 0 and np.isfinite(self.descent_margin) and self.descent_margin >= 0)


def apply_certificate(ing: TerminalIngredients, report: CertificationReport) -> TerminalIngredients:
    return replace(ing, gamma=report.gamma, epsilon=report.epsilon)


def linearize(f: DiscreteMap, x0: np.ndarray, u0: np.ndarray, h: float = 1e-5) -> LinearModel:
    """Central-difference Jacobians of the discrete map at a fixed point.

    The step is scale-aware (``h * max(1, |coord|)``).  Raises
    :class:`EquilibriumError` if ``f(x0, u0)`` deviates from ``x0`` by more
    than 1e-6 in any component.
    """
    x0 = np.asarray(x0, dtype=float)
    u0 = np.asarray(u0, dtype=float)
    resid = np.asarray(f(x0, u0), float) - x0
    if np.max(np.abs(resid)) > 1e-6:
        raise EquilibriumError(f"fixed-point residual {np.max(np.abs(resid)):.3e} exceeds 1e-6")
    n, m = x0.shape[0], u0.shape[0]

    def jac(dim: int, perturb_state: bool) -> np.ndarray:
        base = x0 if perturb_state else u0
        steps = h * np.maximum(1.0, np.abs(base))
        xs = np.tile(x0, (2 * dim, 1))
        us = np.tile(u0, (2 * dim, 1))
        tgt = xs if perturb_state else us
        for j in range(dim):
            tgt[2 * j, j] += steps[j]
            tgt[2 * j + 1, j] -= steps[j]
        vals = np.asarray(f(xs, us), float)
        if not np.all(np.isfinite(vals)):
            raise ValueError("non-finite dynamics during linearization")
        cols = (vals[0::2] - vals[1::2]) / (2.0 * steps[:, None])
        return cols.T

    return LinearModel(A=jac(n, True), B=jac(m, False))


def _chol_pd(M: np.ndarray, name: str) -> None:
    try:
        np.linalg.cholesky(np.asarray(M, float))
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"{name} must be symmetric positive definite") from exc


def dlqr(
    A: np.ndarray,
    B: np.ndarray,
    Q: np.ndarray,
    R: np.ndarray,
    tol: float = 1e-12,
    max_iter: int = 100_000,
) -> tuple[np.ndarray, np.ndarray]:
    """Discrete-time LQR by fixed-point iteration of the Riccati equation.

    Returns ``(K, P)`` with the convention ``u = K x`` and ``A + B K`` stable.
    """
    A = np.asarray(A, float)
    B = np.asarray(B, float)
    Q = np.asarray(Q, float)
    R = np.asarray(R, float)
    _chol_pd(Q, "Q")
    _chol_pd(R, "R")
    P = Q.copy()
    for _ in range(max_iter):
        BtP = B.T @ P
        gain = np.linalg.solve(R + BtP @ B, BtP @ A)
        P_next = Q + A.T @ P @ (A - B @ gain)
        P_next = 0.5 * (P_next + P_next.T)
        if np.max(np.abs(P_next - P)) < tol:
            P = P_next
            break
        P = P_next
    else:
        raise StabilizabilityError(f"Riccati iteration did not converge in {max_iter} steps")
    BtP = B.T @ P
    K = -np.linalg.solve(R + BtP @ B, BtP @ A)
    return K, P


def solve_dlyap(A_cl: np.ndarray, M: np.ndarray) -> np.ndarray:
    """Solve ``A_cl' P A_cl + M - P = 0`` via the Kronecker-vectorized system."""
    A_cl = np.asarray(A_cl, float)
    M = np.asarray(M, float)
    if np.max(np.abs(np.linalg.eigvals(A_cl))) >= 1.0:
        raise ValueError("A_cl must have spectral radius < 1")
    n = A_cl.shape[0]
    lhs = np.eye(n * n) - np.kron(A_cl.T, A_cl.T)
    vec_p = np.linalg.solve(lhs, M.flatten(order="F"))
    P = vec_p.reshape(n, n, order="F")
    return 0.5 * (P + P.T)


def make_terminal_ingredients(
    A: np.ndarray, B: np.ndarray, Q: np.ndarray, R: np.ndarray, rho: float
) -> TerminalIngredients:
    """DLQR gain plus the rho-scaled Lyapunov weight; validated on construction."""
    if not rho > 1.0:
        raise ValueError(f"rho must exceed 1, got {rho}")
    K, _ = dlqr(A, B, Q, R)
    A_cl = A + B @ K
    q_bar = Q + K.T @ R @ K
    P = solve_dlyap(A_cl, rho * q_bar)
    residual = np.linalg.norm(A_cl.T @ P @ A_cl + rho * q_bar - P, 2)
    if residual >= 1e-8:
        raise RuntimeError(f"Lyapunov residual {residual:.3e} exceeds 1e-8")
    if np.min(np.linalg.eigvalsh(P)) <= 0:
        raise RuntimeError("terminal weight P is not positive definite")
    return TerminalIngredients(A=A, B=B, K=K, A_cl=A_cl, P=P, rho=float(rho),
                               Q=np.asarray(Q, float), R=np.asarray(R, float))


def shift_equilibrium(f: DiscreteMap, x_eq: np.ndarray, u_eq: np.ndarray) -> DiscreteMap:
    """Re-center a discrete map so the equilibrium sits at the origin."""
    x_eq = np.asarray(x_eq, float)
    u_eq = np.asarray(u_eq, float)

    def shifted(z: np.ndarray, v: np.ndarray) -> np.ndarray:
        return np.asarray(f(z + x_eq, v + u_eq), float) - x_eq

    return shifted


def input_ball_radius(K: np.ndarray, u_lo: np.ndarray, u_hi: np.ndarray) -> float:
    """Largest ``r`` with ``K x`` inside the box for every ``||x|| <= r``.

    Closed form per input row: ``min_i min(hi_i, -lo_i) / ||K_i||``.  The box
    must contain the origin in its interior, otherwise the radius is 0.
    """
    K = np.atleast_2d(np.asarray(K, float))
    u_lo = np.asarray(u_lo, float)
    u_hi = np.asarray(u_hi, float)
    slack = np.minimum(u_hi, -u_lo)
    if np.any(slack <= 0):
        return 0.0
    norms = np.linalg.norm(K, axis=1)
    radii = np.where(norms > 0, slack / np.where(norms > 0, norms, 1.0), np.inf)
    return float(np.min(radii))


def _closed_loop_error(f: DiscreteMap, ing: TerminalIngredients, x: np.ndarray) -> np.ndarray:
    u = x @ ing.K.T
    return np.asarray(f(x, u), float) - x @ ing.A_cl.T


def _ball_directions(rng: np.random.Generator, count: int, dim: int) -> tuple[np.ndarray, np.ndarray]:
    d = rng.standard_normal((count, dim))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    radii = np.maximum(rng.uniform(0.0, 1.0, size=count), 1e-9)
    return d, radii


def descent_check(f: DiscreteMap, ing: TerminalIngredients, x: np.ndarray) -> float | np.ndarray:
    """Margin of the terminal descent inequality at ``x`` (nonnegative passes)."""
    x = np.asarray(x, float)
    u = x @ ing.K.T
    x_next = np.asarray(f(x, u), float)
    p_next = np.einsum("...i,ij,...j->...", x_next, ing.P, x_next)
    p_cur = np.einsum("...i,ij,...j->...", x, ing.P, x)
    stage = np.einsum("...i,ij,...j->...", x, ing.q_bar, x)
    margin = -stage - (p_next - p_cur)
    return float(margin) if margin.ndim == 0 else margin


def sample_sublevel(P: np.ndarray, gamma: float, count: int, rng: np.random.Generator) -> np.ndarray:
    """Random points of the sublevel set ``{x : x' P x <= gamma}``."""
    lam, V = np.linalg.eigh(np.asarray(P, float))
    n = P.shape[0]
    d, radii = _ball_directions(rng, count, n)
    z = d * (radii ** (1.0 / n))[:, None]
    return (z * np.sqrt(gamma / lam)) @ V.T


def _hessian_norm_bound(
    f: DiscreteMap, ing: TerminalIngredients, points: np.ndarray, rng: np.random.Generator,
    h: float = 1e-4, probes: int = 16,
) -> float:
    """Sampled bound on the closed-loop error Hessian (report diagnostic only)."""
    n = points.shape[1]
    e = lambda x: _closed_loop_error(f, ing, x)
    worst = 0.0
    eye = np.eye(n)
    for x in points:
        batch = []
        for b in range(n):
            for c in range(n):
                hb, hc = h * eye[b], h * eye[c]
                batch.extend([x + hb + hc, x + hb - hc, x - hb + hc, x - hb - hc])
        vals = e(np.asarray(batch))
        vals = vals.reshape(n, n, 4, n)
        hess = (vals[:, :, 0] - vals[:, :, 1] - vals[:, :, 2] + vals[:, :, 3]) / (4.0 * h * h)
        # hess[b, c, a] = d^2 e_a / dx_b dx_c ; probe the quadratic form norm
        vs = rng.standard_normal((probes, n))
        vs /= np.linalg.norm(vs, axis=1, keepdims=True)
        quad = np.einsum("pb,bca,pc->pa", vs, hess, vs)
        worst = max(worst, float(np.max(np.linalg.norm(quad, axis=1))))
    return worst


def certify_terminal_set(
    f: DiscreteMap,
    ing: TerminalIngredients,
    u_lo: np.ndarray,
    u_hi: np.ndarray,
    delta: float,
    n_samples: int = 10_000,
    seed: int = 0,
    hessian_points: int = 16,
) -> CertificationReport:
    """Size the terminal set and check the descent inequality by sampling.

    The map ``f`` must have its equilibrium at the origin (use
    :func:`shift_equilibrium` first).  The sampled error rate gets the 1.25
    safety factor before the radius bisection; the returned margin comes from
    a direct descent check at fresh sublevel-set samples, which is the actual
    pass criterion.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    n = ing.A.shape[0]
    rng = np.random.default_rng(seed)
    dirs, radii = _ball_directions(rng, n_samples, n)
    unit_points = dirs * radii[:, None]
    unit_norms = np.linalg.norm(unit_points, axis=1)

    def error_rate(r: float) -> float:
        pts = r * unit_points
        errs = _closed_loop_error(f, ing, pts)
        if not np.all(np.isfinite(errs)):
            raise ValueError("non-finite dynamics while sampling the error rate")
        return float(np.max(np.linalg.norm(errs, axis=1) / (r * unit_norms)))

    s_delta = error_rate(delta)
    delta1 = input_ball_radius(ing.K, u_lo, u_hi)
    budget = (ing.rho - 1.0) * float(np.min(np.linalg.eigvalsh(ing.q_bar)))
    norm_aclp = np.linalg.norm(ing.A_cl.T @ ing.P, 2)
    norm_p = np.linalg.norm(ing.P, 2)

    def feasible(r: float) -> bool:
        s = SAFETY_FACTOR * error_rate(r)
        return 2.0 * s * norm_aclp + s * s * norm_p <= budget

    r_max = min(delta, delta1)
    epsilon = 0.0
    if r_max > 0:
        if feasible(r_max):
            epsilon = r_max
        else:
            lo, hi = 0.0, r_max
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                if mid <= 0.0:
                    break
                if feasible(mid):
                    lo = mid
                else:
                    hi = mid
            epsilon = lo

    e_delta = _hessian_norm_bound(f, ing, delta * unit_points[:hessian_points], rng)

    if epsilon <= 0.0:
        return CertificationReport(
            S_delta=s_delta, e_delta_bound=e_delta, delta=float(delta), delta1=delta1,
            epsilon=0.0, gamma=0.0, descent_margin=-np.inf,
            samples_checked=n_samples, seed=seed,
        )

    gamma = float(np.min(np.linalg.eigvalsh(ing.P))) * epsilon**2
    terminal_points = sample_sublevel(ing.P, gamma, n_samples, rng)
    margins = descent_check(f, ing, terminal_points)
    return CertificationReport(
        S_delta=s_delta, e_delta_bound=e_delta, delta=float(delta), delta1=delta1,
        epsilon=float(epsilon), gamma=gamma, descent_margin=float(np.min(margins)),
        samples_checked=n_samples, seed=seed,
    )
