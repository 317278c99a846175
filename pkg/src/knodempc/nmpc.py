"""Receding-horizon control via multiple-shooting SQP over a box-ADMM QP.

Transcription: all horizon states stay as decision variables, linked by
linearized dynamics defect constraints (direct multiple shooting).  At each
SQP iteration the prediction model is linearized by central finite
differences about the current trajectory, the exact quadratic tracking cost
is kept, the terminal ellipsoid (when enforced) is replaced by its
supporting halfspace at the iterate, and the resulting QP with box
constraints is solved by an operator-splitting method with a fixed penalty.
An L1 merit line search globalizes the steps.

The prediction model has signature ``model(x, u, k) -> x_next`` and may be
called with row batches of ``(x, u)``; non-batched models are detected and
looped over transparently.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_factor, cho_solve, lu_factor, lu_solve

from .certify import TerminalIngredients

__all__ = [
    "PredictionModel",
    "ReferenceProvider",
    "QpSettings",
    "QpResult",
    "SqpSettings",
    "OcpConfig",
    "OcpSolution",
    "MpcController",
    "solve_box_qp",
    "solve_ocp",
    "evaluate_value_descent",
]

PredictionModel = Callable[[np.ndarray, np.ndarray, int], np.ndarray]
ReferenceProvider = Callable[[int], tuple[np.ndarray, np.ndarray]]


# ----------------------------------------------------------------------
# QP solver: minimize 0.5 z'Hz + g'z  s.t.  lo <= A z <= hi
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class QpSettings:
    rho: float = 1e-3  # fixed penalty (inequality rows)
    rho_eq_scale: float = 1e7  # equality rows get rho * scale
    sigma: float = 1e-6
    over_relaxation: float = 1.6
    eps: float = 1e-8
    max_iter: int = 4000
    check_every: int = 10
    ruiz_passes: int = 5
    polish_after: int = 30  # earliest iteration at which a stall can trigger polishing
    polish_stall_ratio: float = 0.5  # per-check residual drop below this counts as a stall
    polish_reg: float = 1e-9
    polish_refine: int = 2
    active_tol: float = 1e-6


@dataclass
class QpResult:
    z: np.ndarray
    y: np.ndarray  # row multipliers
    iterations: int
    primal_residual: float
    dual_residual: float
    converged: bool


class BoxQp:
    """One QP ``min 0.5 z'Hz + g'z  s.t.  lo <= A z <= hi``.

    Construction performs Ruiz equilibration of the problem data (the penalty
    itself stays fixed) and factorizes the reduced KKT matrix once, so
    repeated solves with warm starts are cheap.  Termination residuals are
    measured on the unscaled problem.
    """

    def __init__(self, H: np.ndarray, g: np.ndarray, A, lo: np.ndarray, hi: np.ndarray,
                 settings: QpSettings = QpSettings(),
                 scaling: tuple[np.ndarray, np.ndarray] | None = None,
                 active_hint: np.ndarray | None = None):
        self.settings = settings
        self.lo = np.asarray(lo, float)
        self.hi = np.asarray(hi, float)
        nz = H.shape[0]
        A_csr = A.tocsr() if sp.issparse(A) else sp.csr_matrix(np.asarray(A, float))

        if scaling is None:
            D, E = self._ruiz(np.asarray(H, float), A_csr.toarray())
        else:
            D, E = scaling
        self.D, self.E = D, E
        self.Hs = np.asarray(H, float) * D[:, None] * D[None, :]
        rows_of = np.repeat(np.arange(A_csr.shape[0]), np.diff(A_csr.indptr))
        self.As = A_csr.copy()
        self.As.data = A_csr.data * (E[rows_of] * D[A_csr.indices])
        self.AsT = self.As.T.tocsr()
        self.gs = D * g
        self.g_inf = float(np.max(np.abs(g))) if g.size else 0.0
        self.los = E * self.lo
        self.his = E * self.hi
        # constraints that are (or were recently) active behave like
        # equalities, so they share the boosted penalty; the penalty is still
        # fixed over the run of the iteration
        stiff = self.lo == self.hi
        if active_hint is not None and active_hint.shape == stiff.shape:
            stiff = stiff | active_hint
        self.rho_vec = np.where(stiff, settings.rho * settings.rho_eq_scale, settings.rho)
        A_rho = self.As.copy()
        A_rho.data = self.As.data * self.rho_vec[rows_of]
        K = self.Hs + settings.sigma * np.eye(nz) + (self.AsT @ A_rho).toarray()
        # K spans sigma .. rho_eq in curvature, so an explicit inverse would
        # put an error floor above the termination residual; keep the factor
        self.factor = cho_factor(K, check_finite=False)

    def _ruiz(self, H: np.ndarray, A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Iterative diagonal equilibration of the stacked (H; A) columns and A rows."""
        A_w = np.abs(A)
        H_w = np.abs(H)
        D = np.ones(H.shape[0])
        E = np.ones(A.shape[0])
        for _ in range(self.settings.ruiz_passes):
            col = np.maximum(A_w.max(axis=0), H_w.max(axis=0)) if A_w.size else H_w.max(axis=0)
            d = 1.0 / np.sqrt(np.maximum(col, 1e-8))
            D *= d
            A_w *= d[None, :]
            H_w *= d[None, :]
            H_w *= d[:, None]
            if A_w.size:
                e = 1.0 / np.sqrt(np.maximum(A_w.max(axis=1), 1e-8))
                E *= e
                A_w *= e[:, None]
        return D, E

    def solve(self, warm: tuple[np.ndarray, np.ndarray] | None = None) -> QpResult:
        s = self.settings
        if warm is not None:
            w = warm[0] / self.D
            y = warm[1] / self.E
        else:
            w = np.zeros(self.D.shape[0])
            y = np.zeros(self.E.shape[0])
        zc = np.clip(self.As @ w, self.los, self.his)

        alpha = s.over_relaxation
        it = 0
        r_prim = r_dual = np.inf
        worst_prev = np.inf
        failed_active_set = None
        for it in range(1, s.max_iter + 1):
            rhs = s.sigma * w - self.gs + self.AsT @ (self.rho_vec * zc - y)
            w = cho_solve(self.factor, rhs, check_finite=False)
            Aw = self.As @ w
            Aw_r = alpha * Aw + (1.0 - alpha) * zc
            zc = np.clip(Aw_r + y / self.rho_vec, self.los, self.his)
            y = y + self.rho_vec * (Aw_r - zc)
            if it % s.check_every == 0 or it == s.max_iter:
                # residuals and scales of the unscaled problem; termination is
                # the usual combined absolute/relative criterion
                Az_u = Aw / self.E
                zc_u = zc / self.E
                Hw_u = (self.Hs @ w) / self.D
                Aty_u = (self.AsT @ y) / self.D
                r_prim = float(np.max(np.abs(Az_u - zc_u)))
                r_dual = float(np.max(np.abs(Hw_u + self.gs / self.D + Aty_u)))
                prim_scale = max(float(np.max(np.abs(Az_u))), float(np.max(np.abs(zc_u))))
                dual_scale = max(float(np.max(np.abs(Hw_u))), float(np.max(np.abs(Aty_u))), self.g_inf)
                if r_prim <= s.eps * (1.0 + prim_scale) and r_dual <= s.eps * (1.0 + dual_scale):
                    return QpResult(self.D * w, self.E * y, it, r_prim, r_dual, True)
                worst = max(r_prim / (1.0 + prim_scale), r_dual / (1.0 + dual_scale))
                stalled = worst > s.polish_stall_ratio * worst_prev
                worst_prev = worst
                if (stalled and it >= s.polish_after) or it == s.max_iter:
                    signature = self._active_signature(w)
                    if signature != failed_active_set:
                        polished = self._polish(w, y)
                        if polished is not None:
                            wp, yp, rp, rd = polished
                            return QpResult(self.D * wp, self.E * yp, it, rp, rd, True)
                        failed_active_set = signature
        return QpResult(self.D * w, self.E * y, it, r_prim, r_dual, False)

    def _active_set(self, w: np.ndarray):
        s = self.settings
        Aw = self.As @ w
        eq = self.los == self.his
        act_lo = (~eq) & (Aw - self.los < s.active_tol * (1.0 + np.abs(self.los)))
        act_hi = (~eq) & (~act_lo) & (self.his - Aw < s.active_tol * (1.0 + np.abs(self.his)))
        return eq, act_lo, act_hi

    def _active_signature(self, w: np.ndarray) -> bytes:
        eq, act_lo, act_hi = self._active_set(w)
        return np.packbits(np.concatenate([act_lo, act_hi])).tobytes()

    def _polish(self, w: np.ndarray, y: np.ndarray):
        """Exact KKT solve on the detected active set; None if it fails to verify."""
        s = self.settings
        eq, act_lo, act_hi = self._active_set(w)
        active = np.flatnonzero(eq | act_lo | act_hi)
        b_act = np.where(act_lo, self.los, np.where(act_hi, self.his, self.los))[active]

        nz = self.D.shape[0]
        na = active.size
        A_act = self.As[active].toarray() if na else np.zeros((0, nz))
        M0 = np.zeros((nz + na, nz + na))
        M0[:nz, :nz] = self.Hs
        if na:
            M0[:nz, nz:] = A_act.T
            M0[nz:, :nz] = A_act
        M_reg = M0.copy()
        M_reg[:nz, :nz] += s.polish_reg * np.eye(nz)
        if na:
            M_reg[nz:, nz:] -= s.polish_reg * np.eye(na)
        rhs = np.concatenate([-self.gs, b_act])
        try:
            factor = lu_factor(M_reg, check_finite=False)
            sol = lu_solve(factor, rhs, check_finite=False)
            # refine against the unregularized KKT so the regularization error
            # does not survive in the returned multipliers
            for _ in range(s.polish_refine):
                sol += lu_solve(factor, rhs - M0 @ sol, check_finite=False)
        except (np.linalg.LinAlgError, ValueError):
            return None
        wp = sol[:nz]
        yp = np.zeros_like(y)
        yp[active] = sol[nz:]
        if np.any(yp[act_lo] > 1e-9) or np.any(yp[act_hi] < -1e-9):
            return None
        Awp = self.As @ wp
        viol = np.maximum(0.0, np.maximum(self.los - Awp, Awp - self.his))
        r_prim = float(np.max(viol / self.E)) if viol.size else 0.0
        r_dual = float(np.max(np.abs((self.Hs @ wp + self.gs + self.AsT @ yp) / self.D)))
        if r_prim <= s.eps and r_dual <= s.eps:
            return wp, yp, r_prim, r_dual
        return None


def solve_box_qp(
    H: np.ndarray,
    g: np.ndarray,
    A: np.ndarray,
    lo: np.ndarray,
    hi: np.ndarray,
    settings: QpSettings = QpSettings(),
    warm: tuple[np.ndarray, np.ndarray] | None = None,
) -> QpResult:
    """One-shot convenience wrapper around :class:`BoxQp`."""
    return BoxQp(H, g, A, lo, hi, settings).solve(warm)


# ----------------------------------------------------------------------
# OCP formulation
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class SqpSettings:
    max_iterations: int = 25
    step_tol: float = 1e-8
    kkt_tol: float = 1e-6
    fd_step: float = 1e-6
    armijo: float = 1e-4
    max_backtracks: int = 16
    merit_mu: float = 10.0
    qp: QpSettings = field(default_factory=QpSettings)


@dataclass(frozen=True)
class OcpConfig:
    """Horizon data: cost weights, boxes, prediction model, references.

    ``reference(k)`` must return the pair ``(x_ref, u_ref)`` for absolute
    step ``k``.  The terminal ellipsoid ``(x_N - x_ref)' P (x_N - x_ref) <=
    gamma`` is enforced only when ``enforce_terminal_set`` is on.
    """

    N: int
    Q: np.ndarray
    R: np.ndarray
    P: np.ndarray
    model: PredictionModel
    reference: ReferenceProvider
    x_lo: np.ndarray
    x_hi: np.ndarray
    u_lo: np.ndarray
    u_hi: np.ndarray
    gamma: float | None = None
    enforce_terminal_set: bool = False

    def __post_init__(self) -> None:
        if self.N < 1:
            raise ValueError("horizon must be at least 1")
        for M, name in ((self.Q, "Q"), (self.R, "R"), (self.P, "P")):
            try:
                np.linalg.cholesky(np.asarray(M, float))
            except np.linalg.LinAlgError as exc:
                raise ValueError(f"{name} must be positive definite") from exc
        if np.any(self.x_lo > self.x_hi) or np.any(self.u_lo > self.u_hi):
            raise ValueError("constraint boxes must be nonempty")
        if self.enforce_terminal_set and not (self.gamma is not None and self.gamma > 0):
            raise ValueError("terminal set enforcement requires gamma > 0")

    @property
    def n(self) -> int:
        return self.Q.shape[0]

    @property
    def m(self) -> int:
        return self.R.shape[0]

    @classmethod
    def from_ingredients(
        cls,
        ing: TerminalIngredients,
        N: int,
        model: PredictionModel,
        reference: ReferenceProvider,
        x_lo: np.ndarray,
        x_hi: np.ndarray,
        u_lo: np.ndarray,
        u_hi: np.ndarray,
        enforce_terminal_set: bool = False,
    ) -> "OcpConfig":
        return cls(N=N, Q=ing.Q, R=ing.R, P=ing.P, model=model, reference=reference,
                   x_lo=np.asarray(x_lo, float), x_hi=np.asarray(x_hi, float),
                   u_lo=np.asarray(u_lo, float), u_hi=np.asarray(u_hi, float),
                   gamma=ing.gamma, enforce_terminal_set=enforce_terminal_set)


@dataclass
class OcpSolution:
    U_star: np.ndarray  # (N, m)
    X_star: np.ndarray  # (N+1, n)
    J_star: float
    status: str  # optimal | max-iterations | infeasible
    iterations: int
    kkt_residual: float
    defect_norm: float
    message: str = ""


def _eval_model(model: PredictionModel, X: np.ndarray, U: np.ndarray, k: int) -> np.ndarray:
    """Batched model call with a per-row fallback for non-broadcasting models."""
    if X.ndim == 1:
        return np.asarray(model(X, U, k), float)
    try:
        out = np.asarray(model(X, U, k), float)
        if out.shape == X.shape:
            return out
    except Exception:
        pass
    return np.stack([np.asarray(model(x, u, k), float) for x, u in zip(X, U)])


def _rollout(model: PredictionModel, x0: np.ndarray, U: np.ndarray, k0: int) -> np.ndarray:
    X = np.empty((U.shape[0] + 1, x0.shape[0]))
    X[0] = x0
    for i in range(U.shape[0]):
        X[i + 1] = _eval_model(model, X[i], U[i], k0 + i)
    return X


class _OcpWork:
    """Per-solve scratch: references, constant cost blocks, index helpers."""

    def __init__(self, cfg: OcpConfig, k0: int):
        self.cfg = cfg
        self.k0 = k0
        N, n, m = cfg.N, cfg.n, cfg.m
        self.N, self.n, self.m = N, n, m
        self.nz = n * (N + 1) + m * N
        refs = [cfg.reference(k0 + i) for i in range(N + 1)]
        self.Xref = np.stack([np.asarray(r[0], float) for r in refs])
        self.Uref = np.stack([np.asarray(r[1], float) for r in refs[:N]])

        H = np.zeros((self.nz, self.nz))
        g = np.zeros(self.nz)
        for i in range(N):
            s = self.ix(i)
            H[s, s] = 2.0 * cfg.Q
            g[s] = -2.0 * cfg.Q @ self.Xref[i]
            s = self.iu(i)
            H[s, s] = 2.0 * cfg.R
            g[s] = -2.0 * cfg.R @ self.Uref[i]
        s = self.ix(N)
        H[s, s] = 2.0 * cfg.P
        g[s] = -2.0 * cfg.P @ self.Xref[N]
        self.H = H
        self.g = g
        self._sparse_structure()

    def ix(self, i: int) -> slice:
        return slice(i * self.n, (i + 1) * self.n)

    def iu(self, i: int) -> slice:
        off = self.n * (self.N + 1)
        return slice(off + i * self.m, off + (i + 1) * self.m)

    def pack(self, X: np.ndarray, U: np.ndarray) -> np.ndarray:
        return np.concatenate([X.ravel(), U.ravel()])

    def unpack(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        cut = self.n * (self.N + 1)
        return z[:cut].reshape(self.N + 1, self.n), z[cut:].reshape(self.N, self.m)

    def cost(self, X: np.ndarray, U: np.ndarray) -> float:
        dx = X[:-1] - self.Xref[:-1]
        du = U - self.Uref
        dN = X[-1] - self.Xref[-1]
        return float(
            np.sum(dx * (dx @ self.cfg.Q.T))
            + np.sum(du * (du @ self.cfg.R.T))
            + np.sum(dN * (self.cfg.P @ dN))
        )

    def predictions(self, X: np.ndarray, U: np.ndarray) -> np.ndarray:
        # step-invariant models take one batched call over the stages;
        # otherwise one call per stage keeps the step index exact
        if getattr(self.cfg.model, "step_invariant", False):
            return _eval_model(self.cfg.model, X[:-1], U, self.k0)
        return np.stack(
            [_eval_model(self.cfg.model, X[i], U[i], self.k0 + i) for i in range(self.N)]
        )

    def terminal_violation(self, X: np.ndarray) -> float:
        if not self.cfg.enforce_terminal_set:
            return 0.0
        d = X[-1] - self.Xref[-1]
        return max(0.0, float(d @ self.cfg.P @ d) - float(self.cfg.gamma))

    def linearize(
        self, X: np.ndarray, U: np.ndarray, h: float = 1e-6
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Central-difference Jacobians of the model along the trajectory."""
        N, n, m = self.N, self.n, self.m
        npts = 2 * (n + m) + 1
        sx = h * np.maximum(1.0, np.abs(X[:-1]))  # (N, n)
        su = h * np.maximum(1.0, np.abs(U))  # (N, m)
        xs = np.repeat(X[:-1][:, None, :], npts, axis=1)
        us = np.repeat(U[:, None, :], npts, axis=1)
        idx = np.arange(n)
        xs[:, 2 * idx, idx] += sx
        xs[:, 2 * idx + 1, idx] -= sx
        idx = np.arange(m)
        us[:, 2 * n + 2 * idx, idx] += su
        us[:, 2 * n + 2 * idx + 1, idx] -= su
        if getattr(self.cfg.model, "step_invariant", False):
            vals = _eval_model(self.cfg.model, xs.reshape(-1, n), us.reshape(-1, m), self.k0)
            vals = vals.reshape(N, npts, n)
        else:
            vals = np.stack(
                [_eval_model(self.cfg.model, xs[i], us[i], self.k0 + i) for i in range(N)]
            )
        if not np.all(np.isfinite(vals)):
            raise FloatingPointError("non-finite model output during linearization")
        dx = vals[:, 0 : 2 * n]
        As = np.swapaxes((dx[:, 0::2] - dx[:, 1::2]) / (2.0 * sx[:, :, None]), 1, 2)
        du = vals[:, 2 * n : 2 * (n + m)]
        Bs = np.swapaxes((du[:, 0::2] - du[:, 1::2]) / (2.0 * su[:, :, None]), 1, 2)
        return As, Bs, vals[:, -1]

    def _sparse_structure(self) -> None:
        """Fixed sparsity pattern of the constraint matrix (values change per
        iterate).  Row order: initial state, defects, terminal halfspace,
        state boxes, input boxes."""
        cfg, N, n, m = self.cfg, self.N, self.n, self.m
        n_term = 1 if cfg.enforce_terminal_set else 0
        self.n_hard = n + N * n + n_term
        self.n_rows = self.n_hard + N * n + N * m
        iu0 = n * (N + 1)

        defect_cols = np.empty((N, n, n + 1 + m), dtype=np.int64)
        stage = np.arange(N)[:, None]
        defect_cols[:, :, :n] = (stage * n + np.arange(n)[None, :])[:, None, :]
        defect_cols[:, :, n] = (stage + 1) * n + np.arange(n)[None, :]
        defect_cols[:, :, n + 1 :] = (iu0 + stage * m)[:, :, None] + np.arange(m)[None, None, :]

        parts = [np.arange(n, dtype=np.int64), defect_cols.ravel()]
        lengths = [np.ones(n, dtype=np.int64), np.full(N * n, n + 1 + m, dtype=np.int64)]
        if n_term:
            parts.append(np.arange(N * n, (N + 1) * n, dtype=np.int64))
            lengths.append(np.array([n], dtype=np.int64))
        parts.append(np.arange(n, self.nz, dtype=np.int64))  # box rows: x_1..x_N, u_0..u_{N-1}
        lengths.append(np.ones(N * n + N * m, dtype=np.int64))
        self._sp_indices = np.concatenate(parts)
        self._sp_indptr = np.concatenate([[0], np.cumsum(np.concatenate(lengths))])

    def assemble(
        self, x0: np.ndarray, X: np.ndarray, U: np.ndarray,
        As: np.ndarray, Bs: np.ndarray, Fs: np.ndarray,
    ) -> tuple[sp.csr_matrix, np.ndarray, np.ndarray, int]:
        """Constraint matrix and bounds about the iterate; returns row count of
        the non-box (equality + terminal) block."""
        cfg, N, n, m = self.cfg, self.N, self.n, self.m
        n_term = 1 if cfg.enforce_terminal_set else 0
        defect_data = np.concatenate([-As, np.ones((N, n, 1)), -Bs], axis=2).ravel()
        c = Fs - np.einsum("sij,sj->si", As, X[:-1]) - np.einsum("sij,sj->si", Bs, U)
        data = [np.ones(n), defect_data]
        lo = [x0, c.ravel()]
        hi = [x0, c.ravel()]
        if n_term:
            d = X[-1] - self.Xref[-1]
            grad = 2.0 * cfg.P @ d
            data.append(grad)
            lo.append([-np.inf])
            hi.append([float(cfg.gamma) - float(d @ cfg.P @ d) + float(grad @ X[-1])])
        data.append(np.ones(N * n + N * m))
        lo.extend([np.tile(cfg.x_lo, N), np.tile(cfg.u_lo, N)])
        hi.extend([np.tile(cfg.x_hi, N), np.tile(cfg.u_hi, N)])
        A = sp.csr_matrix(
            (np.concatenate(data), self._sp_indices, self._sp_indptr),
            shape=(self.n_rows, self.nz),
        )
        return A, np.concatenate(lo), np.concatenate(hi), self.n_hard


def _solve_ocp_impl(
    cfg: OcpConfig,
    x0: np.ndarray,
    warm_inputs: np.ndarray | None,
    k0: int,
    settings: SqpSettings,
    qp_cache: dict | None,
) -> tuple[OcpSolution, dict]:
    qp_cache = qp_cache if qp_cache is not None else {}
    x0 = np.asarray(x0, dtype=float)
    if not np.all(np.isfinite(x0)):
        raise ValueError("initial state must be finite")
    work = _OcpWork(cfg, k0)
    N, n, m = work.N, work.n, work.m

    if np.any(x0 < cfg.x_lo - 1e-9) or np.any(x0 > cfg.x_hi + 1e-9):
        U = np.clip(work.Uref, cfg.u_lo, cfg.u_hi)
        X = np.tile(x0, (N + 1, 1))
        return (
            OcpSolution(U, X, float("nan"), "infeasible", 0, float("inf"), float("inf"),
                        message="initial state outside the state box"),
            qp_cache,
        )

    if warm_inputs is not None:
        U = np.clip(np.asarray(warm_inputs, float).reshape(N, m), cfg.u_lo, cfg.u_hi)
    else:
        U = np.clip(work.Uref.copy(), cfg.u_lo, cfg.u_hi)
    X = _rollout(cfg.model, x0, U, k0)
    X[1:] = np.clip(X[1:], cfg.x_lo, cfg.x_hi)

    mu = settings.merit_mu
    status = "max-iterations"
    kkt = float("inf")
    iterations = 0
    message = ""

    preds = work.predictions(X, U)
    defects = X[1:] - preds
    defect_l1 = float(np.sum(np.abs(defects)))
    tviol = work.terminal_violation(X)

    for it in range(1, settings.max_iterations + 1):
        iterations = it
        try:
            As, Bs, Fs = work.linearize(X, U, settings.fd_step)
        except FloatingPointError as exc:
            status, message = "max-iterations", str(exc)
            break
        A, lo, hi, n_hard = work.assemble(x0, X, U, As, Bs, Fs)
        warm = qp_cache.get("warm")
        hint = None
        if warm is not None:
            # duals below the solver tolerance belong to inactive rows
            y_prev = np.abs(warm[1])
            hint = y_prev > 10.0 * settings.qp.eps * (1.0 + float(y_prev.max()))
        try:
            box_qp = BoxQp(work.H, work.g, A, lo, hi, settings.qp,
                           scaling=qp_cache.get("scaling"), active_hint=hint)
            qp = box_qp.solve(warm)
            if not qp.converged and (hint is not None or warm is not None):
                # a stale active-set hint or warm point can poison the
                # iteration; one cold retry with fresh scaling
                box_qp = BoxQp(work.H, work.g, A, lo, hi, settings.qp)
                qp = box_qp.solve()
        except np.linalg.LinAlgError:
            status, message = "max-iterations", "QP KKT factorization failed"
            break
        qp_cache["scaling"] = (box_qp.D, box_qp.E)
        qp_cache["warm"] = (qp.z, qp.y)
        X_t, U_t = work.unpack(qp.z)
        dX, dU = X_t - X, U_t - U
        step_norm = max(float(np.max(np.abs(dX))), float(np.max(np.abs(dU))))

        # the current iterate may already satisfy the optimality conditions
        # (typical under warm starts); check before stepping so a noise-level
        # non-descent direction is not mistaken for a line-search failure
        stat_cur = float(np.max(np.abs(work.H @ work.pack(X, U) + work.g + A.T @ qp.y)))
        kkt = max(stat_cur, float(np.max(np.abs(defects))), tviol)
        if kkt < settings.kkt_tol or step_norm < settings.step_tol:
            status = "optimal"
            break

        # L1 merit line search
        y_hard = qp.y[:n_hard]
        mu = max(mu, 2.0 * float(np.max(np.abs(y_hard))) + 1.0)
        J_cur = work.cost(X, U)
        phi_cur = J_cur + mu * (defect_l1 + tviol)
        d_vec = work.pack(dX, dU)
        grad_dot = float((work.H @ work.pack(X, U) + work.g) @ d_vec)
        descent = grad_dot - mu * (defect_l1 + tviol)
        alpha = 1.0
        accepted = False
        for _ in range(settings.max_backtracks):
            X_n = X + alpha * dX
            U_n = U + alpha * dU
            preds_n = work.predictions(X_n, U_n)
            defect_l1_n = float(np.sum(np.abs(X_n[1:] - preds_n)))
            tviol_n = work.terminal_violation(X_n)
            phi_new = work.cost(X_n, U_n) + mu * (defect_l1_n + tviol_n)
            if phi_new <= phi_cur + settings.armijo * alpha * min(descent, 0.0):
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            status, message = "max-iterations", "merit line search failed"
            break
        if phi_new > phi_cur + 1e-9 * (1.0 + abs(phi_cur)):
            raise AssertionError("merit function increased across an accepted SQP step")

        X, U = X_n, U_n
        preds = preds_n
        defects = X[1:] - preds
        defect_l1 = defect_l1_n
        tviol = tviol_n

        stat = float(np.max(np.abs(work.H @ work.pack(X, U) + work.g + A.T @ qp.y)))
        kkt = max(stat, float(np.max(np.abs(defects))), tviol)
        if step_norm < settings.step_tol or kkt < settings.kkt_tol:
            status = "optimal"
            break

    # terminal restoration: pull x_N onto the ellipsoid if it still violates
    if cfg.enforce_terminal_set:
        d = X[-1] - work.Xref[-1]
        p_val = float(d @ cfg.P @ d)
        if p_val > cfg.gamma:
            X[-1] = work.Xref[-1] + d * np.sqrt(cfg.gamma / p_val) * (1.0 - 1e-12)

    U = np.clip(U, cfg.u_lo, cfg.u_hi)
    X[1:] = np.clip(X[1:], cfg.x_lo, cfg.x_hi)
    preds = work.predictions(X, U)
    defect_norm = float(np.max(np.abs(X[1:] - preds)))
    tviol = work.terminal_violation(X)
    if status == "optimal" and (defect_norm > 1e-6 or tviol > 1e-6):
        status = "max-iterations"
    J = work.cost(X, U)
    return OcpSolution(U, X, J, status, iterations, kkt, defect_norm, message), qp_cache


def solve_ocp(
    cfg: OcpConfig,
    x0: np.ndarray,
    warm: "OcpSolution | np.ndarray | None" = None,
    k0: int = 0,
    settings: SqpSettings | None = None,
) -> OcpSolution:
    """Solve the horizon problem from ``x0``; ``warm`` seeds the input sequence."""
    warm_inputs = warm.U_star if isinstance(warm, OcpSolution) else warm
    sol, _ = _solve_ocp_impl(cfg, x0, warm_inputs, k0, settings or SqpSettings(), None)
    return sol


class MpcController:
    """Stateful receding-horizon wrapper: warm starts and failure fallback.

    The warm start for step ``k+1`` is the previous optimal sequence shifted
    by one (last input repeated); states are re-rolled from the new
    measurement inside the solver.
    """

    def __init__(self, config: OcpConfig, settings: SqpSettings | None = None,
                 record_telemetry: bool = False):
        self.config = config
        self.settings = settings or SqpSettings()
        self.record_telemetry = record_telemetry
        self.telemetry: list[dict] = []
        self._warm: np.ndarray | None = None
        self._qp_cache: dict = {}
        self._last_u: np.ndarray | None = None

    def reset(self) -> None:
        self._warm = None
        self._qp_cache = {}
        self._last_u = None

    def step(self, x: np.ndarray, k: int) -> tuple[np.ndarray, OcpSolution]:
        t0 = time.perf_counter()
        sol, self._qp_cache = _solve_ocp_impl(
            self.config, x, self._warm, k, self.settings, self._qp_cache
        )
        fallback = sol.status == "infeasible" or not np.all(np.isfinite(sol.U_star[0]))
        if fallback:
            if self._last_u is not None:
                u = self._last_u.copy()
            else:
                u = np.clip(np.asarray(self.config.reference(k)[1], float),
                            self.config.u_lo, self.config.u_hi)
            self._warm = None
        else:
            u = sol.U_star[0].copy()
            self._warm = np.vstack([sol.U_star[1:], sol.U_star[-1:]])
        self._last_u = u.copy()
        if self.record_telemetry:
            self.telemetry.append(
                {
                    "step": k,
                    "sqp_iterations": sol.iterations,
                    "kkt_residual": sol.kkt_residual,
                    "J_star": sol.J_star,
                    "wall_time": time.perf_counter() - t0,
                    "status": sol.status,
                    "fallback": int(fallback),
                }
            )
        return u, sol

    def write_telemetry(self, path) -> None:
        cols = ["step", "sqp_iterations", "kkt_residual", "J_star", "wall_time", "status", "fallback"]
        lines = [",".join(cols)]
        for row in self.telemetry:
            lines.append(",".join(str(row[c]) for c in cols))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def evaluate_value_descent(ctl: MpcController, states: np.ndarray, k0: int = 0) -> np.ndarray:
    """Optimal-value differences ``J*(x_{k+1}) - J*(x_k)`` along recorded states.

    Solves are warm-chained in trajectory order, mirroring how the controller
    produced the trajectory.
    """
    values = []
    warm: OcpSolution | None = None
    for k, x in enumerate(np.asarray(states, float)):
        sol = solve_ocp(ctl.config, x, warm=warm, k0=k0 + k, settings=ctl.settings)
        values.append(sol.J_star)
        warm = np.vstack([sol.U_star[1:], sol.U_star[-1:]])
    return np.diff(np.asarray(values))
