"""Hybrid dynamics models: nominal field plus a learned neural residual.

One-step predictions follow the frozen-argument convention: the field is
evaluated once at the measured sample ``(x_i, u_i)`` and held constant over
the sampling interval, so the integral collapses to
``x + dt * (f_nominal(x, u) + residual(x, u))``.  This keeps the training
gradient an exact chain rule through the residual network.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .net import AdamState, MlpGrads, MlpParams, adam_step, mlp_backward, mlp_forward, mlp_init
from .ode import DynamicsFn, IntegratorConfig

__all__ = [
    "KnodeModel",
    "TrajectoryDataset",
    "TrainingConfig",
    "TrainingDivergedError",
    "one_step_predict",
    "knode_loss",
    "knode_loss_gradient",
    "train_knode",
]

ResidualFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class KnodeModel:
    """Nominal vector field plus residual network sharing one integrator."""

    nominal: DynamicsFn
    residual: MlpParams
    integrator: IntegratorConfig


class TrainingDivergedError(RuntimeError):
    """Training loss went non-finite; the loss history so far is attached."""

    def __init__(self, epoch: int, history: np.ndarray):
        self.epoch = epoch
        self.history = history
        super().__init__(f"training diverged at epoch {epoch}")


@dataclass(frozen=True)
class TrajectoryDataset:
    """Uniformly sampled ``(t_i, x_i, u_i)`` triples from one run."""

    t: np.ndarray  # (M,)
    x: np.ndarray  # (M, n)
    u: np.ndarray  # (M, m)
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.t.ndim != 1 or self.x.ndim != 2 or self.u.ndim != 2:
            raise ValueError("expected t (M,), x (M, n), u (M, m)")
        if not (len(self.t) == len(self.x) == len(self.u)):
            raise ValueError("t, x, u must have the same number of samples")
        if len(self.t) >= 2:
            dts = np.diff(self.t)
            if np.any(dts <= 0):
                raise ValueError("timestamps must be strictly increasing")
            if np.max(np.abs(dts - dts[0])) > 1e-12:
                raise ValueError("timestamps must be uniformly spaced (tol 1e-12)")

    @property
    def n_samples(self) -> int:
        return len(self.t)

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    @property
    def state_dim(self) -> int:
        return self.x.shape[1]

    @property
    def input_dim(self) -> int:
        return self.u.shape[1]

    def slice(self, start: int, stop: int) -> "TrajectoryDataset":
        return TrajectoryDataset(self.t[start:stop], self.x[start:stop], self.u[start:stop],
                                 dict(self.meta))

    def save(self, path: str | Path) -> None:
        """Write as delimited text: provenance comments, header, one sample per line."""
        n, m = self.state_dim, self.input_dim
        header = ",".join(["t"] + [f"x{i + 1}" for i in range(n)] + [f"u{j + 1}" for j in range(m)])
        lines = ["# knodempc-dataset v1"]
        if self.meta:
            kv = " ".join(f"{k}={self.meta[k]}" for k in sorted(self.meta))
            lines.append(f"# {kv}")
        lines.append(header)
        rows = np.hstack([self.t[:, None], self.x, self.u])
        for row in rows:
            lines.append(",".join(f"{v:.17g}" for v in row))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "TrajectoryDataset":
        meta: dict = {}
        header = None
        data_rows = []
        for line in Path(path).read_text().splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                for token in body.split():
                    if "=" in token:
                        k, v = token.split("=", 1)
                        meta[k] = v
                continue
            if header is None:
                header = line.split(",")
                continue
            data_rows.append([float(v) for v in line.split(",")])
        if header is None:
            raise ValueError(f"{path}: no header row")
        n = sum(1 for c in header if c.startswith("x"))
        m = sum(1 for c in header if c.startswith("u"))
        arr = np.asarray(data_rows, dtype=float)
        return cls(arr[:, 0], arr[:, 1 : 1 + n], arr[:, 1 + n : 1 + n + m], meta)


def one_step_predict(
    model: KnodeModel, x: np.ndarray, u: np.ndarray, t: float, dt: float
) -> np.ndarray:
    """Predict the successor state with the field frozen at ``(x, u)``."""
    residual = lambda xs, us: mlp_forward(model.residual, np.concatenate([xs, us], axis=-1))
    return predict_transitions(model.nominal, residual, x, u, t, dt)


def predict_transitions(
    nominal: DynamicsFn,
    residual: ResidualFn | None,
    x: np.ndarray,
    u: np.ndarray,
    t: float | np.ndarray,
    dt: float,
) -> np.ndarray:
    """Frozen-field one-step prediction, shared by single models and ensembles."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    deriv = np.asarray(nominal(x, u, t), dtype=float)
    if residual is not None:
        deriv = deriv + residual(x, u)
    if not np.all(np.isfinite(deriv)):
        raise ValueError("non-finite field value in one-step prediction")
    return x + dt * deriv


def _transition_views(data: TrajectoryDataset):
    if data.n_samples < 2:
        raise ValueError("need at least 2 samples")
    return data.t[:-1], data.x[:-1], data.u[:-1], data.x[1:]


def knode_loss(model: KnodeModel, data: TrajectoryDataset) -> float:
    """Mean squared one-step prediction error over all transitions."""
    ts, xs, us, targets = _transition_views(data)
    pred = one_step_predict(model, xs, us, ts, data.dt)
    return float(np.mean(np.sum((pred - targets) ** 2, axis=1)))


def _loss_and_grad(model: KnodeModel, data: TrajectoryDataset) -> tuple[float, MlpGrads]:
    ts, xs, us, targets = _transition_views(data)
    dt = data.dt
    z = np.concatenate([xs, us], axis=-1)
    base = xs + dt * np.asarray(model.nominal(xs, us, ts), dtype=float)
    pred = base + dt * mlp_forward(model.residual, z)
    err = pred - targets
    loss = float(np.mean(np.sum(err**2, axis=1)))
    upstream = (2.0 * dt / err.shape[0]) * err
    grads, _ = mlp_backward(model.residual, z, upstream)
    return loss, grads


def knode_loss_gradient(model: KnodeModel, data: TrajectoryDataset) -> MlpGrads:
    """Exact gradient of :func:`knode_loss` w.r.t. the residual parameters."""
    loss, grads = _loss_and_grad(model, data)
    if not (np.isfinite(loss) and grads.is_finite()):
        raise ValueError("non-finite loss gradient")
    return grads


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int
    learning_rate: float
    weight_decay: float
    layer_sizes: list[int]
    seed: int


def train_knode(
    nominal: DynamicsFn,
    data: TrajectoryDataset,
    hyper: TrainingConfig,
    integrator: IntegratorConfig | None = None,
) -> tuple[KnodeModel, np.ndarray]:
    """Full-batch Adam on the one-step loss; returns the model and loss history.

    The history has ``epochs + 1`` entries: the loss before each update plus
    the final model's loss.
    """
    if data.n_samples < 2:
        raise ValueError("dataset must contain at least 2 samples")
    sizes = list(hyper.layer_sizes)
    want_in, want_out = data.state_dim + data.input_dim, data.state_dim
    if sizes[0] != want_in or sizes[-1] != want_out:
        raise ValueError(f"layer sizes {sizes} do not match dataset dims ({want_in} -> {want_out})")
    integrator = integrator or IntegratorConfig(dt=data.dt)
    params = mlp_init(sizes, hyper.seed)
    state = AdamState.init(params, hyper.learning_rate, hyper.weight_decay)
    model = KnodeModel(nominal, params, integrator)
    history = np.empty(hyper.epochs + 1)
    for epoch in range(hyper.epochs):
        loss, grads = _loss_and_grad(model, data)
        history[epoch] = loss
        if not (np.isfinite(loss) and grads.is_finite()):
            raise TrainingDivergedError(epoch, history[:epoch].copy())
        params, state = adam_step(params, grads, state)
        model = KnodeModel(nominal, params, integrator)
    history[-1] = knode_loss(model, data)
    if not np.isfinite(history[-1]):
        raise TrainingDivergedError(hyper.epochs, history[:-1].copy())
    return model, history
