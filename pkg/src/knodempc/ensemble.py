"""Ensembles of residual networks fused by simplex-constrained weights.

Because every member's one-step prediction freezes the field at the sample,
the ensemble prediction is exactly the weight-convex combination of member
predictions; weight optimization therefore reduces to a small convex problem
over precomputed member predictions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .knode import TrajectoryDataset, predict_transitions
from .net import MlpParams, load_checkpoint, mlp_forward
from .ode import DynamicsFn

__all__ = [
    "KnodeEnsemble",
    "SplitSpec",
    "WeightOptConfig",
    "split_dataset",
    "equal_weights",
    "ensemble_residual",
    "ensemble_predict",
    "project_simplex",
    "member_predictions",
    "holdout_loss",
    "optimize_weights",
    "save_manifest",
    "load_manifest",
]


@dataclass(frozen=True)
class KnodeEnsemble:
    """Shared nominal model, member networks, and their mixing weights."""

    nominal: DynamicsFn
    members: list[MlpParams]
    weights: np.ndarray

    def __post_init__(self) -> None:
        if len(self.members) < 1:
            raise ValueError("ensemble needs at least one member")
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (len(self.members),):
            raise ValueError(f"got {len(w)} weights for {len(self.members)} members")
        if abs(float(w.sum()) - 1.0) > 1e-9:
            raise ValueError(f"weights must sum to 1, got {w.sum()!r}")
        if np.any(w < -1e-12):
            raise ValueError("weights must be nonnegative")

    @property
    def size(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float
    mode: str = "chronological"

    def __post_init__(self) -> None:
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(f"train fraction must be in (0, 1), got {self.train_fraction}")
        if self.mode != "chronological":
            raise ValueError(f"unsupported split mode {self.mode!r}")


def split_dataset(data: TrajectoryDataset, spec: SplitSpec) -> tuple[TrajectoryDataset, TrajectoryDataset]:
    """Chronological prefix/suffix split; both sides keep order and timestamps."""
    if data.n_samples < 4:
        raise ValueError("need at least 4 samples to split")
    cut = int(np.ceil(spec.train_fraction * data.n_samples))
    train, holdout = data.slice(0, cut), data.slice(cut, data.n_samples)
    if train.n_samples < 2 or holdout.n_samples < 2:
        raise ValueError(f"degenerate split {train.n_samples}/{holdout.n_samples}")
    return train, holdout


def equal_weights(n_members: int) -> np.ndarray:
    """Uniform weights; the last entry absorbs rounding so the sum is exactly 1."""
    if n_members < 1:
        raise ValueError("need at least one member")
    w = np.full(n_members, 1.0 / n_members)
    w[-1] = 1.0 - float(w[:-1].sum())
    return w


def ensemble_residual(e: KnodeEnsemble, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Weighted average of member residual fields at ``(x, u)``."""
    z = np.concatenate([np.asarray(x, float), np.asarray(u, float)], axis=-1)
    out = e.weights[0] * mlp_forward(e.members[0], z)
    for w, member in zip(e.weights[1:], e.members[1:]):
        out = out + w * mlp_forward(member, z)
    return out


def ensemble_predict(e: KnodeEnsemble, x: np.ndarray, u: np.ndarray, t: float, dt: float) -> np.ndarray:
    """One-step prediction with the residual replaced by the ensemble average."""
    return predict_transitions(e.nominal, lambda xs, us: ensemble_residual(e, xs, us), x, u, t, dt)


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, v.size + 1)
    rho = ind[u - css / ind > 0][-1]
    theta = css[rho - 1] / rho
    return np.maximum(v - theta, 0.0)


def member_predictions(
    members: list[MlpParams], nominal: DynamicsFn, data: TrajectoryDataset
) -> tuple[np.ndarray, np.ndarray]:
    """Per-member one-step predictions for every transition in ``data``.

    Returns ``(preds, targets)`` with ``preds`` of shape ``(M-1, L, n)``.
    The weights do not enter here, so this is computed once per optimization.
    """
    ts, xs, us = data.t[:-1], data.x[:-1], data.u[:-1]
    preds = np.stack(
        [
            predict_transitions(
                nominal,
                lambda a, b, m=m: mlp_forward(m, np.concatenate([a, b], axis=-1)),
                xs, us, ts, data.dt,
            )
            for m in members
        ],
        axis=1,
    )
    return preds, data.x[1:]


def holdout_loss(weights: np.ndarray, preds: np.ndarray, targets: np.ndarray) -> float:
    """Mean squared error of the weight-combined predictions."""
    combined = np.einsum("ilk,l->ik", preds, np.asarray(weights, float))
    return float(np.mean(np.sum((combined - targets) ** 2, axis=1)))


@dataclass(frozen=True)
class WeightOptConfig:
    epochs: int
    learning_rate: float
    weight_decay: float
    nonnegative: bool = True


def optimize_weights(
    members: list[MlpParams],
    nominal: DynamicsFn,
    holdout: TrajectoryDataset,
    hyper: WeightOptConfig,
) -> np.ndarray:
    """Minimize the hold-out prediction error over the mixing weights.

    Projected gradient with an Adam direction: after every update the iterate
    is projected back onto the probability simplex (or onto the sum-to-one
    hyperplane when ``nonnegative`` is off).  Starts from uniform weights and
    returns the best feasible iterate seen, so the result can never lose to
    equal weights.
    """
    L = len(members)
    if L < 1:
        raise ValueError("need at least one member")
    if holdout.n_samples < 2:
        raise ValueError("hold-out set needs at least 2 samples")
    preds, targets = member_predictions(members, nominal, holdout)
    if L == 1:
        return np.array([1.0])

    def project(w: np.ndarray) -> np.ndarray:
        if hyper.nonnegative:
            return project_simplex(w)
        return w - (w.sum() - 1.0) / len(w)

    def check_feasible(w: np.ndarray) -> None:
        if abs(float(w.sum()) - 1.0) > 1e-9 or (hyper.nonnegative and np.any(w < 0.0)):
            raise AssertionError(f"weight iterate left the feasible set: {w}")

    scale = 2.0 / preds.shape[0]
    alpha = equal_weights(L)
    best, best_loss = alpha.copy(), holdout_loss(alpha, preds, targets)
    m = np.zeros(L)
    v = np.zeros(L)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    for t in range(1, hyper.epochs + 1):
        resid = np.einsum("ilk,l->ik", preds, alpha) - targets
        grad = scale * np.einsum("ik,ilk->l", resid, preds)
        if not np.all(np.isfinite(grad)):
            raise ValueError("non-finite weight-optimization gradient")
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad**2
        step = hyper.learning_rate * (m / (1.0 - beta1**t)) / (np.sqrt(v / (1.0 - beta2**t)) + eps)
        alpha = project(alpha * (1.0 - hyper.learning_rate * hyper.weight_decay) - step)
        check_feasible(alpha)
        loss = holdout_loss(alpha, preds, targets)
        if not np.isfinite(loss):
            raise ValueError("non-finite weight-optimization loss")
        if loss < best_loss:
            best, best_loss = alpha.copy(), loss
    return best


def save_manifest(
    path: str | Path,
    member_paths: list[str],
    weights: np.ndarray,
    nominal_id: str,
    split: SplitSpec,
    training: dict,
    extra: dict | None = None,
) -> None:
    """Write the ensemble manifest (JSON, sorted keys, exact float round-trip)."""
    doc = {
        "format": "knodempc-ensemble v1",
        "members": list(member_paths),
        "weights": [float(w) for w in np.asarray(weights).ravel()],
        "nominal_model": nominal_id,
        "split": {"train_fraction": split.train_fraction, "mode": split.mode},
        "training": training,
    }
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_manifest(path: str | Path) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "knodempc-ensemble v1":
        raise ValueError(f"{path}: not an ensemble manifest")
    return doc


def load_members(manifest: dict, base_dir: str | Path) -> list[MlpParams]:
    base = Path(base_dir)
    return [load_checkpoint(base / rel)[0] for rel in manifest["members"]]
