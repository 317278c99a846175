"""Small tanh multilayer perceptrons with hand-derived backprop and Adam.

Networks are kept as plain lists of numpy arrays; forward and backward
accept row batches (``(batch, dim)``) as well as single vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

__all__ = [
    "MlpParams",
    "MlpGrads",
    "AdamState",
    "mlp_init",
    "mlp_forward",
    "mlp_backward",
    "adam_step",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass
class MlpParams:
    """Weights and biases of one network; tanh hidden layers, linear output."""

    weights: list[np.ndarray]  # each (out, in)
    biases: list[np.ndarray]  # each (out,)

    def __post_init__(self) -> None:
        if len(self.weights) == 0 or len(self.weights) != len(self.biases):
            raise ValueError("need one bias vector per weight matrix")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.ndim != 1 or W.shape[0] != b.shape[0]:
                raise ValueError(f"layer {i}: weight {W.shape} / bias {b.shape} mismatch")
            if i > 0 and W.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i}: input size {W.shape[1]} does not chain")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i}: non-finite parameter entries")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def copy(self) -> "MlpParams":
        return MlpParams([W.copy() for W in self.weights], [b.copy() for b in self.biases])


@dataclass
class MlpGrads:
    """Gradient arrays matching an :class:`MlpParams` layout (unvalidated)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.weights + self.biases)


def mlp_init(layer_sizes: list[int], seed: int) -> MlpParams:
    """Initialize weights uniformly in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``, biases zero."""
    if len(layer_sizes) < 2:
        raise ValueError("need at least an input and an output layer size")
    if any(s <= 0 for s in layer_sizes):
        raise ValueError(f"layer sizes must be positive, got {layer_sizes}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases)


def _forward_cached(p: MlpParams, z: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    a = np.asarray(z, dtype=float)
    if a.shape[-1] != p.weights[0].shape[1]:
        raise ValueError(f"input size {a.shape[-1]} != first layer size {p.weights[0].shape[1]}")
    acts = [a]
    last = len(p.weights) - 1
    for i, (W, b) in enumerate(zip(p.weights, p.biases)):
        a = a @ W.T + b
        if i < last:
            a = np.tanh(a)
        acts.append(a)
    return a, acts


def mlp_forward(p: MlpParams, z: np.ndarray) -> np.ndarray:
    """Evaluate the network; ``z`` may be a vector or a row batch."""
    return _forward_cached(p, z)[0]


def mlp_backward(p: MlpParams, z: np.ndarray, upstream: np.ndarray) -> tuple[MlpGrads, np.ndarray]:
    """Reverse-mode gradients of ``sum(upstream * mlp_forward(p, z))``.

    Returns the gradient w.r.t. each parameter array and w.r.t. ``z``.
    Batched calls sum the parameter gradients over the batch.
    """
    out, acts = _forward_cached(p, z)
    delta = np.asarray(upstream, dtype=float)
    if delta.shape != out.shape:
        raise ValueError(f"upstream shape {delta.shape} != output shape {out.shape}")
    squeeze = delta.ndim == 1
    if squeeze:
        delta = delta[None, :]
        acts = [a[None, :] for a in acts]
    gw = [np.empty(0)] * len(p.weights)
    gb = [np.empty(0)] * len(p.weights)
    for i in range(len(p.weights) - 1, -1, -1):
        gw[i] = delta.T @ acts[i]
        gb[i] = delta.sum(axis=0)
        delta = delta @ p.weights[i]
        if i > 0:
            delta = delta * (1.0 - acts[i] ** 2)  # tanh'(s) in terms of the activation
    dz = delta[0] if squeeze else delta
    return MlpGrads(gw, gb), dz


@dataclass
class AdamState:
    """Adam accumulators plus hyperparameters; one instance per training run."""

    m_w: list[np.ndarray]
    m_b: list[np.ndarray]
    v_w: list[np.ndarray]
    v_b: list[np.ndarray]
    step: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def init(cls, p: MlpParams, lr: float, weight_decay: float = 0.0, **kw) -> "AdamState":
        def zeros():
            return [np.zeros_like(W) for W in p.weights], [np.zeros_like(b) for b in p.biases]

        (mw, mb), (vw, vb) = zeros(), zeros()
        return cls(mw, mb, vw, vb, 0, lr, weight_decay=weight_decay, **kw)


def adam_step(p: MlpParams, g: MlpGrads, s: AdamState) -> tuple[MlpParams, AdamState]:
    """One bias-corrected Adam update with decoupled weight decay.

    The decay ``p <- p - lr * wd * p`` is applied before the Adam update so
    its magnitude does not get rescaled by the adaptive step.
    """
    if not g.is_finite():
        raise ValueError("non-finite gradient entries")
    t = s.step + 1
    c1 = 1.0 - s.beta1**t
    c2 = 1.0 - s.beta2**t
    shrink = 1.0 - s.lr * s.weight_decay

    def upd(param, grad, m, v):
        m_new = s.beta1 * m + (1.0 - s.beta1) * grad
        v_new = s.beta2 * v + (1.0 - s.beta2) * grad**2
        step = s.lr * (m_new / c1) / (np.sqrt(v_new / c2) + s.eps)
        return param * shrink - step, m_new, v_new

    new_w, new_b, mw, mb, vw, vb = [], [], [], [], [], []
    for i in range(len(p.weights)):
        W, m, v = upd(p.weights[i], g.weights[i], s.m_w[i], s.v_w[i])
        new_w.append(W), mw.append(m), vw.append(v)
        b, m, v = upd(p.biases[i], g.biases[i], s.m_b[i], s.v_b[i])
        new_b.append(b), mb.append(m), vb.append(v)
    return MlpParams(new_w, new_b), replace(s, m_w=mw, m_b=mb, v_w=vw, v_b=vb, step=t)


# Checkpoints are plain text: layer sizes, seed, then one row-major array per
# line, 17 significant digits so values round-trip exactly.

def _fmt(a: np.ndarray) -> str:
    return " ".join(f"{v:.17g}" for v in np.asarray(a).ravel())


def save_checkpoint(path: str | Path, p: MlpParams, seed: int) -> None:
    lines = ["mlp-checkpoint v1", "layers: " + " ".join(str(s) for s in p.layer_sizes),
             f"seed: {int(seed)}"]
    for i, (W, b) in enumerate(zip(p.weights, p.biases), start=1):
        lines.append(f"W{i}: {_fmt(W)}")
        lines.append(f"b{i}: {_fmt(b)}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path: str | Path) -> tuple[MlpParams, int]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "mlp-checkpoint v1":
        raise ValueError(f"{path}: not an mlp checkpoint")
    sizes = [int(s) for s in lines[1].split(":", 1)[1].split()]
    seed = int(lines[2].split(":", 1)[1])
    weights, biases = [], []
    idx = 3
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        W = np.array([float(v) for v in lines[idx].split(":", 1)[1].split()])
        b = np.array([float(v) for v in lines[idx + 1].split(":", 1)[1].split()])
        weights.append(W.reshape(fan_out, fan_in))
        biases.append(b)
        idx += 2
    return MlpParams(weights, biases), seed
