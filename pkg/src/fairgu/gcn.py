"""Two-layer graph convolutional classifier with exact reverse-mode
gradients and an Adam optimizer, all in plain numpy.

Forward pass, with A~ the normalized adjacency and sigma the sigmoid:

    H1    = relu(A~ X W1)
    probs = sigma(A~ H1 W2)

Hard labels come from thresholding probs at 0.5 (ties map to 1).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractError, NumericError, ValidationError

PROB_EPS = 1e-7
DEFAULT_HIDDEN = 16


@dataclass(frozen=True)
class ShardModel:
    """Weights of one two-layer GCN; shapes are shared across shards."""

    w1: np.ndarray  # (feature_dim, hidden_dim)
    w2: np.ndarray  # (hidden_dim, 1)


@dataclass(frozen=True)
class AdamState:
    """Adam moments plus hyperparameters (decoupled weight decay)."""

    m1: np.ndarray
    v1: np.ndarray
    m2: np.ndarray
    v2: np.ndarray
    step: int = 0
    lr: float = 1e-3
    weight_decay: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class Predictions:
    """Per-node positive-class probabilities plus the intermediates the
    backward pass needs. probs is clamped to [PROB_EPS, 1-PROB_EPS].
    """

    probs: np.ndarray
    prop_features: np.ndarray | None = None  # A~ X
    pre_hidden: np.ndarray | None = None     # A~ X W1 (pre-activation)
    prop_hidden: np.ndarray | None = None    # A~ relu(pre_hidden)

    @property
    def has_cache(self) -> bool:
        return self.pre_hidden is not None


def init_model(feature_dim: int, hidden_dim: int, rng: np.random.Generator) -> ShardModel:
    """Seeded uniform init in +-sqrt(6 / (fan_in + fan_out))."""
    b1 = np.sqrt(6.0 / (feature_dim + hidden_dim))
    b2 = np.sqrt(6.0 / (hidden_dim + 1))
    return ShardModel(rng.uniform(-b1, b1, size=(feature_dim, hidden_dim)),
                      rng.uniform(-b2, b2, size=(hidden_dim, 1)))


def init_adam(model: ShardModel, lr: float = 1e-3, weight_decay: float = 1e-3) -> AdamState:
    return AdamState(np.zeros_like(model.w1), np.zeros_like(model.w1),
                     np.zeros_like(model.w2), np.zeros_like(model.w2),
                     lr=lr, weight_decay=weight_decay)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def forward(model: ShardModel, adj, features: np.ndarray) -> Predictions:
    if features.shape[1] != model.w1.shape[0]:
        raise ValidationError(
            f"feature dim {features.shape[1]} does not match W1 rows {model.w1.shape[0]}")
    prop_features = adj @ features
    pre_hidden = prop_features @ model.w1
    hidden = np.maximum(pre_hidden, 0.0)
    prop_hidden = adj @ hidden
    probs = _sigmoid(prop_hidden @ model.w2).ravel()
    probs = np.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    return Predictions(probs, prop_features, pre_hidden, prop_hidden)


def utility_loss(pred: Predictions, labels: np.ndarray, mask: np.ndarray) -> float:
    """Mean binary cross-entropy over the masked nodes."""
    return utility_loss_grad(pred, labels, mask)[0]


def utility_loss_grad(pred: Predictions, labels: np.ndarray, mask: np.ndarray):
    """Mean BCE over the mask plus its gradient w.r.t. each probability."""
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ValidationError("utility loss needs a non-empty mask")
    p = pred.probs[mask]
    y = labels[mask].astype(np.float64)
    loss = float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))
    grad = np.zeros_like(pred.probs)
    grad[mask] = (p - y) / (p * (1.0 - p)) / count
    return loss, grad


def backward(model: ShardModel, pred: Predictions, adj, features: np.ndarray,
             loss_grad: np.ndarray):
    """Exact gradients (dW1, dW2) of a scalar loss whose per-node
    probability-gradient is loss_grad. ReLU subgradient at 0 is 0.
    """
    if not pred.has_cache:
        raise ContractError("backward needs the cache from a matching forward call")
    p = pred.probs
    d_logit = (loss_grad * p * (1.0 - p))[:, None]          # through the sigmoid
    d_w2 = pred.prop_hidden.T @ d_logit
    d_prop_hidden = d_logit @ model.w2.T
    d_hidden = adj @ d_prop_hidden                           # adj is symmetric
    d_pre = d_hidden * (pred.pre_hidden > 0.0)
    d_w1 = pred.prop_features.T @ d_pre
    return d_w1, d_w2


def adam_step(model: ShardModel, state: AdamState, grads) -> tuple[ShardModel, AdamState]:
    """One Adam step with decoupled weight decay; returns new model/state."""
    g1, g2 = grads
    for name, g in (("W1", g1), ("W2", g2)):
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    t = state.step + 1
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t

    def update(w, g, m, v):
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        w = w - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        w = w - state.lr * state.weight_decay * w
        return w, m, v

    w1, m1, v1 = update(model.w1, g1, state.m1, state.v1)
    w2, m2, v2 = update(model.w2, g2, state.m2, state.v2)
    return ShardModel(w1, w2), replace(state, m1=m1, v1=v1, m2=m2, v2=v2, step=t)


def predict_labels(pred: Predictions) -> np.ndarray:
    """Hard 0/1 labels: probability >= 0.5 maps to 1."""
    return (pred.probs >= 0.5).astype(np.int8)
