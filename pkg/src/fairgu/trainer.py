"""Shard training, importance-weighted aggregation and the debiased
unlearning retraining loop.

Each shard owns an independently trained two-layer GCN. A simplex vector of
importance weights (kept positive and normalized by construction through a
softmax over logits) mixes the shard models into the deployed predictor,
either by averaging weights or by mixing posteriors. Unlearning re-seeds the
affected shard models and retrains every shard under a composite loss: its
own cross-entropy, a shard-level group-gap penalty, and a coupling term that
pulls the aggregated model toward low global disparity. Shard updates and
importance updates alternate on a fixed period.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ValidationError
from .gcn import (AdamState, Predictions, ShardModel, adam_step, backward,
                  forward, init_adam, init_model, utility_loss_grad)
from .graph import Graph, normalize_adjacency
from .metrics import soft_group_gap

AGGREGATION_MODES = ("weights", "posteriors")

# Seed-derivation tags (entropy stream labels, not magic values).
_INIT_TAG = 1
_V0_TAG = 2

_CKPT_MAGIC = b"FGUCKPT1"


def softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - np.max(x))
    return z / z.sum()


@dataclass(frozen=True)
class ImportanceScores:
    """Unconstrained logits; weights() maps them onto the open simplex."""

    logits: np.ndarray

    def weights(self) -> np.ndarray:
        return softmax(self.logits)


@dataclass(frozen=True)
class FguConfig:
    k: int = 5
    epochs: int = 100
    eta: float = 1e-3
    alpha: float = 3.0       # global fairness weight
    beta: float = 1.5        # per-shard coupling to the global loss
    alpha_k: float | None = None  # shard fairness weight; defaults to alpha
    t1: int = 5              # importance-update period in epochs
    seed: int = 0
    aggregation_mode: str = "weights"
    hidden_dim: int = 16
    weight_decay: float = 1e-3

    def __post_init__(self):
        if self.k < 1:
            raise ValidationError("k must be >= 1")
        if self.alpha < 0 or self.beta < 0 or (self.alpha_k is not None and self.alpha_k < 0):
            raise ValidationError("fairness weights must be >= 0")
        if self.t1 < 1:
            raise ValidationError("t1 must be >= 1")
        if self.aggregation_mode not in AGGREGATION_MODES:
            raise ValidationError(f"aggregation_mode must be one of {AGGREGATION_MODES}")

    @property
    def shard_alpha(self) -> float:
        return self.alpha if self.alpha_k is None else self.alpha_k


@dataclass
class FguState:
    models: list[ShardModel]
    importance: ImportanceScores
    opt_states: list[AdamState]
    epoch: int = 0
    events: list[str] = field(default_factory=list)
    lambda_history: list[np.ndarray] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.models)


def config_hash(cfg: FguConfig) -> str:
    text = ";".join(f"{name}={getattr(cfg, name)!r}" for name in sorted(cfg.__dataclass_fields__))
    return hashlib.sha256(text.encode()).hexdigest()


def model_init_rng(cfg: FguConfig) -> np.random.Generator:
    """Weight-init stream. Every shard (and every re-initialized dirty shard)
    draws from a fresh copy, so all shards share one initial weight vector;
    weight-space averaging needs the shard models to start aligned.
    """
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, _INIT_TAG]))


def fresh_model(cfg: FguConfig, feature_dim: int) -> ShardModel:
    return init_model(feature_dim, cfg.hidden_dim, model_init_rng(cfg))


def lambda_sample_masks(shards, cfg: FguConfig) -> list[np.ndarray]:
    """Seeded ~50% subsample of each shard's training nodes, used as the
    utility target for importance updates during initial training.
    """
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _V0_TAG]))
    masks = []
    for shard in shards:
        pick = rng.random(shard.num_nodes) < 0.5
        mask = shard.mask("train") & pick
        if not mask.any():
            mask = shard.mask("train") if shard.mask("train").any() else np.ones(shard.num_nodes, bool)
        masks.append(mask)
    return masks


def _train_mask(shard: Graph, index: int, events: list[str]) -> np.ndarray:
    mask = shard.mask("train")
    if not mask.any():
        events.append(f"shard {index}: no training nodes, training on all {shard.num_nodes} nodes")
        mask = np.ones(shard.num_nodes, dtype=bool)
    return mask


def combine_models(models, lam) -> ShardModel:
    w1 = sum(l * m.w1 for l, m in zip(lam, models))
    w2 = sum(l * m.w2 for l, m in zip(lam, models))
    return ShardModel(w1, w2)


def _composite_grad(pred, labels, sensitive, u_mask, f_mask, alpha):
    """Loss value and d(loss)/d(prob) for CE(u_mask) + alpha * gap(f_mask)."""
    loss, grad = utility_loss_grad(pred, labels, u_mask)
    if alpha > 0.0 and f_mask is not None:
        gap, gap_grad = soft_group_gap(pred.probs, sensitive, f_mask)
        loss += alpha * gap
        grad = grad + alpha * gap_grad
    return loss, grad


def importance_gradient(models, logits, blocks, alpha, mode):
    """Loss and gradient w.r.t. the importance logits of the aggregated
    model's composite loss over evaluation blocks.

    Each block is (adj, features, labels, sensitive, u_mask, f_mask): the
    utility term is the mean cross-entropy over the union of u_masks, the
    fairness term the probability-gap over the union of f_masks. In weights
    mode the gradient flows through the averaged weights; in posteriors mode
    through the probability mixture.
    """
    lam = softmax(logits)
    k = len(models)
    total_count = sum(int(np.asarray(b[4], bool).sum()) for b in blocks)
    if total_count == 0:
        raise ValidationError("importance update needs at least one utility node")

    if mode == "weights":
        agg = combine_models(models, lam)
        preds = [forward(agg, adj, feats) for adj, feats, *_ in blocks]
    else:
        per_model = [[forward(m, adj, feats) for m in models] for adj, feats, *_ in blocks]
        preds = [Predictions(sum(l * p.probs for l, p in zip(lam, row))) for row in per_model]

    # Cross-entropy over the union of utility masks.
    loss = 0.0
    grads = []
    for pred, (adj, feats, labels, sensitive, u_mask, f_mask) in zip(preds, blocks):
        u_mask = np.asarray(u_mask, bool)
        grad = np.zeros_like(pred.probs)
        if u_mask.any():
            p, y = pred.probs[u_mask], labels[u_mask].astype(np.float64)
            loss += float(np.sum(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))) / total_count
            grad[u_mask] = (p - y) / (p * (1.0 - p)) / total_count
        grads.append(grad)

    # Group gap over the union of fairness masks.
    if alpha > 0.0:
        sums = np.zeros(2)
        counts = np.zeros(2, dtype=np.int64)
        for pred, (_, _, _, sensitive, _, f_mask) in zip(preds, blocks):
            if f_mask is None:
                continue
            for s in (0, 1):
                m = np.asarray(f_mask, bool) & (sensitive == s)
                sums[s] += float(pred.probs[m].sum())
                counts[s] += int(m.sum())
        if counts.min() > 0:
            gap = sums[0] / counts[0] - sums[1] / counts[1]
            loss += alpha * abs(gap)
            s_gap = float(np.sign(gap))
            for grad, pred, (_, _, _, sensitive, _, f_mask) in zip(grads, preds, blocks):
                if f_mask is None:
                    continue
                f = np.asarray(f_mask, bool)
                grad[f & (sensitive == 0)] += alpha * s_gap / counts[0]
                grad[f & (sensitive == 1)] += alpha * -s_gap / counts[1]

    d_lam = np.zeros(k)
    if mode == "weights":
        g1 = np.zeros_like(models[0].w1)
        g2 = np.zeros_like(models[0].w2)
        for pred, grad, (adj, feats, *_) in zip(preds, grads, blocks):
            d1, d2 = backward(agg, pred, adj, feats, grad)
            g1 += d1
            g2 += d2
        for j, m in enumerate(models):
            d_lam[j] = float(np.sum(g1 * m.w1) + np.sum(g2 * m.w2))
    else:
        for row, grad in zip(per_model, grads):
            for j, p in enumerate(row):
                d_lam[j] += float(np.dot(grad, p.probs))

    # Softmax Jacobian: d loss / d logit_j = lam_j (d_lam_j - <lam, d_lam>).
    grad_logits = lam * (d_lam - float(np.dot(lam, d_lam)))
    return loss, grad_logits


def _importance_step(models, logits, blocks, alpha, cfg: FguConfig) -> np.ndarray:
    _, grad = importance_gradient(models, logits, blocks, alpha, cfg.aggregation_mode)
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite importance gradient")
    return logits - cfg.eta * grad


def train_shards(shards, cfg: FguConfig) -> FguState:
    """Train one GCN per shard on its own training nodes, learning the
    shard importance weights alongside.

    Per epoch: each shard takes one Adam step on its cross-entropy; on
    epochs where ``epoch % t1 == 0`` (including epoch 0) the importance
    logits take one descent step on the aggregated model's cross-entropy
    over a seeded subsample of training nodes. Deterministic under cfg.seed.
    """
    if not shards:
        raise ValidationError("train_shards needs at least one shard")
    dims = {s.feature_dim for s in shards}
    if len(dims) != 1:
        raise ValidationError(f"shards disagree on feature_dim: {sorted(dims)}")
    (feature_dim,) = dims

    events: list[str] = []
    models = [fresh_model(cfg, feature_dim) for _ in shards]
    opts = [init_adam(m, lr=cfg.eta, weight_decay=cfg.weight_decay) for m in models]
    adjs = [normalize_adjacency(s) for s in shards]
    masks = [_train_mask(s, i, events) for i, s in enumerate(shards)]
    v0 = lambda_sample_masks(shards, cfg)
    blocks = [(adjs[i], shards[i].features, shards[i].labels, shards[i].sensitive, v0[i], None)
              for i in range(len(shards))]

    logits = np.zeros(len(shards))
    history = [softmax(logits)]
    for epoch in range(cfg.epochs):
        for i, shard in enumerate(shards):
            pred = forward(models[i], adjs[i], shard.features)
            _, grad = utility_loss_grad(pred, shard.labels, masks[i])
            grads = backward(models[i], pred, adjs[i], shard.features, grad)
            models[i], opts[i] = adam_step(models[i], opts[i], grads)
        if epoch % cfg.t1 == 0:
            logits = _importance_step(models, logits, blocks, 0.0, cfg)
        history.append(softmax(logits))

    return FguState(models, ImportanceScores(logits), opts,
                    epoch=cfg.epochs, events=events, lambda_history=history)


def aggregate(state: FguState, g: Graph, mode: str = "weights") -> Predictions:
    """Predictions of the deployed model on a full graph.

    weights mode averages shard weights by importance and runs one forward
    pass (cache included); posteriors mode mixes each shard model's
    probabilities (no cache, evaluation only).
    """
    if mode not in AGGREGATION_MODES:
        raise ValidationError(f"mode must be one of {AGGREGATION_MODES}")
    lam = state.importance.weights()
    adj = normalize_adjacency(g)
    if mode == "weights":
        return forward(combine_models(state.models, lam), adj, g.features)
    mixed = sum(l * forward(m, adj, g.features).probs for l, m in zip(lam, state.models))
    return Predictions(mixed)


def fgu_unlearn_retrain(state: FguState, updated_shards, dirty, g_prime: Graph,
                        cfg: FguConfig) -> FguState:
    """Exact unlearning with debiased retraining.

    Dirty shard models are re-initialized from the deterministic init stream
    (no warm start, so nothing about deleted data survives in them), every
    optimizer state is reset, and all shards then run the debiasing loop:

    per epoch: (a) average the shard weights by importance, (b) compute the
    global composite loss on g_prime (cross-entropy on training nodes plus
    alpha times the group gap over all nodes) and its gradient, (c) give each
    shard one Adam step on its own cross-entropy + shard_alpha * local gap +
    beta * its importance-weighted share of the global gradient, (d) on
    epochs where ``epoch % t1 == 0`` take one descent step on the importance
    logits. A shard emptied by deletion is dropped and the importance
    weights renormalize over the survivors.
    """
    if len(updated_shards) != state.k:
        raise ValidationError("updated_shards must match the number of shard models")
    events = list(state.events)

    keep = [i for i, s in enumerate(updated_shards) if s.num_nodes > 0]
    for i, s in enumerate(updated_shards):
        if s.num_nodes == 0:
            events.append(f"shard {i}: emptied by deletion, dropped; importance renormalized")
    if not keep:
        raise ValidationError("every shard was emptied by deletion")
    shards = [updated_shards[i] for i in keep]
    dirty = {keep.index(i) for i in dirty if i in keep}
    models = [state.models[i] for i in keep]
    logits = state.importance.logits[keep].copy()

    feature_dim = shards[0].feature_dim
    for i in sorted(dirty):
        models[i] = fresh_model(cfg, feature_dim)
    opts = [init_adam(m, lr=cfg.eta, weight_decay=cfg.weight_decay) for m in models]

    adjs = [normalize_adjacency(s) for s in shards]
    masks = [_train_mask(s, i, events) for i, s in enumerate(shards)]
    all_masks = [np.ones(s.num_nodes, dtype=bool) for s in shards]
    adj_g = normalize_adjacency(g_prime)
    train_g = g_prime.mask("train")
    if not train_g.any():
        train_g = np.ones(g_prime.num_nodes, dtype=bool)
    all_g = np.ones(g_prime.num_nodes, dtype=bool)
    global_block = [(adj_g, g_prime.features, g_prime.labels, g_prime.sensitive, train_g, all_g)]

    history = list(state.lambda_history)
    mode = cfg.aggregation_mode
    for epoch in range(cfg.epochs):
        lam = softmax(logits)
        if cfg.beta > 0.0:
            shard_global_grads = _global_gradients(models, lam, adj_g, g_prime,
                                                   train_g, all_g, cfg.alpha, mode)
        else:
            shard_global_grads = None
        for i, shard in enumerate(shards):
            pred = forward(models[i], adjs[i], shard.features)
            _, grad = _composite_grad(pred, shard.labels, shard.sensitive,
                                      masks[i], all_masks[i], cfg.shard_alpha)
            g1, g2 = backward(models[i], pred, adjs[i], shard.features, grad)
            if shard_global_grads is not None:
                gg1, gg2 = shard_global_grads[i]
                g1 = g1 + cfg.beta * gg1
                g2 = g2 + cfg.beta * gg2
            models[i], opts[i] = adam_step(models[i], opts[i], (g1, g2))
        if epoch % cfg.t1 == 0:
            logits = _importance_step(models, logits, global_block, cfg.alpha, cfg)
        history.append(softmax(logits))

    return FguState(models, ImportanceScores(logits), opts,
                    epoch=state.epoch + cfg.epochs, events=events, lambda_history=history)


def _global_gradients(models, lam, adj_g, g_prime, u_mask, f_mask, alpha, mode):
    """Per-shard gradients of the global composite loss w.r.t. each shard's
    weights. The aggregate is linear in each shard's parameters, so shard i
    receives exactly its importance-weighted share of the chain.
    """
    if mode == "weights":
        agg = combine_models(models, lam)
        pred = forward(agg, adj_g, g_prime.features)
        _, grad = _composite_grad(pred, g_prime.labels, g_prime.sensitive, u_mask, f_mask, alpha)
        g1, g2 = backward(agg, pred, adj_g, g_prime.features, grad)
        return [(l * g1, l * g2) for l in lam]
    per_model = [forward(m, adj_g, g_prime.features) for m in models]
    mixed = Predictions(sum(l * p.probs for l, p in zip(lam, per_model)))
    _, grad = _composite_grad(mixed, g_prime.labels, g_prime.sensitive, u_mask, f_mask, alpha)
    return [backward(m, p, adj_g, g_prime.features, lam[i] * grad)
            for i, (m, p) in enumerate(zip(models, per_model))]


def update_importance(state: FguState, g_prime: Graph, cfg: FguConfig) -> FguState:
    """One descent step on the importance logits against the global
    composite loss; the simplex constraint holds by construction.
    """
    if state.k < 1:
        raise ValidationError("state has no shard models")
    adj_g = normalize_adjacency(g_prime)
    train_g = g_prime.mask("train")
    if not train_g.any():
        train_g = np.ones(g_prime.num_nodes, dtype=bool)
    blocks = [(adj_g, g_prime.features, g_prime.labels, g_prime.sensitive,
               train_g, np.ones(g_prime.num_nodes, dtype=bool))]
    logits = _importance_step(state.models, state.importance.logits, blocks, cfg.alpha, cfg)
    return replace_state(state, logits)


def replace_state(state: FguState, logits: np.ndarray) -> FguState:
    new = FguState(list(state.models), ImportanceScores(logits), list(state.opt_states),
                   epoch=state.epoch, events=list(state.events),
                   lambda_history=list(state.lambda_history) + [softmax(logits)])
    return new


def save_state(path, state: FguState, cfg: FguConfig) -> None:
    """Binary checkpoint: header (dims, K, epoch, optimizer constants,
    config hash) followed by little-endian float64 blobs in row-major order.
    Round-trips bit-exactly and reloading resumes identically.
    """
    d, h = state.models[0].w1.shape
    opt0 = state.opt_states[0]
    header = _CKPT_MAGIC + struct.pack(
        "<IIIQ", state.k, d, h, state.epoch) + struct.pack(
        "<5d", opt0.lr, opt0.weight_decay, opt0.beta1, opt0.beta2, opt0.eps)
    digest = bytes.fromhex(config_hash(cfg))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(digest)
        for model, opt in zip(state.models, state.opt_states):
            for arr in (model.w1, model.w2, opt.m1, opt.v1, opt.m2, opt.v2):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
            fh.write(struct.pack("<Q", opt.step))
        fh.write(np.ascontiguousarray(state.importance.logits, dtype="<f8").tobytes())


def load_state(path) -> tuple[FguState, dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != _CKPT_MAGIC:
        raise ValidationError(f"{path}: not a checkpoint file")
    off = 8
    k, d, h, epoch = struct.unpack_from("<IIIQ", raw, off)
    off += struct.calcsize("<IIIQ")
    lr, wd, b1, b2, eps = struct.unpack_from("<5d", raw, off)
    off += struct.calcsize("<5d")
    digest = raw[off:off + 32].hex()
    off += 32

    def read(shape):
        nonlocal off
        n = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        off += n * 8
        return arr

    models, opts = [], []
    for _ in range(k):
        w1, w2 = read((d, h)), read((h, 1))
        m1, v1, m2, v2 = read((d, h)), read((d, h)), read((h, 1)), read((h, 1))
        (step,) = struct.unpack_from("<Q", raw, off)
        off += 8
        models.append(ShardModel(w1, w2))
        opts.append(AdamState(m1, v1, m2, v2, step=step, lr=lr, weight_decay=wd,
                              beta1=b1, beta2=b2, eps=eps))
    logits = read((k,))
    state = FguState(models, ImportanceScores(logits), opts, epoch=epoch)
    return state, {"config_hash": digest, "k": k, "feature_dim": d, "hidden_dim": h}
