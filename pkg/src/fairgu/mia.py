"""Shadow-model membership-inference audit.

Shadow GCNs are trained on seeded random halves of the graph; an attack
classifier learns to tell members from non-members using each model's
posterior, its binary entropy, and the loss against the true label. Run
against a post-unlearning model on the deleted nodes, chance-level attack
accuracy certifies that the deletion actually removed their influence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .gcn import PROB_EPS, ShardModel, forward
from .graph import Graph, normalize_adjacency
from .trainer import FguConfig, FguState, aggregate, train_shards

_SHADOW_TAG = 3
_ATTACK_TAG = 4
_PROBE_TAG = 5

SHADOW_EPOCHS = 100
ATTACK_STEPS = 500
_ATTACK_LR = 0.5


@dataclass(frozen=True)
class ShadowResult:
    model: ShardModel
    member_ids: np.ndarray
    nonmember_ids: np.ndarray
    probs: np.ndarray   # shadow posteriors on the full graph
    labels: np.ndarray


@dataclass(frozen=True)
class AttackDataset:
    features: np.ndarray  # (n, 3)
    members: np.ndarray   # (n,) 0/1


@dataclass(frozen=True)
class AttackModel:
    weights: np.ndarray  # (3,)
    bias: float
    feat_mean: np.ndarray
    feat_std: np.ndarray


def mia_features(probs, labels) -> np.ndarray:
    """(posterior, binary entropy of posterior, loss against true label)."""
    p = np.clip(np.asarray(probs, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(labels, dtype=np.float64)
    entropy = -(p * np.log(p) + (1.0 - p) * np.log(1.0 - p))
    loss = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    return np.column_stack([p, entropy, loss])


def train_shadows(g: Graph, cfg: FguConfig, num_shadows: int = 20,
                  epochs: int = SHADOW_EPOCHS) -> list[ShadowResult]:
    """Train num_shadows GCNs, each on a seeded random half of the nodes;
    the held-out half are that shadow's non-members.
    """
    if num_shadows < 2:
        raise ValidationError("need at least 2 shadow models")
    if g.num_nodes < 4:
        raise ValidationError("graph too small for a member/non-member split")
    adj = normalize_adjacency(g)
    results = []
    for s in range(num_shadows):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _SHADOW_TAG, s]))
        perm = rng.permutation(g.num_nodes)
        half = g.num_nodes // 2
        members, nonmembers = np.sort(perm[:half]), np.sort(perm[half:])
        shadow_cfg = FguConfig(k=1, epochs=epochs, eta=cfg.eta, alpha=0.0, beta=0.0,
                               t1=cfg.t1, seed=int(rng.integers(2**31)),
                               hidden_dim=cfg.hidden_dim, weight_decay=cfg.weight_decay)
        split = np.full(g.num_nodes, 2, dtype=np.int8)
        split[members] = 0
        shadow_graph = Graph(g.indptr, g.indices, g.features, g.sensitive, g.labels, split)
        model = train_shards([shadow_graph], shadow_cfg).models[0]
        probs = forward(model, adj, g.features).probs
        results.append(ShadowResult(model, members, nonmembers, probs, np.asarray(g.labels)))
    return results


def build_attack_dataset(shadows) -> AttackDataset:
    """Stack (features, member flag) rows over every shadow and node,
    downsampling the majority class so the dataset is balanced.
    """
    feats, flags = [], []
    for shadow in shadows:
        feats.append(mia_features(shadow.probs[shadow.member_ids], shadow.labels[shadow.member_ids]))
        flags.append(np.ones(len(shadow.member_ids), dtype=np.int8))
        feats.append(mia_features(shadow.probs[shadow.nonmember_ids], shadow.labels[shadow.nonmember_ids]))
        flags.append(np.zeros(len(shadow.nonmember_ids), dtype=np.int8))
    features = np.concatenate(feats)
    members = np.concatenate(flags)
    pos = np.flatnonzero(members == 1)
    neg = np.flatnonzero(members == 0)
    n = min(len(pos), len(neg))
    keep = np.sort(np.concatenate([pos[:n], neg[:n]]))
    return AttackDataset(features[keep], members[keep])


def fit_attack(ds: AttackDataset, seed: int = 0) -> AttackModel:
    """Logistic regression on standardized features, 500 full-batch gradient
    steps from a seeded init.
    """
    if len(np.unique(ds.members)) < 2:
        raise ValidationError("attack dataset contains a single class")
    mean = ds.features.mean(axis=0)
    std = ds.features.std(axis=0)
    std[std == 0.0] = 1.0
    x = (ds.features - mean) / std
    y = ds.members.astype(np.float64)
    rng = np.random.default_rng(np.random.SeedSequence([seed, _ATTACK_TAG]))
    w = rng.normal(0.0, 0.01, size=x.shape[1])
    b = 0.0
    n = len(y)
    for _ in range(ATTACK_STEPS):
        z = x @ w + b
        p = np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)), np.exp(np.minimum(z, 0)) / (1.0 + np.exp(np.minimum(z, 0))))
        err = (p - y) / n
        w = w - _ATTACK_LR * (x.T @ err)
        b = b - _ATTACK_LR * float(err.sum())
    return AttackModel(w, b, mean, std)


def attack_predict(attack: AttackModel, features: np.ndarray) -> np.ndarray:
    x = (features - attack.feat_mean) / attack.feat_std
    z = x @ attack.weights + attack.bias
    return (z >= 0.0).astype(np.int8)


def _target_posteriors(target, g: Graph, mode: str) -> np.ndarray:
    if isinstance(target, FguState):
        return aggregate(target, g, mode).probs
    if isinstance(target, ShardModel):
        return forward(target, normalize_adjacency(g), g.features).probs
    raise ValidationError(f"unsupported target model type {type(target).__name__}")


def run_attack(attack: AttackModel, target, g: Graph, probe_members, probe_nonmembers,
               mode: str = "weights", seed: int = 0) -> float:
    """Attack accuracy on a balanced probe of member vs non-member nodes,
    queried against the target model's posteriors on g. 0.5 is chance.
    """
    members = np.asarray(sorted(probe_members), dtype=np.int64)
    nonmembers = np.asarray(sorted(probe_nonmembers), dtype=np.int64)
    if members.size == 0 or nonmembers.size == 0:
        raise ValidationError("probe sets must be non-empty")
    if np.intersect1d(members, nonmembers).size:
        raise ValidationError("probe sets overlap")
    rng = np.random.default_rng(np.random.SeedSequence([seed, _PROBE_TAG]))
    n = min(members.size, nonmembers.size)
    if members.size > n:
        members = np.sort(rng.choice(members, size=n, replace=False))
    if nonmembers.size > n:
        nonmembers = np.sort(rng.choice(nonmembers, size=n, replace=False))

    probs = _target_posteriors(target, g, mode)
    probe = np.concatenate([members, nonmembers])
    truth = np.concatenate([np.ones(n, dtype=np.int8), np.zeros(n, dtype=np.int8)])
    guess = attack_predict(attack, mia_features(probs[probe], g.labels[probe]))
    return float(np.mean(guess == truth))
