"""Deletion-request sampling, request persistence, and the retrain /
fair-retrain baselines that anchor every comparison.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .gcn import adam_step, backward, forward, init_adam, utility_loss_grad
from .graph import Graph, normalize_adjacency
from .metrics import evaluate_predictions, soft_group_gap
from .trainer import FguConfig, fresh_model, train_shards

STRATEGIES = ("privileged", "unprivileged", "uniform")


@dataclass(frozen=True)
class UnlearnRequest:
    """Entities to forget: node ids, undirected edges (canonical min-first
    pairs) and ids whose feature rows are to be erased.
    """

    nodes: frozenset = frozenset()
    edges: frozenset = frozenset()
    feature_nodes: frozenset = frozenset()
    tag: str = "explicit"

    def __post_init__(self):
        object.__setattr__(self, "nodes", frozenset(int(i) for i in self.nodes))
        object.__setattr__(self, "feature_nodes", frozenset(int(i) for i in self.feature_nodes))
        canon = frozenset((min(int(u), int(v)), max(int(u), int(v))) for u, v in self.edges)
        object.__setattr__(self, "edges", canon)

    @property
    def is_empty(self) -> bool:
        return not (self.nodes or self.edges or self.feature_nodes)


@dataclass(frozen=True)
class DeletionSpec:
    r_n: float
    r_e: float
    strategy: str = "uniform"
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.r_n < 1.0 and 0.0 <= self.r_e < 1.0):
            raise ValidationError("deletion ratios must lie in [0, 1)")
        if self.strategy not in STRATEGIES:
            raise ValidationError(f"strategy must be one of {STRATEGIES}")


def privileged_group(g: Graph) -> int:
    """Sensitive group with the higher positive rate on the training split
    (the computable proxy for social privilege). Ties resolve to group 1.
    """
    train = g.mask("train")
    rates = []
    for s in (0, 1):
        m = train & (g.sensitive == s)
        if not m.any():
            raise ValidationError(f"no training nodes with sensitive value {s}")
        rates.append(float(np.mean(g.labels[m])))
    return 1 if rates[1] >= rates[0] else 0


def sample_request(g: Graph, spec: DeletionSpec) -> UnlearnRequest:
    """Sample a deletion request.

    Uniform: floor(r_n * N) training nodes and floor(r_e * |E|) edges from
    the whole graph. Group strategies restrict node sampling to the
    (un)privileged group's training nodes and edge sampling to edges with an
    endpoint in that group, with r_e measured against those edges.
    Deterministic under spec.seed.
    """
    rng = np.random.default_rng(spec.seed)
    train = g.mask("train")
    num_nodes = int(np.floor(spec.r_n * g.num_nodes))
    edges = g.edge_array()

    if spec.strategy == "uniform":
        node_pool = np.flatnonzero(train)
        edge_pool = edges
        edge_count = int(np.floor(spec.r_e * g.num_edges))
    else:
        priv = privileged_group(g)
        group = priv if spec.strategy == "privileged" else 1 - priv
        node_pool = np.flatnonzero(train & (g.sensitive == group))
        in_group = (g.sensitive[edges[:, 0]] == group) | (g.sensitive[edges[:, 1]] == group)
        edge_pool = edges[in_group]
        edge_count = int(np.floor(spec.r_e * len(edge_pool)))

    if num_nodes > len(node_pool):
        raise ValidationError(
            f"cannot sample {num_nodes} nodes from a pool of {len(node_pool)}; "
            "at least 2 training nodes per sensitive group must survive")
    picked_nodes = rng.choice(node_pool, size=num_nodes, replace=False) if num_nodes else np.empty(0, np.int64)
    picked_edges = (edge_pool[rng.choice(len(edge_pool), size=edge_count, replace=False)]
                    if edge_count else np.empty((0, 2), np.int64))

    # The request must leave at least two training nodes in each group.
    survive = train.copy()
    survive[picked_nodes.astype(np.int64)] = False
    for s in (0, 1):
        remaining = int(np.sum(survive & (g.sensitive == s)))
        if remaining < 2:
            raise ValidationError(
                f"request would leave {remaining} training node(s) with sensitive value {s}; "
                "at least 2 must survive per group")

    return UnlearnRequest(nodes=frozenset(picked_nodes.tolist()),
                          edges=frozenset(map(tuple, picked_edges.tolist())),
                          tag=spec.strategy)


def save_request(path, req: UnlearnRequest, spec: DeletionSpec | None = None) -> None:
    lines = []
    if spec is not None:
        lines.append(f"# strategy={spec.strategy} r_n={spec.r_n:g} r_e={spec.r_e:g} seed={spec.seed}")
    else:
        lines.append(f"# strategy={req.tag}")
    lines += [f"node {i}" for i in sorted(req.nodes)]
    lines += [f"edge {u} {v}" for u, v in sorted(req.edges)]
    lines += [f"feat {i}" for i in sorted(req.feature_nodes)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_request(path) -> UnlearnRequest:
    nodes, edges, feats = set(), set(), set()
    tag = "explicit"
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            for part in line[1:].split():
                if part.startswith("strategy="):
                    tag = part.split("=", 1)[1]
            continue
        parts = line.split()
        if parts[0] == "node" and len(parts) == 2:
            nodes.add(int(parts[1]))
        elif parts[0] == "edge" and len(parts) == 3:
            edges.add((int(parts[1]), int(parts[2])))
        elif parts[0] == "feat" and len(parts) == 2:
            feats.add(int(parts[1]))
        else:
            raise ValidationError(f"{path} line {lineno}: unrecognized entry {line!r}")
    return UnlearnRequest(nodes=frozenset(nodes), edges=frozenset(edges),
                          feature_nodes=frozenset(feats), tag=tag)


def retrain_baseline(g_prime: Graph, cfg: FguConfig):
    """Exact-unlearning gold standard: one GCN trained from scratch on the
    remaining graph, no sharding and no fairness terms.
    """
    state = train_shards([g_prime], replace(cfg, k=1))
    model = state.models[0]
    probs = forward(model, normalize_adjacency(g_prime), g_prime.features).probs
    return model, evaluate_predictions(g_prime, probs)


def fair_retrain_baseline(g_prime: Graph, cfg: FguConfig):
    """Single GCN retrained with the group-gap penalty (weight cfg.alpha)
    added to the cross-entropy over training nodes. With alpha = 0 this is
    bit-identical to retrain_baseline.
    """
    model = fresh_model(cfg, g_prime.feature_dim)
    opt = init_adam(model, lr=cfg.eta, weight_decay=cfg.weight_decay)
    adj = normalize_adjacency(g_prime)
    train = g_prime.mask("train")
    if not train.any():
        train = np.ones(g_prime.num_nodes, dtype=bool)
    for _ in range(cfg.epochs):
        pred = forward(model, adj, g_prime.features)
        _, grad = utility_loss_grad(pred, g_prime.labels, train)
        _, gap_grad = soft_group_gap(pred.probs, g_prime.sensitive, train)
        grads = backward(model, pred, adj, g_prime.features, grad + cfg.alpha * gap_grad)
        model, opt = adam_step(model, opt, grads)
    probs = forward(model, adj, g_prime.features).probs
    return model, evaluate_predictions(g_prime, probs)
