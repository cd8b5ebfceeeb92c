"""Balanced partitioning of a graph into shards, shard subgraph induction,
and routing of deletion requests to the shards that own the data.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .graph import Graph, build_graph


@dataclass(frozen=True)
class Partition:
    assignment: np.ndarray            # int64 (N,), node -> shard id
    k: int
    shard_graphs: tuple[Graph, ...]
    local_to_global: tuple[np.ndarray, ...]


def balanced_partition(g: Graph, k: int, seed: int, max_iters: int = 30,
                       iteration_hook=None) -> Partition:
    """Partition nodes into k shards of near-equal size.

    Constrained label propagation: start from a seeded random balanced
    assignment, then repeatedly visit nodes in seeded random order and move
    each to the shard holding the plurality of its neighbors (ties broken by
    lowest shard id). A move is taken only if it keeps every shard size in
    [floor(N/k), ceil(N/k)]; when the preferred shard is full, the node is
    swapped with the lowest-id node there that prefers the visitor's shard.
    Stops after a pass with no changes or after max_iters passes.

    iteration_hook, if given, is called with the assignment after every pass.
    """
    n = g.num_nodes
    if not 1 <= k <= n:
        raise ValidationError(f"k must be in [1, {n}], got {k}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))

    perm = rng.permutation(n)
    assignment = np.empty(n, dtype=np.int64)
    assignment[perm] = np.arange(n) % k
    sizes = np.bincount(assignment, minlength=k)
    cap_hi = -(-n // k)   # ceil(N/k)
    cap_lo = n // k

    def preferred(node: int) -> int:
        neigh = g.neighbors(node)
        if neigh.size == 0:
            return assignment[node]
        counts = np.bincount(assignment[neigh], minlength=k)
        return int(np.argmax(counts))  # argmax takes the lowest index on ties

    for _ in range(max_iters):
        changed = False
        for node in rng.permutation(n):
            cur = assignment[node]
            target = preferred(node)
            if target == cur:
                continue
            if sizes[target] < cap_hi and sizes[cur] > cap_lo:
                assignment[node] = target
                sizes[cur] -= 1
                sizes[target] += 1
                changed = True
            else:
                # Destination full: swap with a node there that wants to come here.
                members = np.flatnonzero(assignment == target)
                for other in members:
                    if preferred(other) == cur:
                        assignment[node] = target
                        assignment[other] = cur
                        changed = True
                        break
        if iteration_hook is not None:
            iteration_hook(assignment.copy())
        if not changed:
            break

    shards = induce_shards(g, assignment)
    return Partition(assignment, k,
                     tuple(sg for sg, _ in shards),
                     tuple(l2g for _, l2g in shards))


def induce_shards(g: Graph, assignment) -> list[tuple[Graph, np.ndarray]]:
    """Induce one subgraph per shard: member nodes re-indexed locally and
    only intra-shard edges kept. Returns (graph, local->global id map) pairs.
    """
    assignment = np.asarray(assignment, dtype=np.int64)
    if assignment.shape != (g.num_nodes,):
        raise ValidationError("assignment must cover every node")
    k = int(assignment.max()) + 1 if assignment.size else 0
    edges = g.edge_array()
    out = []
    for shard in range(k):
        members = np.flatnonzero(assignment == shard)
        global_to_local = np.full(g.num_nodes, -1, dtype=np.int64)
        global_to_local[members] = np.arange(len(members))
        if edges.size:
            intra = edges[(assignment[edges[:, 0]] == shard) & (assignment[edges[:, 1]] == shard)]
            local_edges = global_to_local[intra]
        else:
            local_edges = edges
        sg = build_graph(len(members), local_edges, g.features[members],
                         g.sensitive[members], g.labels[members], g.split[members])
        out.append((sg, members))
    return out


def route_request(p: Partition, req):
    """Split a deletion request into per-shard requests in shard-local ids.

    Node deletions and feature erasures go to the owning shard. An edge
    deletion goes to a shard only when both endpoints live there; edges that
    straddle shards were never materialized, so they are returned separately
    as a side list (in global ids) and produce no shard-level change.
    """
    from .unlearn import UnlearnRequest  # local import: unlearn builds on graph/partition

    n = len(p.assignment)
    for i in req.nodes | req.feature_nodes:
        if not 0 <= i < n:
            raise ValidationError(f"unknown node id {i}")
    for u, v in req.edges:
        if not (0 <= u < n and 0 <= v < n):
            raise ValidationError(f"unknown edge endpoint in {(u, v)}")

    global_to_local = np.full(n, -1, dtype=np.int64)
    for members in p.local_to_global:
        global_to_local[members] = np.arange(len(members))

    nodes = [set() for _ in range(p.k)]
    edges = [set() for _ in range(p.k)]
    feats = [set() for _ in range(p.k)]
    cross = []
    for i in req.nodes:
        nodes[p.assignment[i]].add(int(global_to_local[i]))
    for i in req.feature_nodes:
        feats[p.assignment[i]].add(int(global_to_local[i]))
    for u, v in req.edges:
        su, sv = p.assignment[u], p.assignment[v]
        if su == sv:
            a, b = int(global_to_local[u]), int(global_to_local[v])
            edges[su].add((min(a, b), max(a, b)))
        else:
            cross.append((min(u, v), max(u, v)))

    shard_reqs = [UnlearnRequest(nodes=nodes[s], edges=edges[s],
                                 feature_nodes=feats[s], tag=req.tag)
                  for s in range(p.k)]
    return shard_reqs, sorted(cross)


def save_assignment(path, assignment) -> None:
    lines = [f"{i}\t{int(s)}" for i, s in enumerate(assignment)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_assignment(path) -> np.ndarray:
    pairs = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        node, shard = line.split("\t")
        pairs.append((int(node), int(shard)))
    assignment = np.full(len(pairs), -1, dtype=np.int64)
    for node, shard in pairs:
        assignment[node] = shard
    if (assignment < 0).any():
        raise ValidationError(f"{path}: assignment does not cover 0..{len(pairs) - 1}")
    return assignment
