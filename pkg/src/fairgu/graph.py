"""Graph data model: CSR-backed undirected graphs with node features,
a binary sensitive attribute, binary labels and train/val/test splits.

Also provides file ingestion, symmetric adjacency normalization, deletion
application and a synthetic biased-graph generator.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import ParseError, ValidationError

TRAIN, VAL, TEST = 0, 1, 2
SPLIT_NAMES = ("train", "val", "test")
_SPLIT_CODE = {name: code for code, name in enumerate(SPLIT_NAMES)}

# Split fractions used by the synthetic generator.
_SBM_TRAIN_FRAC = 0.3
_SBM_VAL_FRAC = 0.2


@dataclass(frozen=True)
class Graph:
    """Immutable undirected graph. Edges live in symmetric CSR form
    (both directions stored); self-loops are never stored.
    """

    indptr: np.ndarray    # int64 (N+1,)
    indices: np.ndarray   # int64, column ids of the symmetric adjacency
    features: np.ndarray  # float64 (N, D)
    sensitive: np.ndarray  # int8 (N,), values in {0, 1}
    labels: np.ndarray     # int8 (N,), values in {0, 1}
    split: np.ndarray      # int8 (N,), codes TRAIN/VAL/TEST

    @property
    def num_nodes(self) -> int:
        return len(self.indptr) - 1

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_edges(self) -> int:
        """Number of undirected edges."""
        return len(self.indices) // 2

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def neighbors(self, node: int) -> np.ndarray:
        return self.indices[self.indptr[node]:self.indptr[node + 1]]

    def edge_array(self) -> np.ndarray:
        """Undirected edges as a (M, 2) array with u < v, sorted."""
        src = np.repeat(np.arange(self.num_nodes), self.degrees)
        keep = src < self.indices
        return np.column_stack([src[keep], self.indices[keep]])

    def has_edge(self, u: int, v: int) -> bool:
        return v in self.neighbors(u)

    def mask(self, which: str) -> np.ndarray:
        """Boolean mask for a split name ('train', 'val' or 'test')."""
        return self.split == _SPLIT_CODE[which]


@dataclass(frozen=True)
class SbmSpec:
    """Two-block stochastic block model keyed by the sensitive attribute."""

    nodes_per_block: int
    intra_edge_prob: float
    inter_edge_prob: float
    label_sensitive_correlation: float
    feature_dim: int
    feature_shift: float
    seed: int

    def __post_init__(self):
        if self.nodes_per_block < 2:
            raise ValidationError("nodes_per_block must be >= 2")
        for name in ("intra_edge_prob", "inter_edge_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValidationError(f"{name} must be in [0, 1], got {p}")
        if not 0.0 <= self.label_sensitive_correlation <= 1.0:
            raise ValidationError("label_sensitive_correlation must be in [0, 1]")


def build_graph(num_nodes, edges, features, sensitive, labels, split) -> Graph:
    """Construct a validated Graph from an undirected edge list.

    Edges are canonicalized (min id first), deduplicated and symmetrized.
    Raises ValidationError on self-loops, out-of-range endpoints or
    non-binary sensitive/label values.
    """
    features = np.ascontiguousarray(features, dtype=np.float64)
    sensitive = np.asarray(sensitive, dtype=np.int8)
    labels = np.asarray(labels, dtype=np.int8)
    split = np.asarray(split, dtype=np.int8)
    if features.ndim != 2 or features.shape[0] != num_nodes:
        raise ValidationError("features must be a (num_nodes, D) matrix")
    for name, arr in (("sensitive", sensitive), ("labels", labels)):
        if arr.shape != (num_nodes,):
            raise ValidationError(f"{name} must have one entry per node")
        bad = np.flatnonzero((arr != 0) & (arr != 1))
        if bad.size:
            raise ValidationError(f"{name} must be 0/1; offending nodes {bad[:5].tolist()}")
    if split.shape != (num_nodes,) or split.min(initial=0) < 0 or split.max(initial=0) > 2:
        raise ValidationError("split must hold per-node codes in {0,1,2}")

    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.size:
        if edges.min() < 0 or edges.max() >= num_nodes:
            raise ValidationError("edge endpoint out of range")
        loops = edges[edges[:, 0] == edges[:, 1]]
        if loops.size:
            raise ValidationError(f"self-loops are not allowed: {loops[:5].tolist()}")
        lo = np.minimum(edges[:, 0], edges[:, 1])
        hi = np.maximum(edges[:, 0], edges[:, 1])
        edges = np.unique(np.column_stack([lo, hi]), axis=0)

    directed = np.concatenate([edges, edges[:, ::-1]]) if edges.size else edges.reshape(0, 2)
    order = np.lexsort((directed[:, 1], directed[:, 0]))
    directed = directed[order]
    indptr = np.zeros(num_nodes + 1, dtype=np.int64)
    np.add.at(indptr, directed[:, 0] + 1, 1)
    indptr = np.cumsum(indptr)
    indices = directed[:, 1].copy()

    for arr in (indptr, indices, features, sensitive, labels, split):
        arr.setflags(write=False)
    return Graph(indptr, indices, features, sensitive, labels, split)


def _detect_delimiter(line: str) -> str:
    return "\t" if "\t" in line else ","


def load_graph(node_file, edge_file) -> Graph:
    """Load a graph from delimited text files.

    Node file: header ``id f0..f{D-1} sensitive label split`` then one row
    per node; edge file: one ``u v`` pair per line, no header. The delimiter
    (tab or comma) is auto-detected. Node ids are compacted to 0..N-1
    preserving file order.
    """
    node_path, edge_path = Path(node_file), Path(edge_file)
    lines = node_path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ParseError(f"{node_path}: empty node file")
    delim = _detect_delimiter(lines[0])
    header = lines[0].split(delim)
    if len(header) < 4:
        raise ParseError(f"{node_path} line 1: header must have id, features, sensitive, label, split")
    dim = len(header) - 4

    ids, feats, sens, labs, splits = [], [], [], [], []
    id_to_index: dict[str, int] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(delim)
        if len(parts) != len(header):
            raise ParseError(f"{node_path} line {lineno}: expected {len(header)} columns, got {len(parts)}")
        node_id = parts[0]
        if node_id in id_to_index:
            raise ValidationError(f"{node_path} line {lineno}: duplicate node id {node_id!r}")
        try:
            row = [float(x) for x in parts[1:1 + dim]]
            s, y = int(parts[1 + dim]), int(parts[2 + dim])
        except ValueError as exc:
            raise ParseError(f"{node_path} line {lineno}: {exc}") from None
        split_name = parts[3 + dim].strip()
        if split_name not in _SPLIT_CODE:
            raise ValidationError(f"{node_path} line {lineno}: unknown split {split_name!r}")
        if s not in (0, 1):
            raise ValidationError(f"{node_path} line {lineno}: sensitive must be 0/1, got {s}")
        if y not in (0, 1):
            raise ValidationError(f"{node_path} line {lineno}: label must be 0/1, got {y}")
        id_to_index[node_id] = len(ids)
        ids.append(node_id)
        feats.append(row)
        sens.append(s)
        labs.append(y)
        splits.append(_SPLIT_CODE[split_name])

    edges = []
    edge_lines = edge_path.read_text(encoding="utf-8").splitlines()
    for lineno, line in enumerate(edge_lines, start=1):
        if not line.strip():
            continue
        parts = line.split(_detect_delimiter(line))
        if len(parts) != 2:
            raise ParseError(f"{edge_path} line {lineno}: expected 'u v', got {line!r}")
        u, v = parts[0].strip(), parts[1].strip()
        for token in (u, v):
            if token not in id_to_index:
                raise ValidationError(f"{edge_path} line {lineno}: unknown node id {token!r}")
        if u == v:
            raise ValidationError(f"{edge_path} line {lineno}: self-loop on {u!r}")
        edges.append((id_to_index[u], id_to_index[v]))

    return build_graph(len(ids), np.array(edges, dtype=np.int64).reshape(-1, 2),
                       np.array(feats, dtype=np.float64).reshape(len(ids), dim),
                       sens, labs, splits)


def save_graph(g: Graph, node_file, edge_file) -> None:
    """Write a graph in the tab-delimited format accepted by load_graph."""
    with open(node_file, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t")
        writer.writerow(["id"] + [f"f{i}" for i in range(g.feature_dim)] + ["sensitive", "label", "split"])
        for i in range(g.num_nodes):
            writer.writerow([i] + [repr(float(x)) for x in g.features[i]]
                            + [int(g.sensitive[i]), int(g.labels[i]), SPLIT_NAMES[g.split[i]]])
    with open(edge_file, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t")
        for u, v in g.edge_array():
            writer.writerow([u, v])


def normalize_adjacency(g: Graph) -> sp.csr_matrix:
    """Symmetric normalization of A+I: entry (i,j) is 1/sqrt(d_i * d_j)
    with d the row sums of A+I. Isolated nodes get a diagonal entry of 1.
    """
    n = g.num_nodes
    deg = g.degrees.astype(np.float64) + 1.0
    inv_sqrt = 1.0 / np.sqrt(deg)
    adj = sp.csr_matrix((np.ones(len(g.indices)), g.indices, g.indptr), shape=(n, n))
    adj = adj + sp.identity(n, format="csr")
    scale = sp.diags(inv_sqrt)
    return (scale @ adj @ scale).tocsr()


def apply_deletion(g: Graph, req) -> tuple[Graph, np.ndarray]:
    """Apply an unlearning request: delete nodes (with incident edges),
    delete listed edges, and zero the feature rows of feature-erasure nodes.

    Returns the new graph and an old->new id map (-1 marks deleted nodes).
    Raises ValidationError listing ids/edges absent from the graph.
    """
    n = g.num_nodes
    nodes = np.asarray(sorted(req.nodes), dtype=np.int64)
    feat_nodes = np.asarray(sorted(req.feature_nodes), dtype=np.int64)
    edges = np.asarray(list(req.edges), dtype=np.int64).reshape(-1, 2)

    offenders = []
    for name, arr in (("node", nodes), ("feat", feat_nodes)):
        bad = arr[(arr < 0) | (arr >= n)]
        offenders += [f"{name} {i}" for i in bad.tolist()]
    if edges.size:
        lo = np.minimum(edges[:, 0], edges[:, 1])
        hi = np.maximum(edges[:, 0], edges[:, 1])
        edges = np.column_stack([lo, hi])
        in_range = (lo >= 0) & (hi < n)
        present = np.array([in_range[i] and g.has_edge(*edges[i]) for i in range(len(edges))])
        offenders += [f"edge {tuple(e)}" for e in edges[~present].tolist()]
    if offenders:
        raise ValidationError("deletion request references absent entities: " + ", ".join(offenders))

    features = g.features.copy()
    if feat_nodes.size:
        features[feat_nodes] = 0.0

    keep = np.ones(n, dtype=bool)
    keep[nodes] = False
    old_to_new = np.full(n, -1, dtype=np.int64)
    old_to_new[keep] = np.arange(int(keep.sum()))

    surviving = g.edge_array()
    if edges.size:
        enc = surviving[:, 0] * n + surviving[:, 1]
        drop = np.isin(enc, edges[:, 0] * n + edges[:, 1])
        surviving = surviving[~drop]
    if nodes.size:
        surviving = surviving[keep[surviving[:, 0]] & keep[surviving[:, 1]]]
    remapped = old_to_new[surviving] if surviving.size else surviving

    new_graph = build_graph(int(keep.sum()), remapped, features[keep],
                            g.sensitive[keep], g.labels[keep], g.split[keep])
    return new_graph, old_to_new


def resplit(g: Graph, seed: int, train_frac: float = _SBM_TRAIN_FRAC,
            val_frac: float = _SBM_VAL_FRAC) -> Graph:
    """Same graph with freshly drawn train/val/test masks (seeded).
    Used by evaluation protocols that repeat runs over random splits.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 23]))
    n = g.num_nodes
    perm = rng.permutation(n)
    split = np.full(n, TEST, dtype=np.int8)
    n_train = int(train_frac * n)
    n_val = int(val_frac * n)
    split[perm[:n_train]] = TRAIN
    split[perm[n_train:n_train + n_val]] = VAL
    split.setflags(write=False)
    return Graph(g.indptr, g.indices, g.features, g.sensitive, g.labels, split)


def generate_sbm(spec: SbmSpec) -> Graph:
    """Sample a two-block graph whose blocks carry the sensitive attribute.

    Labels satisfy P(Y=1|S=1) - P(Y=1|S=0) = label_sensitive_correlation;
    features are class-conditional Gaussians with means 0 and feature_shift.
    Bit-identical output for identical specs.
    """
    rng = np.random.default_rng(spec.seed)
    nb = spec.nodes_per_block
    n = 2 * nb
    sensitive = np.repeat([0, 1], nb).astype(np.int8)

    corr = spec.label_sensitive_correlation
    p_pos = np.where(sensitive == 1, 0.5 + corr / 2.0, 0.5 - corr / 2.0)
    labels = (rng.random(n) < p_pos).astype(np.int8)

    features = rng.normal(0.0, 1.0, size=(n, spec.feature_dim))
    features += labels[:, None] * spec.feature_shift

    same_block = sensitive[:, None] == sensitive[None, :]
    prob = np.where(same_block, spec.intra_edge_prob, spec.inter_edge_prob)
    draw = rng.random((n, n)) < prob
    iu, ju = np.triu_indices(n, k=1)
    hit = draw[iu, ju]
    edges = np.column_stack([iu[hit], ju[hit]])

    perm = rng.permutation(n)
    split = np.full(n, TEST, dtype=np.int8)
    n_train = int(_SBM_TRAIN_FRAC * n)
    n_val = int(_SBM_VAL_FRAC * n)
    split[perm[:n_train]] = TRAIN
    split[perm[n_train:n_train + n_val]] = VAL

    return build_graph(n, edges, features, sensitive, labels, split)
