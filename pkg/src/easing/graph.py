"""Heterogeneous graph data model, file ingestion, splits, synthetic data.

Graphs are directed typed multigraphs.  Every node additionally carries one
reserved ``__self__`` edge so attention softmax denominators are never empty;
file readers and the synthetic generator inject it automatically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

SELF_EDGE_TYPE = "__self__"


class GraphFormatError(ValueError):
    """Malformed edge/feature/label file."""


class DatasetError(ValueError):
    """Dataset split that cannot satisfy its invariants."""


@dataclass(frozen=True, eq=False)
class HetGraph:
    """Directed typed multigraph with a per-node in-adjacency index.

    ``src``/``dst``/``etype`` hold every edge (file edges plus one injected
    self edge per node) sorted by (dst, src, etype) so in-edges of a node are
    contiguous; ``in_offsets[x]:in_offsets[x+1]`` slices them.  Instances are
    immutable and compared by identity.
    """

    node_count: int
    edge_types: Tuple[str, ...]
    src: np.ndarray
    dst: np.ndarray
    etype: np.ndarray
    in_offsets: np.ndarray

    @property
    def self_type_id(self) -> int:
        return self.edge_types.index(SELF_EDGE_TYPE)

    @property
    def edge_count(self) -> int:
        return int(self.src.shape[0])

    def in_edges(self, x: int) -> Tuple[np.ndarray, np.ndarray]:
        """(sources, edge-type ids) of all edges pointing into x."""
        lo, hi = self.in_offsets[x], self.in_offsets[x + 1]
        return self.src[lo:hi], self.etype[lo:hi]

    def in_neighbors(self, x: int) -> Dict[int, List[int]]:
        """Map neighbor y -> list of edge-type ids on edges y -> x."""
        srcs, ets = self.in_edges(x)
        out: Dict[int, List[int]] = {}
        for y, e in zip(srcs.tolist(), ets.tolist()):
            out.setdefault(y, []).append(e)
        return out

    def file_in_neighbors(self, x: int) -> List[int]:
        """Distinct in-neighbors over file edges only (self edge excluded)."""
        srcs, ets = self.in_edges(x)
        keep = ets != self.self_type_id
        return sorted(set(srcs[keep].tolist()))

    def file_edge_mask(self) -> np.ndarray:
        return self.etype != self.self_type_id


def _build_graph(node_count: int, edge_types: List[str],
                 src: List[int], dst: List[int],
                 etype: List[int]) -> HetGraph:
    if SELF_EDGE_TYPE in edge_types:
        raise GraphFormatError(f"edge type name {SELF_EDGE_TYPE!r} is reserved")
    edge_types = edge_types + [SELF_EDGE_TYPE]
    self_id = len(edge_types) - 1
    nodes = np.arange(node_count, dtype=np.int64)
    src_a = np.concatenate([np.asarray(src, dtype=np.int64), nodes])
    dst_a = np.concatenate([np.asarray(dst, dtype=np.int64), nodes])
    et_a = np.concatenate([np.asarray(etype, dtype=np.int64),
                           np.full(node_count, self_id, dtype=np.int64)])
    order = np.lexsort((et_a, src_a, dst_a))
    src_a, dst_a, et_a = src_a[order], dst_a[order], et_a[order]
    in_offsets = np.zeros(node_count + 1, dtype=np.int64)
    np.add.at(in_offsets, dst_a + 1, 1)
    np.cumsum(in_offsets, out=in_offsets)
    return HetGraph(node_count=node_count, edge_types=tuple(edge_types),
                    src=src_a, dst=dst_a, etype=et_a, in_offsets=in_offsets)


def load_graph(path, allow_self_loops_in_file: bool = False,
               node_count: int | None = None) -> HetGraph:
    """Read a TSV edge list `src<TAB>dst<TAB>type_name`.

    Lines starting with `#` are headers/comments.  Repeated lines become
    parallel edges.  Node ids may have gaps; node_count can declare isolated
    trailing nodes beyond the maximum id seen.
    """
    types: List[str] = []
    type_ids: Dict[str, int] = {}
    src: List[int] = []
    dst: List[int] = []
    etype: List[int] = []
    max_id = -1
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise GraphFormatError(
                    f"{path}:{lineno}: expected 3 tab-separated columns, "
                    f"got {len(parts)}")
            try:
                s, t = int(parts[0]), int(parts[1])
            except ValueError as err:
                raise GraphFormatError(
                    f"{path}:{lineno}: non-integer node id: {err}") from err
            if s < 0 or t < 0:
                raise GraphFormatError(f"{path}:{lineno}: negative node id")
            if s == t and not allow_self_loops_in_file:
                raise GraphFormatError(
                    f"{path}:{lineno}: self loop {s}->{t} not allowed "
                    f"(pass allow_self_loops_in_file to keep it)")
            name = parts[2]
            if name == SELF_EDGE_TYPE:
                raise GraphFormatError(
                    f"{path}:{lineno}: edge type {SELF_EDGE_TYPE!r} is reserved")
            if name not in type_ids:
                type_ids[name] = len(types)
                types.append(name)
            src.append(s)
            dst.append(t)
            etype.append(type_ids[name])
            max_id = max(max_id, s, t)
    n = max_id + 1
    if node_count is not None:
        if node_count < n:
            raise GraphFormatError(
                f"declared node_count {node_count} below maximum id {max_id}")
        n = node_count
    if n == 0:
        raise GraphFormatError(f"{path}: no nodes (empty file without node_count)")
    return _build_graph(n, types, src, dst, etype)


def write_graph(graph: HetGraph, path) -> None:
    """Serialize file edges back to TSV; injected self edges are skipped."""
    keep = graph.file_edge_mask()
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# src\tdst\tedge_type\n")
        for s, t, e in zip(graph.src[keep], graph.dst[keep], graph.etype[keep]):
            fh.write(f"{s}\t{t}\t{graph.edge_types[e]}\n")


@dataclass(frozen=True)
class NodeFeatureSet:
    """Structural and textual feature matrices, both node_count x d."""

    structural: np.ndarray
    textual: np.ndarray

    def __post_init__(self):
        if self.structural.shape != self.textual.shape:
            raise GraphFormatError(
                f"feature widths differ: structural {self.structural.shape} "
                f"vs textual {self.textual.shape}")
        if not (np.isfinite(self.structural).all()
                and np.isfinite(self.textual).all()):
            raise GraphFormatError("non-finite feature value")

    @property
    def dim(self) -> int:
        return int(self.structural.shape[1])


def _read_feature_csv(path, node_count: int) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split(",")
        if not header or header[0] != "node_id":
            raise GraphFormatError(f"{path}: header must start with node_id")
        d = len(header) - 1
        if d < 1:
            raise GraphFormatError(f"{path}: no feature columns")
        rows: Dict[int, np.ndarray] = {}
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != d + 1:
                raise GraphFormatError(
                    f"{path}:{lineno}: expected {d + 1} columns, got {len(parts)}")
            try:
                nid = int(parts[0])
                vals = np.array([float(v) for v in parts[1:]], dtype=np.float64)
            except ValueError as err:
                raise GraphFormatError(f"{path}:{lineno}: {err}") from err
            bad = np.flatnonzero(~np.isfinite(vals))
            if bad.size:
                raise GraphFormatError(
                    f"{path}:{lineno}: non-finite value in column f{bad[0]}")
            if nid in rows:
                raise GraphFormatError(f"{path}:{lineno}: duplicate node id {nid}")
            rows[nid] = vals
    missing = [i for i in range(node_count) if i not in rows]
    if missing:
        raise GraphFormatError(f"{path}: missing feature row for node {missing[0]}")
    mat = np.zeros((node_count, d), dtype=np.float64)
    for nid in range(node_count):
        mat[nid] = rows[nid]
    return mat


def load_features(struct_path, text_path, node_count: int) -> NodeFeatureSet:
    """Load the two feature CSVs; rows are indexed by their node_id column."""
    structural = _read_feature_csv(struct_path, node_count)
    textual = _read_feature_csv(text_path, node_count)
    return NodeFeatureSet(structural=structural, textual=textual)


def load_labels(path, log1p: bool = False) -> List[Tuple[int, float]]:
    """Read `node_id,value` rows; optionally map values through log1p."""
    out: List[Tuple[int, float]] = []
    seen: set[int] = set()
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header.split(",")[:2] != ["node_id", "value"]:
            raise GraphFormatError(f"{path}: header must be node_id,value")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise GraphFormatError(f"{path}:{lineno}: expected 2 columns")
            try:
                nid, value = int(parts[0]), float(parts[1])
            except ValueError as err:
                raise GraphFormatError(f"{path}:{lineno}: {err}") from err
            if not math.isfinite(value):
                raise GraphFormatError(f"{path}:{lineno}: non-finite value")
            if nid in seen:
                raise GraphFormatError(f"{path}:{lineno}: duplicate node id {nid}")
            seen.add(nid)
            if log1p:
                if value < 0:
                    raise GraphFormatError(
                        f"{path}:{lineno}: negative value under log1p transform")
                value = math.log1p(value)
            out.append((nid, value))
    return out


@dataclass(frozen=True)
class ImportanceDataset:
    """Labeled train/val/test splits plus the unlabeled pool."""

    labeled: Tuple[Tuple[int, float], ...]
    unlabeled_pool: Tuple[int, ...]
    val: Tuple[Tuple[int, float], ...]
    test: Tuple[Tuple[int, float], ...]

    def __post_init__(self):
        if not self.labeled:
            raise DatasetError("labeled training set is empty")
        groups = [
            {n for n, _ in self.labeled},
            set(self.unlabeled_pool),
            {n for n, _ in self.val},
            {n for n, _ in self.test},
        ]
        total = sum(len(g) for g in groups)
        if len(set().union(*groups)) != total:
            raise DatasetError("dataset node groups overlap")

    @property
    def train_nodes(self) -> List[int]:
        return [n for n, _ in self.labeled]

    @property
    def train_values(self) -> np.ndarray:
        return np.array([v for _, v in self.labeled], dtype=np.float64)


def split_dataset(labels: Sequence[Tuple[int, float]],
                  unlabeled_candidates: Sequence[int],
                  ratios: Tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3),
                  seed: int = 0) -> ImportanceDataset:
    """Deterministic train/val/test partition of the labeled nodes, plus an
    unlabeled pool of exactly |train| nodes drawn from the candidates."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DatasetError(f"split ratios must sum to 1, got {ratios}")
    labels = list(labels)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(labels))
    n_train = int(round(len(labels) * ratios[0]))
    n_val = int(round(len(labels) * ratios[1]))
    n_test = len(labels) - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise DatasetError(
            f"{len(labels)} labeled nodes cannot fill a "
            f"{ratios[0]:.2f}/{ratios[1]:.2f}/{ratios[2]:.2f} split")
    shuffled = [labels[i] for i in order]
    train = shuffled[:n_train]
    val = shuffled[n_train:n_train + n_val]
    test = shuffled[n_train + n_val:]
    candidates = sorted(set(unlabeled_candidates) - {n for n, _ in labels})
    if len(candidates) < n_train:
        raise DatasetError(
            f"cannot satisfy |unlabeled pool| = |train| = {n_train}: only "
            f"{len(candidates)} unlabeled candidates")
    pick = rng.choice(len(candidates), size=n_train, replace=False)
    pool = tuple(candidates[i] for i in sorted(pick))
    return ImportanceDataset(labeled=tuple(train), unlabeled_pool=pool,
                             val=tuple(val), test=tuple(test))


def generate_synthetic(node_count: int, edge_type_count: int,
                       avg_degree: int, d: int, seed: int
                       ) -> Tuple[HetGraph, NodeFeatureSet, Dict[int, float]]:
    """Seeded desk-scale dataset with a planted importance signal.

    Ground truth is s_x = ln(1 + in_deg(x)) + w . G_x + eps with eps drawn
    from Normal(0, 0.1).  Structural features carry the degree signal in
    their first coordinate; textual features are a fixed random linear map
    of the structural ones plus noise.
    """
    if min(node_count, edge_type_count, avg_degree, d) < 1:
        raise DatasetError("all synthetic generator counts must be positive")
    rng = np.random.default_rng(seed)
    m = node_count * avg_degree
    if node_count == 1:
        src = np.zeros(0, dtype=np.int64)
        dst = np.zeros(0, dtype=np.int64)
        etype = np.zeros(0, dtype=np.int64)
    else:
        src = rng.integers(0, node_count, size=m)
        # sample dst from the other node_count-1 ids so no file self loops
        dst = rng.integers(0, node_count - 1, size=m)
        dst = np.where(dst >= src, dst + 1, dst)
        etype = rng.integers(0, edge_type_count, size=m)
    types = [f"rel_{i}" for i in range(edge_type_count)]
    graph = _build_graph(node_count, types, src.tolist(), dst.tolist(),
                         etype.tolist())

    in_deg = np.zeros(node_count, dtype=np.float64)
    np.add.at(in_deg, dst, 1.0)
    structural = rng.normal(size=(node_count, d))
    structural[:, 0] += np.log1p(in_deg)
    text_map = rng.normal(size=(d, d)) / math.sqrt(d)
    textual = structural @ text_map + 0.1 * rng.normal(size=(node_count, d))
    features = NodeFeatureSet(structural=structural, textual=textual)

    w = rng.normal(size=d)
    w *= 0.25 / np.linalg.norm(w)
    noise = rng.normal(scale=0.1, size=node_count)
    values = np.log1p(in_deg) + structural @ w + noise
    labels = {i: float(values[i]) for i in range(node_count)}
    return graph, features, labels
