"""Graph storage (CSR), adjacency normalization and the GRF1 file format."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

TRAIN, VAL, TEST = 0, 1, 2
SPLIT_NAMES = {"train": TRAIN, "val": VAL, "test": TEST}

GRF_MAGIC = b"GRF1"
_GRF_HEADER = struct.Struct("<4sQQIII")


class GraphFormatError(ValueError):
    """A graph file or in-memory graph violates the format contract."""

    def __init__(self, message: str, field: str | None = None, offset: int | None = None):
        self.field = field
        self.offset = offset
        where = []
        if field is not None:
            where.append(f"field {field}")
        if offset is not None:
            where.append(f"byte offset {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


@dataclass(frozen=True, eq=False)
class Graph:
    """Directed CSR graph; an undirected edge is stored as two arcs.

    Row ``v`` of the CSR lists the neighbors that ``v`` aggregates from.
    ``labels`` is ``(n,)`` int for single-label tasks and ``(n, C)`` uint8 for
    multi-label tasks.
    """

    indptr: np.ndarray
    indices: np.ndarray
    attributes: np.ndarray
    labels: np.ndarray
    split: np.ndarray
    num_classes: int
    multilabel: bool = False
    version: int = 0
    node_ids: np.ndarray | None = None  # original ids when this is an induced subgraph

    @property
    def num_nodes(self) -> int:
        return len(self.indptr) - 1

    @property
    def num_edges(self) -> int:
        return int(self.indptr[-1]) if len(self.indptr) else 0

    @property
    def attr_dim(self) -> int:
        return self.attributes.shape[1]

    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def neighbors(self, v: int) -> np.ndarray:
        return self.indices[self.indptr[v] : self.indptr[v + 1]]

    def nodes_in(self, name: str) -> np.ndarray:
        return np.nonzero(self.split == SPLIT_NAMES[name])[0]

    def validate(self) -> "Graph":
        n = self.num_nodes
        if n < 0 or len(self.indptr) == 0:
            raise GraphFormatError("indptr must have num_nodes+1 entries", "indptr")
        if self.indptr[0] != 0:
            raise GraphFormatError("indptr[0] must be 0", "indptr")
        if np.any(np.diff(self.indptr) < 0):
            raise GraphFormatError("indptr must be non-decreasing", "indptr")
        if self.indptr[-1] != len(self.indices):
            raise GraphFormatError("indptr[num_nodes] must equal num_edges", "indptr")
        if len(self.indices) and (self.indices.min() < 0 or self.indices.max() >= n):
            bad = int(self.indices[(self.indices < 0) | (self.indices >= n)][0])
            raise GraphFormatError(f"index out of range: {bad} not in [0, {n})", "indices")
        if self.attributes.ndim != 2 or self.attributes.shape[0] != n:
            raise GraphFormatError("attribute row count must equal num_nodes", "attributes")
        if self.labels.shape[0] != n:
            raise GraphFormatError("label count must equal num_nodes", "labels")
        if self.split.shape != (n,) or (n and (self.split.min() < 0 or self.split.max() > 2)):
            raise GraphFormatError("split tags must be 0/1/2 per node", "split")
        return self

    def bumped(self, **changes) -> "Graph":
        """Copy with ``changes`` applied and the version incremented."""
        return replace(self, version=self.version + 1, **changes)

    def with_attributes(self, attributes: np.ndarray) -> "Graph":
        return replace(self, attributes=np.ascontiguousarray(attributes, dtype=np.float32))


def make_graph(indptr, indices, attributes, labels=None, split=None, num_classes=None,
               multilabel=False) -> Graph:
    """Build and validate a graph, filling defaults for missing labels/split."""
    indptr = np.ascontiguousarray(indptr, dtype=np.int64)
    n = len(indptr) - 1
    attributes = np.asarray(attributes, dtype=np.float32)
    attributes = np.ascontiguousarray(attributes.reshape(n, attributes.shape[-1] if attributes.ndim == 2 else -1))
    if labels is None:
        labels = np.zeros(n, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.uint8 if multilabel else np.int64)
    if num_classes is None:
        num_classes = labels.shape[1] if multilabel else (int(labels.max()) + 1 if n else 0)
    if split is None:
        split = np.zeros(n, dtype=np.uint8)
    return Graph(
        indptr=indptr,
        indices=np.ascontiguousarray(indices, dtype=np.int32),
        attributes=attributes,
        labels=labels,
        split=np.ascontiguousarray(split, dtype=np.uint8),
        num_classes=int(num_classes),
        multilabel=bool(multilabel),
    ).validate()


def from_edges(num_nodes: int, edges, attributes, symmetric: bool = True, **kw) -> Graph:
    """CSR from an edge list; rows are sorted by neighbor id, duplicates dropped."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if symmetric:
        edges = np.concatenate([edges, edges[:, ::-1]])
    edges = edges[edges[:, 0] != edges[:, 1]]
    if len(edges):
        keys = np.unique(edges[:, 0] * num_nodes + edges[:, 1])
        src, dst = keys // num_nodes, keys % num_nodes
    else:
        src = dst = np.zeros(0, dtype=np.int64)
    indptr = np.zeros(num_nodes + 1, dtype=np.int64)
    np.cumsum(np.bincount(src, minlength=num_nodes), out=indptr[1:])
    return make_graph(indptr, dst, attributes, **kw)


def symmetrize(g: Graph) -> Graph:
    src = np.repeat(np.arange(g.num_nodes), g.degrees())
    edges = np.stack([src, g.indices], axis=1)
    sym = from_edges(g.num_nodes, edges, g.attributes, symmetric=True, labels=g.labels,
                     split=g.split, num_classes=g.num_classes, multilabel=g.multilabel)
    return replace(sym, version=g.version + 1)


# --------------------------------------------------------------------------- I/O


def save_graph(g: Graph, path) -> None:
    path = Path(path)
    if path.suffix == ".json":
        path.write_text(json.dumps(graph_to_json(g)))
        return
    n, m, f = g.num_nodes, g.num_edges, g.attr_dim
    parts = [
        _GRF_HEADER.pack(GRF_MAGIC, n, m, f, int(g.multilabel), g.num_classes),
        g.indptr.astype("<u8").tobytes(),
        g.indices.astype("<u4").tobytes(),
        g.attributes.astype("<f4").tobytes(),
    ]
    if g.multilabel:
        parts.append(np.packbits(g.labels.astype(np.uint8), axis=1, bitorder="little").tobytes())
    else:
        parts.append(g.labels.astype("<u4").tobytes())
    parts.append(g.split.astype(np.uint8).tobytes())
    path.write_bytes(b"".join(parts))


def graph_to_json(g: Graph) -> dict:
    return {
        "num_nodes": g.num_nodes,
        "num_edges": g.num_edges,
        "attr_dim": g.attr_dim,
        "label_mode": int(g.multilabel),
        "num_classes": g.num_classes,
        "indptr": g.indptr.tolist(),
        "indices": g.indices.tolist(),
        "attributes": g.attributes.tolist(),
        "labels": g.labels.tolist(),
        "split": g.split.tolist(),
    }


def load_graph(path) -> Graph:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] == GRF_MAGIC:
        return _parse_grf(data)
    if data.lstrip()[:1] == b"{":
        return _parse_json(json.loads(data))
    raise GraphFormatError("unrecognized graph file: expected GRF1 magic or JSON", "magic", 0)


def _take(data: bytes, offset: int, count: int, dtype: str, field: str) -> tuple[np.ndarray, int]:
    size = np.dtype(dtype).itemsize * count
    if offset + size > len(data):
        raise GraphFormatError(
            f"truncated array: need {size} bytes, {len(data) - offset} available", field, offset)
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
    return arr, offset + size


def _parse_grf(data: bytes) -> Graph:
    if len(data) < _GRF_HEADER.size:
        raise GraphFormatError("truncated header", "header", len(data))
    _, n, m, f, label_mode, num_classes = _GRF_HEADER.unpack_from(data, 0)
    if label_mode not in (0, 1):
        raise GraphFormatError(f"bad label_mode {label_mode}", "label_mode", 24)
    off = _GRF_HEADER.size
    indptr, off = _take(data, off, n + 1, "<u8", "indptr")
    indices, off_idx = _take(data, off, m, "<u4", "indices")
    if m and indices.max() >= n:
        bad = int(np.argmax(indices >= n))
        raise GraphFormatError(f"index out of range: {int(indices[bad])} in a {n}-node graph",
                               "indices", off + 4 * bad)
    off = off_idx
    attrs, off = _take(data, off, n * f, "<f4", "attributes")
    if label_mode == 1:
        row_bytes = (num_classes + 7) // 8
        packed, off = _take(data, off, n * row_bytes, "u1", "labels")
        labels = np.unpackbits(packed.reshape(n, row_bytes), axis=1, bitorder="little")[:, :num_classes]
    else:
        labels, off = _take(data, off, n, "<u4", "labels")
    split, off = _take(data, off, n, "u1", "split")
    if off != len(data):
        raise GraphFormatError(f"{len(data) - off} trailing bytes", "eof", off)
    return make_graph(indptr.astype(np.int64), indices.astype(np.int32), attrs.reshape(n, f),
                      labels, split, num_classes, multilabel=bool(label_mode))


def _parse_json(doc: dict) -> Graph:
    try:
        n = int(doc["num_nodes"])
        f = int(doc.get("attr_dim", len(doc["attributes"][0]) if n else 0))
        indptr = np.asarray(doc["indptr"], dtype=np.int64)
        indices = np.asarray(doc["indices"], dtype=np.int64)
        attrs = np.asarray(doc["attributes"], dtype=np.float32).reshape(n, f)
    except KeyError as exc:
        raise GraphFormatError(f"missing field {exc.args[0]}", exc.args[0]) from None
    if len(indptr) != n + 1:
        raise GraphFormatError("indptr must have num_nodes+1 entries", "indptr")
    if "num_edges" in doc and int(doc["num_edges"]) != len(indices):
        raise GraphFormatError("num_edges disagrees with indices", "num_edges")
    if len(indices) and (indices.min() < 0 or indices.max() >= n):
        raise GraphFormatError(f"index out of range: {int(indices.max())} in a {n}-node graph", "indices")
    multilabel = bool(doc.get("label_mode", 0))
    labels = doc.get("labels")
    if labels is not None:
        labels = np.asarray(labels).reshape((n, -1) if multilabel else (n,))
    split = doc.get("split")
    return make_graph(indptr, indices, attrs, labels, split, doc.get("num_classes"), multilabel)


# ------------------------------------------------------------------ operations


@dataclass(frozen=True, eq=False)
class NormalizedAdjacency:
    indptr: np.ndarray
    indices: np.ndarray
    values: np.ndarray
    scheme: str
    source_version: int
    degrees: np.ndarray = field(repr=False, default=None)

    @property
    def num_nodes(self) -> int:
        return len(self.indptr) - 1

    def to_dense(self, dtype=np.float64) -> np.ndarray:
        n = self.num_nodes
        out = np.zeros((n, n), dtype=dtype)
        rows = np.repeat(np.arange(n), np.diff(self.indptr))
        np.add.at(out, (rows, self.indices), self.values.astype(dtype))
        return out

    def transpose(self) -> "NormalizedAdjacency":
        """Transposed operator (used by back-propagation)."""
        n = self.num_nodes
        rows = np.repeat(np.arange(n, dtype=np.int64), np.diff(self.indptr))
        order = np.lexsort((rows, self.indices))
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(self.indices, minlength=n), out=indptr[1:])
        return NormalizedAdjacency(indptr, rows[order].astype(np.int32), self.values[order],
                                   self.scheme + "^T", self.source_version, self.degrees)


def normalize(g: Graph, scheme: str = "row_mean") -> NormalizedAdjacency:
    """Row-mean (``D^-1 A``) or symmetric (``D^-1/2 A D^-1/2``) normalization, no self-loops."""
    deg = g.degrees().astype(np.float64)
    rows = np.repeat(np.arange(g.num_nodes), g.degrees())
    if scheme == "row_mean":
        vals = 1.0 / deg[rows]
    elif scheme == "sym":
        # a sink neighbor (out-degree 0 in a directed graph) counts as degree 1
        vals = 1.0 / np.sqrt(deg[rows] * np.maximum(deg[g.indices], 1.0))
    else:
        raise ValueError(f"unknown normalization scheme {scheme!r}")
    return NormalizedAdjacency(g.indptr, g.indices, vals.astype(np.float32), scheme, g.version,
                               g.degrees())


@dataclass(frozen=True)
class DegreeStats:
    avg_degree: float
    max_degree: int
    isolated_count: int


def degree_stats(g: Graph) -> DegreeStats:
    if g.num_nodes == 0:
        raise ValueError("degree statistics of an empty graph are undefined")
    deg = g.degrees()
    return DegreeStats(g.num_edges / g.num_nodes, int(deg.max()), int(np.sum(deg == 0)))


def induced_subgraph(g: Graph, nodes) -> Graph:
    """Subgraph on ``nodes`` (sorted); ``node_ids`` maps new ids to ids in ``g``."""
    nodes = np.unique(np.asarray(nodes, dtype=np.int64))
    remap = np.full(g.num_nodes, -1, dtype=np.int64)
    remap[nodes] = np.arange(len(nodes))
    deg = g.degrees()[nodes]
    starts = g.indptr[nodes]
    pos = np.repeat(starts - np.concatenate([[0], np.cumsum(deg)[:-1]]), deg) + np.arange(deg.sum())
    src = np.repeat(np.arange(len(nodes)), deg)
    dst = remap[g.indices[pos.astype(np.int64)]]
    keep = dst >= 0
    indptr = np.zeros(len(nodes) + 1, dtype=np.int64)
    np.cumsum(np.bincount(src[keep], minlength=len(nodes)), out=indptr[1:])
    parent_ids = nodes if g.node_ids is None else g.node_ids[nodes]
    sub = make_graph(indptr, dst[keep], g.attributes[nodes], g.labels[nodes], g.split[nodes],
                     g.num_classes, g.multilabel)
    return replace(sub, node_ids=parent_ids, version=g.version)


def training_graph(g: Graph) -> Graph:
    """Induced subgraph on the train split; edges leaving the split are dropped."""
    train = g.nodes_in("train")
    if len(train) == 0:
        raise ValueError("graph has an empty train split")
    return induced_subgraph(g, train)
