"""Full-graph and batched inference with hop caps and a hidden-feature cache.

Batched inference plans layer by layer from the output back to the input.
For layer ``i`` the plan holds the nodes whose layer-``i`` output is needed;
those with a fresh cache entry are *visited* (served from the cache and not
expanded further), the rest are *computed*, and the computed rows pull in
their (possibly capped) neighborhoods as the layer's input *supports*.
"""

from __future__ import annotations

import hashlib
import json
import time
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from gnnprune import kernels as K
from gnnprune.graph import Graph, NormalizedAdjacency, normalize
from gnnprune.model import GnnModel, layer_forward


class CacheCorruptionError(RuntimeError):
    pass


# ------------------------------------------------------------------ cache


@dataclass
class CacheStats:
    hits: int = 0
    misses: int = 0
    stores: int = 0
    evictions: int = 0


class HiddenFeatureCache:
    """Per-layer hidden vectors stamped with ``(graph_version, model_id)``.

    A lookup hits only when the model id matches and the stored version is at
    most ``max_age`` versions old.  Beyond ``capacity`` entries the
    least-recently-stored entry is evicted.
    """

    def __init__(self, capacity: int | None = None, max_age: int = 0):
        if capacity is not None and capacity < 0:
            raise ValueError("capacity must be non-negative")
        if max_age < 0:
            raise ValueError("max_age must be non-negative")
        self.capacity = capacity
        self.max_age = max_age
        self.widths: dict[int, int] = {}
        self.stats = CacheStats()
        self._entries: OrderedDict = OrderedDict()

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key) -> bool:
        return key in self._entries

    def store(self, layer: int, node: int, vector, version: int, model_id: str) -> None:
        vector = np.asarray(vector)
        width = self.widths.setdefault(layer, vector.shape[-1])
        if vector.ndim != 1 or vector.shape[0] != width:
            raise ValueError(f"layer {layer} vectors have width {width}, got shape {vector.shape}")
        key = (layer, int(node))
        self._entries.pop(key, None)
        self._entries[key] = (vector.copy(), version, model_id)
        self.stats.stores += 1
        if self.capacity is not None:
            while len(self._entries) > self.capacity:
                self._entries.popitem(last=False)
                self.stats.evictions += 1

    def fresh(self, layer: int, node: int, version: int, model_id: str) -> bool:
        entry = self._entries.get((layer, int(node)))
        return entry is not None and entry[2] == model_id and 0 <= version - entry[1] <= self.max_age

    def lookup(self, layer: int, node: int, version: int, model_id: str):
        if self.fresh(layer, node, version, model_id):
            self.stats.hits += 1
            return self._entries[(layer, int(node))][0]
        self.stats.misses += 1
        return None

    def clear(self) -> None:
        self._entries.clear()

    def save(self, path) -> None:
        """Write entries (in storage order) to an ``.npz`` file."""
        keys = list(self._entries)
        arrays = {
            "layers": np.array([k[0] for k in keys], dtype=np.int64),
            "nodes": np.array([k[1] for k in keys], dtype=np.int64),
            "versions": np.array([self._entries[k][1] for k in keys], dtype=np.int64),
            "stamps": np.array([self._entries[k][2] for k in keys], dtype="U16"),
            "settings": np.array([-1 if self.capacity is None else self.capacity, self.max_age], dtype=np.int64),
        }
        for layer in sorted(self.widths):
            rows = [self._entries[k][0] for k in keys if k[0] == layer]
            arrays[f"vectors_{layer}"] = np.stack(rows) if rows else np.zeros((0, self.widths[layer]), np.float32)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> "HiddenFeatureCache":
        with np.load(path) as data:
            capacity, max_age = (int(x) for x in data["settings"])
            cache = cls(None if capacity < 0 else capacity, max_age)
            seen: dict[int, int] = {}
            for layer, node, version, stamp in zip(data["layers"], data["nodes"], data["versions"], data["stamps"]):
                layer = int(layer)
                row = seen.get(layer, 0)
                seen[layer] = row + 1
                cache.store(layer, int(node), data[f"vectors_{layer}"][row], int(version), str(stamp))
        cache.stats = CacheStats()
        return cache


def cache_store(cache: HiddenFeatureCache, layer, node, vector, version, model_id) -> None:
    cache.store(layer, node, vector, version, model_id)


def cache_lookup(cache: HiddenFeatureCache, layer, node, version, model_id):
    return cache.lookup(layer, node, version, model_id)


# --------------------------------------------------------------- planning


@dataclass
class BatchRequest:
    targets: np.ndarray
    caps: tuple = (None, 32)  # max fan-out per hop; None = unlimited, last entry repeats
    seed: int = 0
    use_cache: bool = False
    store_roots: bool = False
    store_all: bool = False

    def __post_init__(self):
        self.targets = np.asarray(self.targets, dtype=np.int64).reshape(-1)
        if len(self.targets) == 0:
            raise ValueError("a batch needs at least one target")
        self.caps = tuple(None if c is None else int(c) for c in self.caps) or (None,)
        if any(c is not None and c < 0 for c in self.caps):
            raise ValueError("neighbor caps must be non-negative")

    def cap(self, hop: int):
        return self.caps[min(hop, len(self.caps)) - 1]


@dataclass
class LayerPlan:
    layer: int
    outputs: np.ndarray  # nodes whose layer output is needed (sorted)
    visited: np.ndarray  # outputs served from the cache
    computed: np.ndarray  # outputs computed this batch
    supports: np.ndarray  # inputs of the computed rows (sorted) = outputs of the layer below
    rect: tuple  # CSR (indptr, indices into supports, values) with one row per computed node
    square: tuple | None  # CSR over supports for powers k >= 2
    self_pos: np.ndarray  # position of each computed node within supports
    hop: int
    cap: int | None


@dataclass
class BatchPlan:
    targets: np.ndarray
    layers: list[LayerPlan]
    stamp: str
    version: int
    target_pos: np.ndarray = field(default=None)  # request order -> row of the top outputs

    def supports(self) -> list[int]:
        return [len(lp.supports) for lp in self.layers]

    def computed(self) -> list[int]:
        return [len(lp.computed) for lp in self.layers]


def _mix(x):
    """splitmix64 finalizer on uint64 arrays."""
    x = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return x ^ (x >> np.uint64(31))


def sampled_rows(adj: NormalizedAdjacency, rows, cap, seed: int, layer: int):
    """CSR rows of ``adj`` for ``rows`` with at most ``cap`` neighbors each.

    Rows over the cap keep a uniform subset chosen by hashed priorities keyed
    on ``(seed, layer, node, neighbor)``, so a node samples the same neighbors
    in every batch.  Kept weights are rescaled by ``deg / cap`` so that the
    sampled aggregate is an unbiased stand-in for the full one.
    """
    rows = np.asarray(rows, dtype=np.int64)
    starts = adj.indptr[rows]
    deg = adj.indptr[rows + 1] - starts
    owner = np.repeat(np.arange(len(rows)), deg)
    pos = np.repeat(starts - np.cumsum(deg) + deg, deg) + np.arange(int(deg.sum()))
    cols = adj.indices[pos].astype(np.int64)
    vals = adj.values[pos]
    if cap is not None and len(rows) and deg.max() > cap:
        over = deg[owner] > cap
        key = _mix(_mix(_mix(np.uint64(seed) ^ np.uint64(layer * 0x9E3779B97F4A7C15 % 2**64))
                        ^ rows[owner].astype(np.uint64)) ^ cols.astype(np.uint64))
        # rank edges inside each row by priority; keep the first ``cap`` of capped rows
        order = np.lexsort((key, owner))
        rank = np.empty(len(order), dtype=np.int64)
        rank[order] = np.arange(len(order)) - np.repeat(np.cumsum(deg) - deg, deg)
        keep = ~over | (rank < cap)
        scale = np.where(over, deg[owner] / max(cap, 1), 1.0)
        owner, cols, vals = owner[keep], cols[keep], (vals * scale).astype(vals.dtype)[keep]
        deg = np.bincount(owner, minlength=len(rows))
    indptr = np.zeros(len(rows) + 1, dtype=np.int64)
    np.cumsum(deg, out=indptr[1:])
    return indptr, cols, vals


def _local(indptr, cols, vals, space):
    """Remap global column ids into positions of the sorted array ``space``."""
    return indptr, np.searchsorted(space, cols).astype(np.int32), vals


def _restrict(indptr, cols, vals, space):
    """Drop entries whose column lies outside ``space``."""
    pos = np.minimum(np.searchsorted(space, cols), len(space) - 1)
    inside = space[pos] == cols
    owner = np.repeat(np.arange(len(indptr) - 1), np.diff(indptr))
    new = np.zeros_like(indptr)
    np.cumsum(np.bincount(owner[inside], minlength=len(indptr) - 1), out=new[1:])
    return new, cols[inside], vals[inside]


def layer_hops(model: GnnModel) -> list[int]:
    """Hop index of each layer's neighbor expansion (1 for the layer nearest the output)."""
    hops = []
    for i in range(model.num_layers):
        hops.append(1 + sum(1 for j in range(i + 1, model.num_layers) if model.layers[j].spec.aggregates))
    return hops


def cache_stamp(model: GnnModel, req: BatchRequest, scheme: str) -> str:
    """Model id extended with everything else that shapes a cached vector."""
    profile = json.dumps({"caps": list(req.caps), "seed": req.seed, "scheme": scheme})
    return hashlib.sha256((model.model_id() + profile).encode()).hexdigest()[:16]


def build_batch_plan(g: Graph, adj: NormalizedAdjacency, model: GnnModel, req: BatchRequest,
                     cache: HiddenFeatureCache | None = None) -> BatchPlan:
    if req.targets.min() < 0 or req.targets.max() >= g.num_nodes:
        bad = req.targets[(req.targets < 0) | (req.targets >= g.num_nodes)][0]
        raise IndexError(f"target {bad} is not a node id (graph has {g.num_nodes} nodes)")
    stamp = cache_stamp(model, req, adj.scheme)
    cacheable = set(model.cacheable_layers()) if (cache is not None and req.use_cache) else set()
    hops = layer_hops(model)
    outputs = np.unique(req.targets)
    top = outputs
    plans = []
    for i in range(model.num_layers - 1, -1, -1):
        spec = model.layers[i].spec
        if i in cacheable:
            hit = np.fromiter((cache.fresh(i, v, g.version, stamp) for v in outputs), dtype=bool, count=len(outputs))
            cache.stats.misses += int(np.count_nonzero(~hit))
        else:
            hit = np.zeros(len(outputs), dtype=bool)
        visited, computed = outputs[hit], outputs[~hit]
        cap = req.cap(hops[i])
        frontier = computed
        expansions = []
        for _ in range(spec.k_max):
            ops = sampled_rows(adj, frontier, cap, req.seed, i)
            expansions.append((frontier, ops))
            frontier = np.union1d(frontier, ops[1])
        if spec.k_min == 1 and spec.k_max == 1:
            supports = np.unique(expansions[0][1][1])  # no self branch: neighbors only
        else:
            supports = frontier
        supports = np.asarray(supports, dtype=np.int64)
        rect = square = None
        if spec.k_max >= 1:
            rect = _local(*expansions[0][1], supports)
        if spec.k_max >= 2:
            full = sampled_rows(adj, supports, cap, req.seed, i)
            square = _local(*_restrict(*full, supports), supports)
        self_pos = np.searchsorted(supports, computed) if spec.k_min == 0 else np.zeros(0, dtype=np.int64)
        plans.append(LayerPlan(i, outputs, visited, computed, supports, rect, square, self_pos, hops[i], cap))
        outputs = supports
    plans.reverse()
    return BatchPlan(req.targets, plans, stamp, g.version, np.searchsorted(top, req.targets))


class LocalAggregator:
    """Aggregation over a plan's compact index space (rows = computed nodes)."""

    def __init__(self, lp: LayerPlan):
        self.lp = lp

    def apply(self, x, k: int):
        lp = self.lp
        for _ in range(k - 1):
            x = K.spmm_csr(*lp.square, x)
        return K.spmm_csr(*lp.rect, x)

    def self_rows(self, x):
        return x[self.lp.self_pos]


# -------------------------------------------------------------- execution


def _layer_macs(lp: LayerPlan, model: GnnModel) -> int:
    """MACs the executor performs for one planned layer."""
    layer = model.layers[lp.layer]
    rows_out, rows_in = len(lp.computed), len(lp.supports)
    if rows_out == 0:
        return 0
    total = 0
    for b, k in enumerate(layer.spec.powers):
        f_in, f_out = layer.weights[b].shape
        if k == 0:
            total += rows_out * f_in * f_out
            continue
        transform_first = f_out < f_in
        cols = f_out if transform_first else f_in
        total += len(lp.square[1]) * cols * (k - 1) if k > 1 else 0
        total += len(lp.rect[1]) * cols
        total += (rows_in if transform_first else rows_out) * f_in * f_out
    return total


def planned_macs(plan: BatchPlan, model: GnnModel) -> int:
    return sum(_layer_macs(lp, model) for lp in plan.layers)


def execute_plan(model: GnnModel, g: Graph, plan: BatchPlan, cache: HiddenFeatureCache | None = None,
                 req: BatchRequest | None = None):
    """Run a plan; returns ``(logits in request order, per-layer outputs)``."""
    h = g.attributes[plan.layers[0].supports]
    outs = []
    for lp in plan.layers:
        layer = model.layers[lp.layer]
        width = layer.spec.out_width
        out = np.empty((len(lp.outputs), width), dtype=layer.weights[0].dtype if layer.weights else np.float32)
        if len(lp.computed):
            out[np.searchsorted(lp.outputs, lp.computed)] = layer_forward(layer, LocalAggregator(lp), h)
        if len(lp.visited):
            pos = np.searchsorted(lp.outputs, lp.visited)
            for p, v in zip(pos, lp.visited):
                vec = cache.lookup(lp.layer, v, plan.version, plan.stamp)
                if vec is None:
                    raise CacheCorruptionError(f"layer {lp.layer} node {v}: entry vanished between plan and execution")
                if vec.shape != (width,):
                    raise CacheCorruptionError(f"layer {lp.layer} node {v}: cached width {vec.shape}, layer width {width}")
                out[p] = vec
        outs.append(out)
        h = out
    return h[plan.target_pos], outs


def _store(model, plan, outs, cache, req):
    if cache is None or not (req.store_roots or req.store_all):
        return
    roots = np.unique(req.targets)
    for i in model.cacheable_layers():
        lp = plan.layers[i]
        nodes = lp.computed if req.store_all else np.intersect1d(lp.computed, roots)
        pos = np.searchsorted(lp.outputs, nodes)
        for p, v in zip(pos, nodes):
            cache.store(i, v, outs[i][p], plan.version, plan.stamp)


def per_target_supports(plan: BatchPlan, adj: NormalizedAdjacency, model: GnnModel, cache, req) -> list[int]:
    """Input supports summed over targets, each target expanded on its own."""
    totals = np.zeros(model.num_layers, dtype=np.int64)
    cacheable = set(model.cacheable_layers()) if (cache is not None and req.use_cache) else set()
    for t in np.unique(req.targets):
        outputs = np.array([t])
        for lp in reversed(plan.layers):
            i = lp.layer
            spec = model.layers[i].spec
            if i in cacheable:
                outputs = np.array([v for v in outputs if not cache.fresh(i, v, plan.version, plan.stamp)], dtype=np.int64)
            frontier = outputs
            for _ in range(spec.k_max):
                frontier = np.union1d(frontier, sampled_rows(adj, frontier, lp.cap, req.seed, i)[1])
            totals[i] += len(frontier)
            outputs = frontier
    return totals.tolist()


def batched_inference(model: GnnModel, g: Graph, adj: NormalizedAdjacency | None, req: BatchRequest,
                      cache: HiddenFeatureCache | None = None, sink: list | None = None,
                      tree_counts: bool = False):
    """Logits of ``req.targets`` (request order) using only their supports."""
    if g.num_nodes == 0:
        raise ValueError("graph has no nodes")
    adj = normalize(g) if adj is None else adj
    if adj.source_version != g.version:
        raise ValueError("adjacency was normalized from a different graph version")
    hits0, misses0 = (cache.stats.hits, cache.stats.misses) if cache is not None else (0, 0)
    start = time.perf_counter()
    plan = build_batch_plan(g, adj, model, req, cache)
    with K.count_macs() as counter:
        logits, outs = execute_plan(model, g, plan, cache, req)
    latency = (time.perf_counter() - start) * 1e6
    if sink is not None:
        record = {
            "targets": int(len(req.targets)),
            "layers": [{"layer": lp.layer, "supports": int(len(lp.supports)), "computed": int(len(lp.computed)),
                        "visited": int(len(lp.visited))} for lp in plan.layers],
            "cache_hits": (cache.stats.hits - hits0) if cache is not None else 0,
            "cache_misses": (cache.stats.misses - misses0) if cache is not None else 0,
            "macs": int(counter.total),
            "latency_us": round(latency, 1),
        }
        if tree_counts:
            for entry, n in zip(record["layers"], per_target_supports(plan, adj, model, cache, req)):
                entry["supports_per_target"] = int(n)
        sink.append(record)
    _store(model, plan, outs, cache, req)
    return logits


def full_inference(model: GnnModel, g: Graph, adj: NormalizedAdjacency | None = None, sink: list | None = None):
    """Logits for every node; per-layer MACs go to ``sink`` when given."""
    if g.num_nodes == 0:
        raise ValueError("graph has no nodes")
    adj = normalize(g) if adj is None else adj
    h = np.asarray(g.attributes)
    if h.shape[1] != model.in_dim:
        raise K.ShapeError(f"model expects {model.in_dim} attribute columns, graph has {h.shape[1]}")
    layers = []
    start = time.perf_counter()
    with K.count_macs() as total:
        for i, layer in enumerate(model.layers):
            with K.count_macs() as c:
                h = layer_forward(layer, adj, h)
            layers.append({"layer": i, "macs": int(c.total), "spmm_macs": int(c.spmm), "matmul_macs": int(c.matmul)})
    if sink is not None:
        sink.append({"targets": int(g.num_nodes), "mode": "full", "layers": layers, "macs": int(total.total),
                     "latency_us": round((time.perf_counter() - start) * 1e6, 1)})
    return h


def run_batches(model: GnnModel, g: Graph, targets, batch_size: int = 512, caps=(None, 32), seed: int = 0,
                cache: HiddenFeatureCache | None = None, store_roots: bool = True, adj=None, sink=None,
                tree_counts: bool = False):
    """Batched inference over ``targets`` in consecutive chunks."""
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    adj = normalize(g) if adj is None else adj
    targets = np.asarray(targets, dtype=np.int64)
    out = []
    for s in range(0, len(targets), batch_size):
        req = BatchRequest(targets[s : s + batch_size], caps, seed, use_cache=cache is not None,
                           store_roots=store_roots and cache is not None)
        out.append(batched_inference(model, g, adj, req, cache, sink, tree_counts))
    return np.concatenate(out) if out else np.zeros((0, model.out_dim), dtype=np.float32)
