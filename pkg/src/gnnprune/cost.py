"""Analytic per-node MAC and memory estimates, and the runtime counter bridge.

Per layer and per node, branch ``k`` costs ``k * d * min(f_in, f_out)``
aggregation MACs (the executor aggregates whichever side is narrower) plus
``f_in * f_out`` transform MACs.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

from gnnprune.model import GnnModel

BYTES_PER_VALUE = 4


@dataclass(frozen=True)
class LayerDims:
    in_dim: int
    branches: tuple  # ((k, f_in, f_out), ...)
    combiner: str = "concat"

    @property
    def out_width(self) -> int:
        outs = [f_out for _, _, f_out in self.branches]
        return sum(outs) if self.combiner == "concat" else (outs[0] if outs else 0)

    @property
    def aggregates(self) -> bool:
        return any(k > 0 for k, _, _ in self.branches)

    def macs_per_node(self, d: float) -> float:
        return sum(k * d * min(f_in, f_out) + f_in * f_out for k, f_in, f_out in self.branches)

    def weight_count(self) -> int:
        return sum(f_in * f_out for _, f_in, f_out in self.branches)


def model_dims(model: GnnModel) -> list[LayerDims]:
    dims = []
    for layer in model.layers:
        spec = layer.spec
        branches = tuple((k, int(w.shape[0]), int(w.shape[1])) for k, w in zip(spec.powers, layer.weights))
        dims.append(LayerDims(spec.in_dim, branches, spec.combiner))
    return dims


def sage_dims(f0: int, hidden: list[int], classes: int) -> list[LayerDims]:
    """GraphSAGE stack (self + 1-hop branches, concat) followed by a dense head."""
    dims = []
    width = f0
    for h in hidden:
        dims.append(LayerDims(width, ((0, width, h), (1, width, h))))
        width = 2 * h
    dims.append(LayerDims(width, ((0, width, classes),)))
    return dims


@dataclass
class CostReport:
    mode: str
    macs_per_node: list[float]
    memory_bytes: int
    supports_per_layer: list[float] = field(default_factory=list)
    total_macs_per_node: float = 0.0

    def __post_init__(self):
        self.total_macs_per_node = float(sum(self.macs_per_node))
        if min(self.macs_per_node, default=0) < 0 or self.memory_bytes < 0:
            raise ValueError("cost entries must be non-negative")

    def to_json(self) -> dict:
        return asdict(self)


def full_cost(dims: list[LayerDims], num_nodes: int, d: float) -> CostReport:
    """Per-node MACs and total memory of whole-graph inference."""
    macs = [float(layer.macs_per_node(d)) for layer in dims]
    entries = sum(num_nodes * (layer.in_dim + sum(f for _, _, f in layer.branches)) + layer.weight_count()
                  for layer in dims)
    return CostReport("full", macs, int(entries * BYTES_PER_VALUE), [1.0] * len(dims))


def support_multipliers(dims: list[LayerDims], d: float, caps=(None,), cache_fraction: float = 0.0) -> list[float]:
    """Computed rows per target for each layer of batched inference.

    Layer ``i`` needs ``sum_l prod_{j<=l} d_eff_j`` rows over the hops
    contributed by the aggregating layers above it, with
    ``d_eff_j = min(d, cap_j) * (1 - cache_fraction)``.
    """
    if not 0 <= cache_fraction <= 1:
        raise ValueError("cache_fraction must lie in [0, 1]")
    caps = tuple(caps) or (None,)
    out = []
    for i in range(len(dims)):
        hops = sum(1 for layer in dims[i + 1 :] if layer.aggregates)
        total, term = 1.0, 1.0
        for j in range(1, hops + 1):
            cap = caps[min(j, len(caps)) - 1]
            term *= (d if cap is None else min(d, cap)) * (1 - cache_fraction)
            total += term
        out.append(total)
    return out


def batched_cost(dims: list[LayerDims], d: float, caps=(None,), cache_fraction: float = 0.0) -> CostReport:
    """Per-target MACs and memory of batched inference (neighbor explosion included)."""
    mult = support_multipliers(dims, d, caps, cache_fraction)
    caps = tuple(caps) or (None,)
    macs = []
    for i, (m, layer) in enumerate(zip(mult, dims)):
        # a layer's own aggregation reads at most cap(hop) neighbors per row
        hop = 1 + sum(1 for above in dims[i + 1 :] if above.aggregates)
        cap = caps[min(hop, len(caps)) - 1]
        macs.append(m * layer.macs_per_node(d if cap is None else min(d, cap)))
    entries = sum(m * (layer.in_dim + sum(f for _, _, f in layer.branches)) + layer.weight_count()
                  for m, layer in zip(mult, dims))
    return CostReport("batched", macs, int(math.ceil(entries * BYTES_PER_VALUE)), mult)


def measured_macs(instrumentation) -> int:
    """Total MACs from a ``MacCounter`` or a list of instrumentation records."""
    if hasattr(instrumentation, "total"):
        return int(instrumentation.total)
    return int(sum(rec["macs"] for rec in instrumentation))


# -------------------------------------------------------- pruning arithmetic


def _keep(c: int, eta: float) -> int:
    return max(1, math.ceil(eta * c - 1e-9)) if c else 0


def pruned_dims(dims: list[LayerDims], scheme: str, eta: float) -> list[LayerDims]:
    """Dims after pruning, assuming removed columns spread evenly over branches."""
    n = len(dims)
    budgets = [(None, 1.0)] * n
    if scheme == "full":
        budgets = [(None, 1.0)] + [(None, eta)] * (n - 1)
    elif scheme == "batched":
        agg = [i for i, layer in enumerate(dims) if layer.aggregates]
        if len(agg) < 2:
            raise ValueError("the batched scheme needs at least two aggregating layers")
        budgets[agg[0]] = (1, eta)
        budgets[agg[1]] = (None, eta)
    else:
        raise ValueError(f"unknown pruning scheme {scheme!r}")
    out = list(dims)
    for i in range(n - 1, -1, -1):
        power, e = budgets[i]
        layer = out[i]
        if e == 1.0:
            continue
        if power is not None:
            out[i] = LayerDims(layer.in_dim, tuple((k, _keep(f_in, e) if k == power else f_in, f_out)
                                                   for k, f_in, f_out in layer.branches), layer.combiner)
            continue
        keep = _keep(layer.in_dim, e)
        out[i] = LayerDims(keep, tuple((k, keep, f_out) for k, _, f_out in layer.branches), layer.combiner)
        if i > 0:
            prev = out[i - 1]
            frac = keep / prev.out_width
            if prev.combiner == "mean":
                branches = tuple((k, f_in, keep) for k, f_in, _ in prev.branches)
            else:
                branches = tuple((k, f_in, _keep(f_out, frac)) for k, f_in, f_out in prev.branches)
            out[i - 1] = LayerDims(prev.in_dim, branches, prev.combiner)
    return out


def complexity_ratio(original: list[LayerDims], pruned: list[LayerDims], d: float) -> float:
    """Per-node MAC ratio pruned / original under whole-graph inference."""
    base = full_cost(original, 1, d).total_macs_per_node
    return full_cost(pruned, 1, d).total_macs_per_node / base if base else 0.0
