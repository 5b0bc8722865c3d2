"""Multi-branch GNN layers, forward passes, mask folding and the GNM1 format.

A layer computes ``act( combine_k  A^k h W_k )`` for ``k`` in ``[k_min, k_max]``
where ``combine`` is horizontal concatenation or the branch mean.  A dense
classifier head is a layer with ``k_min == k_max == 0``.
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from gnnprune import kernels as K
from gnnprune.kernels import ShapeError

GNM_MAGIC = b"GNM1"
COMBINERS = ("concat", "mean")
ACTIVATIONS = ("relu", "none")
_HAS_CHANNELS = 0x80
_ALL_CHANNELS = 0xFFFFFFFF


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    k_min: int
    k_max: int
    in_dim: int
    out_dims: tuple[int, ...]
    combiner: str = "concat"
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "out_dims", tuple(int(d) for d in self.out_dims))
        if not 0 <= self.k_min <= self.k_max:
            raise ValueError(f"need 0 <= k_min <= k_max, got {self.k_min}, {self.k_max}")
        if len(self.out_dims) != self.num_branches:
            raise ValueError(f"{self.num_branches} branches but {len(self.out_dims)} output dims")
        if self.combiner not in COMBINERS:
            raise ValueError(f"unknown combiner {self.combiner!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.combiner == "mean" and len(set(self.out_dims)) > 1:
            raise ValueError("mean combiner needs equal branch output dims")

    @property
    def num_branches(self) -> int:
        return self.k_max - self.k_min + 1

    @property
    def powers(self) -> range:
        return range(self.k_min, self.k_max + 1)

    @property
    def out_width(self) -> int:
        return sum(self.out_dims) if self.combiner == "concat" else self.out_dims[0]

    @property
    def aggregates(self) -> bool:
        return self.k_max > 0

    @classmethod
    def sage(cls, in_dim: int, hidden: int, **kw) -> "LayerSpec":
        return cls(0, 1, in_dim, (hidden, hidden), **kw)

    @classmethod
    def dense(cls, in_dim: int, out_dim: int, activation: str = "none") -> "LayerSpec":
        return cls(0, 0, in_dim, (out_dim,), activation=activation)


@dataclass(eq=False)
class Layer:
    """Layer spec plus per-branch weights.

    ``channels[b]`` optionally selects which input columns branch ``b`` reads;
    weights then have one row per selected column.
    """

    spec: LayerSpec
    weights: list[np.ndarray]
    channels: list[np.ndarray | None] = field(default=None)

    def __post_init__(self):
        if self.channels is None:
            self.channels = [None] * self.spec.num_branches
        for b, w in enumerate(self.weights):
            rows = self.spec.in_dim if self.channels[b] is None else len(self.channels[b])
            if w.shape != (rows, self.spec.out_dims[b]):
                raise ShapeError(f"branch {b}: weight shape {w.shape}, expected {(rows, self.spec.out_dims[b])}")

    def branch_in_dim(self, b: int) -> int:
        return self.weights[b].shape[0]

    def copy(self) -> "Layer":
        return Layer(self.spec, [w.copy() for w in self.weights],
                     [None if c is None else c.copy() for c in self.channels])


@dataclass(eq=False)
class GnnModel:
    layers: list[Layer]

    def __post_init__(self):
        for i in range(1, len(self.layers)):
            prev, cur = self.layers[i - 1].spec, self.layers[i].spec
            if prev.out_width != cur.in_dim:
                raise ShapeError(f"layer {i} expects {cur.in_dim} inputs, layer {i - 1} emits {prev.out_width}")

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].spec.in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].spec.out_width

    @property
    def arch(self) -> list[LayerSpec]:
        return [layer.spec for layer in self.layers]

    def copy(self) -> "GnnModel":
        return GnnModel([layer.copy() for layer in self.layers])

    def model_id(self) -> str:
        return hashlib.sha256(model_to_bytes(self)).hexdigest()[:16]

    def num_params(self) -> int:
        return sum(w.size for layer in self.layers for w in layer.weights)

    def cacheable_layers(self) -> list[int]:
        """Layers whose output feeds an aggregating layer (the middle layers)."""
        return [i for i in range(self.num_layers - 1) if self.layers[i + 1].spec.aggregates]


def sage_arch(in_dim: int, hidden: list[int], num_classes: int, combiner: str = "concat",
              k_max: int = 1) -> list[LayerSpec]:
    """GNN layers with branches ``k = 0..k_max`` followed by a dense classifier head."""
    arch = []
    width = in_dim
    for h in hidden:
        spec = LayerSpec(0, k_max, width, (h,) * (k_max + 1), combiner)
        arch.append(spec)
        width = spec.out_width
    arch.append(LayerSpec.dense(width, num_classes))
    return arch


def init_model(arch: list[LayerSpec], seed: int = 0, dtype=np.float32) -> GnnModel:
    """Glorot-uniform weights."""
    rng = np.random.default_rng(seed)
    layers = []
    for spec in arch:
        ws = []
        for d in spec.out_dims:
            bound = np.sqrt(6.0 / (spec.in_dim + d))
            ws.append(rng.uniform(-bound, bound, size=(spec.in_dim, d)).astype(dtype))
        layers.append(Layer(spec, ws))
    return GnnModel(layers)


# ---------------------------------------------------------------- propagation


class FullAggregator:
    """Whole-graph propagation: every node is an output row."""

    def __init__(self, adj):
        self.adj = adj

    def apply(self, x, k: int):
        for _ in range(k):
            x = K.spmm(self.adj, x)
        return x

    def self_rows(self, x):
        return x


def branch_order(w_shape: tuple[int, int]) -> str:
    """``transform`` first when it shrinks the aggregated width, else ``aggregate`` first."""
    return "transform" if w_shape[1] < w_shape[0] else "aggregate"


def layer_forward(layer: Layer, adj_or_agg, h_in, pre_activation: bool = False, betas=None):
    """One layer for every output row of the aggregator.

    ``betas`` is an optional per-branch list of input-channel masks (length
    ``in_dim``) applied before channel selection.
    """
    spec = layer.spec
    agg = adj_or_agg if hasattr(adj_or_agg, "self_rows") else FullAggregator(adj_or_agg)
    h_in = np.asarray(h_in)
    if h_in.ndim != 2 or h_in.shape[1] != spec.in_dim:
        raise ShapeError(f"layer expects {spec.in_dim} input columns, got {h_in.shape}")
    outs = []
    for b, k in enumerate(spec.powers):
        x = h_in
        if betas is not None and betas[b] is not None:
            x = K.channel_scale(x, betas[b])
        if layer.channels[b] is not None:
            x = x[:, layer.channels[b]]
        w = layer.weights[b]
        if k == 0:
            y = K.matmul(agg.self_rows(x), w)
        elif branch_order(w.shape) == "transform":
            y = agg.apply(K.matmul(x, w), k)
        else:
            y = K.matmul(agg.apply(x, k), w)
        outs.append(y)
    if spec.combiner == "concat":
        out = K.hconcat(outs) if len(outs) > 1 else outs[0]
    else:
        out = outs[0].copy()
        for y in outs[1:]:
            out += y
        out /= out.dtype.type(spec.num_branches)
    if not pre_activation and spec.activation == "relu":
        out = K.relu(out)
    return out


def model_forward(model: GnnModel, adj, attrs, masks=None, return_hidden: bool = False):
    """Chain ``layer_forward`` over all layers; returns logits (and hidden outputs)."""
    h = np.asarray(attrs)
    if h.ndim != 2 or h.shape[1] != model.in_dim:
        raise ShapeError(f"model expects {model.in_dim} attribute columns, got {h.shape}")
    hidden = []
    for i, layer in enumerate(model.layers):
        betas = masks.branch_betas(i) if masks is not None else None
        h = layer_forward(layer, adj, h, betas=betas)
        hidden.append(h)
    return (h, hidden) if return_hidden else h


# ------------------------------------------------------------------- masking


@dataclass
class PruneMask:
    """Input-channel coefficients of one layer, optionally scoped to one branch."""

    beta: np.ndarray
    clipped: bool = False
    branch: int | None = None

    @property
    def retained(self) -> int:
        return int(np.count_nonzero(self.beta))

    @property
    def kept(self) -> np.ndarray:
        return np.nonzero(self.beta)[0]

    @classmethod
    def identity(cls, c: int) -> "PruneMask":
        return cls(np.ones(c, dtype=np.float32), clipped=True)


@dataclass(eq=False)
class MaskedModel:
    base: GnnModel
    masks: list[PruneMask | None]

    def __post_init__(self):
        if len(self.masks) != self.base.num_layers:
            raise ValueError("one mask slot per layer required")
        for i, m in enumerate(self.masks):
            if m is not None and len(m.beta) != self.base.layers[i].spec.in_dim:
                raise ShapeError(f"layer {i}: mask length {len(m.beta)} != in_dim {self.base.layers[i].spec.in_dim}")

    def branch_betas(self, i: int):
        m = self.masks[i]
        if m is None:
            return None
        nb = self.base.layers[i].spec.num_branches
        if m.branch is None:
            return [m.beta] * nb
        return [m.beta if b == m.branch else None for b in range(nb)]

    def forward(self, adj, attrs, return_hidden: bool = False):
        return model_forward(self.base, adj, attrs, masks=self, return_hidden=return_hidden)


def fold_mask(masked: MaskedModel) -> GnnModel:
    """Fold clipped masks into the weights and delete pruned channels.

    A whole-layer mask on a layer with a predecessor removes the matching
    output columns of that predecessor.  On the first layer, or for a
    branch-scoped mask, the surviving input columns become a per-branch
    channel selection instead.
    """
    layers = [layer.copy() for layer in masked.base.layers]
    for i in range(len(layers) - 1, -1, -1):
        m = masked.masks[i]
        if m is None:
            continue
        if not m.clipped:
            raise ValueError(f"layer {i}: mask must be clipped before folding")
        if not np.all(np.isfinite(m.beta)):
            raise ValueError(f"layer {i}: mask has non-finite entries")
        kept = m.kept
        if len(kept) == 0:
            raise ValueError(f"layer {i}: mask removes every input channel")
        layer = layers[i]
        spec = layer.spec
        whole = m.branch is None
        if whole and i > 0 and all(c is None for c in layer.channels):
            weights = [np.ascontiguousarray((m.beta[:, None].astype(w.dtype) * w)[kept]) for w in layer.weights]
            layers[i] = Layer(replace(spec, in_dim=len(kept)), weights)
            layers[i - 1] = _drop_outputs(layers[i - 1], kept)
            continue
        branches = range(spec.num_branches) if whole else [m.branch]
        for b in branches:
            sel = layer.channels[b]
            if sel is None:
                sel = np.arange(spec.in_dim)
            w = m.beta[sel][:, None].astype(layer.weights[b].dtype) * layer.weights[b]
            live = m.beta[sel] != 0
            sel, w = sel[live], w[live]
            if len(sel) == 0:
                raise ValueError(f"layer {i} branch {b}: mask removes every input channel")
            layer.weights[b] = np.ascontiguousarray(w)
            layer.channels[b] = None if len(sel) == spec.in_dim else sel
        layers[i] = Layer(spec, layer.weights, layer.channels)
    return GnnModel(layers)


def _drop_outputs(layer: Layer, kept: np.ndarray) -> Layer:
    """Keep only output columns ``kept`` of ``layer``."""
    spec = layer.spec
    if spec.combiner == "mean":
        cols = [kept] * spec.num_branches
    else:
        offsets = np.cumsum((0,) + spec.out_dims)
        cols = [kept[(kept >= offsets[b]) & (kept < offsets[b + 1])] - offsets[b] for b in range(spec.num_branches)]
    weights = [np.ascontiguousarray(w[:, c]) for w, c in zip(layer.weights, cols)]
    return Layer(replace(spec, out_dims=tuple(len(c) for c in cols)), weights, layer.channels)


# -------------------------------------------------------------- serialization


def model_to_bytes(model: GnnModel) -> bytes:
    buf = io.BytesIO()
    buf.write(GNM_MAGIC)
    buf.write(struct.pack("<I", model.num_layers))
    for layer in model.layers:
        s = layer.spec
        has_sel = any(c is not None for c in layer.channels)
        comb = COMBINERS.index(s.combiner) | (_HAS_CHANNELS if has_sel else 0)
        buf.write(struct.pack("<IIBBI", s.k_min, s.k_max, comb, ACTIVATIONS.index(s.activation), s.in_dim))
        buf.write(np.asarray(s.out_dims, dtype="<u4").tobytes())
        if has_sel:
            for sel in layer.channels:
                if sel is None:
                    buf.write(struct.pack("<I", _ALL_CHANNELS))
                else:
                    buf.write(struct.pack("<I", len(sel)))
                    buf.write(np.asarray(sel, dtype="<u4").tobytes())
        for w in layer.weights:
            buf.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
    return buf.getvalue()


def save_model(model: GnnModel, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def _read(data: bytes, off: int, n: int, what: str) -> tuple[bytes, int]:
    if off + n > len(data):
        raise ModelFormatError(f"truncated model file while reading {what} at byte {off}")
    return data[off : off + n], off + n


def model_from_bytes(data: bytes) -> GnnModel:
    head, off = _read(data, 0, 8, "header")
    if head[:4] != GNM_MAGIC:
        raise ModelFormatError("bad magic, expected GNM1")
    (num_layers,) = struct.unpack("<I", head[4:])
    layers = []
    for li in range(num_layers):
        raw, off = _read(data, off, 14, f"layer {li} header")
        k_min, k_max, comb, act, in_dim = struct.unpack("<IIBBI", raw)
        if k_max < k_min or (comb & 0x7F) >= len(COMBINERS) or act >= len(ACTIVATIONS):
            raise ModelFormatError(f"layer {li}: invalid header fields")
        nb = k_max - k_min + 1
        raw, off = _read(data, off, 4 * nb, f"layer {li} out_dims")
        out_dims = tuple(int(x) for x in np.frombuffer(raw, dtype="<u4"))
        channels = [None] * nb
        if comb & _HAS_CHANNELS:
            for b in range(nb):
                raw, off = _read(data, off, 4, f"layer {li} channel count")
                (cnt,) = struct.unpack("<I", raw)
                if cnt != _ALL_CHANNELS:
                    raw, off = _read(data, off, 4 * cnt, f"layer {li} channels")
                    channels[b] = np.frombuffer(raw, dtype="<u4").astype(np.int64)
        try:
            spec = LayerSpec(k_min, k_max, in_dim, out_dims, COMBINERS[comb & 0x7F], ACTIVATIONS[act])
        except ValueError as exc:
            raise ModelFormatError(f"layer {li}: {exc}") from None
        weights = []
        for b in range(nb):
            rows = in_dim if channels[b] is None else len(channels[b])
            raw, off = _read(data, off, 4 * rows * out_dims[b], f"layer {li} branch {b} weights")
            weights.append(np.frombuffer(raw, dtype="<f4").reshape(rows, out_dims[b]).astype(np.float32))
        layers.append(Layer(spec, weights, channels))
    if off != len(data):
        raise ModelFormatError(f"{len(data) - off} trailing bytes after last layer")
    try:
        return GnnModel(layers)
    except ShapeError as exc:
        raise ModelFormatError(str(exc)) from None


def load_model(path) -> GnnModel:
    return model_from_bytes(Path(path).read_bytes())
