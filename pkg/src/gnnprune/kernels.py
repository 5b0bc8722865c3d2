"""Dense and sparse kernels shared by training, pruning and inference.

The hot loops (``spmm`` and ``matmul``) run in a compiled extension when it is
importable and fall back to a numpy implementation otherwise.  Both backends use
the same per-element accumulation order, so they agree bitwise.

Set ``GNNPRUNE_BACKEND=python`` to force the fallback and ``GNNPRUNE_THREADS``
to cap the worker count of the compiled backend.
"""

from __future__ import annotations

import contextlib
import contextvars
import os

import numpy as np

try:
    from gnnprune import _ckernels
except ImportError:  # pragma: no cover - exercised only without a build
    _ckernels = None


class ShapeError(ValueError):
    """Operand shapes violate a kernel contract."""


_backend = "c" if _ckernels is not None and os.environ.get("GNNPRUNE_BACKEND", "") != "python" else "python"
_mac_tally: contextvars.ContextVar[list | None] = contextvars.ContextVar("mac_tally", default=None)


def compiled_available() -> bool:
    return _ckernels is not None


def get_backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    global _backend
    if name not in ("c", "python"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "c" and _ckernels is None:
        raise RuntimeError("compiled kernels are not built; run `pip install -e .`")
    _backend = name


@contextlib.contextmanager
def backend(name: str):
    prev = _backend
    set_backend(name)
    try:
        yield
    finally:
        set_backend(prev)


def num_threads() -> int:
    raw = os.environ.get("GNNPRUNE_THREADS")
    if raw:
        return max(1, int(raw))
    return os.cpu_count() or 1


class MacCounter:
    """Tally of multiply-accumulates performed by ``spmm`` and ``matmul``."""

    def __init__(self):
        self.spmm = 0
        self.matmul = 0

    @property
    def total(self) -> int:
        return self.spmm + self.matmul


@contextlib.contextmanager
def count_macs():
    """Count kernel MACs inside the block; nested counters all receive the tally."""
    counter = MacCounter()
    stack = list(_mac_tally.get() or [])
    stack.append(counter)
    token = _mac_tally.set(stack)
    try:
        yield counter
    finally:
        _mac_tally.reset(token)


def _tally(kind: str, n: int) -> None:
    stack = _mac_tally.get()
    if stack:
        for c in stack:
            setattr(c, kind, getattr(c, kind) + int(n))


def _float_dtype(*arrays) -> np.dtype:
    return np.dtype(np.float64) if any(a.dtype == np.float64 for a in arrays) else np.dtype(np.float32)


def spmm_csr(indptr, indices, values, h) -> np.ndarray:
    """``out[i] = sum_p values[p] * h[indices[p]]`` over row ``i`` of a CSR operator.

    The operator may be rectangular: ``len(indptr) - 1`` output rows, ``h`` rows
    addressed by ``indices``.  Row sums run in CSR order.
    """
    h = np.asarray(h)
    if h.ndim != 2:
        raise ShapeError(f"spmm expects a 2-d dense operand, got {h.ndim}-d")
    dtype = _float_dtype(h)
    h = np.ascontiguousarray(h, dtype=dtype)
    indptr = np.ascontiguousarray(indptr, dtype=np.int64)
    indices = np.ascontiguousarray(indices, dtype=np.int32)
    values = np.ascontiguousarray(values, dtype=dtype)
    nrows = len(indptr) - 1
    if len(indices) and (indices.max() >= h.shape[0]):
        raise ShapeError(f"operator references row {indices.max()} but operand has {h.shape[0]} rows")
    out = np.empty((nrows, h.shape[1]), dtype=dtype)
    _tally("spmm", len(indices) * h.shape[1])
    if _backend == "c":
        _ckernels.spmm(indptr, indices, values, h, out, num_threads())
        return out
    out[:] = 0
    if nrows == 0 or len(indices) == 0:
        return out
    deg = np.diff(indptr)
    # One pass per within-row position keeps the per-row CSR summation order.
    for pos in range(int(deg.max())):
        rows = np.nonzero(deg > pos)[0]
        p = indptr[rows] + pos
        out[rows] += values[p, None] * h[indices[p]]
    return out


def spmm(adj, h) -> np.ndarray:
    """Apply a ``NormalizedAdjacency`` to a dense matrix with ``num_nodes`` rows."""
    h = np.asarray(h)
    if h.ndim != 2 or h.shape[0] != adj.num_nodes:
        raise ShapeError(f"spmm: operand has shape {h.shape}, adjacency covers {adj.num_nodes} nodes")
    return spmm_csr(adj.indptr, adj.indices, adj.values, h)


def matmul(a, b) -> np.ndarray:
    """Dense product with a fixed accumulation order over the shared dimension."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    dtype = _float_dtype(a, b)
    a = np.ascontiguousarray(a, dtype=dtype)
    b = np.ascontiguousarray(b, dtype=dtype)
    out = np.empty((a.shape[0], b.shape[1]), dtype=dtype)
    _tally("matmul", a.shape[0] * a.shape[1] * b.shape[1])
    if _backend == "c":
        _ckernels.matmul(a, b, out, num_threads())
        return out
    out[:] = 0
    for k in range(a.shape[1]):
        out += a[:, k : k + 1] * b[k]
    return out


def hconcat(parts) -> np.ndarray:
    parts = [np.asarray(p) for p in parts]
    if not parts:
        raise ShapeError("hconcat needs at least one part")
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"hconcat: row counts differ {sorted(rows)}")
    return np.concatenate(parts, axis=1)


def channel_scale(h, beta) -> np.ndarray:
    h = np.asarray(h)
    beta = np.asarray(beta)
    if beta.ndim != 1 or beta.shape[0] != h.shape[1]:
        raise ShapeError(f"channel_scale: mask length {beta.shape} vs {h.shape[1]} channels")
    return h * beta.astype(h.dtype, copy=False)


def relu(h) -> np.ndarray:
    return np.maximum(h, 0)


def frobenius_mse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"frobenius_mse: shapes {a.shape} and {b.shape} differ")
    if a.size == 0:
        return 0.0
    return float(np.mean((a - b) ** 2))
