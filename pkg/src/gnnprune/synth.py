"""Seeded synthetic graphs with class-correlated node attributes."""

from __future__ import annotations

import numpy as np

from gnnprune.graph import Graph, from_edges


def _splits(n: int, rng, fractions=(0.5, 0.2, 0.3)) -> np.ndarray:
    perm = rng.permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    split = np.full(n, 2, dtype=np.uint8)
    split[perm[:n_train]] = 0
    split[perm[n_train : n_train + n_val]] = 1
    return split


def class_attributes(labels, num_classes: int, attr_dim: int, noise: float, rng,
                     informative: int | None = None) -> np.ndarray:
    """Gaussian class centroids plus isotropic noise; only ``informative`` dims carry signal."""
    informative = attr_dim if informative is None else informative
    centers = np.zeros((num_classes, attr_dim))
    centers[:, :informative] = rng.standard_normal((num_classes, informative))
    x = centers[labels] + noise * rng.standard_normal((len(labels), attr_dim))
    return x.astype(np.float32)


def sbm(n: int, blocks: int, p_in: float, p_out: float, attr_dim: int = 16, noise: float = 1.0,
        seed: int = 0, fractions=(0.5, 0.2, 0.3), informative: int | None = None) -> Graph:
    """Stochastic block model; the block of a node is its class label."""
    if n <= 0:
        raise ValueError("n must be positive")
    if blocks < 1 or blocks > n:
        raise ValueError("need 1 <= blocks <= n")
    if not (0 <= p_out <= 1 and 0 <= p_in <= 1):
        raise ValueError("edge probabilities must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, blocks, size=n)
    members = [np.nonzero(labels == c)[0] for c in range(blocks)]
    edges = []
    for a in range(blocks):
        for b in range(a, blocks):
            na, nb = len(members[a]), len(members[b])
            pairs = na * (na - 1) // 2 if a == b else na * nb
            if pairs == 0:
                continue
            m = rng.binomial(pairs, p_in if a == b else p_out)
            src = members[a][rng.integers(0, na, size=m)]
            dst = members[b][rng.integers(0, nb, size=m)]
            edges.append(np.stack([src, dst], axis=1))
    edges = np.concatenate(edges) if edges else np.zeros((0, 2), dtype=np.int64)
    attrs = class_attributes(labels, blocks, attr_dim, noise, rng, informative)
    return from_edges(n, edges, attrs, labels=labels, split=_splits(n, rng, fractions), num_classes=blocks)


def regular(n: int, d: int, attr_dim: int = 8, num_classes: int = 2, noise: float = 1.0, seed: int = 0) -> Graph:
    """Relabelled circulant graph where every node has exactly ``d`` neighbors."""
    if d >= n or (d % 2 and n % 2):
        raise ValueError(f"no simple {d}-regular circulant on {n} nodes")
    rng = np.random.default_rng(seed)
    offsets = list(range(1, d // 2 + 1))
    base = np.arange(n)
    edges = [np.stack([base, (base + o) % n], axis=1) for o in offsets]
    if d % 2:
        half = base[: n // 2]
        edges.append(np.stack([half, half + n // 2], axis=1))
    perm = rng.permutation(n)
    edges = perm[np.concatenate(edges)]
    labels = rng.integers(0, num_classes, size=n)
    attrs = class_attributes(labels, num_classes, attr_dim, noise, rng)
    return from_edges(n, edges, attrs, labels=labels, split=_splits(n, rng), num_classes=num_classes)


def tree(d: int, depth: int, attr_dim: int = 4, num_classes: int = 2, seed: int = 0,
         directed: bool = True) -> Graph:
    """Complete ``d``-ary tree with ``depth`` levels below the root.

    With ``directed=True`` each row lists only the children, so ``l``-hop
    neighborhoods of the root hold exactly ``d**l`` distinct nodes.
    """
    if d < 1 or depth < 0:
        raise ValueError("need d >= 1 and depth >= 0")
    n = sum(d**level for level in range(depth + 1))
    child = np.arange(1, n)
    parent = (child - 1) // d
    edges = np.stack([parent, child], axis=1)
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, num_classes, size=n)
    attrs = class_attributes(labels, num_classes, attr_dim, 1.0, rng)
    return from_edges(n, edges, attrs, symmetric=not directed, labels=labels, split=_splits(n, rng),
                      num_classes=num_classes)


def power_law(n: int, avg_degree: float, exponent: float = 2.5, attr_dim: int = 8, num_classes: int = 2,
              seed: int = 0) -> Graph:
    """Chung-Lu graph with a power-law expected degree sequence."""
    if n <= 1:
        raise ValueError("n must exceed 1")
    rng = np.random.default_rng(seed)
    w = (np.arange(1, n + 1)) ** (-1.0 / (exponent - 1))
    w /= w.sum()
    m = int(round(avg_degree * n / 2))
    src = rng.choice(n, size=m, p=w)
    dst = rng.choice(n, size=m, p=w)
    perm = rng.permutation(n)
    edges = perm[np.stack([src, dst], axis=1)]
    labels = rng.integers(0, num_classes, size=n)
    attrs = class_attributes(labels, num_classes, attr_dim, 1.0, rng)
    return from_edges(n, edges, attrs, labels=labels, split=_splits(n, rng), num_classes=num_classes)


def random_graph(n: int, p: float, attr_dim: int, seed: int = 0, num_classes: int = 2) -> Graph:
    """Erdos-Renyi graph (undirected) with gaussian attributes."""
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(n, 1)
    keep = rng.random(len(iu)) < p
    attrs = rng.standard_normal((n, attr_dim)).astype(np.float32)
    labels = rng.integers(0, num_classes, size=n)
    return from_edges(n, np.stack([iu[keep], ju[keep]], axis=1), attrs, labels=labels,
                      split=_splits(n, rng), num_classes=num_classes)


def duplicated_channels(n_rows: int, n_pairs: int, out_dim: int, seed: int = 0, jitter: float = 0.01):
    """Observation matrix whose channels come in near-identical twin pairs.

    Returns ``(h, w)``: channels ``2p`` and ``2p+1`` carry the same signal
    (up to ``jitter``), pair ``p`` has scale ``sigma_p`` drawn log-uniformly
    over two decades, and the twin rows of ``w`` are parallel with random split
    factors, so one channel per pair suffices.
    """
    rng = np.random.default_rng(seed)
    sigma = np.exp(rng.uniform(np.log(0.1), np.log(10.0), size=n_pairs))
    base = rng.standard_normal((n_rows, n_pairs)) * sigma
    h = np.repeat(base, 2, axis=1) + jitter * rng.standard_normal((n_rows, 2 * n_pairs))
    direction = rng.standard_normal((n_pairs, out_dim)) / np.sqrt(out_dim)
    split = rng.uniform(0.2, 0.8, size=n_pairs)
    w = np.empty((2 * n_pairs, out_dim))
    w[0::2] = direction * split[:, None]
    w[1::2] = direction * (1 - split[:, None])
    return h.astype(np.float32), w.astype(np.float32)


def correlated_graph(n: int, n_pairs: int = 32, blocks: int = 4, avg_degree: float = 6.0,
                     homophily: float = 0.6, seed: int = 0, jitter: float = 0.05) -> Graph:
    """SBM whose ``2*n_pairs`` attribute channels form near-duplicate twin pairs.

    Pair ``p`` carries a class signal whose strength decays with ``p``, so a
    good channel selector keeps one twin of each strong pair.
    """
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, blocks, size=n)
    members = [np.nonzero(labels == c)[0] for c in range(blocks)]
    m = int(avg_degree * n / 2)
    same = rng.random(m) < homophily
    src = rng.integers(0, n, size=m)
    dst = np.where(same, 0, rng.integers(0, n, size=m))
    for c in range(blocks):
        sel = same & (labels[src] == c)
        dst[sel] = members[c][rng.integers(0, len(members[c]), size=int(sel.sum()))]
    strength = 1.5 * np.exp(-np.arange(n_pairs) / (n_pairs / 4))
    centers = rng.standard_normal((blocks, n_pairs)) * strength
    base = centers[labels] + rng.standard_normal((n, n_pairs))
    attrs = np.repeat(base, 2, axis=1) + jitter * rng.standard_normal((n, 2 * n_pairs))
    return from_edges(n, np.stack([src, dst], axis=1), attrs.astype(np.float32), labels=labels,
                      split=_splits(n, rng, (0.4, 0.2, 0.4)), num_classes=blocks)


def t4() -> Graph:
    """Four-node toy graph: edges 0-1, 0-2, 1-2, 2-3."""
    return from_edges(4, [(0, 1), (0, 2), (1, 2), (2, 3)], [[1, 0], [0, 1], [1, 1], [2, 0]],
                      labels=[0, 1, 0, 1], split=[0, 0, 0, 2], num_classes=2)


def generate(params: dict, seed: int = 0) -> Graph:
    """Build a graph from a ``{"kind": ..., ...}`` parameter dict."""
    p = dict(params)
    kind = p.pop("kind", "sbm")
    p.pop("name", None)
    if kind == "sbm":
        keys = ("n", "blocks", "p_in", "p_out", "attr_dim", "noise", "informative")
        return sbm(seed=seed, **{k: p[k] for k in keys if k in p})
    if kind == "regular":
        keys = ("n", "d", "attr_dim", "num_classes", "noise")
        return regular(seed=seed, **{k: p[k] for k in keys if k in p})
    if kind == "tree":
        keys = ("d", "depth", "attr_dim", "num_classes")
        return tree(seed=seed, directed=False, **{k: p[k] for k in keys if k in p})
    if kind == "power_law":
        keys = ("n", "avg_degree", "exponent", "attr_dim", "num_classes")
        return power_law(seed=seed, **{k: p[k] for k in keys if k in p})
    if kind == "correlated":
        keys = ("n", "n_pairs", "blocks", "avg_degree", "homophily")
        return correlated_graph(seed=seed, **{k: p[k] for k in keys if k in p})
    raise ValueError(f"unknown graph kind {kind!r}")
