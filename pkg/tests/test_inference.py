import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gnnprune import kernels as K
from gnnprune import synth
from gnnprune.graph import normalize
from gnnprune.inference import (BatchRequest, CacheCorruptionError, HiddenFeatureCache, batched_inference,
                                build_batch_plan, cache_lookup, cache_stamp, cache_store, full_inference,
                                planned_macs, run_batches, sampled_rows)
from gnnprune.model import GnnModel, Layer, LayerSpec, init_model, model_forward, sage_arch

from conftest import random_graph


def t4_model():
    return init_model(sage_arch(2, [3, 3], 2), seed=0)


def test_t4_plan_no_cache(t4):
    model = t4_model()
    plan = build_batch_plan(t4, normalize(t4), model, BatchRequest([0], caps=(None,)))
    assert plan.layers[2].supports.tolist() == [0]
    assert plan.layers[1].supports.tolist() == [0, 1, 2]
    assert plan.layers[0].supports.tolist() == [0, 1, 2, 3]


def test_t4_plan_with_cached_node(t4):
    model = t4_model()
    req = BatchRequest([0], caps=(None,), use_cache=True)
    cache = HiddenFeatureCache()
    cache.store(0, 2, np.zeros(6, np.float32), t4.version, cache_stamp(model, req, "row_mean"))
    plan = build_batch_plan(t4, normalize(t4), model, req, cache)
    lp = plan.layers[0]
    assert lp.visited.tolist() == [2]
    assert lp.computed.tolist() == [0, 1]
    assert lp.supports.tolist() == [0, 1, 2]
    assert 3 not in lp.supports


def test_zero_cap_at_hop_two(t4):
    plan = build_batch_plan(t4, normalize(t4), t4_model(), BatchRequest([3], caps=(None, 0)))
    assert plan.layers[1].supports.tolist() == [2, 3]
    assert plan.layers[0].supports.tolist() == [2, 3]


def test_request_validation(t4):
    with pytest.raises(ValueError):
        BatchRequest([])
    with pytest.raises(ValueError):
        BatchRequest([0], caps=(-1,))
    with pytest.raises(IndexError):
        build_batch_plan(t4, normalize(t4), t4_model(), BatchRequest([4]))
    assert BatchRequest([0], caps=(None, 32)).cap(1) is None
    assert BatchRequest([0], caps=(None, 32)).cap(5) == 32


def test_full_inference_identity_and_sink(t4):
    layer = Layer(LayerSpec(0, 1, 2, (2, 2)), [np.eye(2, dtype=np.float32)] * 2)
    sink = []
    out = full_inference(GnnModel([layer]), t4, sink=sink)
    assert np.allclose(out, [[1, 0, 0.5, 1.0], [0, 1, 1.0, 0.5], [1, 1, 1.0, 1 / 3], [2, 0, 1.0, 1.0]])
    rec = sink[0]
    assert rec["mode"] == "full" and rec["macs"] == sum(entry["macs"] for entry in rec["layers"])
    with pytest.raises(ValueError):
        full_inference(GnnModel([layer]), synth.t4().bumped(indptr=np.zeros(1, np.int64), indices=np.zeros(0, np.int32),
                                                            attributes=np.zeros((0, 2), np.float32),
                                                            labels=np.zeros(0, np.int64), split=np.zeros(0, np.uint8)))


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 80), st.floats(0.0, 0.3), st.integers(0, 10**6), st.sampled_from(["concat", "mean"]),
       st.integers(1, 2))
def test_batched_equals_full(n, p, seed, combiner, k_max):
    g = random_graph(n, p, 5, seed, directed=seed % 2 == 0)
    model = init_model(sage_arch(5, [4, 6], 3, combiner, k_max), seed=seed)
    adj = normalize(g)
    full = model_forward(model, adj, g.attributes)
    rng = np.random.default_rng(seed)
    targets = rng.choice(n, size=int(rng.integers(1, n + 1)), replace=True)
    out = batched_inference(model, g, adj, BatchRequest(targets, caps=(None,)))
    assert np.abs(out - full[targets]).max() <= 1e-5


def test_gcn_layers_without_self_branch():
    g = random_graph(40, 0.1, 4, 3)
    model = init_model([LayerSpec(1, 1, 4, (8,)), LayerSpec(1, 1, 8, (5,)), LayerSpec.dense(5, 3)], seed=1)
    adj = normalize(g)
    out = batched_inference(model, g, adj, BatchRequest([0, 7, 7, 39], caps=(None,)))
    assert np.abs(out - model_forward(model, adj, g.attributes)[[0, 7, 7, 39]]).max() <= 1e-5


def test_request_order_stability():
    g = random_graph(30, 0.2, 5, 1)
    model = init_model(sage_arch(5, [4, 4], 3), seed=2)
    adj = normalize(g)
    a = batched_inference(model, g, adj, BatchRequest([5, 1, 3]))
    b = batched_inference(model, g, adj, BatchRequest([3, 5, 1]))
    assert np.array_equal(a[[2, 0, 1]], b)


def test_sampling_is_reproducible_and_scaled():
    g = synth.regular(100, 10, seed=0)
    adj = normalize(g)
    rows = np.array([3, 50, 7])
    a = sampled_rows(adj, rows, 4, seed=1, layer=0)
    b = sampled_rows(adj, rows[::-1], 4, seed=1, layer=0)
    assert np.diff(a[0]).tolist() == [4, 4, 4]
    assert sorted(a[1][:4]) == sorted(b[1][8:])
    assert np.allclose(a[2], 0.1 * 10 / 4)  # kept weights rescaled by deg / cap
    other = sampled_rows(adj, rows, 4, seed=2, layer=0)
    assert not np.array_equal(a[1], other[1])


def cache_setup(n=200, seed=0, caps=(None, 8)):
    g = synth.sbm(n, 3, 0.06, 0.01, attr_dim=6, seed=seed)
    model = init_model(sage_arch(6, [8, 8], 3), seed=seed)
    return g, model, normalize(g), caps


def test_cache_soundness_and_fewer_supports():
    g, model, adj, caps = cache_setup()
    targets = np.arange(0, 200, 7)
    cache = HiddenFeatureCache()
    sink = []
    first = batched_inference(model, g, adj, BatchRequest(targets, caps, use_cache=True, store_roots=True), cache, sink)
    second = batched_inference(model, g, adj, BatchRequest(targets, caps, use_cache=True), cache, sink)
    plain = batched_inference(model, g, adj, BatchRequest(targets, caps))
    assert np.array_equal(first, plain) and np.array_equal(second, plain)
    assert sink[1]["layers"][0]["computed"] < sink[0]["layers"][0]["computed"]
    assert sink[1]["layers"][0]["visited"] > 0
    assert sink[1]["cache_hits"] == len(targets)


def test_stale_cache_ignored():
    g, model, adj, caps = cache_setup()
    targets = np.arange(0, 200, 5)
    cache = HiddenFeatureCache()
    batched_inference(model, g, adj, BatchRequest(targets, caps, use_cache=True, store_roots=True), cache)
    g2 = g.bumped()
    adj2 = normalize(g2)
    sink = []
    out = batched_inference(model, g2, adj2, BatchRequest(targets, caps, use_cache=True), cache, sink)
    assert np.array_equal(out, batched_inference(model, g2, adj2, BatchRequest(targets, caps)))
    assert sink[0]["cache_hits"] == 0
    with pytest.raises(ValueError, match="version"):
        batched_inference(model, g2, adj, BatchRequest(targets, caps))


def test_max_age_knob():
    g, model, adj, caps = cache_setup()
    cache = HiddenFeatureCache(max_age=1)
    req = BatchRequest([1, 2], caps, use_cache=True, store_roots=True)
    batched_inference(model, g, adj, req, cache)
    stamp = cache_stamp(model, req, "row_mean")
    assert cache.fresh(0, 1, g.version + 1, stamp)
    assert not cache.fresh(0, 1, g.version + 2, stamp)


def test_cache_store_lookup_evict():
    cache = HiddenFeatureCache(capacity=2)
    v = np.arange(3, dtype=np.float32)
    cache_store(cache, 0, 5, v, 0, "m")
    assert np.array_equal(cache_lookup(cache, 0, 5, 0, "m"), v)
    assert cache_lookup(cache, 0, 5, 1, "m") is None
    assert cache_lookup(cache, 0, 5, 0, "other") is None
    cache_store(cache, 0, 6, v, 0, "m")
    cache_store(cache, 0, 7, v, 0, "m")
    assert (0, 5) not in cache and len(cache) == 2
    assert cache.stats.evictions == 1 and cache.stats.hits == 1 and cache.stats.misses == 2
    with pytest.raises(ValueError):
        cache_store(cache, 0, 8, np.zeros(4), 0, "m")


def test_cache_save_load(tmp_path):
    cache = HiddenFeatureCache(capacity=10, max_age=2)
    for node in (3, 1, 2):
        cache.store(0, node, np.full(4, node, np.float32), 7, "abc")
    cache.store(1, 9, np.ones(2, np.float32), 7, "abc")
    cache.save(tmp_path / "c.npz")
    back = HiddenFeatureCache.load(tmp_path / "c.npz")
    assert back.capacity == 10 and back.max_age == 2
    assert list(back._entries) == list(cache._entries)
    assert np.array_equal(back.lookup(0, 2, 7, "abc"), np.full(4, 2))


def test_corrupt_width_raises():
    g, model, adj, caps = cache_setup()
    req = BatchRequest([0], caps, use_cache=True)
    cache = HiddenFeatureCache()
    neighbor = int(g.neighbors(0)[0])
    cache.store(0, neighbor, np.zeros(5, np.float32), g.version, cache_stamp(model, req, "row_mean"))
    with pytest.raises(CacheCorruptionError):
        batched_inference(model, g, adj, req, cache)


def test_store_all_mode():
    g, model, adj, caps = cache_setup()
    cache = HiddenFeatureCache()
    req = BatchRequest([0, 1], caps, use_cache=True, store_all=True)
    plan = build_batch_plan(g, adj, model, req)
    batched_inference(model, g, adj, req, cache)
    assert len(cache) == len(plan.layers[0].computed)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6))
def test_monotone_frontier(seed):
    g, model, adj, caps = cache_setup(n=120, seed=seed % 5)
    rng = np.random.default_rng(seed)
    targets = rng.choice(120, size=10, replace=False)
    req = BatchRequest(targets, caps, use_cache=True)
    stamp = cache_stamp(model, req, "row_mean")
    cache = HiddenFeatureCache()
    prev = build_batch_plan(g, adj, model, req, cache).computed()
    for node in rng.choice(120, size=15, replace=False):
        cache.store(0, node, np.zeros(16, np.float32), g.version, stamp)
        cur = build_batch_plan(g, adj, model, req, cache).computed()
        assert all(c <= p for c, p in zip(cur, prev))
        prev = cur


@pytest.mark.parametrize("d,depth", [(2, 4), (3, 3), (4, 3)])
def test_neighbor_explosion_law_on_trees(d, depth):
    g = synth.tree(d, depth, attr_dim=4)
    model = init_model(sage_arch(4, [3, 3], 2), seed=0)
    plan = build_batch_plan(g, normalize(g), model, BatchRequest([0], caps=(None,)))
    L = 2
    assert len(plan.layers[0].supports) == sum(d**l for l in range(L + 1))
    assert len(plan.layers[1].supports) == sum(d**l for l in range(L))


def test_tree_counts_sum_over_targets():
    g = synth.tree(3, 4, attr_dim=4)
    model = init_model(sage_arch(4, [3, 3], 2), seed=0)
    sink = []
    leaves_parent = [1, 2, 3]  # depth-1 nodes, each with full 2-hop subtrees
    batched_inference(model, g, None, BatchRequest(leaves_parent, caps=(None,)), sink=sink, tree_counts=True)
    assert sink[0]["layers"][0]["supports_per_target"] == 3 * (1 + 3 + 9)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from([(None,), (None, 2), (3, 1)]), st.integers(1, 3))
def test_planned_macs_match_counter(seed, caps, k_max):
    g = random_graph(50, 0.12, 6, seed)
    model = init_model(sage_arch(6, [5, 9], 3, k_max=k_max), seed=seed)
    adj = normalize(g)
    req = BatchRequest(np.random.default_rng(seed).choice(50, 6), caps, seed=seed)
    plan = build_batch_plan(g, adj, model, req)
    sink = []
    batched_inference(model, g, adj, req, sink=sink)
    assert sink[0]["macs"] == planned_macs(plan, model)


def test_run_batches_matches_single_batch():
    g, model, adj, caps = cache_setup()
    targets = np.arange(200)
    one = batched_inference(model, g, adj, BatchRequest(targets, caps))
    many = run_batches(model, g, targets, batch_size=37, caps=caps, adj=adj)
    assert np.array_equal(one, many)
    cache = HiddenFeatureCache()
    cached = run_batches(model, g, targets, batch_size=37, caps=caps, adj=adj, cache=cache)
    assert np.array_equal(cached, one)
    with pytest.raises(ValueError):
        run_batches(model, g, targets, batch_size=0)


def test_capped_batch_uses_fewer_macs():
    g = synth.regular(400, 40, attr_dim=8, seed=0)
    model = init_model(sage_arch(8, [8, 8], 2), seed=0)
    adj = normalize(g)
    with K.count_macs() as capped:
        batched_inference(model, g, adj, BatchRequest([0, 1], caps=(None, 4)))
    with K.count_macs() as uncapped:
        batched_inference(model, g, adj, BatchRequest([0, 1], caps=(None,)))
    assert capped.total < uncapped.total
