"""Command-line pipeline: synth, train, prune, infer, estimate, bench."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from gnnprune import cost, synth
from gnnprune.config import load_config, substream
from gnnprune.graph import degree_stats, load_graph, normalize, save_graph, symmetrize, training_graph
from gnnprune.inference import HiddenFeatureCache, full_inference, run_batches
from gnnprune.model import fold_mask, load_model, sage_arch, save_model
from gnnprune.pruner import PenaltySchedule, prune_model
from gnnprune.trainer import TrainConfig, evaluate, f1_micro, predict, retrain, train

log = logging.getLogger("gnnprune")

BENCH_COLUMNS = ["dataset", "scheme", "eta", "mode", "macs_per_node", "mem_bytes", "latency_us_p50",
                 "latency_us_p95", "f1_micro"]


class CliError(RuntimeError):
    pass


def _write_json(path, doc) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _train_config(cfg: dict, seed_name: str = "train") -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(epochs=t["epochs"], learning_rate=t["learning_rate"], optimizer=t["optimizer"],
                       early_stop_patience=t["early_stop_patience"], scheme=t["scheme"],
                       seed=substream(cfg["seed"], seed_name))


def _schedule(cfg: dict) -> PenaltySchedule:
    return PenaltySchedule(**cfg["prune"]["schedule"])


def _graph(args):
    g = load_graph(args.graph)
    return symmetrize(g) if getattr(args, "symmetrize", False) else g


def _split_nodes(g, split: str) -> np.ndarray:
    return np.arange(g.num_nodes) if split == "all" else g.nodes_in(split)


# --------------------------------------------------------------- commands


def cmd_synth(args, cfg) -> int:
    params = dict(cfg["graph"])
    for key in ("kind", "n", "blocks", "p_in", "p_out", "attr_dim", "noise", "d", "depth"):
        value = getattr(args, key, None)
        if value is not None:
            params[key] = value
    if params.get("n", 1) <= 0 and params.get("kind") != "tree":
        raise CliError(f"graph size must be positive, got n={params['n']}")
    g = synth.generate(params, seed=substream(cfg["seed"], "synth"))
    save_graph(g, args.out)
    stats = degree_stats(g)
    _write_json(args.summary, {"nodes": g.num_nodes, "edges": g.num_edges, "attr_dim": g.attr_dim,
                               "num_classes": g.num_classes, "avg_degree": stats.avg_degree,
                               "max_degree": stats.max_degree, "isolated": stats.isolated_count})
    return 0


def cmd_train(args, cfg) -> int:
    g = _graph(args)
    arch = sage_arch(g.attr_dim, cfg["arch"]["hidden"], g.num_classes, cfg["arch"]["combiner"], cfg["arch"]["k_max"])
    result = train(g, arch, _train_config(cfg), return_result=True)
    save_model(result.model, args.out)
    if args.log:
        result.write_log(args.log)
    log.info("best epoch %d, val F1 %.4f", result.best_epoch, result.best_val_f1)
    return 0


def prune_pipeline(g, model, cfg, scheme: str, eta: float, do_retrain: bool):
    """Prune, fold and optionally retrain; returns ``(model, report dict)``."""
    p = cfg["prune"]
    g_train = training_graph(g)
    masked, reports = prune_model(model, g_train, scheme, eta, _schedule(cfg), refit_mode=p["refit"],
                                  seed=substream(cfg["seed"], "prune"), batch_size=p["batch_size"],
                                  outer_iterations=p["outer_iterations"], graph_scheme=cfg["train"]["scheme"])
    folded = fold_mask(masked)
    adj = normalize(g, cfg["train"]["scheme"])
    report = {
        "scheme": scheme,
        "eta": eta,
        "layers": [r.to_json() for r in sorted(reports, key=lambda r: r.layer_idx)],
        "test_f1_original": evaluate(model, g, "test", adj),
        "test_f1_pruned": evaluate(folded, g, "test", adj),
        "params_original": model.num_params(),
        "params_pruned": folded.num_params(),
    }
    if do_retrain:
        result = retrain(g, folded, _train_config(cfg, "retrain"), return_result=True)
        folded = result.model
        report["retrain"] = {"best_epoch": result.best_epoch, "best_val_f1": result.best_val_f1,
                             "epochs_run": len(result.history)}
        report["test_f1_retrained"] = evaluate(folded, g, "test", adj)
    return folded, report


def cmd_prune(args, cfg) -> int:
    g = _graph(args)
    model = load_model(args.model)
    scheme = args.scheme or cfg["prune"]["scheme"]
    eta = args.eta if args.eta is not None else cfg["prune"]["eta"]
    folded, report = prune_pipeline(g, model, cfg, scheme, eta, args.retrain)
    save_model(folded, args.out)
    _write_json(args.report, report)
    return 0


def _infer_settings(args, cfg) -> dict:
    inf = dict(cfg["infer"])
    if args.mode:
        inf["mode"] = args.mode
    if args.batch_size is not None:
        inf["batch_size"] = args.batch_size
    if args.cap_hop2 is not None:
        caps = list(inf["caps"]) + [None] * max(0, 2 - len(inf["caps"]))
        caps[1] = args.cap_hop2
        inf["caps"] = caps
    if args.cache is not None:
        inf["cache"] = True
    if args.warm_cache_train_val:
        inf["warm_cache_train_val"] = True
    if args.split:
        inf["split"] = args.split
    return inf


def cmd_infer(args, cfg) -> int:
    g = _graph(args)
    model = load_model(args.model)
    inf = _infer_settings(args, cfg)
    adj = normalize(g, cfg["train"]["scheme"])
    targets = _split_nodes(g, inf["split"])
    records = []
    cache = None
    if inf["mode"] == "full":
        logits = full_inference(model, g, adj, sink=records)[targets]
    else:
        cache_path = Path(args.cache) if args.cache else None
        if inf["cache"]:
            if cache_path is not None and cache_path.exists():
                cache = HiddenFeatureCache.load(cache_path)
            else:
                cache = HiddenFeatureCache(inf["cache_capacity"])
        plan_seed = substream(cfg["seed"], "plan")
        if cache is not None and inf["warm_cache_train_val"]:
            warm = np.concatenate([g.nodes_in("train"), g.nodes_in("val")])
            run_batches(model, g, warm, inf["batch_size"], inf["caps"], plan_seed, cache, True, adj)
            cache.stats.hits = cache.stats.misses = 0
        for p in range(args.passes):
            sink = []
            logits = run_batches(model, g, targets, inf["batch_size"], inf["caps"], plan_seed, cache, True, adj,
                                 sink, tree_counts=args.tree_counts)
            for rec in sink:
                rec["pass"] = p
            records.extend(sink)
        if cache is not None and cache_path is not None:
            cache.save(cache_path)
    pred = predict(logits, g.multilabel)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["node", "prediction"])
            for v, row in zip(targets, pred):
                w.writerow([int(v), " ".join(str(int(x)) for x in np.atleast_1d(row))])
    doc = {"mode": inf["mode"], "split": inf["split"], "f1_micro": f1_micro(pred, g.labels[targets]),
           "batches": records}
    if cache is not None:
        doc["cache"] = {"entries": len(cache), "hits": cache.stats.hits, "misses": cache.stats.misses,
                        "stores": cache.stats.stores, "evictions": cache.stats.evictions}
    _write_json(args.instrumentation, doc)
    return 0


def cmd_estimate(args, cfg) -> int:
    if args.model:
        dims = cost.model_dims(load_model(args.model))
    else:
        g_dims = cfg["graph"]
        dims = cost.sage_dims(g_dims["attr_dim"], cfg["arch"]["hidden"], g_dims.get("blocks", 2))
    if args.graph:
        g = _graph(args)
        nodes, d = g.num_nodes, degree_stats(g).avg_degree
    else:
        nodes, d = args.nodes, args.degree
    if args.prune_scheme:
        dims = cost.pruned_dims(dims, args.prune_scheme, args.eta)
    if args.mode == "full":
        report = cost.full_cost(dims, nodes, d)
    else:
        caps = [None if c in ("none", "inf") else int(c) for c in args.caps.split(",")]
        report = cost.batched_cost(dims, d, caps, args.cache_fraction)
    lines = [f"{'layer':>5} {'macs_per_node':>15} {'supports':>10}"]
    for i, (m, s) in enumerate(zip(report.macs_per_node, report.supports_per_layer)):
        lines.append(f"{i:>5} {m:>15.1f} {s:>10.2f}")
    lines.append(f"{'total':>5} {report.total_macs_per_node:>15.1f}")
    lines.append(f"memory_bytes {report.memory_bytes}")
    print("\n".join(lines))
    if args.json:
        _write_json(args.json, report.to_json())
    return 0


def _percentiles(samples) -> tuple[float, float]:
    arr = np.asarray(samples, dtype=np.float64)
    return float(np.percentile(arr, 50)), float(np.percentile(arr, 95))


def measure(model, g, adj, mode: str, inf: dict, repeats: int, warmup: int, seed: int):
    """Per-node latency samples (us), measured MACs per node and test F1."""
    targets = g.nodes_in(inf["split"]) if inf["split"] != "all" else np.arange(g.num_nodes)
    samples = []
    macs = 0
    logits = None
    for r in range(warmup + repeats):
        sink = []
        if mode == "full":
            t0 = time.perf_counter()
            out = full_inference(model, g, adj, sink=sink)
            elapsed = (time.perf_counter() - t0) * 1e6
            per_node = [elapsed / g.num_nodes]
            logits = out[targets]
            macs_per_node = sink[0]["macs"] / g.num_nodes
        else:
            logits = run_batches(model, g, targets, inf["batch_size"], inf["caps"], seed, None, False, adj, sink)
            per_node = [rec["latency_us"] / rec["targets"] for rec in sink]
            macs_per_node = sum(rec["macs"] for rec in sink) / len(targets)
        if r >= warmup:
            samples.extend(per_node)
            macs = macs_per_node
    f1 = f1_micro(predict(logits, g.multilabel), g.labels[targets])
    return samples, macs, f1


def cmd_bench(args, cfg) -> int:
    g = _graph(args)
    bench = cfg["bench"]
    inf = dict(cfg["infer"])
    if args.batch_size is not None:
        inf["batch_size"] = args.batch_size
    adj = normalize(g, cfg["train"]["scheme"])
    d = degree_stats(g).avg_degree
    if args.model:
        base = load_model(args.model)
    else:
        arch = sage_arch(g.attr_dim, cfg["arch"]["hidden"], g.num_classes, cfg["arch"]["combiner"],
                         cfg["arch"]["k_max"])
        base = train(g, arch, _train_config(cfg))
    variants = [("none", 1.0, base)]
    for scheme in bench["schemes"]:
        for eta in bench["etas"]:
            pruned, _ = prune_pipeline(g, base, cfg, scheme, eta, bench["retrain"])
            variants.append((scheme, eta, pruned))
    dataset = args.dataset or cfg["graph"].get("name", "graph")
    plan_seed = substream(cfg["seed"], "plan")
    rows = []
    for scheme, eta, model in variants:
        dims = cost.model_dims(model)
        for mode in bench["modes"]:
            samples, macs, f1 = measure(model, g, adj, mode, inf, bench["repeats"], bench["warmup"], plan_seed)
            if mode == "full":
                mem = cost.full_cost(dims, g.num_nodes, d).memory_bytes
            else:
                mem = cost.batched_cost(dims, d, inf["caps"]).memory_bytes * inf["batch_size"]
            p50, p95 = _percentiles(samples)
            rows.append({"dataset": dataset, "scheme": scheme, "eta": eta, "mode": mode,
                         "macs_per_node": round(macs, 1), "mem_bytes": mem, "latency_us_p50": round(p50, 3),
                         "latency_us_p95": round(p95, 3), "f1_micro": round(f1, 4)})
            log.info("%s %s eta=%s %s: %.1f MACs/node, p50 %.2f us/node, F1 %.4f", dataset, scheme, eta, mode,
                     macs, p50, f1)
    out = open(args.out, "w", newline="") if args.out and args.out != "-" else sys.stdout
    try:
        w = csv.DictWriter(out, fieldnames=BENCH_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


# ------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gnnprune", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def command(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON run config (path or '-' for stdin)")
        if name != "synth":
            p.add_argument("--symmetrize", action="store_true", help="add missing reverse arcs after loading")
        p.set_defaults(fn=fn)
        return p

    p = command("synth", cmd_synth, "generate a synthetic graph (GRF1)")
    p.add_argument("--out", required=True)
    p.add_argument("--summary", help="write a JSON summary here ('-' for stdout)")
    p.add_argument("--kind", choices=["sbm", "regular", "tree", "power_law", "correlated"])
    p.add_argument("--n", type=int)
    p.add_argument("--blocks", type=int)
    p.add_argument("--p-in", dest="p_in", type=float)
    p.add_argument("--p-out", dest="p_out", type=float)
    p.add_argument("--attr-dim", dest="attr_dim", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--d", type=int)
    p.add_argument("--depth", type=int)

    p = command("train", cmd_train, "train a model (GNM1) and write a per-epoch log")
    p.add_argument("--graph", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log")

    p = command("prune", cmd_prune, "prune, fold and optionally retrain a model")
    p.add_argument("--graph", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--scheme", choices=["full", "batched"])
    p.add_argument("--eta", type=float)
    p.add_argument("--retrain", action="store_true")

    p = command("infer", cmd_infer, "run full or batched inference")
    p.add_argument("--graph", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--mode", choices=["full", "batched"])
    p.add_argument("--out", help="predictions CSV")
    p.add_argument("--instrumentation", help="per-batch JSON ('-' for stdout)")
    p.add_argument("--cache", nargs="?", const="", default=None,
                   help="enable the hidden-feature cache; with a path it persists across runs")
    p.add_argument("--warm-cache-train-val", action="store_true")
    p.add_argument("--cap-hop2", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--split", choices=["train", "val", "test", "all"])
    p.add_argument("--passes", type=int, default=1)
    p.add_argument("--tree-counts", action="store_true", help="also count supports per target")

    p = command("estimate", cmd_estimate, "analytic MAC and memory estimate")
    p.add_argument("--model")
    p.add_argument("--graph")
    p.add_argument("--nodes", type=int, default=1)
    p.add_argument("--degree", type=float, default=10.0)
    p.add_argument("--mode", choices=["full", "batched"], default="full")
    p.add_argument("--caps", default="none,32")
    p.add_argument("--cache-fraction", type=float, default=0.0)
    p.add_argument("--prune-scheme", choices=["full", "batched"])
    p.add_argument("--eta", type=float, default=0.5)
    p.add_argument("--json")

    p = command("bench", cmd_bench, "latency / MACs / F1 table for pruned variants (CSV)")
    p.add_argument("--graph", required=True)
    p.add_argument("--model")
    p.add_argument("--out")
    p.add_argument("--dataset")
    p.add_argument("--batch-size", type=int)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return args.fn(args, cfg)
    except Exception as exc:  # every failure becomes a machine-readable error
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
