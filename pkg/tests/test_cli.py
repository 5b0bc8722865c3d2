import csv
import json

import pytest

from gnnprune.cli import BENCH_COLUMNS, main
from gnnprune.config import ConfigError, DEFAULTS, load_config, merged, substream
from gnnprune.graph import load_graph
from gnnprune.model import load_model

SMALL = {
    "seed": 3,
    "graph": {"kind": "sbm", "n": 400, "blocks": 3, "p_in": 0.04, "p_out": 0.004, "attr_dim": 12, "noise": 1.5},
    "arch": {"hidden": [8, 8]},
    "train": {"epochs": 40},
    "infer": {"batch_size": 64, "caps": [None, 4]},
    "bench": {"repeats": 1, "warmup": 0, "etas": [0.5], "schemes": ["full"], "retrain": False},
}


@pytest.fixture
def small_run(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(SMALL))
    graph, model = tmp_path / "g.grf", tmp_path / "m.gnm"
    assert main(["synth", "--config", str(cfg), "--out", str(graph)]) == 0
    assert main(["train", "--config", str(cfg), "--graph", str(graph), "--out", str(model),
                 "--log", str(tmp_path / "log.csv")]) == 0
    return tmp_path, cfg, graph, model


def test_config_defaults_and_merge():
    cfg = merged({"train": {"epochs": 3}})
    assert cfg["train"]["epochs"] == 3 and cfg["train"]["optimizer"] == DEFAULTS["train"]["optimizer"]
    assert load_config(None) == DEFAULTS
    assert cfg["infer"]["batch_size"] == 512 and cfg["infer"]["caps"] == [None, 32]


@pytest.mark.parametrize("doc", [{"bogus": 1}, {"train": {"epochs": 3, "momentum": 0.9}}, {"prune": {"eta": 0}},
                                 {"prune": {"eta": 1.5}}, {"infer": {"caps": [-1]}}, {"train": {"epochs": 0}}])
def test_config_rejects_bad_documents(doc):
    with pytest.raises(ConfigError):
        merged(doc)


def test_config_not_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError, match="JSON"):
        load_config(p)


def test_substreams_differ_and_repeat():
    assert substream(0, "train") == substream(0, "train")
    assert len({substream(0, "train"), substream(0, "prune"), substream(1, "train")}) == 3


def test_synth_tree_and_errors(tmp_path, capsys):
    out = tmp_path / "t.grf"
    assert main(["synth", "--kind", "tree", "--d", "2", "--depth", "4", "--out", str(out), "--summary", "-"]) == 0
    assert json.loads(capsys.readouterr().out)["nodes"] == 31
    assert load_graph(out).num_nodes == 31
    assert main(["synth", "--n", "0", "--out", str(tmp_path / "x.grf")]) == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert set(err) == {"error", "message"}


def test_missing_file_is_error_json(tmp_path, capsys):
    assert main(["train", "--graph", str(tmp_path / "nope.grf"), "--out", str(tmp_path / "m")]) == 1
    assert "error" in json.loads(capsys.readouterr().err.strip())


def test_unknown_config_key_is_error_json(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"epoch": 3}}))
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "g")]) == 1
    assert json.loads(capsys.readouterr().err.strip())["error"] == "ConfigError"


def test_prune_eta_one_keeps_dims(small_run):
    tmp, cfg, graph, model = small_run
    out = tmp / "p.gnm"
    assert main(["prune", "--config", str(cfg), "--graph", str(graph), "--model", str(model), "--eta", "1",
                 "--out", str(out), "--report", str(tmp / "r.json")]) == 0
    a, b = load_model(model), load_model(out)
    assert [layer.spec for layer in a.layers] == [layer.spec for layer in b.layers]
    report = json.loads((tmp / "r.json").read_text())
    assert report["params_pruned"] == report["params_original"]


def test_prune_report_and_retrain(small_run):
    tmp, cfg, graph, model = small_run
    out = tmp / "p.gnm"
    assert main(["prune", "--config", str(cfg), "--graph", str(graph), "--model", str(model), "--eta", "0.5",
                 "--scheme", "batched", "--retrain", "--out", str(out), "--report", str(tmp / "r.json")]) == 0
    report = json.loads((tmp / "r.json").read_text())
    assert report["params_pruned"] < report["params_original"]
    assert {"test_f1_original", "test_f1_pruned", "test_f1_retrained", "layers"} <= set(report)
    assert all(layer["stop_reason"] for layer in report["layers"])


def test_infer_cache_twice(small_run):
    tmp, cfg, graph, model = small_run
    cache = tmp / "cache.npz"
    docs = []
    for run in range(2):
        inst = tmp / f"i{run}.json"
        assert main(["infer", "--config", str(cfg), "--graph", str(graph), "--model", str(model), "--mode", "batched",
                     "--cache", str(cache), "--out", str(tmp / f"pred{run}.csv"), "--instrumentation", str(inst)]) == 0
        docs.append(json.loads(inst.read_text()))
    # later batches of the first run already reuse roots stored by earlier ones
    assert docs[1]["cache"]["hits"] > docs[0]["cache"]["hits"]
    assert (tmp / "pred0.csv").read_text() == (tmp / "pred1.csv").read_text()
    computed = [sum(b["layers"][0]["computed"] for b in d["batches"]) for d in docs]
    assert computed[1] < computed[0]


def test_infer_modes_agree(small_run):
    tmp, cfg, graph, model = small_run
    for mode in ("full", "batched"):
        assert main(["infer", "--config", str(cfg), "--graph", str(graph), "--model", str(model), "--mode", mode,
                     "--cap-hop2", "1000", "--out", str(tmp / f"{mode}.csv")]) == 0
    assert (tmp / "full.csv").read_text() == (tmp / "batched.csv").read_text()


def test_estimate_prints_table(tmp_path, capsys):
    assert main(["estimate", "--nodes", "100", "--degree", "2", "--json", str(tmp_path / "e.json")]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0].split() == ["layer", "macs_per_node", "supports"]
    doc = json.loads((tmp_path / "e.json").read_text())
    assert doc["mode"] == "full" and doc["total_macs_per_node"] == sum(doc["macs_per_node"])


def test_bench_golden_header(small_run):
    tmp, cfg, graph, model = small_run
    out = tmp / "bench.csv"
    assert main(["bench", "--config", str(cfg), "--graph", str(graph), "--model", str(model), "--out", str(out)]) == 0
    header = out.read_text().splitlines()[0]
    assert header == "dataset,scheme,eta,mode,macs_per_node,mem_bytes,latency_us_p50,latency_us_p95,f1_micro"
    assert header.split(",") == BENCH_COLUMNS
    rows = list(csv.DictReader(open(out)))
    assert [(r["scheme"], r["mode"]) for r in rows] == [("none", "full"), ("none", "batched"), ("full", "full"),
                                                       ("full", "batched")]
    assert float(rows[2]["macs_per_node"]) < float(rows[0]["macs_per_node"])
