"""Run configuration: a JSON document validated against a closed schema."""

from __future__ import annotations

import copy
import hashlib
import json
import sys

import jsonschema

_NUM = {"type": "number"}
_INT = {"type": "integer"}
_POS_INT = {"type": "integer", "minimum": 1}
_CAP = {"type": ["integer", "null"], "minimum": 0}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False, "required": list(required)}


SCHEMA = _obj({
    "seed": _INT,
    "graph": _obj({
        "kind": {"enum": ["sbm", "regular", "tree", "power_law", "correlated"]},
        "n": _INT,
        "blocks": _POS_INT,
        "p_in": _NUM,
        "p_out": _NUM,
        "attr_dim": _POS_INT,
        "noise": _NUM,
        "informative": _POS_INT,
        "d": _POS_INT,
        "depth": {"type": "integer", "minimum": 0},
        "avg_degree": _NUM,
        "exponent": _NUM,
        "num_classes": _POS_INT,
        "n_pairs": _POS_INT,
        "homophily": _NUM,
        "name": {"type": "string"},
    }),
    "arch": _obj({
        "hidden": {"type": "array", "items": _POS_INT, "minItems": 1},
        "combiner": {"enum": ["concat", "mean"]},
        "k_max": _POS_INT,
    }),
    "train": _obj({
        "epochs": _POS_INT,
        "learning_rate": {"type": "number", "minimum": 0},
        "optimizer": {"enum": ["adam", "sgd"]},
        "early_stop_patience": {"type": "integer", "minimum": 0},
        "scheme": {"enum": ["row_mean", "sym"]},
    }),
    "prune": _obj({
        "scheme": {"enum": ["full", "batched"]},
        "eta": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "refit": {"enum": ["closed_form", "sgd"]},
        "outer_iterations": _POS_INT,
        "batch_size": _POS_INT,
        "schedule": _obj({
            "lambda0": {"type": ["number", "null"], "minimum": 0},
            "lambda0_scale": _NUM,
            "growth": {"type": "number", "exclusiveMinimum": 1},
            "max_epochs": _POS_INT,
            "over_penalty_window": _POS_INT,
            "lr": _NUM,
            "threshold": _NUM,
        }),
    }),
    "infer": _obj({
        "mode": {"enum": ["full", "batched"]},
        "batch_size": _POS_INT,
        "caps": {"type": "array", "items": _CAP, "minItems": 1},
        "cache": {"type": "boolean"},
        "cache_capacity": {"type": ["integer", "null"], "minimum": 0},
        "store_all": {"type": "boolean"},
        "warm_cache_train_val": {"type": "boolean"},
        "split": {"enum": ["train", "val", "test", "all"]},
    }),
    "bench": _obj({
        "repeats": _POS_INT,
        "warmup": {"type": "integer", "minimum": 0},
        "schemes": {"type": "array", "items": {"enum": ["full", "batched"]}},
        "etas": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0, "maximum": 1}},
        "modes": {"type": "array", "items": {"enum": ["full", "batched"]}},
        "retrain": {"type": "boolean"},
    }),
})

DEFAULTS = {
    "seed": 0,
    "graph": {"kind": "sbm", "n": 3000, "blocks": 4, "p_in": 0.008, "p_out": 0.0015, "attr_dim": 64,
              "noise": 3.0, "name": "sbm"},
    "arch": {"hidden": [64, 64], "combiner": "concat", "k_max": 1},
    "train": {"epochs": 200, "learning_rate": 0.01, "optimizer": "adam", "early_stop_patience": 20,
              "scheme": "row_mean"},
    "prune": {"scheme": "full", "eta": 0.5, "refit": "closed_form", "outer_iterations": 1, "batch_size": 1024,
              "schedule": {}},
    "infer": {"mode": "full", "batch_size": 512, "caps": [None, 32], "cache": False, "cache_capacity": None,
              "store_all": False, "warm_cache_train_val": False, "split": "test"},
    "bench": {"repeats": 5, "warmup": 1, "schemes": ["full", "batched"], "etas": [0.5, 0.25],
              "modes": ["full", "batched"], "retrain": True},
}


class ConfigError(ValueError):
    pass


def validate(doc: dict) -> dict:
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config {where}: {exc.message}") from None
    return doc


def merged(doc: dict | None) -> dict:
    """Validate ``doc`` and fill every missing section key from the defaults."""
    doc = validate({} if doc is None else doc)
    out = copy.deepcopy(DEFAULTS)
    for key, value in doc.items():
        if isinstance(value, dict):
            out[key].update(copy.deepcopy(value))
        else:
            out[key] = value
    return out


def load_config(source) -> dict:
    """Read a config from a path, ``-`` (stdin) or a dict; None gives the defaults."""
    if source is None:
        return merged(None)
    if isinstance(source, dict):
        return merged(source)
    try:
        text = sys.stdin.read() if str(source) == "-" else open(source).read()
        doc = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return merged(doc)


def substream(seed: int, name: str) -> int:
    """Independent 63-bit seed for a named component derived from the root seed."""
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1
