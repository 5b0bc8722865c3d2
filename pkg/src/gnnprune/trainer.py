"""Full-batch training and re-training with hand-written gradients."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from gnnprune import kernels as K
from gnnprune.graph import Graph, normalize, training_graph
from gnnprune.model import GnnModel, LayerSpec, branch_order, init_model, model_forward

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 200
    learning_rate: float = 0.01
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    loss: str | None = None  # softmax_ce / sigmoid_bce; inferred from the label mode when None
    early_stop_patience: int = 20
    scheme: str = "row_mean"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in (None, "softmax_ce", "sigmoid_bce"):
            raise ValueError(f"unknown loss {self.loss!r}")


@dataclass
class TrainResult:
    model: GnnModel
    best_epoch: int
    best_val_f1: float
    history: list[dict] = field(default_factory=list)

    def write_log(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_f1", "lr"], lineterminator="\n")
            w.writeheader()
            for row in self.history:
                w.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in row.items()})


# ---------------------------------------------------------------- metrics


def predict(logits: np.ndarray, multilabel: bool) -> np.ndarray:
    if multilabel:
        return (logits > 0).astype(np.uint8)  # sigmoid(x) > 0.5
    return np.argmax(logits, axis=1)


def f1_micro(pred, truth) -> float:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    if pred.size == 0:
        return 0.0
    if pred.ndim == 1:
        return float(np.mean(pred == truth))
    p = pred.astype(bool)
    t = truth.astype(bool)
    tp = np.sum(p & t)
    fp = np.sum(p & ~t)
    fn = np.sum(~p & t)
    denom = 2 * tp + fp + fn
    return float(2 * tp / denom) if denom else 1.0


def evaluate(model: GnnModel, g: Graph, split: str = "test", adj=None, scheme: str = "row_mean") -> float:
    adj = normalize(g, scheme) if adj is None else adj
    rows = g.nodes_in(split)
    logits = model_forward(model, adj, g.attributes)
    return f1_micro(predict(logits[rows], g.multilabel), g.labels[rows])


# ------------------------------------------------------------ loss & grads


def _loss(logits, labels, kind):
    if kind == "softmax_ce":
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        n = len(labels)
        loss = -logp[np.arange(n), labels].mean()
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1
        return float(loss), (grad / n).astype(logits.dtype)
    y = labels.astype(logits.dtype)
    loss = np.mean(np.maximum(logits, 0) - logits * y + np.log1p(np.exp(-np.abs(logits))))
    grad = (1.0 / (1.0 + np.exp(-logits)) - y) / logits.size
    return float(loss), grad.astype(logits.dtype)


def _transpose_apply(adj_t, x, k):
    for _ in range(k):
        x = K.spmm(adj_t, x)
    return x


def loss_and_grads(model: GnnModel, adj, attrs, labels, rows, loss: str, adj_t=None):
    """Loss on ``rows`` and its gradient w.r.t. every branch weight."""
    adj_t = adj.transpose() if adj_t is None else adj_t
    dtype = model.layers[0].weights[0].dtype
    h = np.asarray(attrs, dtype=dtype)
    tape = []
    for layer in model.layers:
        spec = layer.spec
        branch_tape = []
        outs = []
        for b, k in enumerate(spec.powers):
            x = h if layer.channels[b] is None else h[:, layer.channels[b]]
            w = layer.weights[b]
            if k == 0:
                y = K.matmul(x, w)
                mid = None
            elif branch_order(w.shape) == "transform":
                mid = K.matmul(x, w)
                y = mid
                for _ in range(k):
                    y = K.spmm(adj, y)
            else:
                mid = x
                for _ in range(k):
                    mid = K.spmm(adj, mid)
                y = K.matmul(mid, w)
            branch_tape.append((x, mid))
            outs.append(y)
        z = np.concatenate(outs, axis=1) if spec.combiner == "concat" else sum(outs[1:], outs[0].copy()) / dtype.type(spec.num_branches)
        out = np.maximum(z, 0) if spec.activation == "relu" else z
        tape.append((h, z, branch_tape))
        h = out
    value, g_logits = _loss(h[rows], labels, loss)
    d_out = np.zeros_like(h)
    d_out[rows] = g_logits
    grads = [None] * model.num_layers
    for i in range(model.num_layers - 1, -1, -1):
        layer = model.layers[i]
        spec = layer.spec
        h_in, z, branch_tape = tape[i]
        dz = d_out * (z > 0) if spec.activation == "relu" else d_out
        d_in = np.zeros_like(h_in)
        layer_grads = []
        offset = 0
        for b, k in enumerate(spec.powers):
            w = layer.weights[b]
            if spec.combiner == "concat":
                dy = np.ascontiguousarray(dz[:, offset : offset + spec.out_dims[b]])
                offset += spec.out_dims[b]
            else:
                dy = dz / dtype.type(spec.num_branches)
            x, mid = branch_tape[b]
            if k == 0:
                dw = K.matmul(x.T, dy)
                dx = K.matmul(dy, w.T)
            elif branch_order(w.shape) == "transform":
                dt = _transpose_apply(adj_t, dy, k)
                dw = K.matmul(x.T, dt)
                dx = K.matmul(dt, w.T)
            else:
                dw = K.matmul(mid.T, dy)
                dx = _transpose_apply(adj_t, K.matmul(dy, w.T), k)
            layer_grads.append(dw)
            if layer.channels[b] is None:
                d_in += dx
            else:
                d_in[:, layer.channels[b]] += dx
        grads[i] = layer_grads
        d_out = d_in
    return value, grads


# ------------------------------------------------------------------ loops


class _Adam:
    def __init__(self, params, cfg: TrainConfig):
        self.cfg = cfg
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        cfg = self.cfg
        lr = params[0].dtype.type(cfg.learning_rate)
        if cfg.optimizer == "sgd":
            for p, g in zip(params, grads):
                p -= lr * g
            return
        self.t += 1
        b1, b2 = cfg.adam_beta1, cfg.adam_beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)).astype(p.dtype)


def _fit(g: Graph, model: GnnModel, cfg: TrainConfig) -> TrainResult:
    loss_kind = cfg.loss or ("sigmoid_bce" if g.multilabel else "softmax_ce")
    if model.out_dim != g.num_classes:
        raise ValueError(f"model emits {model.out_dim} outputs, graph has {g.num_classes} classes")
    if model.in_dim != g.attr_dim:
        raise ValueError(f"model expects {model.in_dim} attributes, graph has {g.attr_dim}")
    if len(g.nodes_in("val")) == 0:
        raise ValueError("graph has an empty validation split")
    g_train = training_graph(g)
    adj_train = normalize(g_train, cfg.scheme)
    adj_train_t = adj_train.transpose()
    adj_full = normalize(g, cfg.scheme)
    rows = np.arange(g_train.num_nodes)
    labels = g_train.labels
    dtype = model.layers[0].weights[0].dtype
    attrs = g_train.attributes.astype(dtype)

    params = [w for layer in model.layers for w in layer.weights]
    opt = _Adam(params, cfg)
    best = model.copy()
    best_f1 = evaluate(model, g, "val", adj_full)
    best_epoch = 0
    history = []
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        value, grads = loss_and_grads(model, adj_train, attrs, labels, rows, loss_kind, adj_train_t)
        if not np.isfinite(value):
            raise TrainingError(f"non-finite training loss at epoch {epoch}")
        opt.step(params, [gw for layer_g in grads for gw in layer_g])
        val_f1 = evaluate(model, g, "val", adj_full)
        history.append({"epoch": epoch, "train_loss": value, "val_f1": val_f1, "lr": cfg.learning_rate})
        if val_f1 > best_f1:
            best, best_f1, best_epoch, stale = model.copy(), val_f1, epoch, 0
        else:
            stale += 1
            if cfg.early_stop_patience and stale >= cfg.early_stop_patience:
                break
    log.debug("training stopped after %d epochs, best epoch %d (val F1 %.4f)", len(history), best_epoch, best_f1)
    return TrainResult(best, best_epoch, best_f1, history)


def train(g: Graph, arch: list[LayerSpec], cfg: TrainConfig, return_result: bool = False):
    """Train a fresh model on the training subgraph; keep the best validation checkpoint."""
    model = init_model(arch, seed=cfg.seed)
    result = _fit(g, model, cfg)
    return result if return_result else result.model


def retrain(g: Graph, model: GnnModel, cfg: TrainConfig, return_result: bool = False):
    """Fine-tune every remaining weight of (typically) a folded pruned model."""
    result = _fit(g, model.copy(), cfg)
    return result if return_result else result.model
