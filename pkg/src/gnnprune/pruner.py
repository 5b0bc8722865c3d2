"""LASSO channel pruning for multi-branch GNN layers.

Each layer is pruned in two sub-problems on training-node features:

1. with the weights fixed, a shared channel mask ``beta`` is fit by minibatch
   Adam on ``sum_k ||Y_k - (A^k h * beta) W_k||^2 + lam * |beta|_1`` while
   ``lam`` grows geometrically each epoch;
2. the mask is clipped to the budget and the weights are refit by least
   squares on the surviving channels.

Layers are visited from the output back to the input so that each layer only
has to reproduce the output columns the next layer still reads.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from gnnprune.graph import Graph, normalize
from gnnprune.model import FullAggregator, GnnModel, MaskedModel, PruneMask, layer_forward, model_forward

log = logging.getLogger(__name__)


class PruningError(RuntimeError):
    pass


@dataclass(frozen=True)
class PruneBudget:
    eta: float
    branch: int | None = None  # None = whole layer, else one branch index

    def __post_init__(self):
        if not 0 < self.eta <= 1:
            raise ValueError(f"budget eta must lie in (0, 1], got {self.eta}")

    def keep(self, c: int) -> int:
        # the epsilon absorbs float noise in eta * c (e.g. 0.7 * 10)
        return max(1, min(c, math.ceil(self.eta * c - 1e-9)))


@dataclass
class PenaltySchedule:
    lambda0: float | None = None  # None: lambda0_scale * (loss at beta=0) / c
    lambda0_scale: float = 1e-4
    growth: float = 1.2
    max_epochs: int = 200
    over_penalty_window: int = 3
    lr: float = 0.02
    threshold: float = 1e-3

    def __post_init__(self):
        if self.lambda0 is not None and self.lambda0 < 0:
            raise ValueError("lambda0 must be non-negative")
        if self.growth <= 1:
            raise ValueError("growth must exceed 1")
        if self.max_epochs < 1 or self.over_penalty_window < 1:
            raise ValueError("max_epochs and over_penalty_window must be positive")


@dataclass
class PruneProblem:
    """Per-branch observations ``A^k h``, targets ``Y_k`` and current weights."""

    observations: list[np.ndarray]
    targets: list[np.ndarray]
    weights: list[np.ndarray]
    combiner: str = "concat"
    batch_size: int = 1024
    seed: int = 0
    branches: list[int] = field(default_factory=list)

    def __post_init__(self):
        shapes = {o.shape for o in self.observations}
        if len(shapes) != 1:
            raise ValueError(f"branch observations differ in shape: {sorted(shapes)}")
        for o, y, w in zip(self.observations, self.targets, self.weights):
            if y.shape[0] != o.shape[0] or w.shape != (o.shape[1], y.shape[1]):
                raise ValueError("observation/target/weight shapes are inconsistent")
        if not self.branches:
            self.branches = list(range(len(self.observations)))

    @property
    def num_rows(self) -> int:
        return self.observations[0].shape[0]

    @property
    def num_channels(self) -> int:
        return self.observations[0].shape[1]

    def target(self) -> list[np.ndarray]:
        if self.combiner == "mean":
            return [sum(self.targets[1:], self.targets[0].astype(np.float64)) / len(self.targets)]
        return self.targets

    def predict(self, beta, weights=None, rows=None) -> list[np.ndarray]:
        weights = self.weights if weights is None else weights
        obs = self.observations if rows is None else [o[rows] for o in self.observations]
        outs = [(o.astype(np.float64) * beta) @ w.astype(np.float64) for o, w in zip(obs, weights)]
        if self.combiner == "mean":
            return [sum(outs[1:], outs[0]) / len(outs)]
        return outs

    def data_loss(self, beta, weights=None) -> float:
        """Mean squared residual over every target entry."""
        pred = self.predict(beta, weights)
        num = sum(float(np.sum((p - y) ** 2)) for p, y in zip(pred, self.target()))
        den = sum(y.size for y in self.target())
        return num / den if den else 0.0


# ------------------------------------------------------------- beta phase


@dataclass
class _AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def _beta_grad(p: PruneProblem, beta, rows):
    obs = [o[rows].astype(np.float64) for o in p.observations]
    ws = [w.astype(np.float64) for w in p.weights]
    targets = [y[rows] for y in p.target()]
    den = sum(y.size for y in targets)
    grad = np.zeros_like(beta)
    if p.combiner == "mean":
        nb = len(obs)
        resid = sum(((o * beta) @ w for o, w in zip(obs, ws)), np.zeros_like(targets[0], dtype=np.float64)) / nb
        resid -= targets[0]
        for o, w in zip(obs, ws):
            grad += np.sum(o * (resid @ w.T), axis=0) / nb
    else:
        for o, w, y in zip(obs, ws, targets):
            resid = (o * beta) @ w - y
            grad += np.sum(o * (resid @ w.T), axis=0)
    return 2.0 * grad / den


def beta_epoch(p: PruneProblem, beta, lam: float, lr: float, state: _AdamState | None = None,
               epoch: int = 0):
    """One Adam epoch over row minibatches; returns ``(beta, total_loss)``.

    The L1 subgradient at zero is taken as zero.  An update that would carry
    an entry across zero stops at zero, and an entry at zero stays there while
    the data gradient is within ``lam`` (the LASSO optimality condition).
    """
    beta = np.array(beta, dtype=np.float64)
    if beta.shape != (p.num_channels,):
        raise ValueError(f"beta has shape {beta.shape}, expected ({p.num_channels},)")
    if state is None:
        state = _AdamState(np.zeros_like(beta), np.zeros_like(beta))
    b1, b2, eps = 0.9, 0.999, 1e-8
    n = p.num_rows
    order = np.random.default_rng([p.seed, epoch]).permutation(n)
    for start in range(0, n, p.batch_size):
        rows = np.sort(order[start : start + p.batch_size])
        gd = _beta_grad(p, beta, rows)
        at_zero = beta == 0
        hold = at_zero & (np.abs(gd) <= lam)
        g = gd + lam * np.sign(beta)
        state.t += 1
        state.m = b1 * state.m + (1 - b1) * g
        state.v = b2 * state.v + (1 - b2) * g * g
        mhat = state.m / (1 - b1**state.t)
        vhat = state.v / (1 - b2**state.t)
        new = beta - lr * mhat / (np.sqrt(vhat) + eps)
        crossed = (np.sign(new) != np.sign(beta)) & ~at_zero
        new[crossed | hold] = 0.0
        state.m[crossed | hold] = 0.0
        state.v[crossed | hold] = 0.0
        beta = new
    loss = p.data_loss(beta) + lam * float(np.sum(np.abs(beta)))
    if not np.isfinite(loss):
        raise PruningError(f"non-finite LASSO loss at epoch {epoch}")
    return beta, loss


@dataclass
class BetaPhaseResult:
    beta: np.ndarray
    stop_reason: str
    epochs_run: int
    final_lambda: float
    losses: list[float]


def initial_lambda(p: PruneProblem, sched: PenaltySchedule) -> float:
    if sched.lambda0 is not None:
        return sched.lambda0
    ref = p.data_loss(np.zeros(p.num_channels))
    return sched.lambda0_scale * ref / p.num_channels


def zero_lambda(p: PruneProblem) -> float:
    """Smallest ``lam`` for which ``beta = 0`` minimizes the (convex) objective."""
    return float(np.max(np.abs(_beta_grad(p, np.zeros(p.num_channels), np.arange(p.num_rows)))))


def run_beta_phase(p: PruneProblem, budget: PruneBudget, sched: PenaltySchedule) -> BetaPhaseResult:
    """Grow ``lam`` each epoch until the budget is met or the mask is over-penalized.

    Over-penalized means every live entry shrank over the last window of
    epochs while ``lam`` is past the point where the all-zero mask is optimal.
    The second condition keeps the shrinking transient right after the start
    at ``beta = 1`` (where the data gradient vanishes) from counting.
    """
    c = p.num_channels
    to_prune = c - budget.keep(c)
    beta = np.ones(c)
    lam = initial_lambda(p, sched)
    if to_prune == 0:
        return BetaPhaseResult(beta, "budget", 0, lam, [])
    lam_zero = zero_lambda(p)
    state = _AdamState(np.zeros(c), np.zeros(c))
    history = [np.abs(beta)]
    losses = []
    reason = "max_epochs"
    epoch = 0
    for epoch in range(1, sched.max_epochs + 1):
        beta, loss = beta_epoch(p, beta, lam, sched.lr, state, epoch)
        losses.append(loss)
        lam *= sched.growth
        mag = np.abs(beta)
        history.append(mag)
        top = mag.max()
        if top == 0:
            reason = "over_penalized"
            break
        if np.sum(mag < sched.threshold * top) >= to_prune:
            reason = "budget"
            break
        w = sched.over_penalty_window
        if len(history) > w and lam >= lam_zero:
            window = history[-w - 1 :]
            live = window[0] > 0
            if all(np.all(b[live] < a[live]) for a, b in zip(window[:-1], window[1:])):
                reason = "over_penalized"
                break
    return BetaPhaseResult(beta, reason, epoch, lam, losses)


def clip_mask(beta, budget: PruneBudget) -> PruneMask:
    """Keep the ``ceil(eta * c)`` largest-magnitude entries (lower index wins ties)."""
    beta = np.asarray(beta, dtype=np.float64)
    if not np.all(np.isfinite(beta)):
        raise ValueError("cannot clip a non-finite mask")
    c = len(beta)
    keep = budget.keep(c)
    order = np.argsort(-np.abs(beta), kind="stable")[:keep]
    out = np.zeros(c, dtype=np.float32)
    out[order] = beta[order]
    # a retained channel whose coefficient collapsed (or underflowed) to zero is revived at 1
    out[order[out[order] == 0]] = 1.0
    return PruneMask(out, clipped=True, branch=budget.branch)


# ------------------------------------------------------------ weight refit


def _solve(x, y, w0, eps: float = 1e-8, cond_limit: float = 1e10):
    """Least squares ``x @ w ~ y``; ridge pulled towards ``w0`` when ``x`` is (near) singular."""
    xtx = x.T @ x
    xty = x.T @ y
    if xtx.shape[0] and np.linalg.cond(xtx) < cond_limit:
        return np.linalg.solve(xtx, xty)
    jitter = eps * max(1.0, float(np.mean(np.diag(xtx)))) if xtx.shape[0] else eps
    sol = np.linalg.solve(xtx + jitter * np.eye(xtx.shape[0]), xty + jitter * w0)
    if not np.all(np.isfinite(sol)):
        raise PruningError("closed-form refit is singular even after jitter; use mode='sgd'")
    return sol


def _sgd_lstsq(x, y, w0, batch_size: int, seed: int, lr: float = 1e-2, tol: float = 1e-5,
               max_epochs: int = 5000):
    w = w0.copy()
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    t = 0
    n = x.shape[0]
    prev = np.mean((x @ w - y) ** 2)
    for epoch in range(max_epochs):
        order = np.random.default_rng([seed, epoch]).permutation(n)
        for start in range(0, n, batch_size):
            rows = order[start : start + batch_size]
            xb = x[rows]
            grad = 2.0 * xb.T @ (xb @ w - y[rows]) / y[rows].size
            t += 1
            m = 0.9 * m + 0.1 * grad
            v = 0.999 * v + 0.001 * grad * grad
            w -= lr * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        cur = np.mean((x @ w - y) ** 2)
        if abs(prev - cur) <= tol * max(prev, 1e-30):
            break
        prev = cur
    return w


def refit_weights(p: PruneProblem, mask: PruneMask, mode: str = "closed_form") -> list[np.ndarray]:
    """Least-squares weights for the clipped mask, one matrix per problem branch.

    The solve runs on the unscaled surviving channels and the result is divided
    by ``beta``, so ``beta * W`` (the folded weight) is the least-squares fit.
    Rows of pruned channels keep their previous values.
    """
    if not mask.clipped:
        raise ValueError("refit needs a clipped mask")
    if mode not in ("closed_form", "sgd"):
        raise ValueError(f"unknown refit mode {mode!r}")
    kept = mask.kept
    beta = mask.beta.astype(np.float64)[kept]
    obs = [o[:, kept].astype(np.float64) for o in p.observations]
    prior = [w.astype(np.float64)[kept] * beta[:, None] for w in p.weights]
    targets = [y.astype(np.float64) for y in p.target()]

    def solve(x, y, w0):
        if mode == "closed_form":
            return _solve(x, y, w0)
        return _sgd_lstsq(x, y, w0, p.batch_size, p.seed)

    if p.combiner == "mean":
        nb = len(obs)
        stacked = solve(np.concatenate(obs, axis=1) / nb, targets[0], np.concatenate(prior))
        solved = np.split(stacked, nb)
    else:
        solved = [solve(x, y, w0) for x, y, w0 in zip(obs, targets, prior)]
    out = []
    for w_old, w_new in zip(p.weights, solved):
        w = w_old.astype(np.float64).copy()
        w[kept] = w_new / beta[:, None]
        out.append(w.astype(np.float32))
    return out


# ------------------------------------------------------------- baselines


def baseline_masks(p: PruneProblem, budget: PruneBudget, method: str, seed: int = 0) -> PruneMask:
    """Random or max-residual (largest weight-row L1 norm) channel selection."""
    c = p.num_channels
    keep = budget.keep(c)
    if method == "random":
        chosen = np.random.default_rng(seed).choice(c, size=keep, replace=False)
    elif method == "max_residual":
        norms = sum(np.abs(w.astype(np.float64)).sum(axis=1) for w in p.weights)
        chosen = np.argsort(-norms, kind="stable")[:keep]
    else:
        raise ValueError(f"unknown baseline method {method!r}")
    beta = np.zeros(c, dtype=np.float32)
    beta[chosen] = 1.0
    return PruneMask(beta, clipped=True, branch=budget.branch)


# ------------------------------------------------------------ whole models


def collect_problem(model: GnnModel, layer_idx: int, g_train: Graph, out_columns=None,
                    budget: PruneBudget | None = None, hidden=None, adj=None,
                    batch_size: int = 1024, seed: int = 0, scheme: str = "row_mean") -> PruneProblem:
    """Observations and targets of one layer on the training graph.

    ``out_columns`` lists the layer output columns still read by the next
    layer (all when None).  Targets use the weights of ``model`` as given.
    """
    if not 0 <= layer_idx < model.num_layers:
        raise IndexError(f"layer {layer_idx} out of range for a {model.num_layers}-layer model")
    if g_train.num_nodes == 0:
        raise ValueError("training graph is empty")
    layer = model.layers[layer_idx]
    spec = layer.spec
    if any(c is not None for c in layer.channels):
        raise PruningError(f"layer {layer_idx} already carries a channel selection")
    adj = normalize(g_train, scheme) if adj is None else adj
    if hidden is None:
        h = g_train.attributes
        for i in range(layer_idx):
            h = layer_forward(model.layers[i], adj, h)
    else:
        h = g_train.attributes if layer_idx == 0 else hidden[layer_idx - 1]
    cols = _branch_columns(spec, out_columns)
    agg = FullAggregator(adj)
    branches = range(spec.num_branches) if budget is None or budget.branch is None else [budget.branch]
    obs, targets, weights = [], [], []
    for b in branches:
        k = spec.k_min + b
        o = agg.apply(h, k)
        w = layer.weights[b][:, cols[b]]
        obs.append(np.ascontiguousarray(o))
        targets.append(o.astype(np.float64) @ w.astype(np.float64))
        weights.append(np.ascontiguousarray(w))
    combiner = spec.combiner if len(obs) > 1 else "concat"
    return PruneProblem(obs, targets, weights, combiner, batch_size, seed, list(branches))


def _branch_columns(spec, out_columns) -> list[np.ndarray]:
    if out_columns is None:
        return [np.arange(d) for d in spec.out_dims]
    out_columns = np.asarray(out_columns)
    if spec.combiner == "mean":
        return [out_columns] * spec.num_branches
    offsets = np.cumsum((0,) + spec.out_dims)
    return [out_columns[(out_columns >= offsets[b]) & (out_columns < offsets[b + 1])] - offsets[b]
            for b in range(spec.num_branches)]


@dataclass
class LayerReport:
    layer_idx: int
    c: int
    retained: int
    eta: float
    final_lambda: float
    epochs_run: int
    stop_reason: str
    reconstruction_mse_before: float
    reconstruction_mse_after: float
    branch: int | None = None

    def to_json(self) -> dict:
        d = asdict(self)
        if d["branch"] is None:
            del d["branch"]
        return d


def prune_layer(model: GnnModel, layer_idx: int, budget: PruneBudget, sched: PenaltySchedule,
                g_train: Graph, out_columns=None, hidden=None, adj=None, refit_mode: str = "closed_form",
                method: str = "lasso", seed: int = 0, batch_size: int = 1024, outer_iterations: int = 1):
    """Mask selection and weight refit for one layer.

    Returns ``(mask, weights, report)`` where ``weights`` holds the refit
    matrices of the pruned branches (restricted to ``out_columns``).
    """
    p = collect_problem(model, layer_idx, g_train, out_columns, budget, hidden, adj, batch_size, seed)
    ones = np.ones(p.num_channels)
    mask = None
    phase = BetaPhaseResult(ones, "budget", 0, 0.0, [])
    weights = p.weights
    before = p.data_loss(ones)
    for _ in range(outer_iterations):
        if method == "lasso":
            phase = run_beta_phase(p, budget, sched)
            mask = clip_mask(phase.beta, budget)
        else:
            mask = baseline_masks(p, budget, method, seed)
        before = p.data_loss(mask.beta.astype(np.float64))
        weights = refit_weights(p, mask, refit_mode)
        p = PruneProblem(p.observations, p.targets, weights, p.combiner, p.batch_size, p.seed, p.branches)
    after = p.data_loss(mask.beta.astype(np.float64), weights)
    report = LayerReport(layer_idx, p.num_channels, mask.retained, budget.eta, float(phase.final_lambda),
                         phase.epochs_run, phase.stop_reason, before, after, budget.branch)
    return mask, dict(zip(p.branches, weights)), report


def scheme_budgets(model: GnnModel, scheme: str, eta: float) -> list[PruneBudget]:
    """Per-layer budgets of the full-inference and batched-inference schemes."""
    n = model.num_layers
    if scheme == "full":
        return [PruneBudget(1.0)] + [PruneBudget(eta) for _ in range(1, n)]
    if scheme == "batched":
        aggregating = [i for i, layer in enumerate(model.layers) if layer.spec.aggregates]
        if len(aggregating) < 2:
            raise ValueError("the batched scheme needs a model with at least two GNN layers")
        first, second = aggregating[0], aggregating[1]
        spec = model.layers[first].spec
        budgets = [PruneBudget(1.0) for _ in range(n)]
        if 1 in spec.powers:
            budgets[first] = PruneBudget(eta, branch=spec.powers.index(1))
        budgets[second] = PruneBudget(eta)
        return budgets
    raise ValueError(f"unknown pruning scheme {scheme!r}")


def prune_model(model: GnnModel, g_train: Graph, scheme: str, eta: float, sched: PenaltySchedule | None = None,
                refit_mode: str = "closed_form", seed: int = 0, batch_size: int = 1024,
                outer_iterations: int = 1, graph_scheme: str = "row_mean", budgets=None):
    """Prune every layer from the output back to the input.

    Returns ``(MaskedModel, reports)``; fold the result with ``fold_mask``.
    """
    sched = PenaltySchedule() if sched is None else sched
    budgets = scheme_budgets(model, scheme, eta) if budgets is None else budgets
    adj = normalize(g_train, graph_scheme)
    _, hidden = model_forward(model, adj, g_train.attributes, return_hidden=True)
    work = model.copy()
    masks: list[PruneMask | None] = [None] * model.num_layers
    reports = []
    for i in range(model.num_layers - 1, -1, -1):
        nxt = masks[i + 1] if i + 1 < model.num_layers else None
        out_cols = nxt.kept if nxt is not None and nxt.branch is None else None
        mask, weights, report = prune_layer(model, i, budgets[i], sched, g_train, out_cols, hidden, adj,
                                            refit_mode, seed=seed + i, batch_size=batch_size,
                                            outer_iterations=outer_iterations)
        cols = _branch_columns(model.layers[i].spec, out_cols)
        for b, w in weights.items():
            work.layers[i].weights[b][:, cols[b]] = w
        masks[i] = mask
        reports.append(report)
        log.info("layer %d: kept %d/%d channels (%s after %d epochs), mse %.3g -> %.3g", i, report.retained,
                 report.c, report.stop_reason, report.epochs_run, report.reconstruction_mse_before,
                 report.reconstruction_mse_after)
    return MaskedModel(work, masks), reports
