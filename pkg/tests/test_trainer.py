import csv

import numpy as np
import pytest

from gnnprune import synth
from gnnprune.graph import from_edges, normalize
from gnnprune.model import LayerSpec, fold_mask, init_model, MaskedModel, PruneMask, sage_arch
from gnnprune.trainer import TrainConfig, TrainingError, evaluate, f1_micro, loss_and_grads, predict, retrain, train


@pytest.fixture(scope="module")
def sbm2():
    return synth.sbm(500, 2, 0.04, 0.004, attr_dim=16, noise=1.0, seed=4)


def three_node(multilabel=False):
    labels = np.array([[1, 0, 1], [0, 1, 0], [1, 1, 0]]) if multilabel else [0, 1, 2]
    return from_edges(3, [(0, 1), (1, 2)], [[0.3, -1.2], [1.1, 0.4], [-0.7, 0.9]], labels=labels,
                      split=[0, 0, 0], num_classes=3, multilabel=multilabel)


def numeric_grad(model, b_layer, b_branch, f, eps=1e-6):
    w = model.layers[b_layer].weights[b_branch]
    g = np.zeros_like(w)
    for idx in np.ndindex(*w.shape):
        old = w[idx]
        w[idx] = old + eps
        plus = f()
        w[idx] = old - eps
        minus = f()
        w[idx] = old
        g[idx] = (plus - minus) / (2 * eps)
    return g


@pytest.mark.parametrize("multilabel", [False, True])
@pytest.mark.parametrize("arch_kind", ["sage", "mixhop_mean", "gcn"])
def test_gradient_check(multilabel, arch_kind):
    g = three_node(multilabel)
    if arch_kind == "sage":
        arch = sage_arch(2, [4], 3)
    elif arch_kind == "mixhop_mean":
        arch = sage_arch(2, [3, 5], 3, combiner="mean", k_max=2)
    else:
        arch = [LayerSpec(1, 1, 2, (6,)), LayerSpec.dense(6, 3)]
    model = init_model(arch, seed=7, dtype=np.float64)
    adj = normalize(g)
    kind = "sigmoid_bce" if multilabel else "softmax_ce"
    rows = np.arange(3)
    x = g.attributes.astype(np.float64)
    _, grads = loss_and_grads(model, adj, x, g.labels, rows, kind)
    for i, layer in enumerate(model.layers):
        for b in range(layer.spec.num_branches):
            num = numeric_grad(model, i, b, lambda: loss_and_grads(model, adj, x, g.labels, rows, kind)[0])
            err = np.linalg.norm(grads[i][b] - num) / max(np.linalg.norm(num), 1e-12)
            assert err <= 1e-3, (i, b, err)


def test_f1_examples():
    assert f1_micro([0, 1, 2], [0, 1, 2]) == 1.0
    assert f1_micro([0, 1, 1, 0], [0, 1, 0, 1]) == 0.5
    assert f1_micro([[1, 1], [1, 0]], [[1, 0], [1, 1]]) == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        f1_micro([0, 1], [0, 1, 1])


def test_predict_threshold():
    assert predict(np.array([[0.1, -0.2], [-1.0, 3.0]]), multilabel=True).tolist() == [[1, 0], [0, 1]]
    assert predict(np.array([[0.1, -0.2], [-1.0, 3.0]]), multilabel=False).tolist() == [0, 1]


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")


def test_sbm_reaches_high_f1(sbm2):
    cfg = TrainConfig(epochs=100, learning_rate=0.01, seed=0)
    model = train(sbm2, sage_arch(16, [16], 2), cfg)
    logreg = train(sbm2, [LayerSpec.dense(16, 2)], cfg)
    base = evaluate(logreg, sbm2)
    assert base >= 0.9
    f1 = evaluate(model, sbm2)
    assert f1 >= 0.95 and f1 >= base


def test_same_seed_bitwise(sbm2):
    cfg = TrainConfig(epochs=15, seed=3)
    a = train(sbm2, sage_arch(16, [8], 2), cfg)
    b = train(sbm2, sage_arch(16, [8], 2), cfg)
    for la, lb in zip(a.layers, b.layers):
        assert all(np.array_equal(x, y) for x, y in zip(la.weights, lb.weights))


def test_zero_learning_rate_keeps_weights(sbm2):
    model = init_model(sage_arch(16, [8], 2), seed=1)
    out = retrain(sbm2, model, TrainConfig(epochs=5, learning_rate=0.0))
    for la, lb in zip(model.layers, out.layers):
        assert all(np.array_equal(x, y) for x, y in zip(la.weights, lb.weights))


def test_retrain_fixed_point(sbm2):
    cfg = TrainConfig(epochs=150, seed=0)
    res = train(sbm2, sage_arch(16, [16], 2), cfg, return_result=True)
    again = retrain(sbm2, res.model, TrainConfig(epochs=30, learning_rate=0.001), return_result=True)
    assert again.best_val_f1 >= res.best_val_f1 - 0.005


def test_retrain_folded_recovers(sbm2):
    cfg = TrainConfig(epochs=150, seed=0)
    model = train(sbm2, sage_arch(16, [16], 2), cfg)
    base = evaluate(model, sbm2)
    rng = np.random.default_rng(0)
    beta = np.zeros(32, np.float32)
    beta[rng.choice(32, 16, replace=False)] = 1
    folded = fold_mask(MaskedModel(model, [None, PruneMask(beta, clipped=True)]))
    assert folded.layers[1].spec.in_dim == 16
    out = retrain(sbm2, folded, TrainConfig(epochs=100, seed=0))
    assert evaluate(out, sbm2) >= base - 0.02


def test_convex_loss_non_increasing(sbm2):
    cfg = TrainConfig(epochs=40, learning_rate=0.05, optimizer="sgd", early_stop_patience=0)
    res = train(sbm2, [LayerSpec.dense(16, 2)], cfg, return_result=True)
    losses = [row["train_loss"] for row in res.history]
    assert len(losses) == 40
    assert all(b <= a + 1e-7 for a, b in zip(losses, losses[1:]))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_reports_epoch(sbm2):
    with pytest.raises(TrainingError, match="epoch"):
        train(sbm2, sage_arch(16, [8], 2), TrainConfig(epochs=50, learning_rate=1e30, optimizer="sgd"))


def test_shape_checks(sbm2):
    with pytest.raises(ValueError):
        train(sbm2, sage_arch(16, [8], 3), TrainConfig(epochs=1))
    with pytest.raises(ValueError):
        train(sbm2, sage_arch(15, [8], 2), TrainConfig(epochs=1))


def test_log_csv(tmp_path, sbm2):
    res = train(sbm2, sage_arch(16, [4], 2), TrainConfig(epochs=3, early_stop_patience=0), return_result=True)
    res.write_log(tmp_path / "log.csv")
    rows = list(csv.DictReader(open(tmp_path / "log.csv")))
    assert [r["epoch"] for r in rows] == ["1", "2", "3"]
    assert set(rows[0]) == {"epoch", "train_loss", "val_f1", "lr"}
