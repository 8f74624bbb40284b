import math

import numpy as np
import pytest

from ftwt.errors import ConfigurationError
from ftwt.gating import build_heads
from ftwt.network import build_network
from ftwt.supervision import MassCriterion
from ftwt.training import (TrainConfig, compute_gradients, evaluate, lr_schedule, total_loss,
                           train_loop, train_step, train_step_decoupled, train_step_joint,
                           write_metrics_csv)

from conftest import SEEDS, tiny_arch


def _batch(seed, n=6):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, 2, 8, 8)).astype(np.float32), rng.integers(0, 3, n)


def _setup(seed, bias=None):
    net = build_network(tiny_arch(), seed)
    heads = build_heads(net.arch)
    if bias is not None:
        for h in heads.values():
            h.bias[:] = bias
    return net, heads


def _snapshot(net, heads):
    s = {k: v.copy() for k, v in net.params.items()}
    s.update({f"h{b}{k}": getattr(h, k).copy() for b, h in heads.items() for k in ("weight", "bias")})
    return s


def _same(a, b, keys):
    return all(np.array_equal(a[k], b[k]) for k in keys)


def test_lr_schedule_examples():
    ms = (80, 120, 150)
    assert lr_schedule(0, 0.1, ms) == 0.1
    assert math.isclose(lr_schedule(80, 0.1, ms), 0.01)
    assert math.isclose(lr_schedule(150, 0.1, ms), 1e-4)
    assert lr_schedule(500, 0.1) == 0.1
    with pytest.raises(ConfigurationError):
        lr_schedule(-1, 0.1)


@pytest.mark.parametrize("kwargs", [dict(mode="both"), dict(milestones=(5, 5)), dict(mask_source="x"),
                                    dict(pred_loss_reduction="max"), dict(batch_size=0)])
def test_train_config_validation(kwargs):
    with pytest.raises(ConfigurationError):
        TrainConfig(**kwargs)


def test_total_loss_perfect_heads():
    logits = np.array([[2.0, -1.0], [0.0, 3.0]])
    y = np.array([0, 1])
    gt = {2: np.array([[1, 0, 1], [0, 1, 1]], np.float32)}
    rep, _, _ = total_loss(logits, y, {2: (gt[2] * 2 - 1) * 50}, gt)
    assert rep.l_pred < 1e-20 and rep.head_acc == 1.0
    assert math.isclose(rep.l_total, rep.l_ent)


def test_total_loss_untrained_heads_ln2():
    gt = {2: np.ones((2, 3)), 3: np.zeros((2, 4))}
    rep, _, _ = total_loss(np.zeros((2, 2)), np.array([0, 1]), {b: np.zeros_like(g) for b, g in gt.items()}, gt)
    assert all(math.isclose(v, math.log(2)) for v in rep.per_layer.values())
    assert math.isclose(rep.l_pred, math.log(2))
    rep, _, _ = total_loss(np.zeros((2, 2)), np.array([0, 1]), {b: np.zeros_like(g) for b, g in gt.items()},
                           gt, "sum")
    assert math.isclose(rep.l_pred, 7 * math.log(2))


def test_total_loss_hand_toy():
    # 2 classes, one gated layer of 2 filters, one sample
    logits = np.array([[1.0, 0.0]])
    p = np.array([[2.0, -1.0]])
    g = np.array([[1.0, 1.0]])
    ce = math.log(1 + math.exp(-1))
    bce = (math.log(1 + math.exp(-2)) + math.log(1 + math.exp(1))) / 2
    rep, _, _ = total_loss(logits, np.array([0]), {2: p}, {2: g})
    assert math.isclose(rep.l_ent, ce, rel_tol=1e-12)
    assert math.isclose(rep.l_total, ce + bce, rel_tol=1e-12)
    assert rep.correct == 1 and rep.head_acc == 0.5


def test_frozen_backbone_only_heads_move():
    net, heads = _setup(0)
    x, y = _batch(0)
    cfg = TrainConfig(mode="decoupled", lr=0.0, head_lr=0.1, weight_decay=0.0)
    before = _snapshot(net, heads)
    train_step_decoupled(net, heads, x, y, cfg, MassCriterion(0.7))
    after = _snapshot(net, heads)
    assert _same(before, after, [k for k in net.params if not k.endswith(("mean", "var"))])
    assert not _same(before, after, [k for k in before if k.startswith("h")])


def test_head_lr_zero_keeps_heads():
    net, heads = _setup(0)
    x, y = _batch(0)
    cfg = TrainConfig(mode="decoupled", lr=0.05, head_lr=0.0)
    before = _snapshot(net, heads)
    train_step(net, heads, x, y, cfg, MassCriterion(0.7))
    after = _snapshot(net, heads)
    assert _same(before, after, [k for k in before if k.startswith("h")])
    assert not _same(before, after, ["conv.1.weight"])


@pytest.mark.parametrize("mode", ["decoupled", "joint", "baseline"])
def test_zero_lr_no_change(mode):
    net, heads = _setup(1)
    x, y = _batch(1)
    cfg = TrainConfig(mode=mode, lr=0.0, head_lr=0.0)
    before = _snapshot(net, heads)
    train_step(net, heads, x, y, cfg, MassCriterion(0.7))
    after = _snapshot(net, heads)
    assert _same(before, after, [k for k in before if not k.endswith(("mean", "var"))])


def test_decoupled_head_grads_ignore_task_loss():
    net, heads = _setup(2)
    x, y = _batch(2)
    cfg = TrainConfig(mode="decoupled")
    a = compute_gradients(net, heads, x, y, cfg, MassCriterion(0.6))
    b = compute_gradients(net, heads, x, (y + 1) % 3, cfg, MassCriterion(0.6))
    assert a.head_grads.keys() == b.head_grads.keys() and a.head_grads
    assert all(np.array_equal(a.head_grads[k], b.head_grads[k]) for k in a.head_grads)
    assert not np.array_equal(a.grads["fc.1.weight"], b.grads["fc.1.weight"])


def test_joint_head_grads_see_task_loss():
    net, heads = _setup(2)
    rng = np.random.default_rng(0)
    for h in heads.values():
        h.weight[:] = rng.normal(0, 0.5, h.weight.shape)
    x, y = _batch(2)
    cfg = TrainConfig(mode="joint")
    a = compute_gradients(net, heads, x, y, cfg, MassCriterion(0.6))
    b = compute_gradients(net, heads, x, (y + 1) % 3, cfg, MassCriterion(0.6))
    assert not np.array_equal(a.head_grads["head.3.bias"], b.head_grads["head.3.bias"])


@pytest.mark.parametrize("seed", SEEDS)
def test_joint_matches_decoupled_backbone_when_heads_saturated(seed):
    # W = 0 and large positive bias: every mask is all-ones and r = 1 agrees
    # wherever a channel is alive, so the STE route carries no backbone gradient
    x, y = _batch(seed)
    results = {}
    for mode in ("decoupled", "joint"):
        net, heads = _setup(seed, bias=50.0)
        cfg = TrainConfig(mode=mode, lr=0.05, momentum=0.9)
        train_step(net, heads, x, y, cfg, MassCriterion(1.0))
        results[mode] = net.params
    gap = max(np.abs(results["joint"][k] - results["decoupled"][k]).max() for k in results["joint"])
    assert gap < 1e-6


def test_step_wrappers_check_mode():
    net, heads = _setup(0)
    x, y = _batch(0)
    with pytest.raises(ConfigurationError):
        train_step_joint(net, heads, x, y, TrainConfig(mode="decoupled"), MassCriterion(0.5))
    with pytest.raises(ConfigurationError):
        train_step_decoupled(net, heads, x, y, TrainConfig(mode="joint"), MassCriterion(0.5))
    with pytest.raises(ConfigurationError):
        compute_gradients(net, heads, x, y, TrainConfig(mode="joint"), None)


def test_teacher_forcing_applies_ground_truth():
    net, heads = _setup(3, bias=-50.0)  # predicted masks would drop everything
    x, y = _batch(3)
    g = compute_gradients(net, heads, x, y, TrainConfig(mode="decoupled", mask_source="ground_truth"),
                          MassCriterion(1.0))
    assert np.abs(g.grads["conv.3.weight"]).sum() > 0
    g = compute_gradients(net, heads, x, y, TrainConfig(mode="decoupled"), MassCriterion(1.0))
    assert not g.grads["conv.3.weight"].any()


def _loop(tmp_path, name, mode="decoupled", epochs=2):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(40, 2, 8, 8)).astype(np.float32)
    y = rng.integers(0, 3, 40)
    net, heads = _setup(0)
    cfg = TrainConfig(mode=mode, epochs=epochs, batch_size=16, lr=0.01, milestones=(1,), seed=5)
    res = train_loop(cfg, net, x, y, x[:10], y[:10], heads=heads, rule=MassCriterion(0.8),
                     csv_path=tmp_path / f"{name}.csv")
    return res


def test_train_loop_deterministic(tmp_path):
    a, b = _loop(tmp_path, "a"), _loop(tmp_path, "b")
    assert all(a.net.params[k].tobytes() == b.net.params[k].tobytes() for k in a.net.params)
    assert all(a.heads[h].weight.tobytes() == b.heads[h].weight.tobytes() for h in a.heads)
    strip = lambda h: [{k: v for k, v in r.items() if k != "wall_seconds"} for r in h]
    assert strip(a.history) == strip(b.history)
    assert [r["lr"] for r in a.history] == [0.01, 0.001]


def test_metrics_csv_columns(tmp_path):
    res = _loop(tmp_path, "m")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "epoch,lr,L_ent,L_pred,train_acc,test_acc,mean_keep_rate_per_layer,wall_seconds"
    assert len(lines) == 3
    assert len(lines[1].split(",")[6].split(";")) == 2
    write_metrics_csv(res.history, tmp_path / "again.csv")


def test_baseline_loop_ignores_heads(tmp_path):
    res = _loop(tmp_path, "base", mode="baseline", epochs=1)
    assert res.heads == {}
    assert res.history[0]["L_pred"] == 0.0


def test_evaluate_reports_keep_rates():
    net, heads = _setup(0)
    x, y = _batch(0)
    heads[2].bias[:2] = -1.0
    ev = evaluate(net, heads, x, y, batch_size=4)
    assert ev.keep_rates == {2: 0.5, 3: 1.0}
    assert ev.logits.shape == (6, 3)


@pytest.mark.slow
def test_baseline_smoke_on_mnist_subset(mnist_dir):
    from ftwt.data import MNIST_MEAN, MNIST_STD, load_mnist_idx, normalize, stratified_subset
    from ftwt.network import mnist_net
    p = {k: mnist_dir / f"{k}-idx{3 if k.endswith('images') else 1}-ubyte"
         for k in ("train-images", "train-labels", "test-images", "test-labels")}
    x, y = load_mnist_idx(p["train-images"], p["train-labels"])
    xt, yt = load_mnist_idx(p["test-images"], p["test-labels"])
    idx = stratified_subset(y, 2000, 0)
    x, xt = normalize(x[idx], MNIST_MEAN, MNIST_STD), normalize(xt, MNIST_MEAN, MNIST_STD)
    net = build_network(mnist_net(), 0)
    train_loop(TrainConfig(epochs=5, batch_size=64, lr=0.1), net, x, y[idx], xt, yt)
    assert evaluate(net, {}, xt, yt).accuracy > 0.90
