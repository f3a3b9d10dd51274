from types import SimpleNamespace

import numpy as np
import pytest

from palmtta import autodiff as ad
from palmtta import baselines as bl
from palmtta import optim
from palmtta.network import build_mlp
from palmtta.palm import adaptation_loss


def batch_of(x, index=0):
    return SimpleNamespace(x=x, index=index)


def jitter(batch):
    return batch.x + 0.01 * np.random.default_rng(batch.index).normal(size=batch.x.shape)


def param_bytes(net):
    return {s.key: s.values.tobytes() for s in net.slots}


def buffer_bytes(net):
    return [b.tobytes() for b in net.snapshot()["buffers"]]


@pytest.fixture
def net(source_net):
    clone = build_mlp(8, [32, 32, 32], 5, seed=0)
    clone.restore(source_net.snapshot())
    return clone


@pytest.fixture
def shifted(workspace, base_cfg):
    data = workspace.dataset(base_cfg)
    return data.x_test[:100] * 0.3 + 1.0


def test_source_step_is_pure_inference(net, shifted):
    before, bufs = param_bytes(net), buffer_bytes(net)
    a = bl.source_step(net, batch_of(shifted)).predictions
    b = bl.source_step(net, batch_of(shifted)).predictions
    assert np.array_equal(a, b)
    assert param_bytes(net) == before and buffer_bytes(net) == bufs


def test_source_step_clean_error_is_source_error(net, workspace, base_cfg):
    data = workspace.dataset(base_cfg)
    pred = bl.source_step(net, batch_of(data.x_test)).predictions
    assert np.array_equal(pred, net.predict(data.x_test, "eval"))


def test_bn_stats_step_leaves_params_and_buffers(net, shifted):
    before, bufs = param_bytes(net), buffer_bytes(net)
    bl.bn_stats_step(net, batch_of(shifted))
    assert param_bytes(net) == before and buffer_bytes(net) == bufs


def test_bn_stats_close_to_source_on_source_distribution(net, workspace, base_cfg):
    data = workspace.dataset(base_cfg)
    for seed in range(5):
        idx = np.random.default_rng(seed).choice(len(data.x_test), 200, replace=False)
        x = data.x_test[idx]
        src = net.forward(x, "eval").values
        bn = net.forward(x, "batch").values
        assert np.abs(src - bn).mean() < 0.25 * np.abs(src).mean()
        assert np.mean(src.argmax(1) == bn.argmax(1)) >= 0.95


def test_bn_output_is_zero_mean_for_constant_features():
    net = build_mlp(3, [4], 2, seed=0)
    x = np.tile([[1.0, 2.0, 3.0]], (6, 1))
    x[:, 0] += np.arange(6)
    bn = net.batchnorm_layers()[0]
    h = net.layers[0].forward(ad.Tensor(x), "batch")
    out = bn.forward(h, "batch").values
    np.testing.assert_allclose(out.mean(axis=0), net.slot(1, "beta").values, atol=1e-12)


def test_tent_touches_only_bn_affine(net, shifted):
    before = param_bytes(net)
    for i in range(3):
        bl.tent_step(net, batch_of(shifted, i), lr=1e-3)
    for s in net.slots:
        changed = before[s.key] != s.values.tobytes()
        assert changed == (s.name in ("gamma", "beta"))


def test_tent_lr_zero_changes_nothing(net, shifted):
    before = param_bytes(net)
    bl.tent_step(net, batch_of(shifted), lr=0.0)
    assert param_bytes(net) == before


def test_tent_on_confident_batch_barely_moves():
    net = build_mlp(2, [4], 2, seed=0)
    head = net.slot(2, "weight")
    head.tensor.values[:] = 0.0
    head.tensor.values[:, 0] = 200.0
    net.slot(2, "bias").tensor.values[:] = [1000.0, 0.0]
    x = np.random.default_rng(0).normal(size=(8, 2))
    before = {s.key: s.values.copy() for s in net.slots}
    bl.tent_step(net, batch_of(x), lr=1e-3, optimizer="sgd")
    for s in net.slots:
        assert np.abs(s.values - before[s.key]).max() < 1e-9


def test_surgical_freezes_layers_from_two_on(net, shifted):
    before = param_bytes(net)
    for i in range(3):
        bl.surgical_step(net, batch_of(shifted, i), jitter, lr=5e-4)
    for s in net.slots:
        assert (before[s.key] != s.values.tobytes()) == (s.layer_index in (0, 1))


def test_surgical_lr_zero_changes_nothing(net, shifted):
    before = param_bytes(net)
    bl.surgical_step(net, batch_of(shifted), jitter, lr=0.0)
    assert param_bytes(net) == before


def test_surgical_on_two_layer_net_is_full_fine_tuning():
    x = np.random.default_rng(0).normal(size=(10, 3)) * 3
    a = build_mlp(3, [4], 2, seed=0, batchnorm=False)
    b = build_mlp(3, [4], 2, seed=0, batchnorm=False)
    bl.surgical_step(a, batch_of(x), jitter, lr=1e-2, gate_factor=1.0)
    b.zero_grad()
    total, _, _ = adaptation_loss(b, x, jitter(batch_of(x)), 0.01, 2, 1.0, "batch")
    b.backward(total)
    for s in b.slots:
        optim.update(s, 1e-2, "adam")
    assert param_bytes(a) == param_bytes(b)


def test_fisher_accumulation_is_direct_sum():
    state = bl.LawState()
    f = {(0, "weight"): np.array([1.0, 2.0])}
    bl.accumulate_fisher(state, f)
    np.testing.assert_array_equal(state.fisher[(0, "weight")], f[(0, "weight")])
    for _ in range(4):
        bl.accumulate_fisher(state, f)
    np.testing.assert_array_equal(state.fisher[(0, "weight")], 5 * f[(0, "weight")])
    bl.accumulate_fisher(state, {(0, "weight"): np.zeros(2)})
    np.testing.assert_array_equal(state.fisher[(0, "weight")], 5 * f[(0, "weight")])


def test_pseudo_label_fisher_is_squared_grad(net, shifted):
    fisher, pseudo = bl.pseudo_label_fisher(net, shifted)
    assert np.array_equal(pseudo, net.predict(shifted, "batch"))
    for s in net.slots:
        np.testing.assert_array_equal(fisher[s.key], s.grad ** 2)


def test_law_layer_lrs_are_normalised_and_clipped(net, shifted):
    state = bl.LawState()
    bl.accumulate_fisher(state, bl.pseudo_label_fisher(net, shifted)[0])
    lrs = bl.law_layer_lrs(state, net, 5e-4)
    means = state.layer_means(net)
    top = max(means.values())
    for n, lr in lrs.items():
        assert lr == pytest.approx(5e-4 * means[n] / (top + 1e-8), rel=1e-12)
    assert all(0 <= v <= 5e-4 for v in lrs.values())


def test_law_step_runs_and_updates(net, shifted):
    state = bl.LawState()
    before = param_bytes(net)
    rep = bl.law_step(net, state, batch_of(shifted), jitter)
    assert state.t == 1 and rep.predictions.shape == (100,)
    assert param_bytes(net) != before
