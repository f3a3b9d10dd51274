import numpy as np
import pytest

from palmtta import network as nw
from palmtta.shiftbench import make_clean


def test_default_mlp_has_seven_trainable_layers():
    net = nw.build_mlp(8, [32, 32, 32], 5, seed=0)
    assert net.num_layers == 7
    kinds = [s.kind for s in net.specs if s.layer_index is not None]
    assert kinds == ["affine", "batchnorm"] * 3 + ["head"]
    assert net.slot(0, "weight").tensor.shape == (8, 32)
    assert net.slot(6, "weight").tensor.shape == (32, 5)
    assert [s.key for s in net.layer_slots(1)] == [(1, "gamma"), (1, "beta")]


def test_mlp_without_batchnorm():
    net = nw.build_mlp(3, [4], 2, seed=0, batchnorm=False)
    assert net.num_layers == 2
    assert net.batchnorm_layers() == []


def test_init_is_bounded_by_fan_in():
    net = nw.build_mlp(16, [8], 3, seed=5)
    w = net.slot(0, "weight").values
    assert np.abs(w).max() <= 1 / 4


@pytest.mark.parametrize("bad", [dict(num_classes=1), dict(hidden_widths=[0])])
def test_build_mlp_rejects_bad_shapes(bad):
    args = dict(input_dim=4, hidden_widths=[3], num_classes=3, seed=0) | bad
    with pytest.raises(ValueError):
        nw.build_mlp(**args)


def test_same_seed_same_weights():
    a, b = nw.build_mlp(8, [32], 5, seed=3), nw.build_mlp(8, [32], 5, seed=3)
    for sa, sb in zip(a.slots, b.slots):
        assert sa.values.tobytes() == sb.values.tobytes()


def test_bn_modes():
    net = nw.build_mlp(3, [4], 2, seed=0)
    bn = net.batchnorm_layers()[0]
    x = np.random.default_rng(0).normal(5.0, 1.0, size=(10, 3))
    rm = bn.running_mean.copy()
    net.forward(x, "batch")
    np.testing.assert_array_equal(bn.running_mean, rm)
    net.forward(x, "eval")
    np.testing.assert_array_equal(bn.running_mean, rm)
    net.forward(x, "train")
    assert not np.array_equal(bn.running_mean, rm)
    with pytest.raises(ValueError):
        net.forward(x, "bogus")


def test_train_mode_running_stat_momentum():
    net = nw.build_mlp(2, [2], 2, seed=0)
    net.slot(0, "weight").tensor.values[:] = np.eye(2)
    net.slot(0, "bias").tensor.values[:] = 0.0
    x = np.array([[1.0, 2.0], [3.0, 6.0]])
    net.forward(x, "train")
    bn = net.batchnorm_layers()[0]
    np.testing.assert_allclose(bn.running_mean, 0.1 * x.mean(axis=0))


def test_per_layer_grad_view_requires_backward():
    net = nw.build_mlp(3, [4], 2, seed=0)
    with pytest.raises(RuntimeError):
        nw.per_layer_grad_view(net)
    net.backward(nw.cross_entropy(net.forward(np.ones((4, 3)), "batch"), np.array([0, 1, 0, 1])))
    view = nw.per_layer_grad_view(net)
    assert sorted(view) == [0, 1, 2]
    assert view[0].size == 3 * 4 + 4 and view[1].size == 8
    net.zero_grad()
    with pytest.raises(RuntimeError):
        nw.per_layer_grad_view(net)


def test_unreached_params_get_zero_grad():
    net = nw.build_mlp(3, [4], 2, seed=0)
    net.backward(nw.ad.sum(net.slot(0, "bias").tensor))
    assert np.all(net.slot(2, "weight").grad == 0)


def test_snapshot_roundtrip_memory_and_file(tmp_path):
    rng = np.random.default_rng(0)
    net = nw.build_mlp(8, [32, 32], 5, seed=1)
    net.forward(rng.normal(size=(16, 8)), "train")
    snap = net.snapshot()
    path = tmp_path / "net.palmnet"
    net.save(path)
    assert path.read_bytes()[:8] == nw.SNAPSHOT_MAGIC

    other = nw.build_mlp(8, [32, 32], 5, seed=99)
    other.load(path)
    x = rng.normal(size=(7, 8))
    assert other.forward(x, "eval").values.tobytes() == net.forward(x, "eval").values.tobytes()

    for s in net.slots:
        s.tensor.values += 1.0
    net.restore(snap)
    assert net.forward(x, "eval").values.tobytes() == other.forward(x, "eval").values.tobytes()


def test_restore_rejects_mismatched_snapshot():
    snap = nw.build_mlp(8, [32], 5, seed=0).snapshot()
    with pytest.raises(ValueError):
        nw.build_mlp(8, [16], 5, seed=0).restore(snap)


def test_corrupt_snapshot_file_rejected(tmp_path):
    path = tmp_path / "bad.palmnet"
    path.write_bytes(b"NOTMAGIC" + b"\0" * 8)
    with pytest.raises(ValueError):
        nw.read_snapshot(path)


def test_freeze_zeroes_lr_and_unfreeze():
    net = nw.build_mlp(3, [4], 2, seed=0)
    s = net.slot(0, "weight")
    s.freeze()
    assert s.frozen and np.all(s.lr == 0)
    s.unfreeze()
    assert not s.frozen


def test_zero_epochs_leaves_weights_unchanged():
    data = make_clean(n=400, seed=0)
    net = nw.build_mlp(8, [16], 5, seed=0)
    before = net.snapshot()
    nw.train_source(net, data, epochs=0)
    for a, b in zip(before["params"], net.snapshot()["params"]):
        assert a.tobytes() == b.tobytes()
    assert net.bn_mode == "eval"


def test_source_training_is_deterministic():
    data = make_clean(n=600, seed=2)
    nets = [nw.build_mlp(8, [16], 5, seed=0) for _ in range(2)]
    for n in nets:
        nw.train_source(n, data, epochs=3)
    for a, b in zip(nets[0].snapshot()["params"], nets[1].snapshot()["params"]):
        assert a.tobytes() == b.tobytes()


def test_default_source_model_is_accurate_on_clean_data(source_net, workspace, base_cfg):
    data = workspace.dataset(base_cfg)
    err = np.mean(source_net.predict(data.x_test, "eval") != data.y_test)
    assert err < 0.05
