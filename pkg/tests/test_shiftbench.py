from collections import Counter
import dataclasses
import math

import numpy as np
import pytest

from palmtta import shiftbench as sb


@pytest.fixture(scope="module")
def data():
    return sb.make_clean(n=5000, seed=0)


def logistic_oracle_error(d: sb.CleanDataset) -> float:
    """Plain gradient-descent logistic regression, independent of the autodiff engine."""
    mu, sd = d.x_train.mean(0), d.x_train.std(0)
    x = np.c_[(d.x_train - mu) / sd, np.ones(len(d.x_train))]
    xt = np.c_[(d.x_test - mu) / sd, np.ones(len(d.x_test))]
    y = d.y_train
    w = np.zeros(x.shape[1])
    for _ in range(2000):
        p = 1 / (1 + np.exp(-x @ w))
        w -= 0.5 * x.T @ (p - y) / len(y)
    return float(np.mean((xt @ w > 0) != d.y_test))


# ---------------------------------------------------------------- clean data

def test_same_seed_same_dataset():
    a, b = sb.make_clean(n=500, seed=3), sb.make_clean(n=500, seed=3)
    for f in dataclasses.fields(a):
        va, vb = getattr(a, f.name), getattr(b, f.name)
        assert np.array_equal(va, vb)


def test_labels_are_balanced(data):
    counts = np.bincount(np.r_[data.y_train, data.y_test])
    assert counts.max() - counts.min() <= 1


def test_two_well_separated_classes_are_linearly_separable():
    d = sb.make_clean(num_classes=2, n=2000, seed=1, separation=4.0)
    assert logistic_oracle_error(d) < 0.02


def test_make_clean_rejects_one_class():
    with pytest.raises(ValueError):
        sb.make_clean(num_classes=1)


# ---------------------------------------------------------------- corruptions

@pytest.mark.parametrize("family", sb.FAMILIES)
def test_severity_zero_is_identity(family, data):
    x = data.x_test[:50]
    assert np.array_equal(sb.corrupt(x, sb.Corruption(family, 0, seed=1)), x)


@pytest.mark.parametrize("family", sb.FAMILIES)
def test_displacement_grows_with_severity(family, data):
    x = data.x_test[:1000]
    d = [sb.displacement(x, sb.Corruption(family, s, seed=4), data.feature_std) for s in range(0, 6)]
    assert d[0] == 0.0
    assert all(a < b for a, b in zip(d, d[1:])), d


def test_dropout_severity_five_zeroes_exactly_half(data):
    x = data.x_test[:200]
    out = sb.corrupt(x, sb.Corruption("feature-dropout-mask", 5, seed=2))
    assert np.all((out == 0).sum(axis=1) == int(sb.DROPOUT_MAX_FRACTION * x.shape[1]))


def test_corruption_is_seed_deterministic(data):
    c = sb.Corruption("heavy-tail-noise", 3, seed=9)
    assert sb.corrupt(data.x_test, c).tobytes() == sb.corrupt(data.x_test, c).tobytes()


def test_corruption_validation():
    with pytest.raises(ValueError):
        sb.Corruption("fog", 3)
    with pytest.raises(ValueError):
        sb.Corruption("gauss-noise", 6)


# ---------------------------------------------------------------- streams

def test_ctta_counts_and_domains(data):
    s = sb.build_ctta(data, batch_size=100, seed=0)
    assert len(s) == 60
    ids = [b.domain_id for b in s]
    assert ids == [i // 10 for i in range(60)]
    assert set(s.severities()) == {5}


def test_ctta_each_sample_once_per_task(data):
    s = sb.build_ctta(data, batch_size=100, seed=0)
    for fid in range(len(sb.FAMILIES)):
        ids = [i for b in s if b.domain_id == fid for i in b.sample_ids]
        assert sorted(ids) == list(range(len(data.y_test)))


def test_batches_carry_no_labels(data):
    b = sb.build_ctta(data, seed=0)[0]
    assert not any("label" in f.name or f.name == "y" for f in dataclasses.fields(b))
    with pytest.raises(dataclasses.FrozenInstanceError):
        b.x = None
    assert not b.x.flags.writeable


def test_gtta_schedule(data):
    s = sb.build_gtta(data, batch_size=100, seed=0, batches_per_step=2)
    assert len(s) == 6 * 9 * 2
    for fid in range(6):
        sev = [b.severity for b in s if b.domain_id == fid]
        assert sev[::2] == list(sb.GTTA_SCHEDULE)
        assert np.mean(sev) == pytest.approx(25 / 9)


def test_mdtta_is_permutation_of_ctta(data):
    c = sb.build_ctta(data, seed=3)
    m = sb.build_mdtta(data, seed=3)
    key = lambda b: (b.domain, b.sample_ids, b.x.tobytes())  # noqa: E731
    assert Counter(map(key, c)) == Counter(map(key, m))
    assert [b.index for b in m] == list(range(len(m)))
    assert m.domains() != c.domains()


def test_mdtta_consecutive_same_domain_rate(data):
    k = len(sb.FAMILIES)
    same = pairs = 0
    for seed in range(5):
        doms = sb.build_mdtta(data, seed=seed).domains()
        same += sum(a == b for a, b in zip(doms, doms[1:]))
        pairs += len(doms) - 1
    sigma = math.sqrt(pairs * (1 / k) * (1 - 1 / k))
    assert abs(same - pairs / k) <= 3 * sigma


@pytest.mark.parametrize("protocol", ["ctta", "gtta", "mdtta", "clean"])
def test_streams_are_byte_deterministic(protocol, data, tmp_path):
    a, b = (sb.build_stream(protocol, data, seed=5) for _ in range(2))
    assert [x.x.tobytes() for x in a] == [x.x.tobytes() for x in b]
    a.dump_jsonl(tmp_path / "a.jsonl")
    b.dump_jsonl(tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_different_seeds_differ(data):
    assert sb.build_ctta(data, seed=0)[0].sample_ids != sb.build_ctta(data, seed=1)[0].sample_ids


def test_labels_lookup(data):
    s = sb.build_ctta(data, seed=0)
    b = s[7]
    assert np.array_equal(s.labels(b), data.y_test[list(b.sample_ids)])


def test_unknown_protocol_and_family(data):
    with pytest.raises(ValueError):
        sb.build_stream("nope", data)
    with pytest.raises(ValueError):
        sb.build_ctta(data, families=("fog",))


# ---------------------------------------------------------------- augmentation

def test_augment_zero_sigma_is_identity(data):
    x = data.x_test[:10]
    assert np.array_equal(sb.augment(x, 0, 0, data.feature_std, sigma_scale=0.0), x)


def test_augment_is_deterministic_and_unbiased(data):
    x = np.zeros((4000, data.dim))
    a = sb.augment(x, 3, 1, data.feature_std)
    assert a.tobytes() == sb.augment(x, 3, 1, data.feature_std).tobytes()
    sd = 0.05 * data.feature_std
    assert np.all(np.abs(a.mean(axis=0)) <= 3 * sd / math.sqrt(len(x)))


def test_augmenter_uses_batch_index(data):
    s = sb.build_ctta(data, seed=0)
    aug = sb.Augmenter(data.feature_std, seed=0)
    assert not np.array_equal(aug(s[0]) - s[0].x, aug(s[1]) - s[1].x)
