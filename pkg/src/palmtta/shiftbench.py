"""Synthetic distribution-shift benchmark.

A Gaussian-cluster classification problem stands in for an image dataset;
six corruption families with five severities act on feature vectors, and
three stream builders lay corrupted test batches out in continual (CTTA),
gradual (GTTA) and mixed-domain (MDTTA) order.

Labels never travel with a batch. :class:`StreamBatch` carries features and
metadata only; the ground truth stays inside :class:`StreamScenario` and is
handed out to the scorer through :meth:`StreamScenario.labels`.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FAMILIES = (
    "gauss-noise",
    "feature-blur",
    "contrast-scale",
    "feature-dropout-mask",
    "additive-bias-shift",
    "heavy-tail-noise",
)
SEVERITIES = (1, 2, 3, 4, 5)
GTTA_SCHEDULE = (1, 2, 3, 4, 5, 4, 3, 2, 1)
DROPOUT_MAX_FRACTION = 0.5

# per-severity magnitudes, index 0 is severity 1
_NOISE_SIGMA = (0.3, 0.5, 0.7, 0.9, 1.2)
_BLUR_WEIGHT = (0.2, 0.4, 0.6, 0.8, 1.0)
_BLUR_WINDOW = 5
_CONTRAST = (0.8, 0.65, 0.5, 0.35, 0.2)
_BIAS_SHIFT = (0.6, 1.2, 1.8, 2.4, 3.0)
_HEAVY_TAIL_SCALE = (0.2, 0.35, 0.5, 0.65, 0.8)
_HEAVY_TAIL_DF = 2.0


# ---------------------------------------------------------------- clean data

@dataclass
class CleanDataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    num_classes: int
    means: np.ndarray
    seed: int

    @property
    def dim(self) -> int:
        return self.x_train.shape[1]

    @property
    def feature_std(self) -> np.ndarray:
        return self.x_train.std(axis=0)


def make_clean(num_classes: int = 5, dim: int = 8, n: int = 5000, seed: int = 0,
               test_fraction: float = 0.2, separation: float = 2.5) -> CleanDataset:
    """Balanced Gaussian clusters with random per-class covariance.

    Class means are drawn from N(0, separation^2 I); each class covariance is
    ``A A^T / dim + 0.25 I`` for a standard-normal ``A``.
    """
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, separation, size=(num_classes, dim))
    chol = []
    for _ in range(num_classes):
        a = rng.normal(size=(dim, dim))
        chol.append(np.linalg.cholesky(a @ a.T / dim + 0.25 * np.eye(dim)))
    labels = rng.permutation(np.arange(n) % num_classes)
    z = rng.normal(size=(n, dim))
    x = np.empty((n, dim))
    for c in range(num_classes):
        rows = labels == c
        x[rows] = means[c] + z[rows] @ chol[c].T
    n_test = int(round(n * test_fraction))
    return CleanDataset(
        x_train=x[n_test:], y_train=labels[n_test:],
        x_test=x[:n_test], y_test=labels[:n_test],
        num_classes=num_classes, means=means, seed=seed,
    )


# ---------------------------------------------------------------- corruptions

@dataclass(frozen=True)
class Corruption:
    family: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown corruption family {self.family!r}; choose from {FAMILIES}")
        if self.severity not in (0, *SEVERITIES):
            raise ValueError(f"severity must be in 0..5, got {self.severity}")


def _blur(x: np.ndarray, window: int) -> np.ndarray:
    pad = window // 2
    padded = np.pad(x, ((0, 0), (pad, pad)), mode="edge")
    kernel = np.ones(window) / window
    return np.stack([np.convolve(row, kernel, mode="valid") for row in padded])


def corrupt(features: np.ndarray, corruption: Corruption, ref_std=1.0) -> np.ndarray:
    """Apply one corruption to a (n, d) block.

    ``ref_std`` (scalar or per-feature) sets the unit for additive families.
    Random draws depend only on ``corruption.seed`` and the block shape, never
    on severity, so displacement grows monotonically with severity.
    """
    x = np.asarray(features, dtype=np.float64)
    s = corruption.severity
    if s == 0:
        return x.copy()
    k = s - 1
    ref_std = np.broadcast_to(np.asarray(ref_std, dtype=np.float64), (x.shape[1],))
    rng = np.random.default_rng(corruption.seed)
    family = corruption.family

    if family == "gauss-noise":
        return x + _NOISE_SIGMA[k] * ref_std * rng.normal(size=x.shape)
    if family == "feature-blur":
        w = _BLUR_WEIGHT[k]
        return (1 - w) * x + w * _blur(x, _BLUR_WINDOW)
    if family == "contrast-scale":
        centre = x.mean(axis=1, keepdims=True)
        return centre + _CONTRAST[k] * (x - centre)
    if family == "feature-dropout-mask":
        # zero floor(q) coordinates and attenuate the next one by frac(q); at
        # severity 5 q is integral so exactly the max fraction is zeroed
        q = s / len(SEVERITIES) * DROPOUT_MAX_FRACTION * x.shape[1]
        whole, frac = int(np.floor(q)), q - np.floor(q)
        order = np.argsort(rng.random(x.shape), axis=1)
        keep = np.ones(x.shape)
        rows = np.arange(x.shape[0])[:, None]
        keep[rows, order[:, :whole]] = 0.0
        if frac > 0 and whole < x.shape[1]:
            keep[np.arange(x.shape[0]), order[:, whole]] = 1.0 - frac
        return x * keep
    if family == "additive-bias-shift":
        direction = rng.normal(size=x.shape[1])
        direction /= np.linalg.norm(direction)
        return x + _BIAS_SHIFT[k] * np.sqrt(x.shape[1]) * ref_std * direction
    if family == "heavy-tail-noise":
        return x + _HEAVY_TAIL_SCALE[k] * ref_std * rng.standard_t(_HEAVY_TAIL_DF, size=x.shape)
    raise AssertionError(family)


def displacement(features: np.ndarray, corruption: Corruption, ref_std=1.0) -> float:
    """Mean L2 distance between clean and corrupted rows."""
    moved = corrupt(features, corruption, ref_std) - features
    return float(np.linalg.norm(moved, axis=1).mean())


# ---------------------------------------------------------------- streams

@dataclass(frozen=True)
class StreamBatch:
    """What an adaptation step is allowed to see: features and metadata, no labels."""

    index: int
    domain: str
    domain_id: int
    severity: int
    sample_ids: tuple
    x: np.ndarray = field(repr=False)

    def descriptor(self, protocol: str) -> dict:
        return {
            "protocol": protocol, "index": self.index, "domain": self.domain,
            "severity": self.severity, "sample_ids": list(self.sample_ids),
        }


class StreamScenario:
    """Immutable ordered sequence of corrupted test batches."""

    def __init__(self, protocol: str, batches, labels: np.ndarray, batch_size: int,
                 seed: int, families):
        self.protocol = protocol
        self.batches: tuple[StreamBatch, ...] = tuple(batches)
        self._labels = labels.copy()
        self._labels.flags.writeable = False
        self.batch_size = batch_size
        self.seed = seed
        self.families = tuple(families)

    def __len__(self) -> int:
        return len(self.batches)

    def __iter__(self):
        return iter(self.batches)

    def __getitem__(self, i) -> StreamBatch:
        return self.batches[i]

    def labels(self, batch: StreamBatch) -> np.ndarray:
        """Ground truth for scoring only."""
        return self._labels[np.asarray(batch.sample_ids)]

    def severities(self) -> list[int]:
        return [b.severity for b in self.batches]

    def domains(self) -> list[str]:
        return [b.domain for b in self.batches]

    def dump_jsonl(self, path) -> None:
        with open(path, "w", newline="\n") as fh:
            for b in self.batches:
                fh.write(json.dumps(b.descriptor(self.protocol)) + "\n")


def _check_families(families) -> tuple:
    families = tuple(families)
    for f in families:
        if f not in FAMILIES:
            raise ValueError(f"unknown corruption family {f!r}")
    if not families:
        raise ValueError("need at least one corruption family")
    return families


class _CorruptedTestSet:
    """Caches corrupted copies of the test split per (family, severity)."""

    def __init__(self, dataset: CleanDataset, seed: int):
        self.dataset = dataset
        self.seed = seed
        self.ref_std = dataset.feature_std
        self._cache: dict[tuple[int, int], np.ndarray] = {}

    def get(self, family_id: int, family: str, severity: int) -> np.ndarray:
        key = (family_id, severity)
        if key not in self._cache:
            cseed = int(np.random.SeedSequence([self.seed, 7919, family_id]).generate_state(1)[0])
            block = corrupt(self.dataset.x_test, Corruption(family, severity, cseed), self.ref_std)
            block.flags.writeable = False
            self._cache[key] = block
        return self._cache[key]


def _task_order(seed: int, family_id: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 104729, family_id]).permutation(n)


def _make_batch(index, family, family_id, severity, ids, block):
    x = block[ids].copy()
    x.flags.writeable = False
    return StreamBatch(index, family, family_id, severity, tuple(int(i) for i in ids), x)


def build_ctta(dataset: CleanDataset, families=FAMILIES, batch_size: int = 100,
               seed: int = 0) -> StreamScenario:
    """One severity-5 task per family, in the listed order."""
    families = _check_families(families)
    test = _CorruptedTestSet(dataset, seed)
    n = len(dataset.y_test)
    batches = []
    for fid, family in enumerate(families):
        order = _task_order(seed, fid, n)
        block = test.get(fid, family, 5)
        for start in range(0, n, batch_size):
            batches.append(_make_batch(len(batches), family, fid, 5, order[start:start + batch_size], block))
    return StreamScenario("ctta", batches, dataset.y_test, batch_size, seed, families)


def build_gtta(dataset: CleanDataset, families=FAMILIES, batch_size: int = 100,
               seed: int = 0, batches_per_step: int = 1) -> StreamScenario:
    """Each task ramps severity 1,2,3,4,5,4,3,2,1 with ``batches_per_step`` batches per level."""
    families = _check_families(families)
    test = _CorruptedTestSet(dataset, seed)
    n = len(dataset.y_test)
    if batch_size > n:
        raise ValueError(f"batch_size {batch_size} exceeds test split size {n}")
    batches = []
    for fid, family in enumerate(families):
        order = _task_order(seed, fid, n)
        cursor = 0
        for severity in GTTA_SCHEDULE:
            block = test.get(fid, family, severity)
            for _ in range(batches_per_step):
                ids = np.take(order, np.arange(cursor, cursor + batch_size), mode="wrap")
                cursor += batch_size
                batches.append(_make_batch(len(batches), family, fid, severity, ids, block))
    return StreamScenario("gtta", batches, dataset.y_test, batch_size, seed, families)


def build_mdtta(dataset: CleanDataset, families=FAMILIES, batch_size: int = 100,
                seed: int = 0) -> StreamScenario:
    """The CTTA batch pool, shuffled at batch granularity."""
    ctta = build_ctta(dataset, families, batch_size, seed)
    order = np.random.default_rng([seed, 15485863]).permutation(len(ctta))
    batches = []
    for i, j in enumerate(order):
        b = ctta.batches[j]
        batches.append(StreamBatch(i, b.domain, b.domain_id, b.severity, b.sample_ids, b.x))
    return StreamScenario("mdtta", batches, dataset.y_test, batch_size, seed, ctta.families)


def build_clean_stream(dataset: CleanDataset, batch_size: int = 100, seed: int = 0) -> StreamScenario:
    """Uncorrupted test split as a single severity-0 task (sanity checks)."""
    n = len(dataset.y_test)
    order = _task_order(seed, 0, n)
    block = dataset.x_test
    batches = [_make_batch(i, "clean", 0, 0, order[s:s + batch_size], block)
               for i, s in enumerate(range(0, n, batch_size))]
    return StreamScenario("clean", batches, dataset.y_test, batch_size, seed, ("clean",))


PROTOCOLS = {"ctta": build_ctta, "gtta": build_gtta, "mdtta": build_mdtta}


def build_stream(protocol: str, dataset: CleanDataset, families=FAMILIES,
                 batch_size: int = 100, seed: int = 0, **kw) -> StreamScenario:
    if protocol == "clean":
        return build_clean_stream(dataset, batch_size, seed)
    try:
        builder = PROTOCOLS[protocol]
    except KeyError:
        raise ValueError(f"unknown protocol {protocol!r}; choose from {sorted(PROTOCOLS)} or 'clean'") from None
    return builder(dataset, families, batch_size, seed, **kw)


# ---------------------------------------------------------------- augmentation

def augment(x: np.ndarray, batch_index: int, seed: int, feature_std, sigma_scale: float = 0.05) -> np.ndarray:
    """Additive Gaussian jitter with sigma = sigma_scale * clean per-feature std."""
    rng = np.random.default_rng([seed, 32452843, batch_index])
    noise = rng.normal(size=np.shape(x))
    return np.asarray(x) + sigma_scale * np.asarray(feature_std) * noise


@dataclass
class Augmenter:
    feature_std: np.ndarray
    seed: int = 0
    sigma_scale: float = 0.05

    def __call__(self, batch: StreamBatch) -> np.ndarray:
        return augment(batch.x, batch.index, self.seed, self.feature_std, self.sigma_scale)
