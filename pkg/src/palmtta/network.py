"""Layered MLP classifier with a parameter registry keyed by trainable layer.

Every affine layer, every batch-norm layer and the classifier head gets its
own dense ``layer_index`` (0..N-1). Parameters are held in :class:`ParamSlot`
objects carrying the per-parameter adaptation state (frozen flag, effective
learning rate, sensitivity EMA, Adam moments).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import optim

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
SNAPSHOT_MAGIC = b"PALMNET1"

# batch-norm modes: "train" uses batch stats and updates running stats,
# "batch" uses batch stats without touching them, "eval" uses running stats
BN_MODES = ("train", "batch", "eval")


@dataclass
class ParamSlot:
    layer_index: int
    name: str
    tensor: ad.Tensor
    frozen: bool = False
    lr: np.ndarray | None = None
    ema_sensitivity: np.ndarray | None = None
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    step: int = 0

    @property
    def key(self) -> tuple[int, str]:
        return (self.layer_index, self.name)

    @property
    def values(self) -> np.ndarray:
        return self.tensor.values

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad

    def freeze(self) -> None:
        self.frozen = True
        self.lr = np.zeros_like(self.tensor.values)

    def unfreeze(self) -> None:
        self.frozen = False

    def reset_optimizer(self) -> None:
        self.m = self.v = None
        self.step = 0


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "affine" | "relu" | "batchnorm" | "head"
    width: int
    layer_index: int | None  # None for parameter-free layers


class Affine:
    def __init__(self, spec: LayerSpec, w: ad.Tensor, b: ad.Tensor):
        self.spec = spec
        self.w = w
        self.b = b

    def params(self):
        return [("weight", self.w), ("bias", self.b)]

    def forward(self, x, bn_mode):
        return ad.add_bias(ad.matmul(x, self.w), self.b)


class ReLU:
    def __init__(self, spec: LayerSpec):
        self.spec = spec

    def params(self):
        return []

    def forward(self, x, bn_mode):
        return ad.relu(x)


class BatchNorm:
    def __init__(self, spec: LayerSpec, width: int):
        self.spec = spec
        self.gamma = ad.Tensor(np.ones(width), requires_grad=True)
        self.beta = ad.Tensor(np.zeros(width), requires_grad=True)
        self.running_mean = np.zeros(width)
        self.running_var = np.ones(width)

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def forward(self, x, bn_mode):
        if bn_mode == "eval":
            return ad.batchnorm(x, self.gamma, self.beta, mean=self.running_mean,
                                var=self.running_var, eps=BN_EPS)
        out = ad.batchnorm(x, self.gamma, self.beta, eps=BN_EPS)
        if bn_mode == "train":
            xv = x.values
            self.running_mean = (1 - BN_MOMENTUM) * self.running_mean + BN_MOMENTUM * xv.mean(axis=0)
            self.running_var = (1 - BN_MOMENTUM) * self.running_var + BN_MOMENTUM * xv.var(axis=0)
        return out


class Network:
    """Ordered layers plus the registry of trainable parameter slots."""

    def __init__(self, layers: list, num_classes: int):
        self.layers = layers
        self.num_classes = num_classes
        self.bn_mode = "eval"
        self.slots: list[ParamSlot] = []
        for layer in layers:
            for name, tensor in layer.params():
                self.slots.append(ParamSlot(layer.spec.layer_index, name, tensor))
        self._by_key = {s.key: s for s in self.slots}
        self._grads_ready = False

    # -- structure -----------------------------------------------------------
    @property
    def specs(self) -> list[LayerSpec]:
        return [layer.spec for layer in self.layers]

    @property
    def num_layers(self) -> int:
        """Number of trainable layers N."""
        return len({s.layer_index for s in self.slots})

    def slot(self, layer_index: int, name: str) -> ParamSlot:
        return self._by_key[(layer_index, name)]

    def layer_slots(self, layer_index: int) -> list[ParamSlot]:
        return [s for s in self.slots if s.layer_index == layer_index]

    def batchnorm_layers(self) -> list[BatchNorm]:
        return [layer for layer in self.layers if isinstance(layer, BatchNorm)]

    # -- compute -------------------------------------------------------------
    def forward(self, x, bn_mode: str | None = None) -> ad.Tensor:
        mode = self.bn_mode if bn_mode is None else bn_mode
        if mode not in BN_MODES:
            raise ValueError(f"unknown batch-norm mode {mode!r}")
        h = x if isinstance(x, ad.Tensor) else ad.Tensor(x)
        for layer in self.layers:
            h = layer.forward(h, mode)
        return h

    def predict(self, x, bn_mode: str | None = None) -> np.ndarray:
        return self.forward(x, bn_mode).values.argmax(axis=1)

    def zero_grad(self) -> None:
        for s in self.slots:
            s.tensor.zero_grad()
        self._grads_ready = False

    def backward(self, loss: ad.Tensor) -> None:
        """Backpropagate ``loss``; parameters it does not reach get zero grad."""
        ad.backward(loss)
        for s in self.slots:
            if s.tensor.grad is None:
                s.tensor.grad = np.zeros_like(s.tensor.values)
        self._grads_ready = True

    @property
    def grads_ready(self) -> bool:
        return self._grads_ready

    # -- state ---------------------------------------------------------------
    def snapshot(self) -> dict:
        params = [s.tensor.values.copy() for s in self.slots]
        buffers = []
        for bn in self.batchnorm_layers():
            buffers += [bn.running_mean.copy(), bn.running_var.copy()]
        return {"params": params, "buffers": buffers}

    def restore(self, snap: dict) -> None:
        if len(snap["params"]) != len(self.slots):
            raise ValueError("snapshot does not match this network's registry")
        for s, values in zip(self.slots, snap["params"]):
            if values.shape != s.tensor.shape:
                raise ValueError(f"snapshot shape {values.shape} != slot {s.key} shape {s.tensor.shape}")
            s.tensor.values = values.copy()
        bns = self.batchnorm_layers()
        for i, bn in enumerate(bns):
            bn.running_mean = snap["buffers"][2 * i].copy()
            bn.running_var = snap["buffers"][2 * i + 1].copy()

    def reset_adaptation_state(self) -> None:
        for s in self.slots:
            s.frozen = False
            s.lr = None
            s.ema_sensitivity = None
            s.reset_optimizer()

    def save(self, path) -> None:
        write_snapshot(path, self.snapshot())

    def load(self, path) -> None:
        self.restore(read_snapshot(path))


# ---------------------------------------------------------------- snapshot file

def _pack_arrays(arrays) -> bytes:
    out = [struct.pack("<I", len(arrays))]
    for a in arrays:
        out.append(struct.pack("<I", a.ndim))
        out.append(struct.pack(f"<{a.ndim}I", *a.shape))
        out.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return b"".join(out)


def _unpack_arrays(buf: bytes, pos: int):
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    arrays = []
    for _ in range(count):
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        a = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
        arrays.append(a)
    return arrays, pos


def write_snapshot(path, snap: dict) -> None:
    """Write ``PALMNET1`` + parameter block (registry order) + BN buffer block."""
    data = SNAPSHOT_MAGIC + _pack_arrays(snap["params"]) + _pack_arrays(snap["buffers"])
    Path(path).write_bytes(data)


def read_snapshot(path) -> dict:
    buf = Path(path).read_bytes()
    if buf[:8] != SNAPSHOT_MAGIC:
        raise ValueError(f"{path}: not a PALMNET1 snapshot")
    params, pos = _unpack_arrays(buf, 8)
    buffers, pos = _unpack_arrays(buf, pos)
    if pos != len(buf):
        raise ValueError(f"{path}: trailing bytes in snapshot")
    return {"params": params, "buffers": buffers}


# ---------------------------------------------------------------- construction

def build_mlp(input_dim: int, hidden_widths, num_classes: int, seed: int,
              batchnorm: bool = True) -> Network:
    """Affine -> BN -> ReLU blocks followed by a linear head.

    Weights and biases are drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    """
    hidden_widths = list(hidden_widths)
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    if input_dim < 1 or any(w < 1 for w in hidden_widths):
        raise ValueError("all widths must be >= 1")
    rng = np.random.default_rng(seed)

    def affine(kind, fan_in, fan_out, idx):
        bound = 1.0 / np.sqrt(fan_in)
        w = ad.Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)
        b = ad.Tensor(rng.uniform(-bound, bound, size=fan_out), requires_grad=True)
        return Affine(LayerSpec(kind, fan_out, idx), w, b)

    layers = []
    idx = 0
    fan_in = input_dim
    for width in hidden_widths:
        layers.append(affine("affine", fan_in, width, idx))
        idx += 1
        if batchnorm:
            layers.append(BatchNorm(LayerSpec("batchnorm", width, idx), width))
            idx += 1
        layers.append(ReLU(LayerSpec("relu", width, None)))
        fan_in = width
    layers.append(affine("head", fan_in, num_classes, idx))
    return Network(layers, num_classes)


def per_layer_grad_view(net: Network) -> dict[int, np.ndarray]:
    """Flat gradient of each trainable layer, params concatenated in registry order."""
    if not net.grads_ready:
        raise RuntimeError("per_layer_grad_view called before backward")
    view: dict[int, list[np.ndarray]] = {}
    for s in net.slots:
        view.setdefault(s.layer_index, []).append(s.tensor.grad.ravel())
    return {k: np.concatenate(v) for k, v in view.items()}


def cross_entropy(logits: ad.Tensor, labels: np.ndarray) -> ad.Tensor:
    onehot = np.eye(logits.shape[1])[labels]
    return ad.scale(ad.mean(ad.sum(ad.mul(ad.log_softmax(logits), onehot), axis=1)), -1.0)


class SourceTrainingError(RuntimeError):
    pass


def train_source(net: Network, dataset, epochs: int = 200, lr: float = 1e-2,
                 batch_size: int = 128, seed: int = 0) -> Network:
    """Supervised Adam training on the clean split; leaves the net in eval mode.

    ``dataset`` needs ``x_train`` and ``y_train`` attributes.
    """
    rng = np.random.default_rng(seed)
    x, y = dataset.x_train, dataset.y_train
    n = len(y)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            if len(idx) < 2:
                continue
            net.zero_grad()
            try:
                loss = cross_entropy(net.forward(x[idx], "train"), y[idx])
            except ad.NonFiniteError as exc:
                raise SourceTrainingError(f"source training diverged ({exc}); try a lower lr") from exc
            net.backward(loss)
            for s in net.slots:
                optim.adam_update(s, lr)
    net.zero_grad()
    net.reset_adaptation_state()
    net.bn_mode = "eval"
    return net
