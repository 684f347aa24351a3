"""Network definition, MAP pretraining, and checkpoint serialization.

A network is an ordered list of layer descriptors plus two indices:
``bayes_boundary`` marks the first layer of the Bayesian sub-module and
``feature_tap`` the last one; the tap's output is the feature ``z`` used
for uncertainty scoring.  Layers after the tap form the task head.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import batches
from .tensor import NonFiniteError, RngState, ShapeError, Tensor


class SpecError(ValueError):
    """Inconsistent network description."""


class CheckpointError(ValueError):
    """Malformed checkpoint file."""


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during optimization."""


@dataclass(frozen=True)
class Dense:
    in_dim: int
    out_dim: int


@dataclass(frozen=True)
class Conv2d:
    in_ch: int
    out_ch: int
    kernel: int
    stride: int = 1
    padding: str = "valid"


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class Dropout:
    p: float


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Head:
    in_dim: int
    classes: int


_LAYER_KINDS = {"dense": Dense, "conv2d": Conv2d, "relu": Relu, "dropout": Dropout, "flatten": Flatten, "head": Head}


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    bayes_boundary: int
    feature_tap: int
    input_shape: tuple

    def __post_init__(self):
        n = len(self.layers)
        if not (0 < self.bayes_boundary < n):
            raise SpecError(f"bayes_boundary {self.bayes_boundary} outside (0, {n})")
        if not (self.bayes_boundary <= self.feature_tap < n):
            raise SpecError(f"feature_tap {self.feature_tap} outside [{self.bayes_boundary}, {n})")
        head_idx = [i for i, l in enumerate(self.layers) if isinstance(l, Head)]
        if head_idx and self.feature_tap >= head_idx[0]:
            raise SpecError("feature_tap must precede the task head")
        layer_output_shapes(self)  # raises if shapes do not chain

    @property
    def bayes_layers(self):
        return range(self.bayes_boundary, self.feature_tap + 1)


def layer_output_shapes(spec):
    """Per-layer output shapes (without batch dim); validates the chain."""
    shape = tuple(spec.input_shape)
    out = []
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, (Dense, Head)):
            in_dim = layer.in_dim
            if shape != (in_dim,):
                raise SpecError(f"layer {i}: expects ({in_dim},), got {shape}")
            shape = (layer.out_dim if isinstance(layer, Dense) else layer.classes,)
        elif isinstance(layer, Conv2d):
            if len(shape) != 3 or shape[0] != layer.in_ch:
                raise SpecError(f"layer {i}: expects ({layer.in_ch}, h, w), got {shape}")
            pad = (layer.kernel - 1) // 2 if layer.padding == "same" else 0
            h = (shape[1] + 2 * pad - layer.kernel) // layer.stride + 1
            w = (shape[2] + 2 * pad - layer.kernel) // layer.stride + 1
            if h < 1 or w < 1:
                raise SpecError(f"layer {i}: kernel exceeds input {shape}")
            shape = (layer.out_ch, h, w)
        elif isinstance(layer, Flatten):
            shape = (int(np.prod(shape)),)
        elif isinstance(layer, (Relu, Dropout)):
            pass
        else:
            raise SpecError(f"layer {i}: unknown layer {layer!r}")
        out.append(shape)
    return out


def has_params(layer):
    return isinstance(layer, (Dense, Conv2d, Head))


def init_params(spec, rng):
    """He-initialized parameter dict keyed '<layer>.weight' / '<layer>.bias'."""
    params = {}
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Dense):
            std = math.sqrt(2.0 / layer.in_dim)
            params[f"{i}.weight"] = Tensor(rng.normal((layer.in_dim, layer.out_dim), std=std))
            params[f"{i}.bias"] = Tensor(np.zeros(layer.out_dim, dtype=np.float32))
        elif isinstance(layer, Head):
            std = math.sqrt(1.0 / layer.in_dim)
            params[f"{i}.weight"] = Tensor(rng.normal((layer.in_dim, layer.classes), std=std))
            params[f"{i}.bias"] = Tensor(np.zeros(layer.classes, dtype=np.float32))
        elif isinstance(layer, Conv2d):
            fan_in = layer.in_ch * layer.kernel**2
            std = math.sqrt(2.0 / fan_in)
            shape = (layer.out_ch, layer.in_ch, layer.kernel, layer.kernel)
            params[f"{i}.weight"] = Tensor(rng.normal(shape, std=std))
            params[f"{i}.bias"] = Tensor(np.zeros(layer.out_ch, dtype=np.float32))
    return params


def dropout_mask(shape, p, rng):
    keep = (rng.uniform(shape) >= p).astype(np.float32)
    return Tensor(keep / np.float32(1.0 - p))


def run_segment(spec, params, x, start, stop, train_mode=False, rng=None):
    """Run layers [start, stop) on tensor ``x`` with one parameter set."""
    h = x
    for i in range(start, stop):
        layer = spec.layers[i]
        if isinstance(layer, (Dense, Head)):
            h = T.add(T.matmul(h, params[f"{i}.weight"]), params[f"{i}.bias"])
        elif isinstance(layer, Conv2d):
            h = T.conv2d(h, params[f"{i}.weight"], stride=layer.stride, padding=layer.padding)
            h = T.add(h, T.reshape(params[f"{i}.bias"], (1, layer.out_ch, 1, 1)))
        elif isinstance(layer, Relu):
            h = T.relu(h)
        elif isinstance(layer, Flatten):
            h = T.reshape(h, (h.shape[0], int(np.prod(h.shape[1:]))))
        elif isinstance(layer, Dropout):
            if train_mode and layer.p > 0:
                if rng is None:
                    raise ShapeError("dropout in train mode requires an rng")
                h = T.mul(h, dropout_mask(h.shape, layer.p, rng))
    return h


def forward(spec, params, x, train_mode=False, rng=None):
    """Full forward pass; returns (logits, z) with z the feature-tap output."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    expected = tuple(spec.input_shape)
    if tuple(x.shape[1:]) != expected:
        raise ShapeError(f"input shape {tuple(x.shape[1:])} does not match spec {expected}")
    z = run_segment(spec, params, x, 0, spec.feature_tap + 1, train_mode, rng)
    logits = run_segment(spec, params, z, spec.feature_tap + 1, len(spec.layers), train_mode, rng)
    return logits, z


class SGD:
    """Plain SGD with momentum and L2 weight decay, minimizing the loss."""

    def __init__(self, params, lr, momentum=0.9, weight_decay=0.0):
        self.params = list(params.values()) if isinstance(params, dict) else list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        lr = np.float32(self.lr)
        mu = np.float32(self.momentum)
        wd = np.float32(self.weight_decay)
        for p, v in zip(self.params, self._velocity):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                g = g + wd * p.data
            v *= mu
            v += g
            p.data = p.data - lr * v


def cosine_lr(start, end, step, total):
    if total <= 1:
        return start
    frac = min(step, total - 1) / (total - 1)
    return end + 0.5 * (start - end) * (1.0 + math.cos(math.pi * frac))


@dataclass
class Checkpoint:
    params: dict
    meta: dict = field(default_factory=dict)


CKPT_SCHEMA = "fadelab-ckpt-v1"


def train_map(spec, ds, weight_decay, epochs, lr, rng, batch_size=128, momentum=0.9, lr_end=None, log_rows=None):
    """Mini-batch MAP training: mean log-likelihood ascent with L2 decay.

    Returns a checkpoint whose meta records the setup and final training
    accuracy.  Appends per-iteration rows to ``log_rows`` when given.
    """
    if len(ds) == 0:
        raise ValueError("empty dataset")
    if weight_decay < 0:
        raise ValueError(f"weight_decay must be >= 0, got {weight_decay}")
    params = init_params(spec, rng.child("init"))
    for p in params.values():
        p.requires_grad = True
    opt = SGD(params, lr, momentum=momentum, weight_decay=weight_decay)
    steps_per_epoch = math.ceil(len(ds) / batch_size)
    total = max(1, epochs * steps_per_epoch)
    it = 0
    for epoch in range(epochs):
        for xb, yb in batches(ds, batch_size, rng.child(f"shuffle{epoch}")):
            opt.lr = cosine_lr(lr, lr_end, it, total) if lr_end is not None else lr
            opt.zero_grad()
            try:
                logits, _ = forward(spec, params, Tensor(xb), train_mode=True, rng=rng)
                loss = T.cross_entropy(logits, yb)
                T.backward(loss)
            except NonFiniteError as e:
                raise TrainingDivergedError(f"loss became non-finite at iteration {it}: {e}") from e
            if not np.isfinite(loss.data):
                raise TrainingDivergedError(f"loss became non-finite at iteration {it}")
            opt.step()
            if log_rows is not None:
                acc = float((logits.data.argmax(axis=1) == yb).mean())
                log_rows.append({"epoch": epoch, "iter": it, "loss": float(loss.data), "lr": opt.lr, "batch_acc": acc})
            it += 1
    train_acc = evaluate_plain_accuracy(spec, params, ds, batch_size=max(batch_size, 256))
    meta = {
        "kind": "map",
        "spec": spec_to_dict(spec),
        "seed": rng.seed,
        "weight_decay": weight_decay,
        "epochs": epochs,
        "lr": lr,
        "momentum": momentum,
        "batch_size": batch_size,
        "final_train_accuracy": train_acc,
    }
    return Checkpoint({k: p.data.copy() for k, p in params.items()}, meta)


def evaluate_plain_accuracy(spec, params, ds, batch_size=256):
    correct = 0
    for start in range(0, len(ds), batch_size):
        xb = ds.inputs[start : start + batch_size]
        yb = ds.labels[start : start + batch_size]
        logits, _ = forward(spec, params, Tensor(xb))
        correct += int((logits.data.argmax(axis=1) == yb).sum())
    return correct / len(ds)


def params_as_tensors(ckpt, trainable=False):
    return {k: Tensor(v.copy(), requires_grad=trainable) for k, v in ckpt.params.items()}


# ---------------------------------------------------------------------------
# serialization


def spec_to_dict(spec):
    layers = []
    for layer in spec.layers:
        kind = next(k for k, cls in _LAYER_KINDS.items() if isinstance(layer, cls))
        layers.append({"kind": kind, **layer.__dict__})
    return {
        "layers": layers,
        "bayes_boundary": spec.bayes_boundary,
        "feature_tap": spec.feature_tap,
        "input_shape": list(spec.input_shape),
    }


def spec_from_dict(d):
    layers = []
    for entry in d["layers"]:
        entry = dict(entry)
        cls = _LAYER_KINDS[entry.pop("kind")]
        layers.append(cls(**entry))
    return NetworkSpec(tuple(layers), d["bayes_boundary"], d["feature_tap"], tuple(d["input_shape"]))


def save_checkpoint(ckpt, path_stem):
    """Write ``<stem>.json`` manifest + ``<stem>.bin`` little-endian blob."""
    stem = str(path_stem)
    entries = []
    offset = 0
    with open(stem + ".bin", "wb") as f:
        for name in sorted(ckpt.params):
            arr = np.ascontiguousarray(ckpt.params[name], dtype="<f4")
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
            f.write(arr.tobytes())
            offset += arr.nbytes
    manifest = {"schema": CKPT_SCHEMA, "meta": ckpt.meta, "tensors": entries}
    with open(stem + ".json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")


def load_checkpoint(path_stem):
    stem = str(path_stem)
    with open(stem + ".json", encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("schema") != CKPT_SCHEMA:
        raise CheckpointError(f"{stem}.json: unknown schema {manifest.get('schema')!r}")
    with open(stem + ".bin", "rb") as f:
        blob = f.read()
    params = {}
    for entry in manifest["tensors"]:
        end = entry["offset"] + entry["nbytes"]
        if end > len(blob):
            raise CheckpointError(f"{stem}.bin: tensor '{entry['name']}' spans past end of blob")
        count = entry["nbytes"] // 4
        if count != int(np.prod(entry["shape"], dtype=np.int64)):
            raise CheckpointError(f"{stem}.json: shape {entry['shape']} mismatches byte span of '{entry['name']}'")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=entry["offset"])
        params[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return Checkpoint(params, manifest.get("meta", {}))


def checkpoint_hash(ckpt):
    """Stable content hash over parameter names, shapes, and raw bytes."""
    h = hashlib.sha256()
    for name in sorted(ckpt.params):
        arr = np.ascontiguousarray(ckpt.params[name], dtype="<f4")
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# reference architectures


def build_architecture(arch, num_classes=None):
    """Desk-scale reference networks keyed by architecture id."""
    if arch == "mlp-moons":
        classes = num_classes or 2
        return NetworkSpec(
            (Dense(2, 64), Relu(), Dense(64, 64), Relu(), Head(64, classes)),
            bayes_boundary=2,
            feature_tap=3,
            input_shape=(2,),
        )
    if arch == "mlp-moons-dropout":
        classes = num_classes or 2
        return NetworkSpec(
            (Dense(2, 64), Relu(), Dropout(0.5), Dense(64, 64), Relu(), Head(64, classes)),
            bayes_boundary=3,
            feature_tap=4,
            input_shape=(2,),
        )
    if arch == "cnn-digits":
        classes = num_classes or 10
        return NetworkSpec(
            (
                Conv2d(1, 16, 3),
                Relu(),
                Conv2d(16, 32, 3, stride=2),
                Relu(),
                Flatten(),
                Dense(4608, 64),
                Relu(),
                Head(64, classes),
            ),
            bayes_boundary=5,
            feature_tap=6,
            input_shape=(1, 28, 28),
        )
    if arch == "cnn-digits-dropout":
        classes = num_classes or 10
        return NetworkSpec(
            (
                Conv2d(1, 16, 3),
                Relu(),
                Conv2d(16, 32, 3, stride=2),
                Relu(),
                Flatten(),
                Dropout(0.5),
                Dense(4608, 64),
                Relu(),
                Head(64, classes),
            ),
            bayes_boundary=6,
            feature_tap=7,
            input_shape=(1, 28, 28),
        )
    raise SpecError(f"unknown architecture '{arch}'")
