"""Datasets: synthetic generators, IDX image ingestion, batching, persistence.

All inputs are float32 in a declared [lo, hi] range; labels are int64 in
[0, K).  The on-disk container is a JSON manifest plus a little-endian
float32 blob, the same convention the checkpoints use.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .filters import depthwise_conv_same, gaussian_kernel2d
from .tensor import RngState

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

SET_SCHEMA = "fadelab-set-v1"


class DataFormatError(ValueError):
    """Malformed dataset file (bad magic, count mismatch, truncation, ...)."""


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    input_range: tuple[float, float] = (0.0, 1.0)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise DataFormatError(
                f"count mismatch: {self.inputs.shape[0]} inputs vs {self.labels.shape[0]} labels"
            )

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def num_classes(self):
        return int(self.labels.max()) + 1 if len(self) else 0

    def subset(self, idx):
        return Dataset(self.inputs[idx], self.labels[idx], self.input_range, dict(self.provenance))


def gen_two_moons(n, noise_std, seed):
    """Two interleaved half-circles inside [0,1]^2 with alternating labels.

    Gaussian jitter of ``noise_std`` is added after mapping to the unit
    square; points are clipped back into [0,1] to keep the declared range.
    """
    if n < 2:
        raise ValueError(f"need n >= 2, got {n}")
    rng = RngState(seed)
    labels = np.arange(n, dtype=np.int64) % 2
    t = rng.uniform((n,), 0.0, np.pi)
    x = np.where(labels == 0, np.cos(t), 1.0 - np.cos(t))
    y = np.where(labels == 0, np.sin(t), 0.5 - np.sin(t))
    pts = np.stack([(x + 1.0) / 3.0, (y + 0.5) / 2.0], axis=1).astype(np.float32)
    if noise_std > 0:
        pts = pts + rng.normal(pts.shape, std=noise_std)
    pts = np.clip(pts, 0.0, 1.0)
    return Dataset(pts, labels, (0.0, 1.0), {"source": "two_moons", "n": n, "noise_std": noise_std, "seed": seed})


# 5x7 bitmap glyphs for the ten digit classes of the synthetic image corpus.
_DIGIT_ROWS = {
    0: ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    1: ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    2: ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    3: ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    4: ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    5: ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    6: ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    7: ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    8: ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    9: ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
}


def _digit_glyphs():
    glyphs = np.zeros((10, 7, 5), dtype=np.float32)
    for d, rows in _DIGIT_ROWS.items():
        for i, row in enumerate(rows):
            glyphs[d, i] = [float(ch) for ch in row]
    return glyphs


def gen_digits(n, seed, noise_std=0.15, image_size=28):
    """Synthetic 10-class 28x28 digit-glyph corpus in [0,1].

    Each sample upsamples a fixed 5x7 glyph by 3x, places it at a random
    offset, scales the stroke intensity, optionally blurs, and adds pixel
    noise.  Deterministic for a fixed seed; a stand-in corpus for pipelines
    that would otherwise ingest MNIST-format IDX files.
    """
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    rng = RngState(seed)
    glyphs = np.kron(_digit_glyphs(), np.ones((3, 3), dtype=np.float32))  # (10, 21, 15)
    gh, gw = glyphs.shape[1:]
    labels = rng.integers(0, 10, size=n).astype(np.int64)
    imgs = np.zeros((n, 1, image_size, image_size), dtype=np.float32)
    oy = rng.integers(1, image_size - gh, size=n)
    ox = rng.integers(1, image_size - gw, size=n)
    amp = rng.uniform((n,), 0.55, 1.0)
    for i in range(n):
        imgs[i, 0, oy[i] : oy[i] + gh, ox[i] : ox[i] + gw] = glyphs[labels[i]] * amp[i]
    blur_mask = rng.uniform((n,)) < 0.5
    if blur_mask.any():
        imgs[blur_mask] = depthwise_conv_same(imgs[blur_mask], gaussian_kernel2d(3, 0.9))
    if noise_std > 0:
        imgs += rng.normal(imgs.shape, std=noise_std)
    imgs = np.clip(imgs, 0.0, 1.0)
    return Dataset(imgs, labels, (0.0, 1.0), {"source": "digits", "n": n, "noise_std": noise_std, "seed": seed})


# ---------------------------------------------------------------------------
# IDX ingestion (MNIST file format)


def _read_be32(f, path):
    raw = f.read(4)
    if len(raw) != 4:
        raise DataFormatError(f"{path}: truncated header")
    return struct.unpack(">I", raw)[0]


def load_idx(images_path, labels_path):
    """Decode an IDX image/label file pair; pixels scale to [0,1] as v/255."""
    with open(images_path, "rb") as f:
        magic = _read_be32(f, images_path)
        if magic != IDX_IMAGE_MAGIC:
            raise DataFormatError(f"{images_path}: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}")
        count = _read_be32(f, images_path)
        rows = _read_be32(f, images_path)
        cols = _read_be32(f, images_path)
        raw = f.read()
        if len(raw) != count * rows * cols:
            raise DataFormatError(f"{images_path}: truncated pixel data ({len(raw)} of {count * rows * cols} bytes)")
        pixels = np.frombuffer(raw, dtype=np.uint8).reshape(count, 1, rows, cols)
    with open(labels_path, "rb") as f:
        magic = _read_be32(f, labels_path)
        if magic != IDX_LABEL_MAGIC:
            raise DataFormatError(f"{labels_path}: bad magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}")
        lcount = _read_be32(f, labels_path)
        raw = f.read()
        if len(raw) != lcount:
            raise DataFormatError(f"{labels_path}: truncated label data ({len(raw)} of {lcount} bytes)")
        labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    if count != lcount:
        raise DataFormatError(f"count mismatch: {count} images vs {lcount} labels")
    inputs = pixels.astype(np.float32) / np.float32(255.0)
    return Dataset(inputs, labels, (0.0, 1.0), {"source": "idx", "images": str(images_path), "labels": str(labels_path)})


def save_idx(ds, images_path, labels_path):
    """Write a dataset of [0,1] images back out as an IDX pair (v*255 bytes)."""
    imgs = ds.inputs
    if imgs.ndim != 4 or imgs.shape[1] != 1:
        raise DataFormatError(f"IDX export needs (n, 1, rows, cols) images, got {imgs.shape}")
    n, _, rows, cols = imgs.shape
    bytes_ = np.rint(imgs[:, 0] * 255.0).clip(0, 255).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols))
        f.write(bytes_.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, n))
        f.write(ds.labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# iteration and persistence


def batches(ds, batch_size, rng):
    """Yield one epoch of (inputs, labels) under a deterministic permutation.

    ``rng`` may be an RngState or an integer seed.  The final short batch is
    included.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if isinstance(rng, int):
        rng = RngState(rng)
    order = rng.permutation(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = order[start : start + batch_size]
        yield ds.inputs[idx], ds.labels[idx]


def save_set(ds, path_stem):
    """Persist a dataset as ``<stem>.json`` manifest + ``<stem>.bin`` blob."""
    if len(ds) == 0:
        raise DataFormatError("refusing to save an empty dataset")
    stem = str(path_stem)
    inputs = np.ascontiguousarray(ds.inputs, dtype="<f4")
    labels = np.ascontiguousarray(ds.labels.astype(np.float32), dtype="<f4")
    manifest = {
        "schema": SET_SCHEMA,
        "input_range": [float(ds.input_range[0]), float(ds.input_range[1])],
        "provenance": ds.provenance,
        "tensors": [
            {"name": "inputs", "shape": list(inputs.shape), "offset": 0, "nbytes": inputs.nbytes},
            {"name": "labels", "shape": list(labels.shape), "offset": inputs.nbytes, "nbytes": labels.nbytes},
        ],
    }
    with open(stem + ".bin", "wb") as f:
        f.write(inputs.tobytes())
        f.write(labels.tobytes())
    with open(stem + ".json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")


def load_set(path_stem):
    stem = str(path_stem)
    with open(stem + ".json", encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("schema") != SET_SCHEMA:
        raise DataFormatError(f"{stem}.json: unknown schema {manifest.get('schema')!r}")
    with open(stem + ".bin", "rb") as f:
        blob = f.read()
    arrays = {}
    for entry in manifest["tensors"]:
        end = entry["offset"] + entry["nbytes"]
        if end > len(blob):
            raise DataFormatError(f"{stem}.bin: tensor '{entry['name']}' spans past end of blob")
        arr = np.frombuffer(blob, dtype="<f4", count=entry["nbytes"] // 4, offset=entry["offset"])
        expected = int(np.prod(entry["shape"]))
        if arr.size != expected:
            raise DataFormatError(f"{stem}.json: shape {entry['shape']} does not match payload for '{entry['name']}'")
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    if "inputs" not in arrays or "labels" not in arrays:
        raise DataFormatError(f"{stem}.json: manifest missing inputs/labels tensors")
    rng = manifest.get("input_range", [0.0, 1.0])
    return Dataset(arrays["inputs"], arrays["labels"].astype(np.int64), (rng[0], rng[1]), manifest.get("provenance", {}))
