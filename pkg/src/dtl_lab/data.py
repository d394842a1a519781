"""Datasets: synthetic tasks planted in a frozen backbone, plus a raw image folder.

``SyntheticLinear`` labels are a random linear readout of the frozen head
feature, so a linear probe can fit them.  ``SyntheticPlanted`` labels are a
nonlinear (magnitude) function of a random projection of a *mid-block* cls
feature; the final frozen features carry it only weakly, which is what the
side network has to recover.

Image files use a tiny uncompressed layout::

    b"DTLIMG1" | u32 count | u32 side | count * side * side * 3 bytes (HWC, RGB)

and a ``filename,label`` CSV assigns one label to every sample of a file.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import Tensor, no_graph
from .vit import ViT

DATA_VARIANTS = ("synthetic_linear", "synthetic_planted", "image_folder")
MAGIC = b"DTLIMG1"
_HEADER = struct.Struct("<7sII")


@dataclass(frozen=True)
class DatasetSpec:
    variant: str = "synthetic_linear"
    n_classes: int = 2
    n_train: int = 256
    n_test: int = 256
    seed: int = 0
    shift_strength: float = 0.5  # planted task: fraction of ambiguous samples dropped
    tap_block: int | None = None  # planted task: block whose input stream carries the signal
    path: str | None = None
    labels_csv: str | None = None

    def validate(self) -> None:
        if self.variant not in DATA_VARIANTS:
            raise ValueError(f"unknown data variant {self.variant!r}; expected one of {DATA_VARIANTS}")
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.n_train < 0 or self.n_test < 0:
            raise ValueError("n_train/n_test must be >= 0")
        if not 0.0 <= self.shift_strength < 1.0:
            raise ValueError(f"shift_strength must be in [0, 1), got {self.shift_strength}")
        if self.variant == "image_folder" and (not self.path or not self.labels_csv):
            raise ValueError("image_folder needs both path and labels_csv")


@dataclass
class Dataset:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    n_classes: int
    info: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        for y in (self.train_y, self.test_y):
            if y.size and (y.min() < 0 or y.max() >= self.n_classes):
                raise ValueError(f"labels must lie in [0, {self.n_classes})")


# ---------------------------------------------------------------------------
# frozen-feature probes used to plant labels


def _frozen_features(backbone: ViT, x: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Normalized final cls feature of the frozen backbone."""
    out = []
    with no_graph():
        for s in range(0, len(x), chunk):
            z, _ = backbone.forward_with_taps(Tensor(x[s : s + chunk]))
            out.append(backbone.final_norm(z).numpy()[:, 0])
    return np.concatenate(out) if out else np.zeros((0, backbone.config.d_out))


def _stream_cls(backbone: ViT, x: np.ndarray, block: int, chunk: int = 64) -> np.ndarray:
    """cls token of the stream entering ``block``."""
    from .csn import run_prefix

    out = []
    with no_graph():
        for s in range(0, len(x), chunk):
            out.append(run_prefix(backbone, Tensor(x[s : s + chunk]), block)[-1].numpy()[:, 0])
    return np.concatenate(out)


def _images(rng: np.random.Generator, n: int, img: int, dtype) -> np.ndarray:
    return rng.standard_normal((n, 3, img, img)).astype(dtype)


def _bin_by_quantile(score: np.ndarray, k: int, drop: float) -> tuple[np.ndarray, np.ndarray]:
    """Labels from ``k`` equal-mass bins of ``score``; samples within ``drop/2``
    quantile mass of an inner bin edge are marked ambiguous."""
    ranks = np.argsort(np.argsort(score, kind="stable"), kind="stable") / max(len(score), 1)
    labels = np.minimum((ranks * k).astype(np.int64), k - 1)
    edges = np.arange(1, k) / k
    half = drop / (2 * k)  # drop a `drop` fraction of each bin, split over its edges
    dist = np.min(np.abs(ranks[:, None] - edges[None, :]), axis=1) if k > 1 else np.ones_like(ranks)
    keep = dist >= half
    return labels, keep


def _split(x: np.ndarray, y: np.ndarray, n_train: int, n_test: int, n_classes: int, info: dict) -> Dataset:
    if len(x) < n_train + n_test:
        raise ValueError(f"only {len(x)} samples available, need {n_train + n_test}")
    return Dataset(x[:n_train], y[:n_train], x[n_train : n_train + n_test], y[n_train : n_train + n_test], n_classes, info)


def synthetic_linear(spec: DatasetSpec, backbone: ViT) -> Dataset:
    cfg = backbone.config
    rng = np.random.default_rng([spec.seed, 0x11])
    n = spec.n_train + spec.n_test
    pool = int(np.ceil(n / (1.0 - spec.shift_strength))) + spec.n_classes
    x = _images(rng, pool, cfg.img, backbone.dtype)
    feats = _frozen_features(backbone, x).astype(np.float64)
    w = rng.standard_normal((feats.shape[1], spec.n_classes))
    logits = feats @ w
    top2 = np.sort(logits, axis=1)[:, -2:]
    margin = top2[:, 1] - top2[:, 0]
    order = np.argsort(-margin, kind="stable")[:n]  # keep the least ambiguous samples
    order = np.sort(order)
    y = np.argmax(logits, axis=1)
    return _split(x[order], y[order], spec.n_train, spec.n_test, spec.n_classes, {"readout": "final_cls"})


def synthetic_planted(spec: DatasetSpec, backbone: ViT) -> Dataset:
    cfg = backbone.config
    block = spec.tap_block or max(1, cfg.N // 2)
    if not 1 <= block <= cfg.N:
        raise ValueError(f"tap_block {block} outside [1, {cfg.N}]")
    rng = np.random.default_rng([spec.seed, 0x22])
    n = spec.n_train + spec.n_test
    pool = int(np.ceil(n / (1.0 - spec.shift_strength) * 1.05)) + spec.n_classes
    x = _images(rng, pool, cfg.img, backbone.dtype)
    z = _stream_cls(backbone, x, block).astype(np.float64)
    z = (z - z.mean(axis=0)) / (z.std(axis=0) + 1e-8)
    rot, _ = np.linalg.qr(rng.standard_normal((z.shape[1], z.shape[1])))
    score = np.abs(z @ rot[:, 0])
    y, keep = _bin_by_quantile(score, spec.n_classes, spec.shift_strength)
    idx = np.flatnonzero(keep)[:n]
    return _split(x[idx], y[idx], spec.n_train, spec.n_test, spec.n_classes, {"readout": f"block.{block}", "kept": int(keep.sum())})


# ---------------------------------------------------------------------------
# image folder


def write_image_file(path: str | Path, images: np.ndarray) -> None:
    """``images``: uint8 [count, side, side, 3]."""
    images = np.asarray(images)
    if images.dtype != np.uint8 or images.ndim != 4 or images.shape[3] != 3 or images.shape[1] != images.shape[2]:
        raise ValueError(f"expected uint8 [count, side, side, 3], got {images.dtype} {list(images.shape)}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, images.shape[0], images.shape[1]))
        fh.write(np.ascontiguousarray(images).tobytes())


def read_image_file(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, count, side = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    expected = count * side * side * 3
    body = raw[_HEADER.size :]
    if len(body) != expected:
        raise ValueError(f"{path}: expected {expected} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(count, side, side, 3)


def image_folder(spec: DatasetSpec, backbone: ViT) -> Dataset:
    cfg = backbone.config
    root = Path(spec.path)
    xs, ys = [], []
    with open(spec.labels_csv, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().lower() == "filename":
                continue
            name, label = row[0].strip(), int(row[1])
            if not 0 <= label < spec.n_classes:
                raise ValueError(f"{name}: label {label} outside [0, {spec.n_classes})")
            imgs = read_image_file(root / name)
            if imgs.shape[1] != cfg.img:
                raise ValueError(f"{name}: images are {imgs.shape[1]}px, model expects {cfg.img}px")
            xs.append(imgs)
            ys.append(np.full(len(imgs), label, dtype=np.int64))
    if not xs:
        raise ValueError(f"{spec.labels_csv}: no samples listed")
    x = np.concatenate(xs).astype(np.float64) / 255.0
    x = ((x - 0.5) / 0.5).transpose(0, 3, 1, 2).astype(backbone.dtype)
    y = np.concatenate(ys)
    perm = np.random.default_rng([spec.seed, 0x33]).permutation(len(x))
    x, y = x[perm], y[perm]
    n_train = min(spec.n_train, len(x)) if spec.n_train else len(x) // 2
    n_test = min(spec.n_test, len(x) - n_train)
    return _split(x, y, n_train, n_test, spec.n_classes, {"readout": "files"})


def build_dataset(spec: DatasetSpec, backbone: ViT) -> Dataset:
    spec.validate()
    if spec.variant == "synthetic_linear":
        return synthetic_linear(spec, backbone)
    if spec.variant == "synthetic_planted":
        return synthetic_planted(spec, backbone)
    return image_folder(spec, backbone)
