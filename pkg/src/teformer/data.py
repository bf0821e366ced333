"""Datasets: IDX (MNIST-format) files, row serialisation, and the synthetic
temporal-order task."""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, ParseError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    """``inputs`` is [N, C, H, W], or [T, N, C, H, W] when ``time_major``."""

    inputs: np.ndarray
    labels: np.ndarray
    split: str = "train"
    time_major: bool = False

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) != len(self):
            raise ContractError(f"{len(self)} inputs but {len(self.labels)} labels")
        if self.inputs.size and (self.inputs.min() < 0.0 or self.inputs.max() > 1.0):
            raise ContractError("dataset inputs must lie in [0, 1]")

    def __len__(self):
        return self.inputs.shape[1] if self.time_major else self.inputs.shape[0]

    @property
    def num_classes(self):
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    @property
    def frame_shape(self):
        return self.inputs.shape[2:] if self.time_major else self.inputs.shape[1:]

    def batch(self, idx) -> np.ndarray:
        return self.inputs[:, idx] if self.time_major else self.inputs[idx]

    def subset(self, idx, split=None) -> "Dataset":
        return Dataset(self.batch(idx), self.labels[idx], split or self.split, self.time_major)


# -- IDX --------------------------------------------------------------------


def _read_bytes(path) -> bytes:
    path = Path(path)
    with path.open("rb") as fh:
        head = fh.read(2)
    opener = gzip.open if head == b"\x1f\x8b" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(buf: bytes, magic: int, ndim: int, what: str) -> np.ndarray:
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise ParseError(f"{what}: truncated header ({len(buf)} bytes)", offset=len(buf))
    got = struct.unpack(">I", buf[:4])[0]
    if got != magic:
        raise ParseError(f"{what}: bad magic 0x{got:08x}, expected 0x{magic:08x}", offset=0)
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    need = header + int(np.prod(dims))
    if len(buf) < need:
        raise ParseError(f"{what}: truncated body, need {need} bytes, have {len(buf)}", offset=len(buf))
    return np.frombuffer(buf, dtype=np.uint8, count=need - header, offset=header).reshape(dims)


def read_idx_images(path) -> np.ndarray:
    """Raw uint8 [N, H, W] pixels of an IDX image file."""
    return _parse_idx(_read_bytes(path), IDX_IMAGES_MAGIC, 3, str(path))


def load_idx(images_path, labels_path, split="train") -> Dataset:
    images = read_idx_images(images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, 1, str(labels_path))
    if images.shape[0] != labels.shape[0]:
        raise ParseError(f"{images.shape[0]} images but {labels.shape[0]} labels", offset=4)
    x = (images.astype(np.float32) / 255.0)[:, None]
    return Dataset(x, labels.astype(np.int64), split)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path):
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, h, w = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def export_mnist_subset(out_dir, n_train=2000, n_test=500, seed=0) -> Path:
    """Write IDX train/test files drawn from the 5000-digit MNIST sample bundled with mlxtend.

    Useful when the full MNIST archives cannot be downloaded.
    """
    try:
        from mlxtend.data import mnist_data
    except ImportError as exc:  # pragma: no cover - optional dependency
        raise ContractError("export_mnist_subset needs the optional 'mlxtend' package") from exc
    x, y = mnist_data()
    if n_train + n_test > len(y):
        raise ContractError(f"only {len(y)} digits available")
    order = np.random.default_rng(seed).permutation(len(y))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    parts = {"train": order[:n_train], "test": order[n_train:n_train + n_test]}
    for split, idx in parts.items():
        imgs = x[idx].reshape(-1, 28, 28).astype(np.uint8)
        write_idx(imgs, y[idx], out / MNIST_FILES[split][0], out / MNIST_FILES[split][1])
    return out


def load_mnist_dir(path, split) -> Dataset:
    path = Path(path)
    img, lab = MNIST_FILES[split]
    for cand in (img, img + ".gz"):
        if (path / cand).exists():
            img = cand
            break
    for cand in (lab, lab + ".gz"):
        if (path / cand).exists():
            lab = cand
            break
    return load_idx(path / img, path / lab, split)


# -- transforms -------------------------------------------------------------


def downsample(ds: Dataset, factor: int) -> Dataset:
    """Non-overlapping mean pooling of the two spatial axes."""
    *lead, H, W = ds.inputs.shape
    if factor < 1 or H % factor or W % factor:
        raise ContractError(f"extents {H}x{W} not divisible by {factor}")
    x = ds.inputs.reshape(*lead, H // factor, factor, W // factor, factor).mean(axis=(-1, -3))
    return Dataset(x.astype(np.float32), ds.labels, ds.split, ds.time_major)


def serialize_rows(ds: Dataset, T: int | None = None) -> Dataset:
    """Static [N, C, H, W] -> time-major [T, N, C, H/T, W]; step t carries the t-th band of rows."""
    if ds.time_major:
        raise ContractError("dataset is already time-major")
    N, C, H, W = ds.inputs.shape
    T = H if T is None else T
    if T < 1 or H % T:
        raise ContractError(f"height {H} not divisible into {T} steps")
    rows = H // T
    x = ds.inputs.reshape(N, C, T, rows, W).transpose(2, 0, 1, 3, 4)
    return Dataset(np.ascontiguousarray(x), ds.labels, ds.split, time_major=True)


# -- temporal-order task ----------------------------------------------------


@dataclass(frozen=True)
class OrderTaskSpec:
    T: int = 8
    height: int = 8
    width: int = 8
    n_samples: int = 10000
    seed: int = 0
    noise: float = 0.05

    def patterns(self):
        """Complementary checkerboards: disjoint supports, both present in every patch."""
        ii, jj = np.indices((self.height, self.width))
        a = ((ii + jj) % 2 == 0).astype(np.float32)
        return a, 1.0 - a


def gen_order_task(spec: OrderTaskSpec, split="train") -> Dataset:
    """Label 1 iff pattern A appears before pattern B; every other frame is blank plus noise."""
    if spec.T < 4:
        raise ContractError(f"order task needs T >= 4, got {spec.T}")
    rng = np.random.default_rng(spec.seed)
    a, b = spec.patterns()
    n = spec.n_samples
    slots = np.stack([rng.choice(spec.T, size=2, replace=False) for _ in range(n)])
    x = np.zeros((spec.T, n, 1, spec.height, spec.width), dtype=np.float32)
    idx = np.arange(n)
    x[slots[:, 0], idx, 0] = a
    x[slots[:, 1], idx, 0] = b
    x += rng.normal(0.0, spec.noise, size=x.shape).astype(np.float32)
    np.clip(x, 0.0, 1.0, out=x)
    labels = (slots[:, 0] < slots[:, 1]).astype(np.int64)
    return Dataset(x, labels, split, time_major=True)


def order_task_slots(ds: Dataset, spec: OrderTaskSpec):
    """Recover (slot of A, slot of B) per sample by matching frames to the patterns."""
    a, b = spec.patterns()
    frames = ds.inputs[:, :, 0]
    score_a = (frames * a).sum(axis=(-1, -2)) - (frames * b).sum(axis=(-1, -2))
    return score_a.argmax(axis=0), score_a.argmin(axis=0)


# -- cache --------------------------------------------------------------------


def save_dataset(ds: Dataset, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {"format": "teformer-dataset", "version": 1, "split": ds.split, "time_major": ds.time_major,
                "inputs_shape": list(ds.inputs.shape), "labels_shape": list(ds.labels.shape)}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))
    ds.inputs.astype("<f4").tofile(path / "inputs.bin")
    ds.labels.astype("<i8").tofile(path / "labels.bin")


def load_dataset(path) -> Dataset:
    path = Path(path)
    m = json.loads((path / "manifest.json").read_text())
    if m.get("format") != "teformer-dataset" or m.get("version") != 1:
        raise ParseError(f"{path}: not a version-1 dataset cache")
    x = np.fromfile(path / "inputs.bin", dtype="<f4").reshape(m["inputs_shape"])
    y = np.fromfile(path / "labels.bin", dtype="<i8").reshape(m["labels_shape"])
    return Dataset(x.astype(np.float32), y, m["split"], m["time_major"])
