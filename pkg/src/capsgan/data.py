"""Dataset ingestion: IDX image/label files, right-angle rotation
augmentation with (class, angle) labels, raw-RGB directory ingestion, and
deterministic batch streams."""

from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass, field

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataError(Exception):
    pass


@dataclass
class LabeledImageSet:
    """Images in [-1, 1], NCHW float32.  `labels` is (N,) integer classes
    for single-label data or an (N, K) 0/1 matrix for multi-label data."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    provenance: str = ""

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataError(f"images must be NCHW, got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError(
                f"{len(self.images)} images vs {len(self.labels)} labels"
            )
        lo, hi = float(self.images.min()), float(self.images.max())
        if lo < -1.0 or hi > 1.0:
            raise DataError(f"pixel range [{lo}, {hi}] outside [-1, 1]")
        if not self.multi_label:
            bad = (self.labels < 0) | (self.labels >= self.class_count)
            if bad.any():
                raise DataError("labels outside [0, class_count)")

    @property
    def multi_label(self):
        return self.labels.ndim == 2

    def __len__(self):
        return len(self.images)

    def one_hot(self, indices=None):
        if self.multi_label:
            return self.labels if indices is None else self.labels[indices]
        lab = self.labels if indices is None else self.labels[indices]
        return np.eye(self.class_count, dtype=np.float32)[lab]

    def subset(self, indices, provenance=None):
        return LabeledImageSet(
            self.images[indices], self.labels[indices], self.class_count,
            provenance or self.provenance,
        )


def _read_exact(fh, n, what, path):
    raw = fh.read(n)
    if len(raw) != n:
        raise DataError(f"{path}: truncated while reading {what}")
    return raw


def load_idx(images_path, labels_path, provenance=None):
    """Parse the big-endian IDX pair (magic 0x803 images / 0x801 labels),
    mapping pixels from [0, 255] to [-1, 1] via x/127.5 - 1."""
    with open(images_path, "rb") as fh:
        magic, n, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16, "image header", images_path))
        if magic != IDX_IMAGES_MAGIC:
            raise DataError(f"{images_path}: bad magic 0x{magic:08x}, want 0x{IDX_IMAGES_MAGIC:08x}")
        pixels = np.frombuffer(_read_exact(fh, n * rows * cols, "pixels", images_path), dtype=np.uint8)
        if fh.read(1):
            raise DataError(f"{images_path}: trailing bytes after {n} images")
    with open(labels_path, "rb") as fh:
        magic, n_labels = struct.unpack(">II", _read_exact(fh, 8, "label header", labels_path))
        if magic != IDX_LABELS_MAGIC:
            raise DataError(f"{labels_path}: bad magic 0x{magic:08x}, want 0x{IDX_LABELS_MAGIC:08x}")
        if n_labels != n:
            raise DataError(f"label count {n_labels} != image count {n}")
        labels = np.frombuffer(_read_exact(fh, n_labels, "labels", labels_path), dtype=np.uint8)

    images = (pixels.reshape(n, 1, rows, cols).astype(np.float32) / 127.5) - 1.0
    return LabeledImageSet(
        images, labels.astype(np.int64), int(labels.max()) + 1 if n else 0,
        provenance or f"idx:{os.path.basename(images_path)}",
    )


def write_idx(images_path, labels_path, images_u8, labels_u8):
    """Inverse of load_idx for corpus generation and tests: images_u8 is
    (N, H, W) uint8, labels_u8 is (N,) uint8."""
    images_u8 = np.ascontiguousarray(images_u8, dtype=np.uint8)
    labels_u8 = np.ascontiguousarray(labels_u8, dtype=np.uint8)
    n, rows, cols = images_u8.shape
    if labels_u8.shape != (n,):
        raise DataError(f"labels shape {labels_u8.shape} != ({n},)")
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(images_u8.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        fh.write(labels_u8.tobytes())


def build_rotated(dataset, angles=(0, 90, 180, 270)):
    """Replicate every image once per right-angle rotation.  The label
    space becomes (class, angle) pairs flattened as
    class * len(angles) + angle_index, with angle_index following the
    order of `angles`."""
    if dataset.multi_label:
        raise DataError("rotation labels need single-label input")
    h, w = dataset.images.shape[2], dataset.images.shape[3]
    if h != w:
        raise DataError(f"rotation needs square images, got {h}x{w}")
    for a in angles:
        if a % 90 != 0:
            raise DataError(f"angle {a} is not a multiple of 90")
    pieces, labels = [], []
    for idx, angle in enumerate(angles):
        pieces.append(np.rot90(dataset.images, k=(angle // 90) % 4, axes=(2, 3)))
        labels.append(dataset.labels * len(angles) + idx)
    return LabeledImageSet(
        np.ascontiguousarray(np.concatenate(pieces)),
        np.concatenate(labels),
        dataset.class_count * len(angles),
        f"{dataset.provenance}+rot{list(angles)}",
    )


def subset_indices(n, seed, fraction):
    """First floor(fraction*n) entries of the seed-determined permutation;
    the same (n, seed, fraction) always selects the same samples."""
    if not (0.0 < fraction <= 1.0):
        raise DataError(f"fraction must be in (0, 1], got {fraction}")
    take = int(np.floor(fraction * n))
    perm = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A])).permutation(n)
    return perm[:take]


def batches(dataset, batch_size, seed, fraction=1.0, epoch=0):
    """Deterministic full-batch stream: the fraction subset is fixed by
    `seed`, its order reshuffles per (seed, epoch), and the final partial
    batch is dropped."""
    chosen = subset_indices(len(dataset), seed, fraction)
    if batch_size > len(chosen):
        raise DataError(
            f"batch_size {batch_size} exceeds {len(chosen)} available samples"
        )
    order = np.random.default_rng(
        np.random.SeedSequence([seed, 0x0EDE, epoch])
    ).permutation(len(chosen))
    chosen = chosen[order]
    for start in range(0, len(chosen) - batch_size + 1, batch_size):
        idx = chosen[start : start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]


def batches_per_epoch(n, batch_size, fraction=1.0):
    return int(np.floor(fraction * n)) // batch_size


_IDX_NAMES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def load_named_dataset(name, data_dir, split="train"):
    """Resolve `mnist`/`fashion`/`rotated-mnist` under data_dir:
    <data_dir>/<base>/<standard idx file names>.  rotated-mnist is built
    on the fly from the mnist files."""
    base = {"mnist": "mnist", "fashion": "fashion", "rotated-mnist": "mnist"}.get(name)
    if base is None:
        raise DataError(f"no IDX loader for dataset {name!r}")
    img_name, lab_name = _IDX_NAMES[split]
    root = os.path.join(data_dir, base)
    images_path = os.path.join(root, img_name)
    labels_path = os.path.join(root, lab_name)
    if not (os.path.exists(images_path) and os.path.exists(labels_path)):
        raise DataError(
            f"dataset {name!r} not found: expected {images_path} and {labels_path}"
        )
    out = load_idx(images_path, labels_path, provenance=f"{name}:{split}")
    if name == "rotated-mnist":
        out = build_rotated(out)
    return out


def fetch_dataset(base_url, data_dir, dataset="mnist"):
    """Download the four standard IDX files from base_url into
    <data_dir>/<dataset>/, trying <name>.gz first and falling back to the
    raw name.  Purely a convenience; everything else works offline."""
    import gzip
    import urllib.request

    root = os.path.join(data_dir, dataset)
    os.makedirs(root, exist_ok=True)
    names = [n for pair in _IDX_NAMES.values() for n in pair]
    for name in names:
        dest = os.path.join(root, name)
        if os.path.exists(dest):
            continue
        try:
            with urllib.request.urlopen(f"{base_url.rstrip('/')}/{name}.gz") as resp:
                raw = gzip.decompress(resp.read())
        except Exception:
            with urllib.request.urlopen(f"{base_url.rstrip('/')}/{name}") as resp:
                raw = resp.read()
        with open(dest, "wb") as fh:
            fh.write(raw)
    return root


def load_celeba_dir(dir_path, image_size=64):
    """Directory of equally sized raw RGB images (each file exactly
    3*image_size^2 bytes, row-major RGB interleaved) plus attributes.csv
    with a filename column followed by 0/1 attribute columns."""
    table = os.path.join(dir_path, "attributes.csv")
    if not os.path.exists(table):
        raise DataError(f"{dir_path}: attributes.csv missing")
    names, rows = [], []
    with open(table, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "filename":
            raise DataError(f"{table}: first column must be 'filename'")
        for row in reader:
            names.append(row[0])
            rows.append([float(v) for v in row[1:]])
    if not names:
        raise DataError(f"{table}: no rows")
    want = 3 * image_size * image_size
    images = np.zeros((len(names), 3, image_size, image_size), dtype=np.float32)
    for i, fname in enumerate(names):
        path = os.path.join(dir_path, fname)
        with open(path, "rb") as fh:
            raw = fh.read()
        if len(raw) != want:
            raise DataError(f"{path}: {len(raw)} bytes, expected {want}")
        arr = np.frombuffer(raw, dtype=np.uint8).reshape(image_size, image_size, 3)
        images[i] = (arr.transpose(2, 0, 1).astype(np.float32) / 127.5) - 1.0
    labels = np.asarray(rows, dtype=np.float32)
    return LabeledImageSet(images, labels, labels.shape[1], f"celeba-dir:{dir_path}")
