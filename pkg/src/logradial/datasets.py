"""IDX parsing/writing and synthesis of scaled digit datasets."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
CANVAS = (28, 28)
LOCAL2_CANVAS = (28, 40)
LOCAL2_ANCHORS = (10, 30)
LOCAL2_JITTER = 2
LOCAL2_RANGE = (0.7, 1.0)


class IdxParseError(ValueError):
    """Malformed IDX content; the message names the byte offset."""


@dataclass
class LabeledImageSet:
    images: np.ndarray  # (N, H, W) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    factors: Optional[np.ndarray] = field(default=None, repr=False)  # per-sample scale factors

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 3:
            raise ValueError(f"images must be (N, H, W), got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def height(self) -> int:
        return self.images.shape[1]

    @property
    def width(self) -> int:
        return self.images.shape[2]

    def subset(self, idx) -> "LabeledImageSet":
        factors = None if self.factors is None else self.factors[idx]
        return LabeledImageSet(self.images[idx], self.labels[idx], factors)


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_header(buf: bytes, magic: int, ndims: int, what: str) -> tuple[int, ...]:
    need = 4 * (1 + ndims)
    if len(buf) < need:
        raise IdxParseError(f"{what}: truncated header at offset {len(buf)} (need {need} bytes)")
    (got,) = struct.unpack_from(">I", buf, 0)
    if got != magic:
        raise IdxParseError(f"{what}: bad magic 0x{got:08x} at offset 0, expected 0x{magic:08x}")
    return struct.unpack_from(f">{ndims}I", buf, 4)


def parse_idx_images(buf: bytes) -> np.ndarray:
    count, rows, cols = _parse_header(buf, IMAGE_MAGIC, 3, "images")
    expected = 16 + count * rows * cols
    if len(buf) < expected:
        raise IdxParseError(f"images: truncated payload, file ends at offset {len(buf)}, "
                            f"expected {expected} bytes")
    return np.frombuffer(buf, dtype=np.uint8, count=count * rows * cols, offset=16).reshape(count, rows, cols)


def parse_idx_labels(buf: bytes) -> np.ndarray:
    (count,) = _parse_header(buf, LABEL_MAGIC, 1, "labels")
    expected = 8 + count
    if len(buf) < expected:
        raise IdxParseError(f"labels: truncated payload, file ends at offset {len(buf)}, "
                            f"expected {expected} bytes")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=8)


def load_idx(images_path, labels_path) -> LabeledImageSet:
    """Read an IDX image/label pair (optionally gzip-compressed)."""
    images = parse_idx_images(_read_bytes(images_path))
    labels = parse_idx_labels(_read_bytes(labels_path))
    if len(images) != len(labels):
        raise IdxParseError(f"count mismatch at offset 4: {len(images)} images vs {len(labels)} labels")
    return LabeledImageSet(images.astype(np.float64) / 255.0, labels.astype(np.int64))


def to_uint8(images: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(images) * 255.0), 0, 255).astype(np.uint8)


def idx_bytes(data: LabeledImageSet) -> tuple[bytes, bytes]:
    n, h, w = data.images.shape
    img = struct.pack(">IIII", IMAGE_MAGIC, n, h, w) + to_uint8(data.images).tobytes()
    lab = struct.pack(">II", LABEL_MAGIC, n) + data.labels.astype(np.uint8).tobytes()
    return img, lab


def save_idx(data: LabeledImageSet, images_path, labels_path) -> None:
    img, lab = idx_bytes(data)
    Path(images_path).write_bytes(img)
    Path(labels_path).write_bytes(lab)


def quantize(images: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid so that IDX export is lossless."""
    return to_uint8(images).astype(np.float64) / 255.0


def scale_about_center(image: np.ndarray, factor: float, out_shape=None) -> np.ndarray:
    """Bilinear rescale of ``image`` by ``factor`` about its center, zero background."""
    image = np.asarray(image, dtype=float)
    h, w = image.shape
    oh, ow = out_shape if out_shape is not None else (h, w)
    rows = (np.arange(oh) - (oh - 1) / 2) / factor + (h - 1) / 2
    cols = (np.arange(ow) - (ow - 1) / 2) / factor + (w - 1) / 2
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return ndimage.map_coordinates(image, [rr, cc], order=1, mode="constant", cval=0.0)


def make_scaled(data: LabeledImageSet, scale_range: tuple[float, float] = (0.3, 1.0),
                seed: int = 0) -> LabeledImageSet:
    """Shrink each image about its center by a factor uniform in ``scale_range``."""
    lo, hi = scale_range
    if not 0 < lo <= hi:
        raise ValueError(f"scale range must satisfy 0 < lo <= hi, got {scale_range}")
    rng = np.random.default_rng(seed)
    factors = rng.uniform(lo, hi, size=len(data))
    out = np.empty((len(data),) + CANVAS)
    for i, (img, f) in enumerate(zip(data.images, factors)):
        out[i] = scale_about_center(img, f, CANVAS)
    return LabeledImageSet(quantize(out), data.labels.copy(), factors)


def make_local2(data: LabeledImageSet, seed: int = 0, n: Optional[int] = None) -> LabeledImageSet:
    """Side-by-side digit pairs (d, d+1 mod 10) on a 28x40 canvas, labelled d.

    Each digit is scaled independently by a factor in [0.7, 1] and centered
    on its anchor column (10 or 30) plus a random shift of up to 2 pixels.
    Overlapping strokes are merged with a pixelwise max. ``factors`` holds
    the (left, right) factor pair of each sample.
    """
    by_class = [np.flatnonzero(data.labels == d) for d in range(10)]
    missing = [d for d, idx in enumerate(by_class) if len(idx) == 0]
    if missing:
        raise ValueError(f"source set lacks digit classes {missing}")
    n = len(data) if n is None else n
    rng = np.random.default_rng(seed)
    ch, cw = LOCAL2_CANVAS
    images = np.zeros((n, ch, cw))
    labels = rng.integers(0, 10, size=n)
    factors = rng.uniform(*LOCAL2_RANGE, size=(n, 2))
    for i, d in enumerate(labels):
        for side, digit in enumerate((d, (d + 1) % 10)):
            src = data.images[rng.choice(by_class[digit])]
            tile = scale_about_center(src, factors[i, side], src.shape)
            jitter = int(rng.integers(-LOCAL2_JITTER, LOCAL2_JITTER + 1))
            left = LOCAL2_ANCHORS[side] - tile.shape[1] // 2 + jitter
            top = (ch - tile.shape[0]) // 2
            c0, c1 = max(left, 0), min(left + tile.shape[1], cw)
            region = images[i, top:top + tile.shape[0], c0:c1]
            np.maximum(region, tile[:, c0 - left:c1 - left], out=region)
    return LabeledImageSet(quantize(images), labels, factors)


def split(data: LabeledImageSet, sizes: tuple[int, int, int], seed: int = 0):
    """Disjoint shuffled (train, val, test) subsets."""
    if any(s < 0 for s in sizes) or sum(sizes) > len(data):
        raise ValueError(f"split sizes {sizes} exceed the {len(data)} available samples")
    order = np.random.default_rng(seed).permutation(len(data))
    a, b, c = sizes
    return (data.subset(order[:a]), data.subset(order[a:a + b]), data.subset(order[a + b:a + b + c]))


def label_counts(data: LabeledImageSet, n_classes: int = 10) -> np.ndarray:
    return np.bincount(data.labels, minlength=n_classes)


# --- on-disk layout used by the CLI ---------------------------------------------

IMAGES_FILE = "images-idx3-ubyte"
LABELS_FILE = "labels-idx1-ubyte"
MANIFEST_FILE = "manifest.txt"
SOURCE_CANDIDATES = (
    ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    ("train-images.idx3-ubyte", "train-labels.idx1-ubyte"),
    (IMAGES_FILE, LABELS_FILE),
)


def find_idx_pair(directory) -> tuple[Path, Path]:
    """Locate an image/label IDX pair in a directory (plain or .gz)."""
    directory = Path(directory)
    for img, lab in SOURCE_CANDIDATES:
        for suffix in ("", ".gz"):
            ip, lp = directory / (img + suffix), directory / (lab + suffix)
            if ip.exists() and lp.exists():
                return ip, lp
    raise FileNotFoundError(f"no IDX image/label pair found in {directory}")


def write_dataset(data: LabeledImageSet, directory, manifest: dict) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_idx(data, directory / IMAGES_FILE, directory / LABELS_FILE)
    lines = [f"{k} = {v}" for k, v in manifest.items()]
    lines.append(f"count = {len(data)}")
    lines.append(f"shape = {data.height},{data.width}")
    lines.append("label_counts = " + ",".join(str(c) for c in label_counts(data)))
    (directory / MANIFEST_FILE).write_text("\n".join(lines) + "\n")


def read_dataset(directory) -> LabeledImageSet:
    return load_idx(*find_idx_pair(directory))
