"""Image datasets: the IDX binary format, a procedural glyph generator,
imbalanced train/validation carving, and topping a train set up with
decoded synthetic minority images.

All images are float64 in [0, 1], shaped (n, H, W); labels are int64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError, FormatError, InputError, ShapeError
from .gm_distribution import GMMParams, sample_population
from .networks import MLP

_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801
_ARCHIVE_MAGIC = b"MLIMG01\x00"

GLYPH_NAMES = (
    "bar",
    "cross",
    "disk",
    "ring",
    "diagonal",
    "checker",
    "frame",
    "dot_grid",
)


@dataclass
class LabeledImageSet:
    """(n, H, W) images in [0, 1] with (n,) integer labels."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 3:
            raise ShapeError(
                f"images must be (n, H, W), got shape {self.images.shape}"
            )
        if self.labels.shape != (self.images.shape[0],):
            raise ShapeError(
                f"labels shape {self.labels.shape} does not match "
                f"{self.images.shape[0]} images"
            )
        if not np.all(np.isfinite(self.images)):
            raise InputError("images contain non-finite values")
        if self.images.size and (
            self.images.min() < 0.0 or self.images.max() > 1.0
        ):
            raise InputError("pixel values must lie in [0, 1]")
        if self.labels.size and self.labels.min() < 0:
            raise InputError("labels must be non-negative")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]

    def flat(self) -> np.ndarray:
        return self.images.reshape(len(self), -1)

    def subset(self, indices: np.ndarray) -> "LabeledImageSet":
        return LabeledImageSet(self.images[indices], self.labels[indices])

    def class_counts(self, class_count: int | None = None) -> np.ndarray:
        if class_count is None:
            class_count = int(self.labels.max()) + 1 if len(self) else 0
        return np.bincount(self.labels, minlength=class_count)

    def class_members(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels == label)


def concat_sets(sets: Sequence[LabeledImageSet]) -> LabeledImageSet:
    if not sets:
        raise ShapeError("need at least one set to concatenate")
    return LabeledImageSet(
        np.concatenate([s.images for s in sets], axis=0),
        np.concatenate([s.labels for s in sets], axis=0),
    )


def _read_exact(blob: bytes, offset: int, size: int, path: str) -> bytes:
    if offset + size > len(blob):
        raise FormatError(
            f"{path}: needs {size} bytes at offset {offset}, file has "
            f"{len(blob)}"
        )
    return blob[offset : offset + size]


def load_idx(images_path: str, labels_path: str) -> LabeledImageSet:
    """Parse the big-endian IDX image/label file pair.

    Pixels are scaled to [0, 1] by dividing by 255.

    Raises:
        FormatError: wrong magic, truncation, trailing bytes, or an
            image/label count mismatch; messages name the byte offset.
    """
    with open(images_path, "rb") as fh:
        blob = fh.read()
    magic, n, height, width = struct.unpack(
        ">IIII", _read_exact(blob, 0, 16, images_path)
    )
    if magic != _IDX_IMAGES_MAGIC:
        raise FormatError(
            f"{images_path}: bad magic 0x{magic:08x} at offset 0, expected "
            f"0x{_IDX_IMAGES_MAGIC:08x}"
        )
    payload = n * height * width
    raw = _read_exact(blob, 16, payload, images_path)
    if len(blob) != 16 + payload:
        raise FormatError(
            f"{images_path}: {len(blob) - 16 - payload} trailing bytes at "
            f"offset {16 + payload}"
        )
    images = np.frombuffer(raw, dtype=np.uint8).reshape(n, height, width)

    labels = _read_label_file(labels_path)
    if labels.shape[0] != n:
        raise FormatError(
            f"{labels_path}: {labels.shape[0]} labels for {n} images in "
            f"{images_path}"
        )
    return LabeledImageSet(images / 255.0, labels.astype(np.int64))


def _read_label_file(labels_path: str) -> np.ndarray:
    with open(labels_path, "rb") as fh:
        lblob = fh.read()
    lmagic, ln = struct.unpack(">II", _read_exact(lblob, 0, 8, labels_path))
    if lmagic != _IDX_LABELS_MAGIC:
        raise FormatError(
            f"{labels_path}: bad magic 0x{lmagic:08x} at offset 0, expected "
            f"0x{_IDX_LABELS_MAGIC:08x}"
        )
    lraw = _read_exact(lblob, 8, ln, labels_path)
    if len(lblob) != 8 + ln:
        raise FormatError(
            f"{labels_path}: {len(lblob) - 8 - ln} trailing bytes at offset "
            f"{8 + ln}"
        )
    return np.frombuffer(lraw, dtype=np.uint8)


def save_idx(data: LabeledImageSet, images_path: str, labels_path: str) -> None:
    """Write the IDX pair; pixels quantized by round(x * 255).

    Loading an IDX pair and saving it again reproduces the bytes exactly.
    """
    n, height, width = data.images.shape
    quantized = np.round(data.images * 255.0).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", _IDX_IMAGES_MAGIC, n, height, width))
        fh.write(quantized.tobytes())
    _write_label_file(data.labels, labels_path)


def _write_label_file(labels: np.ndarray, labels_path: str) -> None:
    if labels.size and labels.max() > 255:
        raise DataError("IDX labels must fit a byte")
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", _IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.astype(np.uint8).tobytes())


def save_image_archive(
    data: LabeledImageSet, images_path: str, labels_path: str
) -> None:
    """Write images as raw float64 so synthesized pixels round-trip exactly.

    Image file header: 8-byte magic, then n, H, W, C as little-endian
    uint32 (C is always 1 for this package); payload is the row-major
    pixel block as little-endian float64. Labels go to a companion file
    in the IDX label layout.
    """
    n, height, width = data.images.shape
    with open(images_path, "wb") as fh:
        fh.write(_ARCHIVE_MAGIC)
        fh.write(struct.pack("<IIII", n, height, width, 1))
        fh.write(np.ascontiguousarray(data.images, dtype="<f8").tobytes())
    _write_label_file(data.labels, labels_path)


def load_image_archive(images_path: str, labels_path: str) -> LabeledImageSet:
    """Inverse of :func:`save_image_archive`; bit-exact for the pixels."""
    with open(images_path, "rb") as fh:
        blob = fh.read()
    magic = _read_exact(blob, 0, 8, images_path)
    if magic != _ARCHIVE_MAGIC:
        raise FormatError(
            f"{images_path}: bad magic {magic!r} at offset 0, expected "
            f"{_ARCHIVE_MAGIC!r}"
        )
    n, height, width, channels = struct.unpack(
        "<IIII", _read_exact(blob, 8, 16, images_path)
    )
    if channels != 1:
        raise FormatError(
            f"{images_path}: {channels} channels, only 1 is supported"
        )
    payload = n * height * width * 8
    raw = _read_exact(blob, 24, payload, images_path)
    if len(blob) != 24 + payload:
        raise FormatError(
            f"{images_path}: {len(blob) - 24 - payload} trailing bytes at "
            f"offset {24 + payload}"
        )
    images = np.frombuffer(raw, dtype="<f8").reshape(n, height, width).copy()
    labels = _read_label_file(labels_path)
    if labels.shape[0] != n:
        raise FormatError(
            f"{labels_path}: {labels.shape[0]} labels for {n} images in "
            f"{images_path}"
        )
    return LabeledImageSet(images, labels.astype(np.int64))


def _glyph_template(name: str, height: int, width: int) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    m = min(height, width)
    r = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    if name == "bar":
        return (np.abs(xx - cx) <= width / 10.0).astype(np.float64)
    if name == "cross":
        return (
            (np.abs(xx - cx) <= width / 10.0) | (np.abs(yy - cy) <= height / 10.0)
        ).astype(np.float64)
    if name == "disk":
        return (r <= 0.30 * m).astype(np.float64)
    if name == "ring":
        return ((r >= 0.26 * m) & (r <= 0.42 * m)).astype(np.float64)
    if name == "diagonal":
        return (np.abs(yy - xx * height / width) <= m / 8.0).astype(np.float64)
    if name == "checker":
        step_y = max(1, height // 4)
        step_x = max(1, width // 4)
        return (((yy // step_y) + (xx // step_x)) % 2).astype(np.float64)
    if name == "frame":
        edge = np.minimum(
            np.minimum(yy, height - 1 - yy), np.minimum(xx, width - 1 - xx)
        )
        return ((edge >= 0.10 * m) & (edge <= 0.25 * m)).astype(np.float64)
    if name == "dot_grid":
        return (((yy % 4) < 2) & ((xx % 4) < 2)).astype(np.float64)
    raise InputError(f"unknown glyph {name!r}")


def _shift(image: np.ndarray, dy: int, dx: int) -> np.ndarray:
    # Translation with zero fill, not wrap-around.
    out = np.zeros_like(image)
    h, w = image.shape
    ys = slice(max(0, dy), min(h, h + dy))
    xs = slice(max(0, dx), min(w, w + dx))
    yd = slice(max(0, -dy), min(h, h - dy))
    xd = slice(max(0, -dx), min(w, w - dx))
    out[ys, xs] = image[yd, xd]
    return out


def generate_glyphs(
    class_count: int = 4,
    per_class: int = 100,
    height: int = 16,
    width: int = 16,
    noise_sd: float = 0.05,
    seed: int = 0,
    max_shift: int = 2,
    intensity_jitter: float = 0.2,
) -> LabeledImageSet:
    """Procedural dataset: one template per class, randomly perturbed.

    Each sample takes its class template at amplitude 0.9, shifts it by up
    to ``max_shift`` pixels per axis, jitters the amplitude by a uniform
    offset in [-intensity_jitter, +intensity_jitter], adds Gaussian pixel
    noise, and clips to [0, 1]. Samples are blocked by class. With zero
    noise, shift and jitter, all class-k samples are identical.
    """
    if not 1 <= class_count <= len(GLYPH_NAMES):
        raise InputError(
            f"class_count must lie in [1, {len(GLYPH_NAMES)}], got {class_count}"
        )
    if per_class < 1 or height < 4 or width < 4:
        raise InputError("per_class must be >= 1 and images at least 4x4")
    if noise_sd < 0 or max_shift < 0 or intensity_jitter < 0:
        raise InputError("noise_sd, max_shift and intensity_jitter must be >= 0")
    rng = np.random.default_rng(seed)
    templates = [
        0.9 * _glyph_template(GLYPH_NAMES[k], height, width)
        for k in range(class_count)
    ]
    images = np.empty((class_count * per_class, height, width))
    labels = np.repeat(np.arange(class_count), per_class)
    row = 0
    for k in range(class_count):
        for _ in range(per_class):
            img = templates[k]
            if max_shift > 0:
                dy, dx = rng.integers(-max_shift, max_shift + 1, size=2)
                img = _shift(img, int(dy), int(dx))
            if intensity_jitter > 0:
                img = img * (1.0 + rng.uniform(-intensity_jitter, intensity_jitter))
            if noise_sd > 0:
                img = img + rng.normal(0.0, noise_sd, size=img.shape)
            images[row] = np.clip(img, 0.0, 1.0)
            row += 1
    return LabeledImageSet(images, labels)


@dataclass
class ImbalanceSpec:
    """How to carve an imbalanced train set and a balanced validation set."""

    minority_classes: tuple[int, ...]
    n_min: int
    n_maj: int
    n_val: int
    seed: int = 0

    def __post_init__(self) -> None:
        self.minority_classes = tuple(int(c) for c in self.minority_classes)
        if len(set(self.minority_classes)) != len(self.minority_classes):
            raise InputError("minority_classes must be distinct")
        if any(c < 0 for c in self.minority_classes):
            raise InputError("minority_classes must be non-negative")
        if self.n_min < 1 or self.n_maj < 1 or self.n_val < 0:
            raise InputError("n_min, n_maj must be >= 1 and n_val >= 0")
        if self.n_min > self.n_maj:
            raise InputError(
                f"n_min ({self.n_min}) must not exceed n_maj ({self.n_maj})"
            )


def make_imbalanced(
    full: LabeledImageSet, spec: ImbalanceSpec
) -> tuple[LabeledImageSet, LabeledImageSet]:
    """Seeded subsampling into a skewed train set and a disjoint val set.

    Every class contributes ``n_val`` validation samples; train gets
    ``n_min`` per minority class and ``n_maj`` otherwise. Draws are
    uniform without replacement, so the two splits never share a sample.

    Raises:
        DataError: naming the first class with too few members.
    """
    if len(full) == 0:
        raise DataError("source dataset is empty")
    class_count = int(full.labels.max()) + 1
    for c in spec.minority_classes:
        if c >= class_count:
            raise DataError(f"minority class {c} not present (K={class_count})")
    rng = np.random.default_rng(spec.seed)
    train_parts: list[np.ndarray] = []
    val_parts: list[np.ndarray] = []
    for k in range(class_count):
        members = full.class_members(k)
        n_train = spec.n_min if k in spec.minority_classes else spec.n_maj
        need = n_train + spec.n_val
        if members.size < need:
            raise DataError(
                f"class {k} has {members.size} samples, needs {need}"
            )
        picked = rng.permutation(members)[:need]
        train_parts.append(picked[:n_train])
        val_parts.append(picked[n_train:])
    train_idx = np.concatenate(train_parts)
    val_idx = np.concatenate(val_parts)
    return full.subset(train_idx), full.subset(val_idx)


def balance_with_synthetic(
    train: LabeledImageSet,
    decoder: MLP,
    gmm: GMMParams,
    rng: np.random.Generator,
) -> LabeledImageSet:
    """Top every class up to the majority count with decoded latent draws.

    Latents come from the per-class Gaussians, decoded images are clipped
    to [0, 1] and appended after the real block (class order).
    """
    counts = train.class_counts(gmm.class_count)
    height, width = train.image_shape
    if decoder.spec.output_dim != height * width:
        raise ShapeError(
            f"decoder emits {decoder.spec.output_dim} pixels, images have "
            f"{height * width}"
        )
    deficits = counts.max() - counts
    if deficits.sum() == 0:
        return train
    latents = sample_population(gmm, deficits, rng)
    decoded = np.clip(decoder.forward(latents.features), 0.0, 1.0)
    synth = LabeledImageSet(
        decoded.reshape(-1, height, width), latents.labels
    )
    return concat_sets([train, synth])
