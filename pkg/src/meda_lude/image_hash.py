"""Average hash over images and Hamming similarity between hashes.

The hash reduces an image to an 8x8 grid of area means, then thresholds
each cell against the grand mean of the 64 cells (ties count as set). The
bit grid is row-major. Because only comparisons against the grand mean
survive, the hash is invariant under positive affine pixel transforms.
"""

from __future__ import annotations

import numpy as np

from .errors import InputError, ShapeError

HASH_BITS = 64
_GRID = 8


def _to_gray(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        image = image.mean(axis=2)
    if image.ndim != 2:
        raise ShapeError(f"image must be HxW or HxWxC, got shape {image.shape}")
    if image.shape[0] < 1 or image.shape[1] < 1:
        raise ShapeError(f"image has an empty axis: shape {image.shape}")
    if not np.all(np.isfinite(image)):
        raise InputError("image contains non-finite values")
    return image


def _cell_bounds(size: int) -> list[tuple[int, int]]:
    # Equal-size cells; remainder pixels land in the last cell.
    base = size // _GRID
    bounds = [(i * base, (i + 1) * base) for i in range(_GRID - 1)]
    bounds.append(((_GRID - 1) * base, size))
    return bounds


def _pool_8x8(gray: np.ndarray) -> np.ndarray:
    for axis in (0, 1):
        if gray.shape[axis] < _GRID:
            reps = -(-_GRID // gray.shape[axis])
            gray = np.repeat(gray, reps, axis=axis)
    rows = _cell_bounds(gray.shape[0])
    cols = _cell_bounds(gray.shape[1])
    cells = np.empty((_GRID, _GRID), dtype=np.float64)
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            cells[i, j] = gray[r0:r1, c0:c1].mean()
    return cells


def average_hash(image: np.ndarray) -> np.ndarray:
    """64-bit average hash of an image as a (64,) boolean vector, row-major.

    Args:
        image: HxW grayscale or HxWxC array (channels are averaged), any
            finite value range, H and W at least 1.

    Returns:
        Boolean vector; bit set where the cell mean is >= the grand mean.
    """
    cells = _pool_8x8(_to_gray(image))
    return (cells >= cells.mean()).reshape(HASH_BITS)


def hash_batch(images: np.ndarray) -> np.ndarray:
    """Stack of :func:`average_hash` results for an (n, H, W[, C]) array."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim not in (3, 4):
        raise ShapeError(f"images must be (n, H, W[, C]), got shape {images.shape}")
    return np.stack([average_hash(img) for img in images], axis=0)


def hash_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """1 - hamming_distance/64 between two hash vectors; 1.0 means identical."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != (HASH_BITS,) or b.shape != (HASH_BITS,):
        raise ShapeError("hashes must be (64,) bit vectors")
    return 1.0 - np.count_nonzero(a ^ b) / HASH_BITS


def similarity_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise similarities between two hash stacks: (nA, nB) in [0, 1]."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != HASH_BITS or b.shape[1] != HASH_BITS:
        raise ShapeError("hash stacks must be (n, 64) bit matrices")
    differing = (a[:, None, :] ^ b[None, :, :]).sum(axis=2)
    return 1.0 - differing / HASH_BITS
