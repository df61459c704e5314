import numpy as np
import pytest

from meda_lude.errors import InputError, ShapeError
from meda_lude.image_hash import (
    average_hash,
    hash_batch,
    hash_similarity,
    similarity_matrix,
)


def oracle_hash(image: np.ndarray) -> np.ndarray:
    """Independent re-derivation for H, W >= 8: explicit cell loops,
    remainder pixels folded into the last cell."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=2)
    h, w = img.shape
    bh, bw = h // 8, w // 8
    cells = np.zeros((8, 8))
    for i in range(8):
        for j in range(8):
            r1 = (i + 1) * bh if i < 7 else h
            c1 = (j + 1) * bw if j < 7 else w
            cells[i, j] = img[i * bh : r1, j * bw : c1].mean()
    return (cells >= cells.mean()).reshape(64)


def test_8x8_identity_oracle():
    # On an 8x8 image every cell is one pixel: bit = pixel >= image mean.
    rng = np.random.default_rng(0)
    for _ in range(20):
        img = rng.random((8, 8))
        expected = (img >= img.mean()).reshape(64)
        np.testing.assert_array_equal(average_hash(img), expected)


def test_matches_loop_oracle_on_varied_sizes():
    rng = np.random.default_rng(1)
    for _ in range(50):
        h = int(rng.integers(8, 40))
        w = int(rng.integers(8, 40))
        img = rng.random((h, w))
        np.testing.assert_array_equal(average_hash(img), oracle_hash(img))


def test_channel_averaging():
    rng = np.random.default_rng(2)
    img = rng.random((16, 16, 3))
    np.testing.assert_array_equal(average_hash(img), average_hash(img.mean(axis=2)))


def test_affine_invariance_bit_equality():
    rng = np.random.default_rng(3)
    for _ in range(200):
        img = rng.random((int(rng.integers(8, 33)), int(rng.integers(8, 33))))
        alpha = float(rng.uniform(0.1, 3.0))
        beta = float(rng.uniform(-2.0, 2.0))
        np.testing.assert_array_equal(
            average_hash(img), average_hash(alpha * img + beta)
        )


def test_duplication_invariance_on_multiple_of_8_sizes():
    rng = np.random.default_rng(4)
    for _ in range(100):
        h = 8 * int(rng.integers(1, 5))
        w = 8 * int(rng.integers(1, 5))
        img = rng.random((h, w))
        doubled = np.repeat(np.repeat(img, 2, axis=0), 2, axis=1)
        np.testing.assert_array_equal(average_hash(img), average_hash(doubled))


def test_tiny_images_hash_like_their_upscale():
    rng = np.random.default_rng(5)
    img = rng.random((4, 4))
    np.testing.assert_array_equal(
        average_hash(img),
        average_hash(np.repeat(np.repeat(img, 2, axis=0), 2, axis=1)),
    )
    assert average_hash(np.array([[1.0]])).all()


def test_constant_image_all_bits_set():
    assert average_hash(np.full((16, 16), 0.25)).all()


def test_similarity_identity_symmetry_bounds():
    rng = np.random.default_rng(6)
    a = average_hash(rng.random((16, 16)))
    b = average_hash(rng.random((16, 16)))
    assert hash_similarity(a, a) == 1.0
    assert hash_similarity(a, b) == hash_similarity(b, a)
    assert 0.0 <= hash_similarity(a, b) <= 1.0
    flipped = a.copy()
    flipped[17] = ~flipped[17]
    assert hash_similarity(a, flipped) == 1.0 - 1.0 / 64.0


def test_similarity_matrix_matches_pairwise_calls():
    rng = np.random.default_rng(7)
    imgs_a = rng.random((5, 12, 12))
    imgs_b = rng.random((3, 12, 12))
    ha, hb = hash_batch(imgs_a), hash_batch(imgs_b)
    mat = similarity_matrix(ha, hb)
    assert mat.shape == (5, 3)
    for i in range(5):
        for j in range(3):
            assert mat[i, j] == hash_similarity(ha[i], hb[j])


def test_input_validation():
    with pytest.raises(InputError):
        average_hash(np.full((8, 8), np.nan))
    with pytest.raises(ShapeError):
        average_hash(np.zeros(8))
    with pytest.raises(ShapeError):
        average_hash(np.zeros((0, 8)))
    with pytest.raises(ShapeError):
        hash_similarity(np.zeros(64, dtype=bool), np.zeros(32, dtype=bool))
