import numpy as np
import pytest

from meda_lude.baselines import (
    SamplerConfig,
    _apportion,
    _nearest,
    adasyn,
    adasyn_budgets,
    ros,
    smote,
)
from meda_lude.datasets import LabeledImageSet
from meda_lude.errors import InputError


def line_set(values_32nds, labels):
    """1-pixel images on a 1/32 grid: exact float distances, easy oracles."""
    images = np.asarray(values_32nds, dtype=np.float64)[:, None, None] / 32.0
    return LabeledImageSet(images, np.asarray(labels))


def test_ros_balances_with_exact_duplicates():
    data = line_set([1, 2, 3, 4, 5, 10, 11], [0, 0, 0, 0, 0, 1, 1])
    out = ros(data, seed=3)
    np.testing.assert_array_equal(out.class_counts(2), [5, 5])
    # Real rows first, untouched.
    np.testing.assert_array_equal(out.images[:7], data.images)
    for img in out.images[7:]:
        assert any(np.array_equal(img, d) for d in data.images[5:])
    again = ros(data, seed=3)
    np.testing.assert_array_equal(out.images, again.images)
    assert not np.array_equal(out.images, ros(data, seed=4).images)


def test_ros_noop_when_balanced():
    data = line_set([1, 2, 10, 11], [0, 0, 1, 1])
    assert ros(data) is data


def test_nearest_tie_breaks_toward_lower_index():
    pool = np.array([[0.0], [1.0], [2.0]])
    got = _nearest(np.array([[1.0]]), pool, k=2, self_index=np.array([1]))
    np.testing.assert_array_equal(got, [[0, 2]])


def test_smote_synthetics_lie_on_neighbor_segments():
    # Minority at 4, 5, 7 (32nds). 1-NN map: 4 -> 5, 5 -> 4, 7 -> 5, so every
    # synthetic pixel sits inside [4/32, 7/32].
    data = line_set(
        [20, 21, 22, 23, 24, 4, 5, 7], [0, 0, 0, 0, 0, 1, 1, 1]
    )
    out = smote(data, SamplerConfig(k_neighbors=1, seed=0))
    np.testing.assert_array_equal(out.class_counts(2), [5, 5])
    synth = out.images[8:].reshape(-1)
    assert synth.size == 2
    assert np.all(synth >= 4 / 32) and np.all(synth <= 7 / 32)
    # Values from base 7 can only move toward 5: nothing lands above 7/32,
    # and anything above 5/32 must sit on the [5, 7] segment.
    for v in synth:
        assert 4 / 32 <= v <= 5 / 32 or 5 / 32 <= v <= 7 / 32


def test_smote_interpolates_exactly_in_2d():
    # Two minority points: each one's only neighbor is the other, so every
    # synthetic must satisfy s = a + u * (b - a) with one shared u in [0, 1).
    a, b = np.array([0.1, 0.3]), np.array([0.5, 0.7])
    images = np.zeros((6, 1, 2))
    images[:4, 0, :] = [[0.9, 0.9], [0.9, 0.8], [0.8, 0.9], [0.8, 0.8]]
    images[4, 0, :] = a
    images[5, 0, :] = b
    data = LabeledImageSet(images, np.array([0, 0, 0, 0, 1, 1]))
    out = smote(data, SamplerConfig(k_neighbors=1, seed=5))
    for row in out.images[6:].reshape(-1, 2):
        u = (row[0] - a[0]) / (b[0] - a[0])
        v = (row[1] - a[1]) / (b[1] - a[1])
        np.testing.assert_allclose(u, v, atol=1e-12)
        assert -1e-12 <= u < 1.0 + 1e-12


def test_smote_small_class_falls_back_to_duplication(caplog):
    data = line_set([20, 21, 22, 23, 24, 4, 5, 7], [0, 0, 0, 0, 0, 1, 1, 1])
    with caplog.at_level("WARNING", logger="meda_lude.baselines"):
        out = smote(data, SamplerConfig(k_neighbors=5, seed=0))
    assert any("fewer than" in r.message for r in caplog.records)
    for img in out.images[8:]:
        assert any(np.array_equal(img, d) for d in data.images[5:])


def test_apportion_largest_remainder():
    np.testing.assert_array_equal(
        _apportion(np.array([1.0, 2 / 3, 1 / 3, 1 / 3]), 4), [2, 1, 1, 0]
    )
    np.testing.assert_array_equal(_apportion(np.array([1.0, 1.0]), 3), [2, 1])
    np.testing.assert_array_equal(
        _apportion(np.array([0.5, 0.25, 0.25]), 4), [2, 1, 1]
    )
    assert _apportion(np.array([1.0, 1.0, 1.0]), 7).sum() == 7


def test_adasyn_budgets_hand_computed_12_points():
    # Majority (class 0) at 4, 6, 8, 10, 22, 24, 26, 28; minority (class 1)
    # at 7, 12, 15, 17 (all 32nds), k = 3.
    # Difficulties: 7 -> {6, 8, 4} all majority -> 1; 12 -> {10, 15, 8} ->
    # 2/3; 15 -> {17, 12, 10} -> 1/3; 17 -> {15, 22, 12} -> 1/3.
    # Deficit 4, shares [3/7, 2/7, 1/7, 1/7] -> quotas [12/7, 8/7, 4/7, 4/7]
    # -> floors [1, 1, 0, 0], remainders give 7 then the 15 (lower index).
    data = line_set(
        [4, 6, 8, 10, 22, 24, 26, 28, 7, 12, 15, 17],
        [0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1],
    )
    budgets = adasyn_budgets(data, SamplerConfig(k_neighbors=3))
    assert list(budgets) == [1]
    np.testing.assert_array_equal(budgets[1], [2, 1, 1, 0])


def test_adasyn_balances_and_respects_budgets():
    data = line_set(
        [4, 6, 8, 10, 22, 24, 26, 28, 7, 12, 15, 17],
        [0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1],
    )
    out = adasyn(data, SamplerConfig(k_neighbors=3, seed=2))
    np.testing.assert_array_equal(out.class_counts(2), [8, 8])
    np.testing.assert_array_equal(out.images[:12], data.images)
    assert np.array_equal(out.images, adasyn(data, SamplerConfig(3, 2)).images)


def test_adasyn_uniform_fallback_when_no_difficulty(caplog):
    # Minority cluster far from the majority: every neighborhood is pure
    # minority, so difficulties are all zero.
    data = line_set(
        [2, 3, 4, 5, 6, 7, 8, 9, 26, 27, 28, 29],
        [0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1],
    )
    with caplog.at_level("WARNING", logger="meda_lude.baselines"):
        budgets = adasyn_budgets(data, SamplerConfig(k_neighbors=3))
    assert any("uniform" in r.message for r in caplog.records)
    np.testing.assert_array_equal(budgets[1], [1, 1, 1, 1])


def test_sampler_config_validation():
    with pytest.raises(InputError):
        SamplerConfig(k_neighbors=0)
