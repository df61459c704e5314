"""Classical oversampling baselines on flattened pixels: random
oversampling, SMOTE interpolation, and ADASYN difficulty-weighted
budgets. All three top every class up to the majority count and append
synthetic rows after the real block, in class order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DataError, InputError
from .datasets import LabeledImageSet, concat_sets

logger = logging.getLogger(__name__)


@dataclass
class SamplerConfig:
    """Neighborhood size and seed shared by the interpolating samplers."""

    k_neighbors: int = 5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.k_neighbors < 1:
            raise InputError(f"k_neighbors must be >= 1, got {self.k_neighbors}")


def _deficits(train: LabeledImageSet) -> np.ndarray:
    if len(train) == 0:
        raise DataError("train set is empty")
    counts = train.class_counts()
    return counts.max() - counts


def _as_images(flat_rows: list[np.ndarray], shape: tuple[int, int]) -> np.ndarray:
    return np.asarray(flat_rows).reshape(-1, shape[0], shape[1])


def ros(train: LabeledImageSet, seed: int = 0) -> LabeledImageSet:
    """Random oversampling: duplicate uniformly chosen class members."""
    deficits = _deficits(train)
    if deficits.sum() == 0:
        return train
    rng = np.random.default_rng(seed)
    new_images = []
    new_labels = []
    for k, deficit in enumerate(deficits):
        if deficit == 0:
            continue
        members = train.class_members(k)
        if members.size == 0:
            raise DataError(f"class {k} has no samples to duplicate")
        picks = members[rng.integers(0, members.size, size=int(deficit))]
        new_images.append(train.images[picks])
        new_labels.append(np.full(int(deficit), k, dtype=np.int64))
    synth = LabeledImageSet(
        np.concatenate(new_images, axis=0), np.concatenate(new_labels)
    )
    return concat_sets([train, synth])


def _nearest(
    queries: np.ndarray,
    pool: np.ndarray,
    k: int,
    self_index: np.ndarray | None = None,
    chunk: int = 256,
) -> np.ndarray:
    """Indices of each query's k nearest pool rows by squared Euclidean
    distance, ties broken toward the lower index. ``self_index[i]`` names a
    pool row to exclude from query i's neighborhood (the query itself).
    Chunked to bound memory."""
    pool_sq = (pool * pool).sum(axis=1)
    out = np.empty((queries.shape[0], k), dtype=np.int64)
    for start in range(0, queries.shape[0], chunk):
        q = queries[start : start + chunk]
        d = (q * q).sum(axis=1)[:, None] + pool_sq[None, :] - 2.0 * q @ pool.T
        if self_index is not None:
            rows = np.arange(q.shape[0])
            d[rows, self_index[start : start + q.shape[0]]] = np.inf
        out[start : start + chunk] = np.argsort(d, axis=1, kind="stable")[:, :k]
    return out


def _class_neighbors(flat: np.ndarray, k_eff: int) -> np.ndarray:
    """Each row's k nearest same-set rows, self excluded."""
    return _nearest(flat, flat, k_eff, self_index=np.arange(flat.shape[0]))


def _interpolated_rows(
    flat: np.ndarray,
    neighbors: np.ndarray,
    base_draws: np.ndarray,
    rng: np.random.Generator,
) -> list[np.ndarray]:
    rows = []
    for i in base_draws:
        nn = neighbors[i][rng.integers(0, neighbors.shape[1])]
        u = rng.random()
        rows.append(flat[i] + u * (flat[nn] - flat[i]))
    return rows


def smote(train: LabeledImageSet, cfg: SamplerConfig) -> LabeledImageSet:
    """SMOTE: synthesize ``x + u * (x_nn - x)`` between same-class neighbors.

    Classes smaller than ``k_neighbors + 1`` cannot fill a neighborhood and
    fall back to duplication for that class (logged).
    """
    deficits = _deficits(train)
    if deficits.sum() == 0:
        return train
    rng = np.random.default_rng(cfg.seed)
    shape = train.image_shape
    new_images = []
    new_labels = []
    for k, deficit in enumerate(deficits):
        if deficit == 0:
            continue
        members = train.class_members(k)
        if members.size == 0:
            raise DataError(f"class {k} has no samples to oversample")
        deficit = int(deficit)
        if members.size < cfg.k_neighbors + 1:
            logger.warning(
                "class %d has %d members, fewer than k+1=%d; duplicating",
                k, members.size, cfg.k_neighbors + 1,
            )
            picks = members[rng.integers(0, members.size, size=deficit)]
            new_images.append(train.images[picks])
        else:
            flat = train.flat()[members]
            neighbors = _class_neighbors(flat, cfg.k_neighbors)
            base = rng.integers(0, members.size, size=deficit)
            rows = _interpolated_rows(flat, neighbors, base, rng)
            new_images.append(_as_images(rows, shape))
        new_labels.append(np.full(deficit, k, dtype=np.int64))
    synth = LabeledImageSet(
        np.concatenate(new_images, axis=0), np.concatenate(new_labels)
    )
    return concat_sets([train, synth])


def _apportion(weights: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder apportionment of ``total`` by normalized weights;
    remainder ties go to the lower index."""
    quotas = weights / weights.sum() * total
    base = np.floor(quotas).astype(np.int64)
    remaining = total - int(base.sum())
    if remaining > 0:
        order = np.argsort(-(quotas - base), kind="stable")
        base[order[:remaining]] += 1
    return base


def adasyn_budgets(
    train: LabeledImageSet, cfg: SamplerConfig
) -> dict[int, np.ndarray]:
    """Per-member synthesis budgets for every class below the majority count.

    A member's difficulty is the fraction of its ``k`` nearest neighbors in
    the whole train set (self excluded) that belong to a majority class (a
    class at the maximum count); the class deficit is apportioned over
    members by largest remainder of the normalized difficulties. When every
    member of a class has zero difficulty the budget falls back to uniform
    apportionment (logged).

    Returns:
        {class: budgets} with budgets aligned to ``train.class_members``
        order and summing to the class deficit.
    """
    deficits = _deficits(train)
    counts = train.class_counts()
    majority_classes = np.flatnonzero(counts == counts.max())
    flat_all = train.flat()
    k_global = min(cfg.k_neighbors, len(train) - 1)
    majority_mask = np.isin(train.labels, majority_classes)
    out: dict[int, np.ndarray] = {}
    for k, deficit in enumerate(deficits):
        if deficit == 0:
            continue
        members = train.class_members(k)
        if members.size == 0:
            raise DataError(f"class {k} has no samples to oversample")
        nearest = _nearest(flat_all[members], flat_all, k_global, self_index=members)
        difficulty = majority_mask[nearest].mean(axis=1)
        if difficulty.sum() == 0.0:
            logger.warning("class %d: all difficulties zero, uniform budgets", k)
            difficulty = np.ones(members.size)
        out[k] = _apportion(difficulty, int(deficit))
    return out


def adasyn(train: LabeledImageSet, cfg: SamplerConfig) -> LabeledImageSet:
    """ADASYN: per-member budgets proportional to local difficulty.

    Budgets come from :func:`adasyn_budgets`; generation interpolates
    between same-class neighbors, like SMOTE, with duplication for classes
    too small to interpolate.
    """
    deficits = _deficits(train)
    if deficits.sum() == 0:
        return train
    budgets_by_class = adasyn_budgets(train, cfg)
    rng = np.random.default_rng(cfg.seed)
    shape = train.image_shape
    new_images = []
    new_labels = []
    for k, budgets in budgets_by_class.items():
        members = train.class_members(k)
        deficit = int(budgets.sum())
        if members.size >= 2:
            flat = train.flat()[members]
            k_eff = min(cfg.k_neighbors, members.size - 1)
            neighbors = _class_neighbors(flat, k_eff)
            base = np.repeat(np.arange(members.size), budgets)
            rows = _interpolated_rows(flat, neighbors, base, rng)
            new_images.append(_as_images(rows, shape))
        else:
            logger.warning("class %d has one member; duplicating", k)
            new_images.append(np.repeat(train.images[members], deficit, axis=0))
        new_labels.append(np.full(deficit, k, dtype=np.int64))
    synth = LabeledImageSet(
        np.concatenate(new_images, axis=0), np.concatenate(new_labels)
    )
    return concat_sets([train, synth])
