"""Diagonal Gaussian-mixture distribution over latent features, plus the
basic estimation-of-distribution loop used to evolve such distributions.

One Gaussian per class, diagonal covariance. Variances are stored as
log-values so gradient-based updates keep them positive; every place that
estimates or blends variances floors them at :data:`VAR_FLOOR` so later
divisions and logs stay finite even for single-member or constant
populations.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import (
    EmptyPopulationError,
    FitnessError,
    InputError,
    PersistError,
    ShapeError,
)

# Smallest admissible per-dimension variance.
VAR_FLOOR = 1e-8

# Log-space floor, nudged up so exp(LOG_VAR_FLOOR) >= VAR_FLOOR exactly.
LOG_VAR_FLOOR = math.log(VAR_FLOOR)
while math.exp(LOG_VAR_FLOOR) < VAR_FLOOR:
    LOG_VAR_FLOOR = math.nextafter(LOG_VAR_FLOOR, math.inf)

_GMM_MAGIC = b"MGMMD01\x00"


def _as_float_matrix(arr: np.ndarray, name: str) -> np.ndarray:
    out = np.asarray(arr, dtype=np.float64)
    if out.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {out.shape}")
    if not np.all(np.isfinite(out)):
        raise InputError(f"{name} contains non-finite values")
    return out


@dataclass
class GMMParams:
    """Per-class diagonal Gaussians: means and log-variances, both (K, h)."""

    means: np.ndarray
    log_variances: np.ndarray

    def __post_init__(self) -> None:
        self.means = _as_float_matrix(self.means, "means")
        self.log_variances = _as_float_matrix(self.log_variances, "log_variances")
        if self.means.shape != self.log_variances.shape:
            raise ShapeError(
                f"means shape {self.means.shape} != log_variances shape "
                f"{self.log_variances.shape}"
            )
        np.maximum(self.log_variances, LOG_VAR_FLOOR, out=self.log_variances)

    @property
    def class_count(self) -> int:
        return self.means.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.means.shape[1]

    def variances(self) -> np.ndarray:
        return np.exp(self.log_variances)

    def copy(self) -> "GMMParams":
        return GMMParams(self.means.copy(), self.log_variances.copy())

    def param_list(self) -> list[np.ndarray]:
        """Arrays in optimizer order; mutating them mutates the params."""
        return [self.means, self.log_variances]

    def clamp_variances(self) -> None:
        """Re-apply the variance floor after an in-place gradient update."""
        np.maximum(self.log_variances, LOG_VAR_FLOOR, out=self.log_variances)

    def class_gaussian(self, label: int) -> "ClassGaussian":
        if not 0 <= label < self.class_count:
            raise ShapeError(f"class {label} out of range for K={self.class_count}")
        return ClassGaussian(
            self.means[label].copy(), np.exp(self.log_variances[label])
        )


@dataclass
class ClassGaussian:
    """A single class's diagonal Gaussian: mean and variance vectors (h,)."""

    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.variance = np.asarray(self.variance, dtype=np.float64)
        if self.mean.ndim != 1 or self.mean.shape != self.variance.shape:
            raise ShapeError(
                f"mean shape {self.mean.shape} and variance shape "
                f"{self.variance.shape} must be equal 1-D"
            )
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.variance))):
            raise InputError("class gaussian contains non-finite values")
        self.variance = np.maximum(self.variance, VAR_FLOOR)


@dataclass
class LatentPopulation:
    """Latent feature rows with integer class labels."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ShapeError(f"features must be 2-D, got shape {self.features.shape}")
        if self.labels.ndim != 1 or self.labels.shape[0] != self.features.shape[0]:
            raise ShapeError(
                f"labels shape {self.labels.shape} does not match "
                f"{self.features.shape[0]} feature rows"
            )
        if not np.all(np.isfinite(self.features)):
            raise InputError("features contain non-finite values")
        if self.labels.size and self.labels.min() < 0:
            raise InputError("labels must be non-negative")

    def __len__(self) -> int:
        return self.features.shape[0]

    def take(self, indices: np.ndarray) -> "LatentPopulation":
        return LatentPopulation(self.features[indices], self.labels[indices])

    def class_members(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels == label)


def sample_population(
    gmm: GMMParams, counts: Sequence[int], rng: np.random.Generator
) -> LatentPopulation:
    """Draw ``counts[k]`` latents from class ``k``'s Gaussian, blocked by class.

    Args:
        gmm: distribution to sample from.
        counts: per-class sample counts, length ``gmm.class_count``.
        rng: source of randomness.

    Returns:
        Population with rows ordered class 0 block, class 1 block, ...

    Raises:
        EmptyPopulationError: if every count is zero.
        ShapeError: if ``counts`` has the wrong length or a negative entry.
    """
    counts = np.asarray(counts, dtype=np.int64)
    if counts.shape != (gmm.class_count,):
        raise ShapeError(
            f"counts must have length {gmm.class_count}, got shape {counts.shape}"
        )
    if counts.size and counts.min() < 0:
        raise ShapeError("counts must be non-negative")
    total = int(counts.sum())
    if total == 0:
        raise EmptyPopulationError("all per-class sample counts are zero")
    sigma = np.sqrt(gmm.variances())
    blocks = []
    labels = np.empty(total, dtype=np.int64)
    row = 0
    for k in range(gmm.class_count):
        c = int(counts[k])
        if c == 0:
            continue
        blocks.append(gmm.means[k] + sigma[k] * rng.standard_normal((c, gmm.latent_dim)))
        labels[row : row + c] = k
        row += c
    return LatentPopulation(np.concatenate(blocks, axis=0), labels)


def estimate_class_gaussian(features: np.ndarray) -> ClassGaussian:
    """Population mean/variance (divide by n) of the rows, variance floored.

    Raises:
        EmptyPopulationError: if ``features`` has no rows.
    """
    features = _as_float_matrix(features, "features")
    if features.shape[0] == 0:
        raise EmptyPopulationError("cannot estimate a gaussian from zero rows")
    mean = features.mean(axis=0)
    variance = features.var(axis=0)
    return ClassGaussian(mean, variance)


def blend_gaussian(
    new: ClassGaussian, old: ClassGaussian, gamma: float
) -> ClassGaussian:
    """Convex blend ``gamma * new + (1 - gamma) * old`` of means and variances."""
    if not 0.0 <= gamma <= 1.0:
        raise InputError(f"gamma must lie in [0, 1], got {gamma}")
    if new.mean.shape != old.mean.shape:
        raise ShapeError("blended gaussians must share dimensionality")
    mean = gamma * new.mean + (1.0 - gamma) * old.mean
    variance = gamma * new.variance + (1.0 - gamma) * old.variance
    return ClassGaussian(mean, variance)


def evolve_update(
    quali: ClassGaussian, diver: ClassGaussian, gamma: float
) -> ClassGaussian:
    """Blend the quality-pool Gaussian with the diversity-pool Gaussian;
    gamma weights the quality side."""
    return blend_gaussian(quali, diver, gamma)


def gmm_from_class_gaussians(gaussians: Sequence[ClassGaussian]) -> GMMParams:
    """Stack per-class Gaussians into mixture parameters."""
    if len(gaussians) == 0:
        raise EmptyPopulationError("need at least one class gaussian")
    means = np.stack([g.mean for g in gaussians], axis=0)
    log_variances = np.log(np.stack([g.variance for g in gaussians], axis=0))
    return GMMParams(means, log_variances)


def init_gmm(
    class_count: int,
    latent_dim: int,
    rng: np.random.Generator,
    mean_scale: float = 0.1,
) -> GMMParams:
    """Small random means, unit variances; the starting point for training."""
    if class_count < 1 or latent_dim < 1:
        raise ShapeError("class_count and latent_dim must be positive")
    means = mean_scale * rng.standard_normal((class_count, latent_dim))
    return GMMParams(means, np.zeros((class_count, latent_dim)))


def save_gmm(gmm: GMMParams, path: str) -> None:
    """Write magic, K, h, then row-major means and log-variances (LE float64)."""
    with open(path, "wb") as fh:
        fh.write(_GMM_MAGIC)
        fh.write(struct.pack("<II", gmm.class_count, gmm.latent_dim))
        fh.write(np.ascontiguousarray(gmm.means, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(gmm.log_variances, dtype="<f8").tobytes())


def load_gmm(path: str) -> GMMParams:
    """Inverse of :func:`save_gmm`.

    Raises:
        PersistError: on bad magic, truncation, or trailing bytes.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(_GMM_MAGIC)] != _GMM_MAGIC:
        raise PersistError(f"{path}: bad magic at offset 0")
    header_end = len(_GMM_MAGIC) + 8
    if len(blob) < header_end:
        raise PersistError(f"{path}: truncated header at offset {len(blob)}")
    class_count, latent_dim = struct.unpack(
        "<II", blob[len(_GMM_MAGIC) : header_end]
    )
    if class_count == 0 or latent_dim == 0:
        raise PersistError(f"{path}: zero class_count or latent_dim in header")
    block = class_count * latent_dim * 8
    expected = header_end + 2 * block
    if len(blob) != expected:
        raise PersistError(
            f"{path}: expected {expected} bytes, found {len(blob)}"
        )
    means = np.frombuffer(
        blob, dtype="<f8", count=class_count * latent_dim, offset=header_end
    ).reshape(class_count, latent_dim)
    log_variances = np.frombuffer(
        blob, dtype="<f8", count=class_count * latent_dim, offset=header_end + block
    ).reshape(class_count, latent_dim)
    return GMMParams(means.copy(), log_variances.copy())


@dataclass
class BasicEDAConfig:
    """Settings for :func:`run_basic_eda`.

    ``eta`` is the truncation fraction (top ``floor(eta * pop_size)`` kept,
    at least one) and ``gamma`` weights the selected set against the full
    population when the sampling distribution is re-estimated.
    """

    dims: int
    pop_size: int = 100
    eta: float = 0.5
    gamma: float = 0.7
    iterations: int = 10
    init_lo: float = -1.0
    init_hi: float = 1.0

    def __post_init__(self) -> None:
        if self.dims < 1:
            raise InputError("dims must be positive")
        if self.pop_size < 1:
            raise InputError("pop_size must be positive")
        if not 0.0 < self.eta <= 1.0:
            raise InputError(f"eta must lie in (0, 1], got {self.eta}")
        if truncation_count(self.pop_size, self.eta) < 1:
            raise InputError("eta * pop_size selects no individuals")
        if not 0.0 <= self.gamma <= 1.0:
            raise InputError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.iterations < 1:
            raise InputError("iterations must be positive")
        if not self.init_lo < self.init_hi:
            raise InputError("init_lo must be strictly below init_hi")


def truncation_count(pop_size: int, eta: float) -> int:
    """Number of survivors under truncation fraction ``eta``: at least one."""
    return max(1, int(math.floor(eta * pop_size + 1e-12)))


def select_superior(fitness: np.ndarray, eta: float) -> np.ndarray:
    """Indices of the top ``floor(eta * n)`` individuals by descending fitness.

    Ties break toward the lower index (stable sort).
    """
    fitness = np.asarray(fitness, dtype=np.float64)
    if fitness.ndim != 1 or fitness.size == 0:
        raise ShapeError("fitness must be a non-empty vector")
    order = np.argsort(-fitness, kind="stable")
    return order[: truncation_count(fitness.size, eta)]


@dataclass
class EDAHistoryRecord:
    iteration: int
    mean_fitness: float
    best_fitness: float


def _check_fitness(values: np.ndarray, pop: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (pop.shape[0],):
        raise ShapeError(
            f"fitness function returned shape {values.shape} for "
            f"{pop.shape[0]} individuals"
        )
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        i = int(bad[0])
        raise FitnessError(
            f"non-finite fitness {values[i]} for individual {pop[i].tolist()}"
        )
    return values


def run_basic_eda(
    fitness_fn: Callable[[np.ndarray], np.ndarray],
    cfg: BasicEDAConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, float, list[EDAHistoryRecord]]:
    """Gaussian estimation-of-distribution maximization loop.

    Each iteration: evaluate the population, keep the top ``eta`` fraction,
    blend the survivors' per-dimension mean/variance with the full
    population's at weight ``gamma``, and resample. The best individual ever
    seen is tracked across iterations.

    Args:
        fitness_fn: maps a (N, dims) population to (N,) fitnesses (larger is
            better).
        cfg: loop settings.
        rng: source of randomness.

    Returns:
        (best_x, best_fitness, history) where history holds one record per
        iteration with that generation's mean and the running best.
    """
    pop = rng.uniform(cfg.init_lo, cfg.init_hi, size=(cfg.pop_size, cfg.dims))
    best_x = pop[0].copy()
    best_f = -np.inf
    history: list[EDAHistoryRecord] = []
    for iteration in range(cfg.iterations):
        fitness = _check_fitness(fitness_fn(pop), pop)
        gen_best = int(np.argmax(fitness))
        if fitness[gen_best] > best_f:
            best_f = float(fitness[gen_best])
            best_x = pop[gen_best].copy()
        history.append(
            EDAHistoryRecord(iteration, float(fitness.mean()), best_f)
        )
        if iteration == cfg.iterations - 1:
            break
        survivors = pop[select_superior(fitness, cfg.eta)]
        blended = blend_gaussian(
            ClassGaussian(survivors.mean(axis=0), survivors.var(axis=0)),
            ClassGaussian(pop.mean(axis=0), pop.var(axis=0)),
            cfg.gamma,
        )
        pop = blended.mean + np.sqrt(blended.variance) * rng.standard_normal(
            (cfg.pop_size, cfg.dims)
        )
    return best_x, best_f, history
