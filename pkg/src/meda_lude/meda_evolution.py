"""Evolutionary refinement of the latent mixture, and the full training
driver.

Each evolution iteration samples a per-class latent population from the
current mixture, keeps the members the latent classifier gets right,
decodes the survivors, keeps the images the image classifier gets right,
scores each surviving image by its mean hash similarity against a real
same-class reference batch, keeps the lowest-similarity fraction, and
blends the quality pool's per-class Gaussian with the selected pool's at
weight gamma. An iteration whose survivor pool empties out is logged and
skipped; evolution never aborts.

The driver runs phase 1 once, snapshots the mixture, then loops phases
2, 3 and evolution for a configured number of outer rounds; evolution
always restarts from the phase-1 snapshot so each round refines the same
anchor rather than compounding drift.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .datasets import LabeledImageSet
from .errors import DataError, EmptySurvivorsError, InputError
from .gm_distribution import (
    GMMParams,
    LatentPopulation,
    estimate_class_gaussian,
    evolve_update,
    init_gmm,
    save_gmm,
)
from .image_hash import hash_batch, similarity_matrix
from .lgm_loss import LGMConfig
from .networks import MLP, ModelQuartet, save_quartet
from .training_phases import (
    LossTrace,
    PhaseWeights,
    QuartetOptimizers,
    TrainConfig,
    run_phase,
    sample_finite,
)

logger = logging.getLogger(__name__)


@dataclass
class EvolutionConfig:
    """Population size, selection pressure and blending for the evolution
    loop, plus the outer-round count of the full driver."""

    pop_per_class: int = 64
    selection_rate: float = 0.5
    blend: float = 0.7
    max_iterations: int = 10
    real_batch_per_class: int = 16
    outer_iterations: int = 2

    def __post_init__(self) -> None:
        if self.pop_per_class < 1:
            raise InputError(f"pop_per_class must be >= 1, got {self.pop_per_class}")
        if not 0.0 < self.selection_rate <= 1.0:
            raise InputError(
                f"selection_rate must lie in (0, 1], got {self.selection_rate}"
            )
        if not 0.0 <= self.blend <= 1.0:
            raise InputError(f"blend must lie in [0, 1], got {self.blend}")
        if self.max_iterations < 1:
            raise InputError(
                f"max_iterations must be >= 1, got {self.max_iterations}"
            )
        if self.real_batch_per_class < 1:
            raise InputError(
                f"real_batch_per_class must be >= 1, got {self.real_batch_per_class}"
            )
        if self.outer_iterations < 1:
            raise InputError(
                f"outer_iterations must be >= 1, got {self.outer_iterations}"
            )


@dataclass
class EvolutionIterationRecord:
    """Pool sizes and fitness summaries for one evolution iteration.

    Stages an iteration never reached keep zero counts and NaN fitness.
    """

    outer: int
    iteration: int
    sampled: int
    latent_survivors: int
    image_survivors: int
    selected: int
    latent_survival: float
    image_survival: float
    mean_fitness_quali: float
    mean_fitness_selected: float
    class_counts: tuple[int, ...]


@dataclass
class EvolutionTrace:
    """Evolution diagnostics, exportable as CSV (one row per iteration)."""

    class_count: int
    records: list[EvolutionIterationRecord] = field(default_factory=list)

    def to_csv(self, path: str, config_hash: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if config_hash is not None:
                fh.write(f"# config_hash={config_hash}\n")
            writer = csv.writer(fh)
            writer.writerow(
                [
                    "outer", "iteration", "sampled", "latent_survivors",
                    "image_survivors", "selected", "latent_survival",
                    "image_survival", "mean_fitness_quali",
                    "mean_fitness_selected",
                ]
                + [f"count_{k}" for k in range(self.class_count)]
            )
            for r in self.records:
                writer.writerow(
                    [
                        r.outer, r.iteration, r.sampled, r.latent_survivors,
                        r.image_survivors, r.selected,
                        repr(r.latent_survival), repr(r.image_survival),
                        repr(r.mean_fitness_quali),
                        repr(r.mean_fitness_selected),
                    ]
                    + list(r.class_counts)
                )


def _correct_indices(
    classifier: MLP, inputs: np.ndarray, labels: np.ndarray
) -> np.ndarray:
    """Row indices whose classifier argmax (lowest index on ties) matches
    the label."""
    logits = classifier.forward(inputs)
    predictions = np.argmax(logits, axis=1)
    return np.flatnonzero(predictions == labels)


def quality_filter_latents(
    pop: LatentPopulation, models: ModelQuartet
) -> LatentPopulation:
    """Keep the latents the latent classifier assigns to their sampling
    label, order preserved.

    Raises:
        EmptySurvivorsError: if nothing survives.
    """
    idx = _correct_indices(models.latent_classifier, pop.features, pop.labels)
    if idx.size == 0:
        raise EmptySurvivorsError("latent classifier rejected every sample")
    return pop.take(idx)


def quality_filter_images(
    images: LabeledImageSet, models: ModelQuartet
) -> LabeledImageSet:
    """Keep the images the image classifier assigns to their label, order
    preserved.

    Raises:
        EmptySurvivorsError: if nothing survives.
    """
    idx = _correct_indices(models.image_classifier, images.flat(), images.labels)
    if idx.size == 0:
        raise EmptySurvivorsError("image classifier rejected every sample")
    return images.subset(idx)


def decode_latents(
    decoder: MLP, pop: LatentPopulation, image_shape: tuple[int, int]
) -> LabeledImageSet:
    """Decode latent features into a labeled image set, clipped to [0, 1]."""
    height, width = image_shape
    flat = decoder.forward(pop.features)
    if flat.shape[1] != height * width:
        raise DataError(
            f"decoder emits {flat.shape[1]} values per image, expected "
            f"{height * width}"
        )
    images = np.clip(flat, 0.0, 1.0).reshape(-1, height, width)
    return LabeledImageSet(images, pop.labels)


def reference_batch(
    real: LabeledImageSet, per_class: int, rng: np.random.Generator
) -> LabeledImageSet:
    """Up to ``per_class`` images per class, drawn without replacement."""
    if per_class < 1:
        raise InputError(f"per_class must be >= 1, got {per_class}")
    picks = []
    for label in np.unique(real.labels):
        members = real.class_members(int(label))
        take = min(per_class, members.size)
        picks.append(np.sort(rng.choice(members, size=take, replace=False)))
    return real.subset(np.concatenate(picks))


def similarity_fitness(
    quali: LabeledImageSet, reference: LabeledImageSet
) -> np.ndarray:
    """Per-image fitness: mean hash similarity against the image's class
    reference batch. Lower is better (more diverse).

    Raises:
        DataError: if a class in ``quali`` has no reference images.
    """
    fitness = np.empty(len(quali), dtype=np.float64)
    quali_hashes = hash_batch(quali.images)
    for label in np.unique(quali.labels):
        ref_rows = reference.class_members(int(label))
        if ref_rows.size == 0:
            raise DataError(f"reference batch has no images of class {label}")
        ref_hashes = hash_batch(reference.images[ref_rows])
        rows = quali.class_members(int(label))
        sims = similarity_matrix(quali_hashes[rows], ref_hashes)
        fitness[rows] = sims.mean(axis=1)
    return fitness


def diversity_select_indices(
    quali: LabeledImageSet,
    reference: LabeledImageSet,
    selection_rate: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the per-class lowest-fitness members, plus all fitness.

    Per class, members are sorted by ascending fitness (original index
    breaks ties) and the first ceil(selection_rate * count) survive. The
    returned index array concatenates classes in ascending label order,
    each block in fitness-ascending order.
    """
    if not 0.0 < selection_rate <= 1.0:
        raise InputError(
            f"selection_rate must lie in (0, 1], got {selection_rate}"
        )
    fitness = similarity_fitness(quali, reference)
    blocks = []
    for label in np.unique(quali.labels):
        rows = quali.class_members(int(label))
        order = rows[np.argsort(fitness[rows], kind="stable")]
        keep = math.ceil(selection_rate * rows.size)
        blocks.append(order[:keep])
    return np.concatenate(blocks), fitness


def diversity_select(
    quali: LabeledImageSet,
    reference: LabeledImageSet,
    selection_rate: float,
) -> LabeledImageSet:
    """The per-class lowest-similarity fraction of the quality survivors."""
    idx, _ = diversity_select_indices(quali, reference, selection_rate)
    return quali.subset(idx)


def evolve_distribution(
    gm2: LatentPopulation,
    spop: LatentPopulation,
    prev: GMMParams,
    gamma: float,
) -> GMMParams:
    """Blend per-class Gaussians of the quality pool and the selected pool.

    Classes empty in either pool keep their row from ``prev``; the result
    always satisfies the variance floor.
    """
    if not 0.0 <= gamma <= 1.0:
        raise InputError(f"gamma must lie in [0, 1], got {gamma}")
    means = prev.means.copy()
    log_variances = prev.log_variances.copy()
    for label in range(prev.class_count):
        rows2 = gm2.class_members(label)
        rows_s = spop.class_members(label)
        if rows2.size == 0 or rows_s.size == 0:
            continue
        quali = estimate_class_gaussian(gm2.features[rows2])
        diver = estimate_class_gaussian(spop.features[rows_s])
        blended = evolve_update(quali, diver, gamma)
        means[label] = blended.mean
        log_variances[label] = np.log(blended.variance)
    return GMMParams(means, log_variances)


def run_meda(
    models: ModelQuartet,
    init: GMMParams,
    real: LabeledImageSet,
    cfg: EvolutionConfig,
    rng: np.random.Generator,
    trace: EvolutionTrace | None = None,
    outer: int = 0,
    start_iteration: int = 0,
) -> tuple[GMMParams, EvolutionTrace]:
    """Evolve the latent mixture for ``cfg.max_iterations`` iterations.

    The real reference batch for fitness is drawn once up front, so
    fitness stays comparable across iterations. An iteration whose
    survivor pool empties at any stage reuses the previous distribution
    and is logged; the returned mixture is the last accepted update (the
    initial one if every iteration emptied).
    """
    if trace is None:
        trace = EvolutionTrace(class_count=init.class_count)
    current = init.copy()
    reference = reference_batch(real, cfg.real_batch_per_class, rng)
    counts = np.full(init.class_count, cfg.pop_per_class, dtype=np.int64)
    for it in range(start_iteration, start_iteration + cfg.max_iterations):
        feat4 = sample_finite(current, counts, rng, "evolution")
        latent_survivors = 0
        image_survivors = 0
        selected = 0
        mean_quali = math.nan
        mean_selected = math.nan
        class_counts = (0,) * init.class_count
        try:
            gm1 = quality_filter_latents(feat4, models)
            latent_survivors = len(gm1)
            decoded = decode_latents(models.decoder, gm1, real.image_shape)
            idx2 = _correct_indices(
                models.image_classifier, decoded.flat(), decoded.labels
            )
            if idx2.size == 0:
                raise EmptySurvivorsError(
                    "image classifier rejected every decoded sample"
                )
            gm2 = gm1.take(idx2)
            gm2_images = decoded.subset(idx2)
            image_survivors = len(gm2)
            sel_idx, fitness = diversity_select_indices(
                gm2_images, reference, cfg.selection_rate
            )
            spop = gm2.take(sel_idx)
            selected = len(spop)
            mean_quali = float(fitness.mean())
            mean_selected = float(fitness[sel_idx].mean())
            class_counts = tuple(
                int(spop.class_members(k).size) for k in range(init.class_count)
            )
            current = evolve_distribution(gm2, spop, current, cfg.blend)
        except EmptySurvivorsError as exc:
            logger.warning(
                "evolution iteration %d kept the previous distribution: %s",
                it, exc,
            )
        trace.records.append(
            EvolutionIterationRecord(
                outer=outer,
                iteration=it,
                sampled=len(feat4),
                latent_survivors=latent_survivors,
                image_survivors=image_survivors,
                selected=selected,
                latent_survival=latent_survivors / len(feat4),
                image_survival=(
                    image_survivors / latent_survivors if latent_survivors else 0.0
                ),
                mean_fitness_quali=mean_quali,
                mean_fitness_selected=mean_selected,
                class_counts=class_counts,
            )
        )
    return current, trace


@dataclass
class TrainingResult:
    """Everything the full driver produces."""

    models: ModelQuartet
    gmm_init: GMMParams
    gmm_opti: GMMParams
    loss_trace: LossTrace
    evolution_trace: EvolutionTrace


def run_full_training(
    train: LabeledImageSet,
    minority_classes: Sequence[int],
    models: ModelQuartet,
    weights: PhaseWeights,
    lgm_cfg: LGMConfig,
    train_cfgs: tuple[TrainConfig, TrainConfig, TrainConfig],
    evo_cfg: EvolutionConfig,
    rng: np.random.Generator,
    gmm: GMMParams | None = None,
    run_dir: str | Path | None = None,
    config_hash: str | None = None,
) -> TrainingResult:
    """The complete training program.

    Phase 1 runs once over the real data and its mixture is snapshotted;
    then each outer round runs phase 2, phase 3 and the evolution loop,
    with evolution always restarting from the snapshot. When ``run_dir``
    is given, artifacts are persisted there (models.bin, gmm_init.bin,
    gmm_opti.bin, loss_trace.csv, evolution_trace.csv); on divergence the
    partial state is saved before the error propagates.
    """
    if gmm is None:
        gmm = init_gmm(models.class_count, models.latent_dim, rng)
    loss_trace = LossTrace()
    evo_trace = EvolutionTrace(class_count=gmm.class_count)
    gmm_init = gmm
    gmm_opti = gmm
    iteration = 0

    def persist() -> None:
        if run_dir is None:
            return
        path = Path(run_dir)
        path.mkdir(parents=True, exist_ok=True)
        save_quartet(models, str(path / "models.bin"))
        save_gmm(gmm_init, str(path / "gmm_init.bin"))
        save_gmm(gmm_opti, str(path / "gmm_opti.bin"))
        loss_trace.to_csv(str(path / "loss_trace.csv"), config_hash)
        evo_trace.to_csv(str(path / "evolution_trace.csv"), config_hash)

    try:
        optim = QuartetOptimizers.create(models, gmm)
        iteration = run_phase(
            1, models, gmm, train, minority_classes, weights, lgm_cfg,
            train_cfgs[0], optim, rng, loss_trace, iteration,
        )
        gmm_init = gmm.copy()
        gmm_opti = gmm_init
        for outer in range(evo_cfg.outer_iterations):
            optim = QuartetOptimizers.create(models, gmm_init)
            iteration = run_phase(
                2, models, gmm_init, train, minority_classes, weights,
                lgm_cfg, train_cfgs[1], optim, rng, loss_trace, iteration,
            )
            optim = QuartetOptimizers.create(models, gmm_init)
            iteration = run_phase(
                3, models, gmm_init, train, minority_classes, weights,
                lgm_cfg, train_cfgs[2], optim, rng, loss_trace, iteration,
            )
            gmm_opti, evo_trace = run_meda(
                models, gmm_init, train, evo_cfg, rng, evo_trace, outer,
                outer * evo_cfg.max_iterations,
            )
    except Exception:
        persist()
        raise
    persist()
    return TrainingResult(models, gmm_init, gmm_opti, loss_trace, evo_trace)
