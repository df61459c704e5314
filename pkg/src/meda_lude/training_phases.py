"""The three gradient-based training phases over the four networks and the
latent mixture.

Phase 1 trains everything jointly on real images: reconstruction, the
large-margin mixture loss on encoded features, and both classifiers (the
image classifier sees originals and reconstructions). Phase 2 freezes the
encoder side and trains decoder plus image classifier on latents sampled
from the phase-1 mixture snapshot, each decoded image paired with a random
real image of the same label. Phase 3 trains encoder plus latent
classifier through the frozen decoder by re-encoding decoded samples.

Every loss that sees real data is split into minority and majority parts
combined as ``loss_min + xi * loss_maj``; parameters outside a phase's
declared update set are never touched. Each phase's loss-and-gradients
computation is a pure function (``phaseN_grads``) so the analytic
gradients can be audited against finite differences; the ``phaseN_step``
wrappers sample, differentiate and apply the optimizer.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from .datasets import LabeledImageSet
from .errors import DataError, InputError, TrainingDivergedError
from .gm_distribution import GMMParams, LatentPopulation, sample_population
from .lgm_loss import (
    LGMConfig,
    lgm_loss_and_grads,
    softmax_cross_entropy,
)
from .networks import AdamState, ModelQuartet, NetworkParams, adam_step, mse_loss

PHASE_COMPONENTS = {
    1: ("rec", "gm", "cls_ltt", "cls_img", "total"),
    2: ("rec", "cls_img", "total"),
    3: ("gm", "cls_ltt", "total"),
}


@dataclass
class PhaseWeights:
    """Loss weights: beta_* scale components, xi_* weight the majority part
    of a split loss. An xi of None means "recompute per batch as the
    batch's minority/majority count ratio" (1 when a side is absent)."""

    beta_rec: float = 1.0
    beta_gm: float = 1.0
    beta_cls_ltt: float = 1.0
    beta_cls_img: float = 1.0
    xi_rec: float | None = None
    xi_gm: float | None = None
    xi_cls_ltt: float | None = None
    xi_cls_ori: float | None = None
    xi_cls_syn: float | None = None

    def __post_init__(self) -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                continue
            if not np.isfinite(value) or value < 0:
                raise InputError(f"{f.name} must be finite and >= 0, got {value}")


@dataclass
class TrainConfig:
    """Mini-batch size, epoch budget, optimizer rate and the convergence
    rule: stop once the relative epoch-loss improvement stays below
    ``min_rel_improvement`` for ``patience`` consecutive epochs."""

    batch_size: int = 64
    max_epochs: int = 50
    learning_rate: float = 1e-3
    min_rel_improvement: float = 1e-3
    patience: int = 5

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise InputError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise InputError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if not np.isfinite(self.learning_rate) or self.learning_rate <= 0:
            raise InputError(
                f"learning_rate must be finite and > 0, got {self.learning_rate}"
            )
        if self.min_rel_improvement < 0:
            raise InputError("min_rel_improvement must be >= 0")
        if self.patience < 1:
            raise InputError(f"patience must be >= 1, got {self.patience}")


@dataclass
class TraceRecord:
    iteration: int
    phase: int
    component: str
    value: float


@dataclass
class LossTrace:
    """Per-step loss components across phases, exportable as CSV."""

    records: list[TraceRecord] = field(default_factory=list)

    def add(self, iteration: int, phase: int, losses: dict[str, float]) -> None:
        for component in PHASE_COMPONENTS[phase]:
            self.records.append(
                TraceRecord(iteration, phase, component, losses[component])
            )

    def iteration_count(self, phase: int | None = None) -> int:
        seen = {
            r.iteration
            for r in self.records
            if phase is None or r.phase == phase
        }
        return len(seen)

    def to_csv(self, path: str, config_hash: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if config_hash is not None:
                fh.write(f"# config_hash={config_hash}\n")
            writer = csv.writer(fh)
            writer.writerow(["iteration", "phase", "component", "value"])
            for r in self.records:
                writer.writerow([r.iteration, r.phase, r.component, repr(r.value)])


@dataclass
class QuartetOptimizers:
    """One Adam state per update group, including the mixture parameters."""

    encoder: AdamState
    decoder: AdamState
    latent_classifier: AdamState
    image_classifier: AdamState
    gmm: AdamState

    @classmethod
    def create(cls, models: ModelQuartet, gmm: GMMParams) -> "QuartetOptimizers":
        return cls(
            encoder=AdamState.for_arrays(models.encoder.params.param_list()),
            decoder=AdamState.for_arrays(models.decoder.params.param_list()),
            latent_classifier=AdamState.for_arrays(
                models.latent_classifier.params.param_list()
            ),
            image_classifier=AdamState.for_arrays(
                models.image_classifier.params.param_list()
            ),
            gmm=AdamState.for_arrays(gmm.param_list()),
        )


@dataclass
class PhaseGrads:
    """Gradients for one phase; groups outside the update set stay None."""

    encoder: NetworkParams | None = None
    decoder: NetworkParams | None = None
    latent_classifier: NetworkParams | None = None
    image_classifier: NetworkParams | None = None
    gmm_means: np.ndarray | None = None
    gmm_log_variances: np.ndarray | None = None


def combine_min_maj(loss_min: float, loss_maj: float, xi: float) -> float:
    """The split-loss combination rule: minority plus xi-weighted majority."""
    return loss_min + xi * loss_maj


def resolve_xi(xi: float | None, n_min: int, n_maj: int) -> float:
    """Fixed xi, or the batch count ratio; 1 when either side is absent."""
    if xi is not None:
        return xi
    if n_min == 0 or n_maj == 0:
        return 1.0
    return n_min / n_maj


def _split_mse(
    x_hat: np.ndarray,
    x: np.ndarray,
    minority_mask: np.ndarray,
    xi: float | None,
) -> tuple[float, np.ndarray]:
    """Min/maj-combined mean squared error and its gradient wrt ``x_hat``."""
    grad = np.zeros_like(x_hat)
    parts = {True: 0.0, False: 0.0}
    for is_min in (True, False):
        rows = np.flatnonzero(minority_mask == is_min)
        if rows.size == 0:
            continue
        loss, g = mse_loss(x_hat[rows], x[rows])
        parts[is_min] = loss
        grad[rows] = g
    xi_val = resolve_xi(xi, int(minority_mask.sum()), int((~minority_mask).sum()))
    grad[~minority_mask] *= xi_val
    return combine_min_maj(parts[True], parts[False], xi_val), grad


def _split_ce(
    logits: np.ndarray,
    labels: np.ndarray,
    minority_mask: np.ndarray,
    xi: float | None,
) -> tuple[float, np.ndarray]:
    """Min/maj-combined cross-entropy and its gradient wrt the logits."""
    grad = np.zeros_like(logits)
    parts = {True: 0.0, False: 0.0}
    for is_min in (True, False):
        rows = np.flatnonzero(minority_mask == is_min)
        if rows.size == 0:
            continue
        loss, g = softmax_cross_entropy(logits[rows], labels[rows])
        parts[is_min] = loss
        grad[rows] = g
    xi_val = resolve_xi(xi, int(minority_mask.sum()), int((~minority_mask).sum()))
    grad[~minority_mask] *= xi_val
    return combine_min_maj(parts[True], parts[False], xi_val), grad


def _split_lgm(
    features: np.ndarray,
    labels: np.ndarray,
    minority_mask: np.ndarray,
    gmm: GMMParams,
    lgm_cfg: LGMConfig,
    xi: float | None,
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Min/maj-combined mixture loss; returns (loss, d_features, d_means,
    d_log_variances)."""
    grad_feat = np.zeros_like(features)
    grad_means = np.zeros_like(gmm.means)
    grad_logvar = np.zeros_like(gmm.log_variances)
    parts = {True: 0.0, False: 0.0}
    xi_val = resolve_xi(xi, int(minority_mask.sum()), int((~minority_mask).sum()))
    for is_min in (True, False):
        rows = np.flatnonzero(minority_mask == is_min)
        if rows.size == 0:
            continue
        bundle, grads = lgm_loss_and_grads(features[rows], labels[rows], gmm, lgm_cfg)
        scale = 1.0 if is_min else xi_val
        parts[is_min] = bundle.total
        grad_feat[rows] = scale * grads.features
        grad_means += scale * grads.means
        grad_logvar += scale * grads.log_variances
    return (
        combine_min_maj(parts[True], parts[False], xi_val),
        grad_feat,
        grad_means,
        grad_logvar,
    )


def _add_params(a: NetworkParams, b: NetworkParams) -> NetworkParams:
    return NetworkParams(
        [x + y for x, y in zip(a.weights, b.weights)],
        [x + y for x, y in zip(a.biases, b.biases)],
    )


def _check_total(total: float, phase: int) -> None:
    if not np.isfinite(total):
        raise TrainingDivergedError(f"phase {phase} loss is {total}")


def sample_finite(
    gmm: GMMParams,
    counts: np.ndarray,
    rng: np.random.Generator,
    stage: str,
) -> "LatentPopulation":
    """Sample from the mixture; a non-finite draw means the trained
    distribution has broken down, which is divergence, not bad input."""
    try:
        return sample_population(gmm, counts, rng)
    except InputError as exc:
        raise TrainingDivergedError(f"{stage} sampling failed: {exc}") from exc


def phase1_grads(
    models: ModelQuartet,
    gmm: GMMParams,
    images: np.ndarray,
    labels: np.ndarray,
    minority_mask: np.ndarray,
    weights: PhaseWeights,
    lgm_cfg: LGMConfig,
) -> tuple[dict[str, float], PhaseGrads]:
    """Composite joint loss on a real batch and its analytic gradients.

    Gradient routing: the encoder receives every component; the decoder
    receives reconstruction and the synthetic-stream image classification;
    each classifier receives only its own loss; the mixture receives only
    the margin loss.
    """
    feat, enc_cache = models.encoder.forward(images, want_cache=True)
    x_hat, dec_cache = models.decoder.forward(feat, want_cache=True)
    logits_ltt, ltt_cache = models.latent_classifier.forward(feat, want_cache=True)
    logits_ori, img_cache_ori = models.image_classifier.forward(
        images, want_cache=True
    )
    logits_syn, img_cache_syn = models.image_classifier.forward(
        x_hat, want_cache=True
    )

    rec_loss, grad_xhat_rec = _split_mse(x_hat, images, minority_mask, weights.xi_rec)
    gm_loss, grad_feat_gm, grad_means, grad_logvar = _split_lgm(
        feat, labels, minority_mask, gmm, lgm_cfg, weights.xi_gm
    )
    ltt_loss, grad_logits_ltt = _split_ce(
        logits_ltt, labels, minority_mask, weights.xi_cls_ltt
    )
    ori_loss, grad_logits_ori = _split_ce(
        logits_ori, labels, minority_mask, weights.xi_cls_ori
    )
    syn_loss, grad_logits_syn = _split_ce(
        logits_syn, labels, minority_mask, weights.xi_cls_syn
    )
    img_loss = ori_loss + syn_loss
    total = (
        weights.beta_rec * rec_loss
        + weights.beta_gm * gm_loss
        + weights.beta_cls_ltt * ltt_loss
        + weights.beta_cls_img * img_loss
    )
    losses = {
        "rec": rec_loss,
        "gm": gm_loss,
        "cls_ltt": ltt_loss,
        "cls_img": img_loss,
        "total": total,
    }

    img_grads_ori, _ = models.image_classifier.backward(
        img_cache_ori, weights.beta_cls_img * grad_logits_ori
    )
    img_grads_syn, grad_xhat_syn = models.image_classifier.backward(
        img_cache_syn, weights.beta_cls_img * grad_logits_syn
    )
    ltt_grads, grad_feat_ltt = models.latent_classifier.backward(
        ltt_cache, weights.beta_cls_ltt * grad_logits_ltt
    )
    dec_grads, grad_feat_dec = models.decoder.backward(
        dec_cache, weights.beta_rec * grad_xhat_rec + grad_xhat_syn
    )
    grad_feat = weights.beta_gm * grad_feat_gm + grad_feat_ltt + grad_feat_dec
    enc_grads, _ = models.encoder.backward(enc_cache, grad_feat)
    return losses, PhaseGrads(
        encoder=enc_grads,
        decoder=dec_grads,
        latent_classifier=ltt_grads,
        image_classifier=_add_params(img_grads_ori, img_grads_syn),
        gmm_means=weights.beta_gm * grad_means,
        gmm_log_variances=weights.beta_gm * grad_logvar,
    )


def phase2_grads(
    models: ModelQuartet,
    features: np.ndarray,
    labels: np.ndarray,
    x_real: np.ndarray,
    minority_mask: np.ndarray,
    weights: PhaseWeights,
) -> tuple[dict[str, float], PhaseGrads]:
    """Composite generative loss for given latents and paired real images;
    gradients for decoder and image classifier only."""
    x_syn, dec_cache = models.decoder.forward(features, want_cache=True)
    rec_loss, grad_xhat_rec = _split_mse(x_syn, x_real, minority_mask, weights.xi_rec)
    logits_ori, img_cache_ori = models.image_classifier.forward(
        x_real, want_cache=True
    )
    logits_syn, img_cache_syn = models.image_classifier.forward(
        x_syn, want_cache=True
    )
    ori_loss, grad_logits_ori = _split_ce(
        logits_ori, labels, minority_mask, weights.xi_cls_ori
    )
    syn_loss, grad_logits_syn = _split_ce(
        logits_syn, labels, minority_mask, weights.xi_cls_syn
    )
    img_loss = ori_loss + syn_loss
    total = weights.beta_rec * rec_loss + weights.beta_cls_img * img_loss
    losses = {"rec": rec_loss, "cls_img": img_loss, "total": total}

    img_grads_ori, _ = models.image_classifier.backward(
        img_cache_ori, weights.beta_cls_img * grad_logits_ori
    )
    img_grads_syn, grad_xhat_syn = models.image_classifier.backward(
        img_cache_syn, weights.beta_cls_img * grad_logits_syn
    )
    dec_grads, _ = models.decoder.backward(
        dec_cache, weights.beta_rec * grad_xhat_rec + grad_xhat_syn
    )
    return losses, PhaseGrads(
        decoder=dec_grads,
        image_classifier=_add_params(img_grads_ori, img_grads_syn),
    )


def phase3_grads(
    models: ModelQuartet,
    gmm_init: GMMParams,
    features: np.ndarray,
    labels: np.ndarray,
    weights: PhaseWeights,
    lgm_cfg: LGMConfig,
) -> tuple[dict[str, float], PhaseGrads]:
    """Composite re-encoding loss for given latents: decode with the frozen
    decoder, re-encode, fit the margin loss plus latent classification on
    the re-encoded features without minority/majority weighting; gradients
    for encoder and latent classifier only."""
    x_syn = models.decoder.forward(features)
    feat2, enc_cache = models.encoder.forward(x_syn, want_cache=True)
    logits_ltt, ltt_cache = models.latent_classifier.forward(feat2, want_cache=True)

    bundle, gm_grads = lgm_loss_and_grads(feat2, labels, gmm_init, lgm_cfg)
    ltt_loss, grad_logits = softmax_cross_entropy(logits_ltt, labels)
    total = weights.beta_gm * bundle.total + weights.beta_cls_ltt * ltt_loss
    losses = {"gm": bundle.total, "cls_ltt": ltt_loss, "total": total}

    ltt_grads, grad_feat_ltt = models.latent_classifier.backward(
        ltt_cache, weights.beta_cls_ltt * grad_logits
    )
    enc_grads, _ = models.encoder.backward(
        enc_cache, weights.beta_gm * gm_grads.features + grad_feat_ltt
    )
    return losses, PhaseGrads(encoder=enc_grads, latent_classifier=ltt_grads)


def phase1_step(
    models: ModelQuartet,
    gmm: GMMParams,
    images: np.ndarray,
    labels: np.ndarray,
    minority_mask: np.ndarray,
    weights: PhaseWeights,
    lgm_cfg: LGMConfig,
    train_cfg: TrainConfig,
    optimizers: QuartetOptimizers,
) -> dict[str, float]:
    """One joint update on a real batch: all four networks and the mixture."""
    losses, grads = phase1_grads(
        models, gmm, images, labels, minority_mask, weights, lgm_cfg
    )
    _check_total(losses["total"], phase=1)
    lr = train_cfg.learning_rate
    adam_step(
        models.encoder.params.param_list(), grads.encoder.param_list(),
        optimizers.encoder, lr,
    )
    adam_step(
        models.decoder.params.param_list(), grads.decoder.param_list(),
        optimizers.decoder, lr,
    )
    adam_step(
        models.latent_classifier.params.param_list(),
        grads.latent_classifier.param_list(),
        optimizers.latent_classifier, lr,
    )
    adam_step(
        models.image_classifier.params.param_list(),
        grads.image_classifier.param_list(),
        optimizers.image_classifier, lr,
    )
    adam_step(
        gmm.param_list(), [grads.gmm_means, grads.gmm_log_variances],
        optimizers.gmm, lr,
    )
    gmm.clamp_variances()
    return losses


def _pair_real_rows(
    real: LabeledImageSet, labels: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """For each sampled label pick a uniform real image of the same label."""
    members = {}
    picks = np.empty(labels.size, dtype=np.int64)
    for i, label in enumerate(labels):
        label = int(label)
        if label not in members:
            rows = real.class_members(label)
            if rows.size == 0:
                raise DataError(f"real data has no samples of class {label}")
            members[label] = rows
        rows = members[label]
        picks[i] = rows[rng.integers(0, rows.size)]
    return picks


def phase2_step(
    models: ModelQuartet,
    gmm_init: GMMParams,
    real: LabeledImageSet,
    minority_classes: Sequence[int],
    weights: PhaseWeights,
    train_cfg: TrainConfig,
    optimizers: QuartetOptimizers,
    rng: np.random.Generator,
    per_class: int,
) -> dict[str, float]:
    """One generative update: decode per-class latent draws, compare
    against randomly paired real images of the same label; updates decoder
    and image classifier only."""
    counts = np.full(gmm_init.class_count, per_class, dtype=np.int64)
    latents = sample_finite(gmm_init, counts, rng, "phase 2")
    labels = latents.labels
    minority_mask = np.isin(labels, np.asarray(minority_classes, dtype=np.int64))
    picks = _pair_real_rows(real, labels, rng)
    x_real = real.flat()[picks]

    losses, grads = phase2_grads(
        models, latents.features, labels, x_real, minority_mask, weights
    )
    _check_total(losses["total"], phase=2)
    lr = train_cfg.learning_rate
    adam_step(
        models.decoder.params.param_list(), grads.decoder.param_list(),
        optimizers.decoder, lr,
    )
    adam_step(
        models.image_classifier.params.param_list(),
        grads.image_classifier.param_list(),
        optimizers.image_classifier, lr,
    )
    return losses


def phase3_step(
    models: ModelQuartet,
    gmm_init: GMMParams,
    weights: PhaseWeights,
    lgm_cfg: LGMConfig,
    train_cfg: TrainConfig,
    optimizers: QuartetOptimizers,
    rng: np.random.Generator,
    per_class: int,
) -> dict[str, float]:
    """One re-encoding update: sample latents from the frozen snapshot,
    decode, re-encode; updates encoder and latent classifier only."""
    counts = np.full(gmm_init.class_count, per_class, dtype=np.int64)
    latents = sample_finite(gmm_init, counts, rng, "phase 3")

    losses, grads = phase3_grads(
        models, gmm_init, latents.features, latents.labels, weights, lgm_cfg
    )
    _check_total(losses["total"], phase=3)
    lr = train_cfg.learning_rate
    adam_step(
        models.encoder.params.param_list(), grads.encoder.param_list(),
        optimizers.encoder, lr,
    )
    adam_step(
        models.latent_classifier.params.param_list(),
        grads.latent_classifier.param_list(),
        optimizers.latent_classifier, lr,
    )
    return losses


def stratified_batches(
    labels: np.ndarray,
    minority_mask: np.ndarray,
    batch_size: int,
    rng: np.random.Generator,
) -> list[np.ndarray]:
    """Mini-batch index lists with minority samples dealt round-robin.

    Every sample appears once per epoch. When there are fewer minority
    samples than batches, each minority-free batch receives one extra
    minority sample drawn with replacement, so every batch sees the
    minority whenever any exist (at the cost of an occasional
    batch_size + 1).
    """
    n = labels.shape[0]
    n_batches = max(1, math.ceil(n / batch_size))
    minority = rng.permutation(np.flatnonzero(minority_mask))
    majority = rng.permutation(np.flatnonzero(~minority_mask))
    buckets: list[list[int]] = [[] for _ in range(n_batches)]
    for i, idx in enumerate(minority):
        buckets[i % n_batches].append(int(idx))
    j = 0
    for bucket in buckets:
        while len(bucket) < batch_size and j < majority.size:
            bucket.append(int(majority[j]))
            j += 1
    b = 0
    while j < majority.size:
        buckets[b % n_batches].append(int(majority[j]))
        j += 1
        b += 1
    if minority.size:
        for bucket in buckets:
            if not any(minority_mask[i] for i in bucket):
                bucket.append(int(rng.choice(np.flatnonzero(minority_mask))))
    return [rng.permutation(np.array(bucket, dtype=np.int64)) for bucket in buckets]


def run_phase(
    phase: int,
    models: ModelQuartet,
    gmm: GMMParams,
    data: LabeledImageSet,
    minority_classes: Sequence[int],
    weights: PhaseWeights,
    lgm_cfg: LGMConfig,
    train_cfg: TrainConfig,
    optimizers: QuartetOptimizers,
    rng: np.random.Generator,
    trace: LossTrace,
    start_iteration: int = 0,
) -> int:
    """Run one training phase to convergence or the epoch cap.

    Phase 1 walks the real data in stratified mini-batches; phases 2 and 3
    draw fresh latents each step, with the same number of steps per epoch
    (ceil(n / batch_size)) for a comparable trace. Appends one trace entry
    per step and component.

    Returns:
        The next free iteration number (start_iteration + steps run).

    Raises:
        TrainingDivergedError: if a step produces a non-finite loss.
    """
    if phase not in PHASE_COMPONENTS:
        raise InputError(f"phase must be 1, 2 or 3, got {phase}")
    n = len(data)
    if n == 0:
        raise DataError("cannot train on an empty dataset")
    steps_per_epoch = math.ceil(n / train_cfg.batch_size)
    per_class = max(1, math.ceil(train_cfg.batch_size / gmm.class_count))
    minority_arr = np.asarray(tuple(minority_classes), dtype=np.int64)
    minority_mask_all = np.isin(data.labels, minority_arr)
    flat = data.flat()

    iteration = start_iteration
    prev_epoch_loss: float | None = None
    streak = 0
    for _ in range(train_cfg.max_epochs):
        epoch_totals = []
        if phase == 1:
            batches = stratified_batches(
                data.labels, minority_mask_all, train_cfg.batch_size, rng
            )
        else:
            batches = [None] * steps_per_epoch
        for batch in batches:
            if phase == 1:
                losses = phase1_step(
                    models, gmm, flat[batch], data.labels[batch],
                    minority_mask_all[batch], weights, lgm_cfg, train_cfg,
                    optimizers,
                )
            elif phase == 2:
                losses = phase2_step(
                    models, gmm, data, minority_arr, weights, train_cfg,
                    optimizers, rng, per_class,
                )
            else:
                losses = phase3_step(
                    models, gmm, weights, lgm_cfg, train_cfg, optimizers,
                    rng, per_class,
                )
            trace.add(iteration, phase, losses)
            epoch_totals.append(losses["total"])
            iteration += 1
        epoch_loss = float(np.mean(epoch_totals))
        if prev_epoch_loss is not None:
            improvement = (prev_epoch_loss - epoch_loss) / max(
                abs(prev_epoch_loss), 1e-12
            )
            if improvement < train_cfg.min_rel_improvement:
                streak += 1
                if streak >= train_cfg.patience:
                    break
            else:
                streak = 0
        prev_epoch_loss = epoch_loss
    return iteration
