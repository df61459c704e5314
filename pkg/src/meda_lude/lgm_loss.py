"""Large-margin Gaussian-mixture loss over latent features.

The classification term is a softmax cross-entropy over margin-scaled
negative Mahalanobis distances (diagonal covariance per class); the
likelihood term pulls each feature toward its own class Gaussian. Distances
are evaluated in a batched matrix form built from the precision matrix
(elementwise reciprocal variances), which reproduces the per-element
definition exactly; gradients with respect to features, means and
log-variances are analytic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError, ShapeError
from .gm_distribution import GMMParams


@dataclass
class LGMConfig:
    """Margin strength ``alpha`` and likelihood weight ``lambda_lkd``."""

    alpha: float = 1.0
    lambda_lkd: float = 0.1

    def __post_init__(self) -> None:
        if not np.isfinite(self.alpha) or self.alpha < 0:
            raise InputError(f"alpha must be finite and >= 0, got {self.alpha}")
        if not np.isfinite(self.lambda_lkd) or self.lambda_lkd < 0:
            raise InputError(
                f"lambda_lkd must be finite and >= 0, got {self.lambda_lkd}"
            )


@dataclass
class LossBundle:
    """Classification plus likelihood components and their weighted total."""

    cls: float
    lkd: float
    total: float


@dataclass
class LGMGrads:
    """Gradients of the total loss wrt features, means, log-variances."""

    features: np.ndarray
    means: np.ndarray
    log_variances: np.ndarray


def _check_features(features: np.ndarray, latent_dim: int) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != latent_dim:
        raise ShapeError(
            f"features must be (n, {latent_dim}), got shape {features.shape}"
        )
    if features.shape[0] == 0:
        raise ShapeError("features must contain at least one row")
    if not np.all(np.isfinite(features)):
        raise InputError("features contain non-finite values")
    return features


def _check_labels(labels: np.ndarray, n: int, class_count: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ShapeError(f"labels must be ({n},), got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= class_count):
        raise InputError(
            f"labels must lie in [0, {class_count}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    return labels


def mahalanobis_distances(
    features: np.ndarray, means: np.ndarray, log_variances: np.ndarray
) -> np.ndarray:
    """Half squared Mahalanobis distance of every feature to every class.

    Entry (i, k) equals ``0.5 * sum_j (f_ij - mu_kj)^2 / lambda_kj``. The
    batched expansion uses the precision matrix, i.e. the three matrix
    products of f^2, f and 1 against precision-scaled class terms; tiny
    negative round-off is clipped to zero.

    Args:
        features: (n, h) feature rows.
        means: (K, h) class means.
        log_variances: (K, h) class log-variances.

    Returns:
        (n, K) distance matrix, all entries finite and >= 0.
    """
    means = np.asarray(means, dtype=np.float64)
    log_variances = np.asarray(log_variances, dtype=np.float64)
    if means.ndim != 2 or means.shape != log_variances.shape:
        raise ShapeError(
            f"means shape {means.shape} and log_variances shape "
            f"{log_variances.shape} must be equal 2-D"
        )
    if not (np.all(np.isfinite(means)) and np.all(np.isfinite(log_variances))):
        raise InputError("mixture parameters contain non-finite values")
    features = _check_features(features, means.shape[1])
    precision = np.exp(-log_variances)
    gram = (means * means * precision).sum(axis=1)
    dist = 0.5 * (
        (features * features) @ precision.T
        - 2.0 * features @ (means * precision).T
        + gram[None, :]
    )
    return np.maximum(dist, 0.0)


def log_normalizers(log_variances: np.ndarray) -> np.ndarray:
    """Per-class ``-0.5 * sum_j log lambda_kj`` term added to every logit."""
    log_variances = np.asarray(log_variances, dtype=np.float64)
    if log_variances.ndim != 2:
        raise ShapeError(
            f"log_variances must be 2-D, got shape {log_variances.shape}"
        )
    return -0.5 * log_variances.sum(axis=1)


def margin_logits(
    distances: np.ndarray,
    normalizers: np.ndarray,
    labels: np.ndarray,
    alpha: float,
) -> np.ndarray:
    """Class logits ``-d_ik * (1 + alpha * 1[k == z_i]) + logq_k``.

    The margin inflates the true class's distance, so a sample must sit
    strictly closer to its own Gaussian to keep its logit on top.
    """
    distances = np.asarray(distances, dtype=np.float64)
    n, class_count = distances.shape
    labels = _check_labels(labels, n, class_count)
    onehot = np.zeros_like(distances)
    onehot[np.arange(n), labels] = 1.0
    return -distances * (1.0 + alpha * onehot) + normalizers[None, :]


def softmax_cross_entropy(
    logits: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean negative log-softmax of the true class, with its logit gradient.

    Logits are shifted by their row max before exponentiation, so any
    finite magnitudes are safe.

    Returns:
        (loss, grad) where grad has the logits' shape and already includes
        the 1/n batch averaging.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be 2-D, got shape {logits.shape}")
    n, class_count = logits.shape
    labels = _check_labels(labels, n, class_count)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -log_probs[np.arange(n), labels].mean()
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return float(loss), grad


def lgm_loss(
    features: np.ndarray,
    labels: np.ndarray,
    gmm: GMMParams,
    cfg: LGMConfig,
) -> LossBundle:
    """Loss components for a feature batch under the mixture parameters.

    ``cls`` is the margin cross-entropy, ``lkd`` the mean of
    ``d_i,z_i - logq_z_i`` over the batch, and
    ``total = cls + lambda_lkd * lkd``.
    """
    bundle, _ = _loss_core(features, labels, gmm, cfg, want_grads=False)
    return bundle


def lgm_loss_and_grads(
    features: np.ndarray,
    labels: np.ndarray,
    gmm: GMMParams,
    cfg: LGMConfig,
) -> tuple[LossBundle, LGMGrads]:
    """Loss components plus analytic gradients of the total.

    Gradients cover the feature rows and both mixture parameter matrices
    (log-variance gradients include the normalizer path, so positivity is
    preserved by updating log-values directly).
    """
    bundle, grads = _loss_core(features, labels, gmm, cfg, want_grads=True)
    assert grads is not None
    return bundle, grads


def _loss_core(
    features: np.ndarray,
    labels: np.ndarray,
    gmm: GMMParams,
    cfg: LGMConfig,
    want_grads: bool,
) -> tuple[LossBundle, LGMGrads | None]:
    means = gmm.means
    log_variances = gmm.log_variances
    features = _check_features(features, gmm.latent_dim)
    n = features.shape[0]
    labels = _check_labels(labels, n, gmm.class_count)

    distances = mahalanobis_distances(features, means, log_variances)
    normalizers = log_normalizers(log_variances)
    logits = margin_logits(distances, normalizers, labels, cfg.alpha)
    cls_loss, grad_logits = softmax_cross_entropy(logits, labels)

    rows = np.arange(n)
    lkd_loss = float((distances[rows, labels] - normalizers[labels]).mean())
    total = cls_loss + cfg.lambda_lkd * lkd_loss
    bundle = LossBundle(cls=cls_loss, lkd=lkd_loss, total=float(total))
    if not want_grads:
        return bundle, None

    onehot = np.zeros_like(distances)
    onehot[rows, labels] = 1.0
    # Chain rule through logits: d logit / d D = -(1 + alpha * onehot),
    # d logit / d logq = 1; likelihood term adds onehot / n on D and
    # -onehot / n on logq.
    grad_dist = -grad_logits * (1.0 + cfg.alpha * onehot)
    grad_dist += cfg.lambda_lkd * onehot / n
    grad_norm = grad_logits.sum(axis=0) - cfg.lambda_lkd * onehot.sum(axis=0) / n

    precision = np.exp(-log_variances)
    col_w = grad_dist.sum(axis=0)
    wtf = grad_dist.T @ features
    grad_features = features * (grad_dist @ precision) - grad_dist @ (
        means * precision
    )
    grad_means = precision * (means * col_w[:, None] - wtf)
    spread = (
        grad_dist.T @ (features * features)
        - 2.0 * means * wtf
        + (means * means) * col_w[:, None]
    )
    grad_log_variances = -0.5 * precision * spread - 0.5 * grad_norm[:, None]
    return bundle, LGMGrads(grad_features, grad_means, grad_log_variances)
