"""Losses and anomaly score of fully convolutional data description.

Everything here is plain numpy in float64 and free of side effects. Feature
volumes are channels-last (rows, cols, channels); the pseudo-Huber response of
a receptive-field cell is computed on the Euclidean norm of its channel vector.

The analytic gradient in :func:`loss_gradients` is what the trainer feeds back
into the convolutional backbone, so it must agree with :func:`fcdd_spatial_loss`
to finite-difference precision.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidInputError

DEFAULT_STABILITY_FLOOR = 1e-6


@dataclass
class FeatureVolume:
    values: np.ndarray
    image_id: object = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise InvalidInputError(f"feature volume must be u x v x C, got shape {self.values.shape}")

    @property
    def shape(self):
        return self.values.shape


@dataclass
class ReceptiveFieldMap:
    values: np.ndarray
    image_id: object = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise InvalidInputError(f"receptive-field map must be u x v, got shape {self.values.shape}")

    def __add__(self, other: "ReceptiveFieldMap") -> "ReceptiveFieldMap":
        return ReceptiveFieldMap(self.values + other.values, self.image_id)


@dataclass
class LabeledSampleBatch:
    features: list
    labels: list

    def __post_init__(self):
        self.features = [f if isinstance(f, FeatureVolume) else FeatureVolume(f) for f in self.features]
        self.labels = [int(y) for y in self.labels]
        if not self.features:
            raise InvalidInputError("batch is empty")
        if len(self.features) != len(self.labels):
            raise InvalidInputError(
                f"{len(self.features)} feature volumes but {len(self.labels)} labels")
        shapes = {f.shape for f in self.features}
        if len(shapes) != 1:
            raise InvalidInputError(f"feature volumes in a batch must share one shape, got {sorted(shapes)}")
        if any(y not in (0, 1) for y in self.labels):
            raise InvalidInputError("labels must be 0 (normal) or 1 (anomalous)")

    def __len__(self):
        return len(self.labels)


@dataclass
class SVDDConfig:
    """Hypersphere center and the clamp used by the anomalous log term.

    ``center=None`` means the zero vector of whatever dimension is scored.
    """

    center: Optional[np.ndarray] = None
    stability_floor: float = DEFAULT_STABILITY_FLOOR

    def __post_init__(self):
        if not self.stability_floor > 0:
            raise InvalidInputError("stability_floor must be positive")
        if self.center is not None:
            self.center = np.asarray(self.center, dtype=np.float64).ravel()

    def center_for(self, dim: int) -> np.ndarray:
        if self.center is None:
            return np.zeros(dim)
        if self.center.shape[0] != dim:
            raise InvalidInputError(f"center has length {self.center.shape[0]}, features have {dim} channels")
        return self.center


def _as_array(x) -> np.ndarray:
    if isinstance(x, (FeatureVolume, ReceptiveFieldMap)):
        return x.values
    return np.asarray(x, dtype=np.float64)


def _check_finite(a: np.ndarray, what: str):
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{what} contains non-finite entries")


def pseudo_huber(z: np.ndarray) -> np.ndarray:
    """sqrt(|z|^2 + 1) - 1 along the last axis."""
    sq = np.sum(np.square(z), axis=-1)
    # sq / (sqrt(sq+1) + 1) avoids cancellation for tiny |z|
    return sq / (np.sqrt(sq + 1.0) + 1.0)


def pseudo_huber_map(features) -> ReceptiveFieldMap:
    values = _as_array(features)
    if values.ndim != 3:
        raise InvalidInputError(f"expected a u x v x C volume, got shape {values.shape}")
    _check_finite(values, "feature volume")
    image_id = getattr(features, "image_id", None)
    return ReceptiveFieldMap(pseudo_huber(values), image_id)


def log1mexp(a):
    """log(1 - exp(-a)) for a > 0, accurate at both ends (Maechler's switch at ln 2)."""
    a = np.asarray(a, dtype=np.float64)
    return np.where(a < np.log(2.0), np.log(-np.expm1(-a)), np.log1p(-np.exp(-a)))


def _image_term(mean_response: float, label: int, floor: float) -> float:
    if label == 0:
        return float(mean_response)
    return float(-log1mexp(max(mean_response, floor)))


def huber_bce_loss(rf_map, label: int, cfg: SVDDConfig = None) -> float:
    """Image-level loss on the mean receptive-field response.

    Normal images pay the mean response itself; anomalous images pay
    ``-log(1 - exp(-A))`` with ``A`` clamped from below by the stability floor.
    """
    cfg = cfg or SVDDConfig()
    values = _as_array(rf_map)
    if values.size == 0:
        raise InvalidInputError("receptive-field map is empty")
    _check_finite(values, "receptive-field map")
    if np.any(values < 0):
        raise InvalidInputError("receptive-field map has negative entries")
    if label not in (0, 1):
        raise InvalidInputError("label must be 0 or 1")
    return _image_term(values.mean(), label, cfg.stability_floor)


def _mean_responses(batch: LabeledSampleBatch) -> np.ndarray:
    vols = np.stack([f.values for f in batch.features])
    _check_finite(vols, "feature batch")
    return pseudo_huber(vols).reshape(len(batch), -1).mean(axis=1)


def fcdd_spatial_loss(batch: LabeledSampleBatch, cfg: SVDDConfig = None) -> float:
    """Batch mean of :func:`huber_bce_loss` over pseudo-Huber maps of the features."""
    cfg = cfg or SVDDConfig()
    if not isinstance(batch, LabeledSampleBatch):
        raise InvalidInputError("expected a LabeledSampleBatch")
    means = _mean_responses(batch)
    terms = [_image_term(a, y, cfg.stability_floor) for a, y in zip(means, batch.labels)]
    return float(np.mean(terms))


def deep_svdd_loss(embeddings: Sequence, labels: Sequence[int], cfg: SVDDConfig = None) -> float:
    """Image-level baseline: pseudo-Huber distance of each embedding to the center,
    pushed through the same normal/anomalous cross-entropy terms."""
    cfg = cfg or SVDDConfig()
    if len(embeddings) == 0 or len(embeddings) != len(labels):
        raise InvalidInputError("embeddings and labels must be nonempty and of equal length")
    emb = [np.asarray(e, dtype=np.float64).ravel() for e in embeddings]
    dims = {e.shape[0] for e in emb}
    if len(dims) != 1:
        raise InvalidInputError("embeddings differ in dimension")
    emb = np.stack(emb)
    _check_finite(emb, "embeddings")
    c = cfg.center_for(emb.shape[1])
    h = pseudo_huber(emb - c)
    terms = []
    for hi, y in zip(h, labels):
        if int(y) not in (0, 1):
            raise InvalidInputError("labels must be 0 or 1")
        terms.append(_image_term(hi, int(y), cfg.stability_floor))
    return float(np.mean(terms))


def anomaly_score(rf_map) -> float:
    """Sum of all receptive-field responses of one image."""
    values = _as_array(rf_map)
    _check_finite(values, "receptive-field map")
    if np.any(values < 0):
        raise InvalidInputError("receptive-field map has negative entries")
    return float(values.sum())


def loss_gradients(batch: LabeledSampleBatch, cfg: SVDDConfig = None) -> list:
    """d fcdd_spatial_loss / d features, one u x v x C array per sample.

    With A the mean response of an image, dL/dA is 1/n for normal samples and
    -1/(n * expm1(A)) for anomalous ones (zero when the floor clamp is active);
    dA/dz at a cell is z / (uv * sqrt(|z|^2 + 1)).
    """
    cfg = cfg or SVDDConfig()
    vols = np.stack([f.values for f in batch.features])
    _check_finite(vols, "feature batch")
    n = vols.shape[0]
    cells = vols.shape[1] * vols.shape[2]
    h = pseudo_huber(vols)
    means = h.reshape(n, -1).mean(axis=1)
    out = []
    for i, (a, y) in enumerate(zip(means, batch.labels)):
        if y == 0:
            d_a = 1.0 / n
        elif a < cfg.stability_floor:
            d_a = 0.0
        else:
            d_a = -1.0 / (n * np.expm1(a))
        scale = d_a / cells / (h[i] + 1.0)
        out.append(vols[i] * scale[..., None])
    return out


def loss_and_gradients(batch: LabeledSampleBatch, cfg: SVDDConfig = None):
    """Convenience pair used by the training loop."""
    return fcdd_spatial_loss(batch, cfg), loss_gradients(batch, cfg)
