"""Full-resolution damage heatmaps from receptive-field maps.

Each cell of a u x v receptive-field map is splatted onto the h x w image grid
as a normalised 2D Gaussian centred on the cell's receptive-field centre and
weighted by the cell value. The result is clamped to a display range before
colour mapping.

Colormap (piecewise linear in RGB, exact at the knots)::

    0.0 -> (0, 0, 255)    blue
    0.5 -> (255, 255, 0)  yellow
    1.0 -> (255, 0, 0)    red

Underlays are alpha-blended as ``BLEND_ALPHA * colour + (1 - BLEND_ALPHA) * image``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .backbone import FieldGeometry
from .errors import FileWriteError, InvalidInputError, InvalidParameterError

BLEND_ALPHA = 0.5
COLORMAP_KNOTS = np.array([0.0, 0.5, 1.0])
COLORMAP_RGB = np.array([[0, 0, 255], [255, 255, 0], [255, 0, 0]], dtype=np.float64)


@dataclass
class HeatmapConfig:
    sigma: float = 8.0
    display_quantile: float = 0.25
    colormap: str = "blue-yellow-red"
    truncation_radius: float = 4.0
    display_mode: str = "relative"      # relative: [min, min + q*(max-min)]; absolute: [min, q*max]

    def __post_init__(self):
        if not self.sigma > 0:
            raise InvalidParameterError("sigma must be positive")
        if not 0 < self.display_quantile <= 1:
            raise InvalidParameterError("display_quantile must lie in (0, 1]")
        if self.truncation_radius < 3:
            raise InvalidParameterError("truncation_radius must be at least 3 sigma")
        if self.colormap != "blue-yellow-red":
            raise InvalidParameterError(f"unknown colormap {self.colormap!r}")
        if self.display_mode not in ("relative", "absolute"):
            raise InvalidParameterError("display_mode must be relative or absolute")


@dataclass
class Heatmap:
    values: np.ndarray
    image_id: object = None
    model_id: object = None


def gaussian_kernel(m1: float, m2: float, sigma: float, h: int, w: int,
                    truncation_radius: Optional[float] = None) -> np.ndarray:
    """Normalised 2D Gaussian on the integer grid 0..h-1 x 0..w-1.

    With ``truncation_radius`` set, rows/cols farther than that many sigmas from
    the centre are exactly zero.
    """
    if not sigma > 0:
        raise InvalidParameterError("sigma must be positive")
    gx = np.exp(-((np.arange(h) - m1) ** 2) / (2 * sigma ** 2))
    gy = np.exp(-((np.arange(w) - m2) ** 2) / (2 * sigma ** 2))
    if truncation_radius is not None:
        gx[np.abs(np.arange(h) - m1) > truncation_radius * sigma] = 0.0
        gy[np.abs(np.arange(w) - m2) > truncation_radius * sigma] = 0.0
    return np.outer(gx, gy) / (2 * np.pi * sigma ** 2)


def upsample_heatmap(rf_map, geometry: FieldGeometry, cfg: HeatmapConfig = None) -> Heatmap:
    """Sum of value-weighted Gaussians, one per receptive-field cell."""
    cfg = cfg or HeatmapConfig()
    values = np.asarray(getattr(rf_map, "values", rf_map), dtype=np.float64)
    if values.shape != tuple(geometry.map_size):
        raise InvalidInputError(f"map shape {values.shape} does not match geometry {geometry.map_size}")
    h, w = geometry.image_size
    s = cfg.sigma
    reach = int(np.ceil(cfg.truncation_radius * s))
    out = np.zeros((h, w))
    for i in range(values.shape[0]):
        for j in range(values.shape[1]):
            d = values[i, j]
            if d == 0.0:
                continue
            c1, c2 = geometry.center(i, j)
            r0, r1 = max(0, int(np.floor(c1)) - reach), min(h, int(np.ceil(c1)) + reach + 1)
            q0, q1 = max(0, int(np.floor(c2)) - reach), min(w, int(np.ceil(c2)) + reach + 1)
            if r0 >= r1 or q0 >= q1:
                continue
            patch = gaussian_kernel(c1 - r0, c2 - q0, s, r1 - r0, q1 - q0, cfg.truncation_radius)
            out[r0:r1, q0:q1] += d * patch
    return Heatmap(out, getattr(rf_map, "image_id", None))


def display_normalize(hm, cfg: HeatmapConfig = None) -> Heatmap:
    """Map the display range to [0, 1] and clamp; a constant input maps to zeros."""
    cfg = cfg or HeatmapConfig()
    values = np.asarray(getattr(hm, "values", hm), dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise InvalidInputError("heatmap contains non-finite entries")
    lo, hi_raw = values.min(), values.max()
    if cfg.display_mode == "relative":
        hi = lo + cfg.display_quantile * (hi_raw - lo)
    else:
        hi = cfg.display_quantile * hi_raw
    if not hi > lo:
        out = np.zeros_like(values)
    else:
        out = np.clip((values - lo) / (hi - lo), 0.0, 1.0)
    return Heatmap(out, getattr(hm, "image_id", None), getattr(hm, "model_id", None))


def apply_colormap(values: np.ndarray) -> np.ndarray:
    """[0, 1] array -> float RGB in 0..255 (not rounded)."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.stack([np.interp(v, COLORMAP_KNOTS, COLORMAP_RGB[:, k]) for k in range(3)], axis=-1)


def render_heatmap_image(hm, cfg: HeatmapConfig = None, underlay=None, path=None) -> np.ndarray:
    """Colour-map a normalised heatmap, optionally blend over an image, and write a PNG.

    ``underlay`` is an h x w x 3 array, either uint8 or floats in [0, 1].
    Returns the uint8 RGB raster.
    """
    values = np.asarray(getattr(hm, "values", hm), dtype=np.float64)
    rgb = apply_colormap(values)
    if underlay is not None:
        under = np.asarray(underlay)
        under = under.astype(np.float64) if under.dtype == np.uint8 else np.asarray(under, np.float64) * 255.0
        if under.shape[:2] != values.shape:
            under = np.asarray(Image.fromarray(np.round(np.clip(under, 0, 255)).astype(np.uint8))
                               .resize((values.shape[1], values.shape[0]), Image.BILINEAR), dtype=np.float64)
        if under.ndim == 2:
            under = np.repeat(under[..., None], 3, axis=-1)
        rgb = BLEND_ALPHA * rgb + (1 - BLEND_ALPHA) * under
    raster = np.round(rgb).astype(np.uint8)
    if path is not None:
        try:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(raster).save(path, format="PNG")
        except OSError as exc:
            raise FileWriteError(f"cannot write heatmap {path}: {exc}") from exc
    return raster


@dataclass
class ScoreHistogram:
    edges: np.ndarray
    counts_normal: np.ndarray
    counts_anomalous: np.ndarray

    def rows(self):
        for k in range(len(self.edges) - 1):
            yield (float(self.edges[k]), float(self.edges[k + 1]),
                   int(self.counts_normal[k]), int(self.counts_anomalous[k]))


def score_histogram(scores, labels, bins: int = 20) -> ScoreHistogram:
    """Equal-width bins over [min, max] of all scores; the last bin is closed on the right."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.size == 0 or scores.shape != labels.shape:
        raise InvalidInputError("scores and labels must be nonempty and of equal length")
    if bins < 1:
        raise InvalidParameterError("bins must be at least 1")
    edges = np.histogram_bin_edges(scores, bins=bins)
    c0, _ = np.histogram(scores[labels == 0], bins=edges)
    c1, _ = np.histogram(scores[labels == 1], bins=edges)
    return ScoreHistogram(edges, c0, c1)


def write_histogram(hist: ScoreHistogram, path) -> None:
    try:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, delimiter="\t", lineterminator="\n")
            w.writerow(["bin_lo", "bin_hi", "count_normal", "count_anomalous"])
            for lo, hi, a, b in hist.rows():
                w.writerow([repr(lo), repr(hi), a, b])
    except OSError as exc:
        raise FileWriteError(f"cannot write histogram {path}: {exc}") from exc
