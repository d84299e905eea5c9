"""Scoring, ROC AUC, threshold calibration and thresholded metrics."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from . import core
from .backbone import forward
from .data import DatasetManifest, load_image
from .errors import FileWriteError, InvalidInputError, UndefinedMetricError

METRIC_FIELDS = ("auc", "f1", "precision", "recall", "threshold", "tp", "fp", "fn", "tn", "n")


@dataclass
class ScoreRecord:
    image_id: str
    score: float
    label: int
    predicted: Optional[int] = None
    path: str = ""


@dataclass
class MetricsReport:
    auc: Optional[float]
    f1: float
    precision: float
    recall: float
    threshold: float
    tp: int
    fp: int
    fn: int
    tn: int
    n: int
    flags: list = field(default_factory=list)
    histogram: Optional[str] = None

    def as_document(self) -> dict:
        return {k: getattr(self, k) for k in METRIC_FIELDS}


def score_dataset(ckpt, manifest: DatasetManifest, split: str = "test", batch_size: int = 30,
                  net=None) -> list:
    """Eval-mode anomaly score of every record in ``split``, in manifest order."""
    records = manifest.in_split(split)
    if not records:
        raise InvalidInputError(f"split {split!r} is empty")
    net = net if net is not None else ckpt.network()
    spec = ckpt.spec
    target = spec.input_size[:2]
    out = []
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        images = np.stack([load_image(manifest.abspath(r), target) for r in chunk])
        vols = forward(net, spec, images, "eval", [r.id for r in chunk])
        for r, v in zip(chunk, vols):
            s = core.anomaly_score(core.pseudo_huber_map(v))
            out.append(ScoreRecord(r.id, s, r.label, None, r.path))
    return out


def _split_scores(records):
    scores = np.array([r.score for r in records], dtype=np.float64)
    labels = np.array([r.label for r in records], dtype=np.int64)
    return scores, labels


def roc_auc(records) -> float:
    """P(S_anomalous > S_normal) + 0.5 P(tie), via average ranks (Mann-Whitney U)."""
    scores, labels = _split_scores(records)
    n1 = int(labels.sum())
    n0 = len(labels) - n1
    if n0 == 0 or n1 == 0:
        raise UndefinedMetricError("AUC needs both normal and anomalous records")
    ranks = rankdata(scores)
    u = ranks[labels == 1].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n0 * n1))


def _f1(tp, fp, fn):
    denom = 2 * tp + fp + fn
    return np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)


def threshold_candidates(scores) -> np.ndarray:
    distinct = np.unique(scores)
    mids = (distinct[:-1] + distinct[1:]) / 2.0
    return np.concatenate([[-np.inf], mids, [np.inf]])


def calibrate_threshold(records) -> float:
    """F1-maximising threshold over midpoints of consecutive distinct scores
    and +-inf; ties go to the smallest threshold. Decision rule is S >= t."""
    scores, labels = _split_scores(records)
    if labels.sum() == 0 or labels.sum() == len(labels):
        raise UndefinedMetricError("threshold calibration needs both classes")
    cands = threshold_candidates(scores)
    order = np.argsort(scores, kind="stable")
    s_sorted, y_sorted = scores[order], labels[order]
    # records with score >= t are those from index searchsorted(left) onward
    first = np.searchsorted(s_sorted, cands, side="left")
    pos_tail = np.concatenate([np.cumsum(y_sorted[::-1])[::-1], [0]])
    tp = pos_tail[first]
    predicted = len(scores) - first
    fp = predicted - tp
    fn = labels.sum() - tp
    f1 = _f1(tp, fp, fn)
    return float(cands[int(np.argmax(f1))])


def classification_metrics(records, threshold: float) -> MetricsReport:
    if not records:
        raise InvalidInputError("no records to evaluate")
    scores, labels = _split_scores(records)
    pred = (scores >= threshold).astype(np.int64)
    for r, p in zip(records, pred):
        r.predicted = int(p)
    tp = int(np.sum((pred == 1) & (labels == 1)))
    fp = int(np.sum((pred == 1) & (labels == 0)))
    fn = int(np.sum((pred == 0) & (labels == 1)))
    tn = int(np.sum((pred == 0) & (labels == 0)))
    flags = []
    if tp + fp == 0:
        precision = 0.0
        flags.append("precision_undefined")
    else:
        precision = tp / (tp + fp)
    if tp + fn == 0:
        recall = 0.0
        flags.append("recall_undefined")
    else:
        recall = tp / (tp + fn)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    try:
        auc = roc_auc(records)
        if auc < 0.5:
            flags.append("auc_below_chance")
    except UndefinedMetricError:
        auc = None
        flags.append("auc_undefined")
    return MetricsReport(auc, f1, precision, recall, float(threshold), tp, fp, fn, tn, len(records), flags)


def write_scores(records, path) -> None:
    try:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, delimiter="\t", lineterminator="\n")
            w.writerow(["id", "path", "score", "label", "predicted"])
            for r in records:
                w.writerow([r.image_id, r.path, repr(r.score), r.label,
                            "" if r.predicted is None else r.predicted])
    except OSError as exc:
        raise FileWriteError(f"cannot write scores {path}: {exc}") from exc


def read_scores(path) -> list:
    with open(path, newline="") as f:
        return [ScoreRecord(r["id"], float(r["score"]), int(r["label"]),
                            int(r["predicted"]) if r["predicted"] else None, r["path"])
                for r in csv.DictReader(f, delimiter="\t")]


def write_metrics(report: MetricsReport, path) -> None:
    try:
        Path(path).write_text(json.dumps(report.as_document(), indent=2) + "\n")
    except OSError as exc:
        raise FileWriteError(f"cannot write metrics {path}: {exc}") from exc
