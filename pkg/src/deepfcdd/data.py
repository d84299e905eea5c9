"""Dataset discovery, stratified splitting, image loading and a synthetic corpus.

Layout on disk::

    <root>/normal/*.png|jpg
    <root>/anomalous/*.png|jpg

Manifests serialise as tab-separated text with columns ``path label split id``;
paths are relative to the dataset root, which is recorded in a ``# root=``
header line together with the split seed.
"""
from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import FileWriteError, ImageLoadError, InvalidInputError, LayoutError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
CLASS_DIRS = {0: "normal", 1: "anomalous"}
SPLITS = ("train", "calibration", "test")
DEFECTS_FILE = "defects.tsv"


@dataclass(frozen=True)
class SampleRecord:
    path: str           # relative to the manifest root
    label: int
    split: Optional[str] = None
    id: str = ""


@dataclass
class DatasetManifest:
    records: list
    root: str
    seed: Optional[int] = None
    skipped: list = field(default_factory=list)

    def class_counts(self, split: Optional[str] = None) -> tuple:
        recs = self.records if split is None else self.in_split(split)
        n1 = sum(r.label for r in recs)
        return len(recs) - n1, n1

    def in_split(self, split: str) -> list:
        return [r for r in self.records if r.split == split]

    def by_id(self, ids) -> list:
        index = {r.id: r for r in self.records}
        missing = [i for i in ids if i not in index]
        if missing:
            raise InvalidInputError(f"ids not in manifest: {missing[:5]}")
        return [index[i] for i in ids]

    def abspath(self, record: SampleRecord) -> Path:
        return Path(self.root) / record.path


def record_id(relpath: str) -> str:
    return hashlib.sha1(relpath.encode("utf-8")).hexdigest()[:16]


def scan_dataset(root) -> DatasetManifest:
    """One record per readable image under ``normal/`` and ``anomalous/``.

    Unreadable files are listed in ``manifest.skipped`` instead of failing.
    """
    root = Path(root)
    for d in CLASS_DIRS.values():
        if not (root / d).is_dir():
            raise LayoutError(f"{root} has no {d}/ subdirectory")
    records, skipped = [], []
    for label, d in CLASS_DIRS.items():
        for p in sorted((root / d).iterdir()):
            if p.suffix.lower() not in IMAGE_SUFFIXES or not p.is_file():
                continue
            try:
                with Image.open(p) as im:
                    im.verify()
            except Exception as exc:
                skipped.append((str(p), str(exc)))
                continue
            rel = p.relative_to(root).as_posix()
            records.append(SampleRecord(rel, label, None, record_id(rel)))
    if skipped:
        log.warning("skipped %d unreadable images under %s", len(skipped), root)
    records.sort(key=lambda r: r.path)
    return DatasetManifest(records, str(root.resolve()), None, skipped)


def split_sizes(n: int, ratio) -> tuple:
    """Largest-remainder apportionment of ``n`` items; ties favour train, then calibration.

    Every part ends up within one item of its exact proportional share.
    """
    total = sum(ratio)
    exact = [n * r / total for r in ratio]
    sizes = [n * r // total for r in ratio]
    by_remainder = sorted(range(len(ratio)), key=lambda k: (-(n * ratio[k] % total), k))
    for k in by_remainder[:n - sum(sizes)]:
        sizes[k] += 1
    assert all(abs(s - e) < 1 for s, e in zip(sizes, exact))
    return tuple(sizes)


def split_manifest(m: DatasetManifest, ratio=(7, 1, 2), seed: int = 0) -> DatasetManifest:
    """Per-class shuffled split with counts from :func:`split_sizes`."""
    ratio = tuple(int(r) for r in ratio)
    if len(ratio) != 3 or any(r <= 0 for r in ratio):
        raise InvalidInputError(f"ratio must be three positive integers, got {ratio}")
    assigned = {}
    for label in (0, 1):
        recs = [r for r in m.records if r.label == label]
        if not recs:
            continue
        if len(recs) < len(ratio):
            log.warning("class %d has only %d records; all go to train", label, len(recs))
            assigned.update({r.id: "train" for r in recs})
            continue
        rng = np.random.default_rng([seed, label])
        order = rng.permutation(len(recs))
        n_train, n_cal, _ = split_sizes(len(recs), ratio)
        for rank, idx in enumerate(order):
            split = "train" if rank < n_train else "calibration" if rank < n_train + n_cal else "test"
            assigned[recs[idx].id] = split
    records = [replace(r, split=assigned[r.id]) for r in m.records]
    return DatasetManifest(records, m.root, seed, list(m.skipped))


def write_manifest(m: DatasetManifest, path) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            f.write(f"# root={m.root}\n# seed={'' if m.seed is None else m.seed}\n")
            w = csv.writer(f, delimiter="\t", lineterminator="\n")
            w.writerow(["path", "label", "split", "id"])
            for r in m.records:
                w.writerow([r.path, r.label, r.split or "", r.id])
    except OSError as exc:
        raise FileWriteError(f"cannot write manifest {path}: {exc}") from exc


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    meta, rows = {}, []
    with open(path, newline="") as f:
        lines = f.read().splitlines()
    body = []
    for line in lines:
        if line.startswith("#"):
            k, _, v = line[1:].strip().partition("=")
            meta[k] = v
        elif line:
            body.append(line)
    reader = csv.DictReader(body, delimiter="\t")
    for row in reader:
        rows.append(SampleRecord(row["path"], int(row["label"]), row["split"] or None, row["id"]))
    seed = meta.get("seed")
    return DatasetManifest(rows, meta.get("root", str(path.parent)), int(seed) if seed else None)


def load_image(path, target=(224, 224)) -> np.ndarray:
    """Decode to RGB, bilinear resize to ``target`` (h, w), scale to [0, 1] float32."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (target[1], target[0]):
                im = im.resize((target[1], target[0]), Image.BILINEAR)
            return np.asarray(im, dtype=np.float32) / 255.0
    except Exception as exc:
        raise ImageLoadError(f"cannot load image {path}: {exc}") from exc


def load_batch(m: DatasetManifest, ids, target=(224, 224)):
    """Images for ``ids`` in request order as an n x h x w x 3 array, plus labels."""
    records = m.by_id(list(ids))
    if not records:
        return np.zeros((0, target[0], target[1], 3), np.float32), np.zeros(0, np.int64)
    images = np.stack([load_image(m.abspath(r), target) for r in records])
    return images, np.array([r.label for r in records], dtype=np.int64)


# ----------------------------------------------------------------- synthetic

@dataclass
class SynthParams:
    n_normal: int = 400
    n_anomalous: int = 100
    image_size: int = 224
    texture_scale: float = 12.0     # gaussian smoothing of the noise field, in pixels
    defect_kind: str = "line"       # line | blob
    defect_contrast: float = 0.5
    line_width: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.n_normal < 0 or self.n_anomalous < 0:
            raise InvalidInputError("image counts must be nonnegative")
        if not self.defect_contrast > 0:
            raise InvalidInputError("defect contrast must be positive")
        if self.defect_kind not in ("line", "blob"):
            raise InvalidInputError(f"defect kind must be 'line' or 'blob', got {self.defect_kind!r}")


def _texture(rng: np.random.Generator, p: SynthParams) -> np.ndarray:
    s = p.image_size
    field_ = ndimage.gaussian_filter(rng.standard_normal((s, s)), p.texture_scale, mode="wrap")
    field_ /= field_.std() + 1e-12
    base = rng.uniform(0.45, 0.65)
    gray = base + 0.06 * field_ + 0.015 * rng.standard_normal((s, s))
    tint = rng.uniform(-0.03, 0.03, size=3)
    return np.clip(gray[..., None] + tint, 0.0, 1.0)


def _defect_mask(rng: np.random.Generator, p: SynthParams) -> np.ndarray:
    s = p.image_size
    yy, xx = np.mgrid[0:s, 0:s]
    margin = s // 8
    if p.defect_kind == "line":
        length = rng.uniform(0.3, 0.6) * s
        angle = rng.uniform(0, np.pi)
        cy, cx = rng.uniform(margin + length / 2 * 0.5, s - margin - length / 2 * 0.5, size=2)
        dy, dx = np.sin(angle), np.cos(angle)
        y0, x0 = cy - dy * length / 2, cx - dx * length / 2
        t = np.clip((yy - y0) * dy + (xx - x0) * dx, 0, length)
        dist = np.hypot(yy - (y0 + t * dy), xx - (x0 + t * dx))
        return dist <= p.line_width / 2
    r = rng.uniform(0.05, 0.1) * s
    cy, cx = rng.uniform(margin + r, s - margin - r, size=2)
    ry, rx = r * rng.uniform(0.7, 1.3, size=2)
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def synth_image(p: SynthParams, index: int, anomalous: bool, with_defect: bool = True):
    """One synthetic image and its defect mask.

    ``with_defect=False`` on an anomalous index returns the clean background the
    defect would have been painted on.
    """
    rng = np.random.default_rng([p.seed, int(anomalous), index])
    img = _texture(rng, p)
    mask = np.zeros(img.shape[:2], bool)
    if anomalous:
        mask = _defect_mask(rng, p)
        if with_defect:
            img = img.copy()
            img[mask] = np.clip(img[mask] - p.defect_contrast, 0.0, 1.0)
        else:
            mask = np.zeros_like(mask)
    return (np.round(img * 255)).astype(np.uint8), mask


def bounding_box(mask: np.ndarray) -> tuple:
    """(row0, col0, row1, col1) inclusive bounds of a nonempty mask."""
    rows, cols = np.nonzero(mask)
    return int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max())


def synth_dataset(p: SynthParams, out) -> Path:
    """Write a seeded corpus in the scan_dataset layout.

    Defect bounding boxes go to ``defects.tsv`` (name, kind, row0, col0, row1, col1).
    """
    out = Path(out)
    try:
        for label, d in CLASS_DIRS.items():
            (out / d).mkdir(parents=True, exist_ok=True)
        rows = []
        for label, count in ((0, p.n_normal), (1, p.n_anomalous)):
            for i in range(count):
                img, mask = synth_image(p, i, bool(label))
                name = f"{CLASS_DIRS[label]}/{CLASS_DIRS[label]}_{i:05d}.png"
                Image.fromarray(img).save(out / name, format="PNG")
                if label:
                    rows.append([name, p.defect_kind, *bounding_box(mask)])
        with open(out / DEFECTS_FILE, "w", newline="") as f:
            w = csv.writer(f, delimiter="\t", lineterminator="\n")
            w.writerow(["path", "kind", "row0", "col0", "row1", "col1"])
            w.writerows(rows)
    except OSError as exc:
        raise FileWriteError(f"cannot write synthetic corpus to {out}: {exc}") from exc
    return out


def read_defects(root) -> dict:
    """path -> (row0, col0, row1, col1) from a synthetic corpus."""
    with open(Path(root) / DEFECTS_FILE, newline="") as f:
        return {r["path"]: tuple(int(r[k]) for k in ("row0", "col0", "row1", "col1"))
                for r in csv.DictReader(f, delimiter="\t")}
