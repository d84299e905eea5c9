"""Command-line interface: ``deepfcdd {synth,split,train,score,eval,heatmap}``.

Settings come from three layers, later ones winning: built-in defaults, a flat
``key=value`` config file (``--config``), and command-line flags. The effective
configuration of a training run is written to ``<run-dir>/config.txt`` and can be passed back
with ``--config`` to repeat a run.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path


from . import core, data, evaluator, heatmap, trainer
from .backbone import forward, receptive_geometry
from .errors import ConfigError, FCDDError


MANIFEST = "manifest.tsv"
CHECKPOINT = "checkpoint.bin"
TRAIN_LOG = "train_log.tsv"
SCORES = "scores.tsv"
METRICS = "metrics.txt"
HISTOGRAM = "histogram.tsv"
HEATMAPS = "heatmaps"
CONFIG_ECHO = "config.txt"

DEFAULTS = {
    "run.seed": 0,
    "run.dataset": "",
    "run.dir": "run",
    "synth.n_normal": 400,
    "synth.n_anomalous": 100,
    "synth.image_size": 224,
    "synth.texture_scale": 12.0,
    "synth.defect_kind": "line",
    "synth.defect_contrast": 0.5,
    "synth.line_width": 5,
    "split.ratio": "7:1:2",
    "train.batch_size": 30,
    "train.epochs": 50,
    "train.learning_rate": 1e-4,
    "train.grad_decay": 0.9,
    "train.sq_grad_decay": 0.99,
    "train.use_anomalous_in_train": True,
    "train.backbone": "cnn27",
    "train.stability_floor": core.DEFAULT_STABILITY_FLOOR,
    "train.input_size": 224,
    "eval.bins": 20,
    "heatmap.sigma": 8.0,
    "heatmap.quantile": 0.25,
    "heatmap.mode": "relative",
    "heatmap.truncation_radius": 4.0,
    "heatmap.blend": False,
}


def _coerce(key: str, raw):
    default = DEFAULTS[key]
    if isinstance(raw, str) and not isinstance(default, str):
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
            return low in ("true", "1", "yes")
        try:
            return type(default)(raw.strip())
        except ValueError as exc:
            raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from exc
    return raw


def read_config(path) -> dict:
    """Parse ``key=value`` lines; ``#`` starts a comment. Unknown keys are rejected."""
    settings = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"{path}:{n}: expected key=value")
        if key not in DEFAULTS:
            raise ConfigError(f"{path}:{n}: unknown key {key!r}")
        settings[key] = _coerce(key, value.strip())
    return settings


def write_config(settings: dict, path) -> None:
    lines = [f"{k}={settings[k]}" for k in sorted(settings)]
    Path(path).write_text("\n".join(lines) + "\n")


def effective_config(args, overrides: dict) -> dict:
    settings = dict(DEFAULTS)
    if getattr(args, "config", None):
        settings.update(read_config(args.config))
    for key, value in overrides.items():
        if value is not None:
            settings[key] = _coerce(key, value)
    return settings


def parse_ratio(text: str) -> tuple:
    parts = text.split(":")
    try:
        ratio = tuple(int(p) for p in parts)
    except ValueError:
        ratio = ()
    if len(ratio) != 3 or any(r <= 0 for r in ratio):
        raise argparse.ArgumentTypeError(f"ratio must look like 7:1:2, got {text!r}")
    return ratio


def _train_config(s: dict) -> trainer.TrainConfig:
    return trainer.TrainConfig(
        batch_size=s["train.batch_size"], epochs=s["train.epochs"],
        learning_rate=s["train.learning_rate"], grad_decay=s["train.grad_decay"],
        sq_grad_decay=s["train.sq_grad_decay"], seed=s["run.seed"],
        use_anomalous_in_train=s["train.use_anomalous_in_train"],
        backbone=s["train.backbone"], stability_floor=s["train.stability_floor"],
        input_size=s["train.input_size"])


def _heatmap_config(s: dict) -> heatmap.HeatmapConfig:
    return heatmap.HeatmapConfig(sigma=s["heatmap.sigma"], display_quantile=s["heatmap.quantile"],
                                 truncation_radius=s["heatmap.truncation_radius"],
                                 display_mode=s["heatmap.mode"])


def _run_dir(s: dict) -> Path:
    d = Path(s["run.dir"])
    d.mkdir(parents=True, exist_ok=True)
    return d


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise ConfigError(f"{what} not found: {path}")
    return path


# ------------------------------------------------------------------ commands

def cmd_synth(args) -> int:
    s = effective_config(args, {
        "run.seed": args.seed, "synth.n_normal": args.n_normal,
        "synth.n_anomalous": args.n_anomalous, "synth.image_size": args.size,
        "synth.defect_kind": args.kind, "synth.defect_contrast": args.contrast,
        "run.dataset": args.out})
    p = data.SynthParams(s["synth.n_normal"], s["synth.n_anomalous"], s["synth.image_size"],
                         s["synth.texture_scale"], s["synth.defect_kind"],
                         s["synth.defect_contrast"], s["synth.line_width"], s["run.seed"])
    out = data.synth_dataset(p, s["run.dataset"])
    print(f"wrote {p.n_normal} normal and {p.n_anomalous} anomalous images to {out}")
    return 0


def cmd_split(args) -> int:
    s = effective_config(args, {"run.seed": args.seed, "run.dataset": args.input,
                                "run.dir": args.run_dir, "split.ratio": args.ratio})
    ratio = parse_ratio(s["split.ratio"]) if isinstance(s["split.ratio"], str) else s["split.ratio"]
    m = data.split_manifest(data.scan_dataset(_require(Path(s["run.dataset"]), "dataset")),
                            ratio, s["run.seed"])
    run = _run_dir(s)
    data.write_manifest(m, run / MANIFEST)
    for split in data.SPLITS:
        n0, n1 = m.class_counts(split)
        print(f"{split}: {n0} normal, {n1} anomalous")
    for path, why in m.skipped:
        print(f"skipped {path}: {why}", file=sys.stderr)
    return 0


def cmd_train(args) -> int:
    s = effective_config(args, {
        "run.seed": args.seed, "run.dir": args.run_dir, "train.epochs": args.epochs,
        "train.batch_size": args.batch_size, "train.learning_rate": args.learning_rate,
        "train.backbone": args.backbone,
        "train.use_anomalous_in_train": None if args.normal_only is None else not args.normal_only})
    run = Path(s["run.dir"])
    manifest_path = Path(args.manifest) if args.manifest else run / MANIFEST
    m = data.read_manifest(_require(manifest_path, "manifest"))
    run = _run_dir(s)
    cfg = _train_config(s)
    ckpt = trainer.train(cfg, m, log_path=run / TRAIN_LOG)
    trainer.save_checkpoint(ckpt, run / CHECKPOINT)
    write_config(s, run / CONFIG_ECHO)
    print(f"checkpoint written to {run / CHECKPOINT}")
    return 0


def _load_run(args, s):
    run = Path(s["run.dir"])
    ckpt = trainer.load_checkpoint(_require(Path(args.model) if args.model else run / CHECKPOINT, "model"))
    m = data.read_manifest(_require(Path(args.manifest) if args.manifest else run / MANIFEST, "manifest"))
    return run, ckpt, m


def cmd_score(args) -> int:
    s = effective_config(args, {"run.dir": args.run_dir})
    run, ckpt, m = _load_run(args, s)
    records = evaluator.score_dataset(ckpt, m, args.split)
    evaluator.write_scores(records, _run_dir(s) / SCORES)
    print(f"scored {len(records)} {args.split} images")
    return 0


def cmd_eval(args) -> int:
    s = effective_config(args, {"run.dir": args.run_dir, "eval.bins": args.bins})
    run, ckpt, m = _load_run(args, s)
    net = ckpt.network()
    calib = evaluator.score_dataset(ckpt, m, "calibration", net=net)
    threshold = evaluator.calibrate_threshold(calib)
    test = evaluator.score_dataset(ckpt, m, "test", net=net)
    evaluator.roc_auc(test)   # single-class test split is an error here
    report = evaluator.classification_metrics(test, threshold)
    hist = heatmap.score_histogram([r.score for r in test], [r.label for r in test], s["eval.bins"])
    run = _run_dir(s)
    evaluator.write_scores(test, run / SCORES)
    evaluator.write_metrics(report, run / METRICS)
    heatmap.write_histogram(hist, run / HISTOGRAM)
    for flag in report.flags:
        print(f"warning: {flag}", file=sys.stderr)
    print(f"auc={report.auc:.4f} f1={report.f1:.4f} precision={report.precision:.4f} "
          f"recall={report.recall:.4f} threshold={report.threshold:.6g}")
    return 0


def _image_paths(spec: str) -> list:
    p = Path(spec)
    if p.is_dir():
        return sorted(q for q in p.rglob("*") if q.suffix.lower() in data.IMAGE_SUFFIXES)
    return [_require(p, "image")]


def heatmap_for_image(ckpt, net, path, cfg: heatmap.HeatmapConfig):
    """(raw heatmap, normalised heatmap, resized source image) for one file."""
    spec = ckpt.spec
    image = data.load_image(path, spec.input_size[:2])
    vol = forward(net, spec, image[None], "eval", [str(path)])[0]
    rf = core.pseudo_huber_map(vol)
    raw = heatmap.upsample_heatmap(rf, receptive_geometry(spec), cfg)
    return raw, heatmap.display_normalize(raw, cfg), image


def cmd_heatmap(args) -> int:
    s = effective_config(args, {"run.dir": args.run_dir, "heatmap.sigma": args.sigma,
                                "heatmap.quantile": args.quantile, "heatmap.mode": args.mode,
                                "heatmap.blend": args.blend})
    run = Path(s["run.dir"])
    ckpt = trainer.load_checkpoint(_require(Path(args.model) if args.model else run / CHECKPOINT, "model"))
    cfg = _heatmap_config(s)
    paths = _image_paths(args.images)
    out_dir = Path(args.out) if args.out else _run_dir(s) / HEATMAPS
    net = ckpt.network()
    for path in paths:
        _, norm, image = heatmap_for_image(ckpt, net, path, cfg)
        underlay = image if s["heatmap.blend"] else None
        heatmap.render_heatmap_image(norm, cfg, underlay, out_dir / f"{Path(path).stem}.png")
    print(f"wrote {len(paths)} heatmaps to {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deepfcdd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, run_dir=True):
        p.add_argument("--config", help="key=value settings file")
        if run_dir:
            p.add_argument("--run-dir", help="output directory (default: run)")

    p = sub.add_parser("synth", help="write a synthetic defect corpus")
    common(p, run_dir=False)
    p.add_argument("--out", required=True)
    p.add_argument("--n-normal", type=int)
    p.add_argument("--n-anomalous", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--kind", choices=("line", "blob"))
    p.add_argument("--contrast", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="scan a dataset and write a stratified manifest")
    common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--ratio", type=lambda t: (parse_ratio(t), t)[1])
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a detector on the manifest's train split")
    common(p)
    p.add_argument("--manifest")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--backbone")
    p.add_argument("--seed", type=int)
    p.add_argument("--normal-only", action="store_true", default=None,
                   help="exclude anomalous images from training batches")
    p.set_defaults(func=cmd_train)

    for name, func, hlp in (("score", cmd_score, "score one split"),
                            ("eval", cmd_eval, "calibrate on calibration split, report test metrics")):
        p = sub.add_parser(name, help=hlp)
        common(p)
        p.add_argument("--model")
        p.add_argument("--manifest")
        if name == "score":
            p.add_argument("--split", default="test", choices=data.SPLITS)
        else:
            p.add_argument("--bins", type=int)
        p.set_defaults(func=func)

    p = sub.add_parser("heatmap", help="render damage heatmaps for images")
    common(p)
    p.add_argument("--model")
    p.add_argument("--images", required=True, help="image file or directory")
    p.add_argument("--out", help="output directory (default: <run-dir>/heatmaps)")
    p.add_argument("--sigma", type=float)
    p.add_argument("--quantile", type=float)
    p.add_argument("--mode", choices=("relative", "absolute"))
    p.add_argument("--blend", action="store_true", default=None, help="blend over the source image")
    p.set_defaults(func=cmd_heatmap)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FCDDError, OSError) as exc:
        print(f"deepfcdd {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
