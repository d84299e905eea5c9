"""Training loop for FCDD detectors.

One step: forward the batch through the backbone in train mode, evaluate the
spatial pseudo-Huber loss and its gradient with respect to the feature volume
in numpy (:mod:`deepfcdd.core`), push that gradient back through the network
with torch autograd, then apply a bias-corrected Adam update.
"""
from __future__ import annotations

import json
import logging
import math
import time
import zipfile
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from . import core
from .backbone import BackboneSpec, build_backbone, rebuild, to_nchw
from .data import DatasetManifest, load_image
from .errors import (CheckpointFormatError, ConfigError, FileWriteError,
                     InvalidInputError, TrainingDivergedError, VersionMismatchError)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    batch_size: int = 30
    epochs: int = 50
    learning_rate: float = 1e-4
    grad_decay: float = 0.9
    sq_grad_decay: float = 0.99
    seed: int = 0
    use_anomalous_in_train: bool = True
    backbone: str = "cnn27"
    stability_floor: float = core.DEFAULT_STABILITY_FLOOR
    input_size: int = 224

    def __post_init__(self):
        if self.input_size < 1:
            raise ConfigError("input_size must be positive")
        if not (0 < self.grad_decay < 1 and 0 < self.sq_grad_decay < 1):
            raise ConfigError("decay factors must lie strictly between 0 and 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be nonnegative")


@dataclass
class OptState:
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "OptState":
        return cls({k: torch.zeros_like(v) for k, v in params.items()},
                   {k: torch.zeros_like(v) for k, v in params.items()}, 0)


def adam_step(params: dict, grads: dict, opt: OptState, cfg: TrainConfig):
    """In-place bias-corrected Adam update of named tensors; returns ``(params, opt)``."""
    if set(params) != set(grads):
        raise InvalidInputError("params and grads name different tensors")
    b1, b2 = cfg.grad_decay, cfg.sq_grad_decay
    opt.step += 1
    c1 = 1 - b1 ** opt.step
    c2 = 1 - b2 ** opt.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise InvalidInputError(f"gradient for {name} has shape {tuple(g.shape)}, param {tuple(p.shape)}")
            m = opt.first_moment.setdefault(name, torch.zeros_like(p))
            v = opt.second_moment.setdefault(name, torch.zeros_like(p))
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.sub_(cfg.learning_rate * (m / c1) / ((v / c2).sqrt() + ADAM_EPS))
    return params, opt


@dataclass
class Checkpoint:
    spec: BackboneSpec
    state: dict                    # name -> numpy array (includes BN running stats)
    config: TrainConfig
    epoch: int = 0
    loss_trace: list = field(default_factory=list)
    version: int = FORMAT_VERSION

    def network(self) -> torch.nn.Module:
        net = rebuild(self.spec, self.config.seed)
        net.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in self.state.items()})
        net.eval()
        return net


def _state_arrays(net: torch.nn.Module) -> dict:
    return {k: v.detach().cpu().numpy().copy() for k, v in net.state_dict().items()}


def save_checkpoint(c: Checkpoint, path) -> None:
    """npz container: one entry per tensor plus a JSON ``__meta__`` entry."""
    meta = {"version": c.version, "spec": c.spec.to_dict(), "config": asdict(c.config),
            "epoch": c.epoch, "loss_trace": list(map(float, c.loss_trace))}
    arrays = {f"param/{k}": v for k, v in c.state.items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            np.savez(f, **arrays)
    except OSError as exc:
        raise FileWriteError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> Checkpoint:
    try:
        with np.load(Path(path), allow_pickle=False) as z:
            meta = json.loads(bytes(z["__meta__"]).decode("utf-8"))
            state = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    except FileNotFoundError:
        raise
    except (zipfile.BadZipFile, KeyError, ValueError, EOFError, OSError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path} is not a valid checkpoint: {exc}") from exc
    if meta.get("version") != FORMAT_VERSION:
        raise VersionMismatchError(
            f"{path} has checkpoint format version {meta.get('version')}, this build reads {FORMAT_VERSION}")
    return Checkpoint(BackboneSpec.from_dict(meta["spec"]), state, TrainConfig(**meta["config"]),
                      meta["epoch"], meta["loss_trace"], meta["version"])


def _configure_determinism():
    torch.use_deterministic_algorithms(True)


def train_step(net, images: np.ndarray, labels, params: dict, opt: OptState,
               cfg: TrainConfig, svdd: core.SVDDConfig) -> float:
    net.train()
    for p in params.values():
        p.grad = None
    out = net(to_nchw(images))
    feats = out.detach().permute(0, 2, 3, 1).double().numpy()
    batch = core.LabeledSampleBatch(list(feats), list(labels))
    loss, grads = core.loss_and_gradients(batch, svdd)
    if not math.isfinite(loss):
        raise TrainingDivergedError(f"non-finite loss {loss} at optimizer step {opt.step + 1}")
    g = torch.from_numpy(np.stack(grads)).permute(0, 3, 1, 2).to(out.dtype)
    out.backward(g)
    named_grads = {k: p.grad for k, p in params.items()}
    if not all(torch.isfinite(v).all() for v in named_grads.values()):
        raise TrainingDivergedError(f"non-finite gradient at optimizer step {opt.step + 1}")
    adam_step(params, named_grads, opt, cfg)
    return loss


def train(cfg: TrainConfig, manifest: DatasetManifest, log_path=None,
          on_batch: Optional[Callable] = None) -> Checkpoint:
    """Train a backbone on the manifest's train split and return the final checkpoint.

    ``on_batch(epoch, step, labels, loss)`` is called after every optimizer step.
    The train split is reshuffled each epoch from (seed, epoch); the last
    partial batch is kept.
    """
    _configure_determinism()
    target = (cfg.input_size, cfg.input_size)
    records = manifest.in_split("train")
    if not cfg.use_anomalous_in_train:
        records = [r for r in records if r.label == 0]
    if not records:
        raise ConfigError("train split has no usable records")
    spec, net = build_backbone(cfg.backbone, seed=cfg.seed, input_size=(target[0], target[1], 3))
    params = dict(net.named_parameters())
    opt = OptState.zeros_like(params)
    svdd = core.SVDDConfig(stability_floor=cfg.stability_floor)

    cache = {}

    def image(r):
        if r.id not in cache:
            cache[r.id] = load_image(manifest.abspath(r), target)
        return cache[r.id]

    trace, log_rows = [], []
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(records))
        losses, weights = [], []
        for start in range(0, len(order), cfg.batch_size):
            chunk = [records[i] for i in order[start:start + cfg.batch_size]]
            labels = [r.label for r in chunk]
            loss = train_step(net, np.stack([image(r) for r in chunk]), labels, params, opt, cfg, svdd)
            step += 1
            losses.append(loss)
            weights.append(len(chunk))
            if on_batch is not None:
                on_batch(epoch, step, labels, loss)
        mean_loss = float(np.average(losses, weights=weights))
        trace.append(mean_loss)
        log_rows.append((epoch + 1, mean_loss, time.perf_counter() - t0))
        log.info("epoch %d/%d mean loss %.6f (%.1fs)", epoch + 1, cfg.epochs, mean_loss, log_rows[-1][2])
    if log_path is not None:
        write_train_log(log_rows, log_path)
    net.eval()
    return Checkpoint(spec, _state_arrays(net), cfg, cfg.epochs, trace)


def write_train_log(rows, path) -> None:
    try:
        with open(path, "w") as f:
            f.write("epoch\tmean_loss\twall_seconds\n")
            for epoch, loss, secs in rows:
                f.write(f"{epoch}\t{loss!r}\t{secs:.3f}\n")
    except OSError as exc:
        raise FileWriteError(f"cannot write training log {path}: {exc}") from exc
