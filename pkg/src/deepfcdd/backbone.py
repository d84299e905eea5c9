"""Declarative convolutional backbones that map an image to a feature volume.

A :class:`BackboneSpec` lists layers; :func:`build_backbone` turns it into a
torch module whose ``state_dict`` is the parameter state (conv kernels and
biases, batchnorm scale/shift and running statistics). Batches cross the API
as channels-last numpy arrays; torch's NCHW layout stays internal.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

from .core import FeatureVolume
from .errors import (InvalidInputError, UnsupportedBackboneError,
                     UnsupportedGeometryError, WeightLoadError)

BN_EPS = 1e-5
# running = 0.9 * running + 0.1 * batch  (torch counts momentum the other way)
BN_MOMENTUM = 0.1
HEAD_CHANNELS = 512
FIELD_SIZE = 28


@dataclass
class LayerSpec:
    name: str
    kind: str                      # conv | batchnorm | relu | maxpool
    kernel: int = 0
    out_channels: int = 0
    stride: int = 1
    padding: str = "same"          # same | none

    def __post_init__(self):
        if self.kind not in ("conv", "batchnorm", "relu", "maxpool"):
            raise InvalidInputError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv" and (self.kernel < 1 or self.out_channels < 1):
            raise InvalidInputError(f"{self.name}: conv needs kernel and out_channels")
        if self.kind == "maxpool" and (self.kernel != 2 or self.stride != 2):
            raise InvalidInputError(f"{self.name}: maxpool must be 2x2 stride 2")


@dataclass
class BackboneSpec:
    name: str
    layers: list
    input_size: tuple = (224, 224, 3)
    output_size: Optional[tuple] = None
    # adapters: the published network that was truncated, and where
    base: Optional[str] = None
    truncate_at: Optional[str] = None

    def __post_init__(self):
        self.layers = [l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layers]
        self.input_size = tuple(self.input_size)
        if self.base is None:
            derived = shape_plan(self)[-1][1]
            if self.output_size is None:
                self.output_size = derived
            elif tuple(self.output_size) != derived:
                raise InvalidInputError(
                    f"{self.name}: declared output {tuple(self.output_size)} but layers give {derived}")
        self.output_size = tuple(self.output_size)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneSpec":
        return cls(**d)


def shape_plan(spec: BackboneSpec) -> list:
    """Output shape (h, w, c) after every layer, in order."""
    h, w, c = spec.input_size
    plan = []
    for layer in spec.layers:
        if layer.kind == "conv":
            if layer.padding == "none":
                h, w = (h - layer.kernel) // layer.stride + 1, (w - layer.kernel) // layer.stride + 1
            else:
                h, w = math.ceil(h / layer.stride), math.ceil(w / layer.stride)
            c = layer.out_channels
        elif layer.kind == "maxpool":
            h, w = h // 2, w // 2
        plan.append((layer.name, (h, w, c)))
    return plan


def param_count(spec: BackboneSpec) -> dict:
    """Learnable parameters per layer plus ``"total"``.

    conv: k*k*C_in*C_out + C_out; batchnorm: 2*C. Running statistics are not
    learnable and are not counted.
    """
    counts = {}
    c = spec.input_size[2]
    for layer in spec.layers:
        if layer.kind == "conv":
            counts[layer.name] = layer.kernel ** 2 * c * layer.out_channels + layer.out_channels
            c = layer.out_channels
        elif layer.kind == "batchnorm":
            counts[layer.name] = 2 * c
    counts["total"] = sum(counts.values())
    return counts


def _conv_bn_relu(i: int, channels: int) -> list:
    return [LayerSpec(f"conv{i}", "conv", 3, channels),
            LayerSpec(f"bn{i}", "batchnorm"),
            LayerSpec(f"relu{i}", "relu")]


def cnn27_spec(input_size=(224, 224, 3)) -> BackboneSpec:
    layers = (_conv_bn_relu(1, 64) + [LayerSpec("pool1", "maxpool", 2, stride=2)]
              + _conv_bn_relu(2, 128) + [LayerSpec("pool2", "maxpool", 2, stride=2)]
              + _conv_bn_relu(3, 256) + _conv_bn_relu(4, 256)
              + [LayerSpec("pool3", "maxpool", 2, stride=2)]
              + _conv_bn_relu(5, 512) + _conv_bn_relu(6, 512) + _conv_bn_relu(7, 512)
              + [LayerSpec("conv8", "conv", 1, HEAD_CHANNELS)])
    return BackboneSpec("cnn27", layers, input_size)


class SequentialBackbone(nn.Module):
    """Torch realisation of a layer list; module names follow the LayerSpec names."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        c = spec.input_size[2]
        self.layers = nn.ModuleDict()
        for layer in spec.layers:
            if layer.kind == "conv":
                pad = layer.kernel // 2 if layer.padding == "same" else 0
                mod = nn.Conv2d(c, layer.out_channels, layer.kernel, layer.stride, pad)
                c = layer.out_channels
            elif layer.kind == "batchnorm":
                mod = nn.BatchNorm2d(c, eps=BN_EPS, momentum=BN_MOMENTUM)
            elif layer.kind == "relu":
                mod = nn.ReLU()
            else:
                mod = nn.MaxPool2d(2, 2)
            self.layers[layer.name] = mod

    def forward(self, x):
        for mod in self.layers.values():
            x = mod(x)
        return x


def init_params(net: nn.Module, seed: int = 0) -> nn.Module:
    """He-normal conv kernels (variance 2/(k*k*C_in)), zero biases, BN scale 1 / shift 0."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for mod in net.modules():
            if isinstance(mod, nn.Conv2d):
                fan_in = mod.in_channels * mod.kernel_size[0] * mod.kernel_size[1]
                mod.weight.copy_(torch.randn(mod.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                if mod.bias is not None:
                    mod.bias.zero_()
            elif isinstance(mod, nn.BatchNorm2d):
                mod.reset_running_stats()
                mod.weight.fill_(1.0)
                mod.bias.zero_()
    return net


_REGISTRY = {"cnn27": cnn27_spec}


def registered_backbones() -> list:
    return sorted(_REGISTRY) + sorted(ADAPTERS)


def build_backbone(name: str, seed: int = 0, input_size=(224, 224, 3)):
    """Return ``(spec, net)`` for a registered backbone with fresh parameters."""
    key = name.lower()
    if key in ADAPTERS:
        return adapt_backbone(key, seed=seed, input_size=input_size)
    if key not in _REGISTRY:
        raise UnsupportedBackboneError(f"unsupported backbone {name!r}; choose from {registered_backbones()}")
    spec = _REGISTRY[key](input_size)
    return spec, _channels_last(init_params(SequentialBackbone(spec), seed))


def _channels_last(net: nn.Module) -> nn.Module:
    # oneDNN convolutions run about 20% faster on NHWC-strided tensors on CPU
    return net.to(memory_format=torch.channels_last)


def to_nchw(batch: np.ndarray) -> torch.Tensor:
    # a transposed view of NHWC data already has channels-last strides
    return torch.from_numpy(np.ascontiguousarray(batch, dtype=np.float32).transpose(0, 3, 1, 2))


def forward(net: nn.Module, spec: BackboneSpec, batch: np.ndarray, mode: str = "eval",
            image_ids=None) -> list:
    """Map an n x h x w x 3 image batch to n feature volumes of ``spec.output_size``.

    ``mode="train"`` updates batchnorm running statistics; ``"eval"`` uses the
    stored ones and leaves the parameter state untouched.
    """
    batch = np.asarray(batch)
    if batch.ndim != 4 or tuple(batch.shape[1:]) != spec.input_size:
        raise InvalidInputError(f"expected batch of shape n x {spec.input_size}, got {batch.shape}")
    if mode not in ("train", "eval"):
        raise InvalidInputError(f"mode must be 'train' or 'eval', got {mode!r}")
    was_training = net.training
    net.train(mode == "train")
    try:
        with torch.no_grad():
            out = net(to_nchw(batch))
    finally:
        net.train(was_training)
    out = out.permute(0, 2, 3, 1).double().numpy()
    if out.shape[1:] != spec.output_size:
        raise InvalidInputError(f"{spec.name} produced {out.shape[1:]}, expected {spec.output_size}")
    ids = image_ids if image_ids is not None else range(len(out))
    return [FeatureVolume(v, i) for v, i in zip(out, ids)]


@dataclass
class FieldGeometry:
    """Where each receptive-field cell sits in input-pixel coordinates."""

    map_size: tuple           # (u, v)
    image_size: tuple         # (h, w)
    stride: tuple             # (h/u, w/v)
    row_centers: np.ndarray = field(repr=False, default=None)
    col_centers: np.ndarray = field(repr=False, default=None)

    @classmethod
    def uniform(cls, image_size, map_size) -> "FieldGeometry":
        (h, w), (u, v) = image_size, map_size
        if u < 1 or v < 1 or h % u or w % v:
            raise UnsupportedGeometryError(f"map {u}x{v} does not tile image {h}x{w} with an integer stride")
        sr, sc = h // u, w // v
        return cls((u, v), (h, w), (sr, sc),
                   (np.arange(u) + 0.5) * sr, (np.arange(v) + 0.5) * sc)

    def center(self, i: int, j: int) -> tuple:
        return float(self.row_centers[i]), float(self.col_centers[j])


def receptive_geometry(spec: BackboneSpec) -> FieldGeometry:
    h, w, _ = spec.input_size
    u, v, _ = spec.output_size
    return FieldGeometry.uniform((h, w), (u, v))


# ---------------------------------------------------------------- adapters
#
# Deeper backbones are the published torchvision architectures cut at the last
# stage whose output is still at least 28x28 for a 224x224 input, followed by a
# 1x1 conv to 512 channels. Inception's stem reaches 52x52 there, so an average
# pool brings it to 28x28 before the head.

class AdaptedBackbone(nn.Module):
    def __init__(self, trunk: nn.Module, trunk_channels: int, resize_to: Optional[int] = None):
        super().__init__()
        self.trunk = trunk
        self.resize = nn.AdaptiveAvgPool2d(resize_to) if resize_to else nn.Identity()
        self.head = nn.Conv2d(trunk_channels, HEAD_CHANNELS, 1)

    def forward(self, x):
        return self.head(self.resize(self.trunk(x)))


def _vgg16():
    from torchvision.models import vgg16
    feats = vgg16(weights=None).features
    # features[22] is relu4_3; features[23] is pool4 (28 -> 14)
    return nn.Sequential(*list(feats.children())[:23]), 512, None, "features.22 (relu4_3)"


def _resnet101():
    from torchvision.models import resnet101
    r = resnet101(weights=None)
    # layer2 ends at stride 8 (28x28x512); layer3 would drop to 14x14
    trunk = nn.Sequential(r.conv1, r.bn1, r.relu, r.maxpool, r.layer1, r.layer2)
    return trunk, 512, None, "layer2"


def _inceptionv3():
    from torchvision.models import inception_v3
    m = inception_v3(weights=None, aux_logits=False, init_weights=False)
    # Conv2d_4a_3x3 output is 52x52x192 at 224 input; maxpool2 would give 25x25
    trunk = nn.Sequential(m.Conv2d_1a_3x3, m.Conv2d_2a_3x3, m.Conv2d_2b_3x3, m.maxpool1,
                          m.Conv2d_3b_1x1, m.Conv2d_4a_3x3)
    return trunk, 192, FIELD_SIZE, "Conv2d_4a_3x3"


ADAPTERS = {"vgg16": _vgg16, "resnet101": _resnet101, "inceptionv3": _inceptionv3}


def adapter_manifest(net: nn.Module) -> dict:
    """Tensor name -> (shape, dtype) that a weight archive for ``net`` must provide."""
    return {k: (tuple(v.shape), str(v.dtype).replace("torch.", ""))
            for k, v in net.state_dict().items() if v.dtype.is_floating_point}


def load_weight_archive(net: nn.Module, path) -> nn.Module:
    """Load a named-tensor ``.npz`` archive after checking it against the manifest.

    Every floating-point tensor of ``net`` must be present with matching shape;
    extra names are an error too.
    """
    manifest = adapter_manifest(net)
    try:
        with np.load(Path(path), allow_pickle=False) as archive:
            tensors = {k: archive[k] for k in archive.files}
    except (OSError, ValueError, EOFError) as exc:
        raise WeightLoadError(f"cannot read weight archive {path}: {exc}") from exc
    except Exception as exc:  # zipfile.BadZipFile and friends
        raise WeightLoadError(f"cannot read weight archive {path}: {exc}") from exc
    missing = sorted(set(manifest) - set(tensors))
    extra = sorted(set(tensors) - set(manifest))
    if missing or extra:
        raise WeightLoadError(f"{path}: missing tensors {missing[:5]}, unexpected tensors {extra[:5]}")
    for k, (shape, _) in manifest.items():
        if tuple(tensors[k].shape) != shape:
            raise WeightLoadError(f"{path}: tensor {k} has shape {tensors[k].shape}, expected {shape}")
    state = net.state_dict()
    with torch.no_grad():
        for k, arr in tensors.items():
            state[k].copy_(torch.from_numpy(np.asarray(arr)).to(state[k].dtype))
    return net


def adapt_backbone(name: str, weights=None, seed: int = 0, input_size=(224, 224, 3)):
    """Truncated deeper backbone plus 1x1 head, randomly initialised unless ``weights`` is given."""
    key = name.lower()
    if key not in ADAPTERS:
        raise UnsupportedBackboneError(f"no adapter for {name!r}; choose from {sorted(ADAPTERS)}")
    torch.manual_seed(seed)
    trunk, channels, resize_to, cut = ADAPTERS[key]()
    net = AdaptedBackbone(trunk, channels, resize_to)
    init_params(net, seed)
    if weights is not None:
        load_weight_archive(net, weights)
    net.eval()
    with torch.no_grad():
        out = net(torch.zeros(1, input_size[2], input_size[0], input_size[1]))
    spec = BackboneSpec(key, [LayerSpec("head", "conv", 1, HEAD_CHANNELS)], input_size,
                        output_size=(out.shape[2], out.shape[3], out.shape[1]),
                        base=key, truncate_at=cut)
    return spec, net


def rebuild(spec: BackboneSpec, seed: int = 0) -> nn.Module:
    """Fresh network matching a BackboneSpec (used when restoring checkpoints)."""
    if spec.base is not None:
        return adapt_backbone(spec.base, seed=seed, input_size=spec.input_size)[1]
    return _channels_last(init_params(SequentialBackbone(spec), seed))
