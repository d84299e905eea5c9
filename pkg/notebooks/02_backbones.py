# %% [markdown]
# # Backbones
#
# CNN27 stacks conv-batchnorm-relu blocks with three 2x2 poolings, so a
# 224 x 224 image becomes a 28 x 28 grid of 512-channel features.

# %%
import numpy as np

from deepfcdd.backbone import (adapt_backbone, build_backbone, cnn27_spec, forward, param_count,
                               receptive_geometry, shape_plan)

spec = cnn27_spec()
counts = param_count(spec)
for name, shape in shape_plan(spec):
    print(f"{name:7s} {str(shape):18s} {counts.get(name, 0):>10,}")
print(f"total learnables {counts['total']:,}")

# %% [markdown]
# Each output cell covers an 8 x 8 pixel block; its centre is where the
# heatmap splat lands.

# %%
geo = receptive_geometry(spec)
print(geo.stride, geo.center(0, 0), geo.center(27, 27))

# %% [markdown]
# Forward passes take channels-last numpy batches. Small inputs work too,
# which keeps experiments cheap.

# %%
small, net = build_backbone("cnn27", seed=0, input_size=(32, 32, 3))
vols = forward(net, small, np.random.default_rng(0).uniform(size=(2, 32, 32, 3)))
print(small.output_size, vols[0].shape)

# %% [markdown]
# Deeper torchvision networks are cut at a 28 x 28 stage and topped with a
# 1x1 head. Pretrained weights can be loaded from an `.npz` archive.

# %%
for name in ("vgg16", "resnet101", "inceptionv3"):
    s, _ = adapt_backbone(name, seed=0)
    print(name, s.output_size, s.truncate_at)
