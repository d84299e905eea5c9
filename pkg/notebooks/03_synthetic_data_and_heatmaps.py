# %% [markdown]
# # Synthetic textures and heatmap rendering

# %%
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from deepfcdd import heatmap
from deepfcdd.backbone import FieldGeometry
from deepfcdd.data import (SynthParams, bounding_box, scan_dataset, split_manifest, synth_dataset,
                           synth_image)

out = Path(tempfile.mkdtemp(prefix="deepfcdd_demo_"))

# %% [markdown]
# Normal images are smooth noise textures; anomalous ones carry a line or
# blob defect with a known mask.

# %%
p = SynthParams(image_size=128, seed=3)
img, mask = synth_image(p, 0, anomalous=True)
print("defect box", bounding_box(mask))
Image.fromarray(img).save(out / "defect.png")

# %%
synth_dataset(SynthParams(n_normal=30, n_anomalous=10, image_size=64), out / "corpus")
m = split_manifest(scan_dataset(out / "corpus"), (7, 1, 2), seed=0)
for split in ("train", "calibration", "test"):
    print(split, m.class_counts(split))

# %% [markdown]
# ## From grid to heatmap
#
# Each grid cell is spread as a normalised Gaussian over the image, centred
# on its receptive field. Here a single hot cell on an 8 x 8 grid:

# %%
geo = FieldGeometry.uniform((128, 128), (8, 8))
grid = np.zeros((8, 8))
grid[2, 5] = 4.0
grid[6, 1] = 1.0
raw = heatmap.upsample_heatmap(grid, geo, heatmap.HeatmapConfig(sigma=8))
print("mass", raw.values.sum())

# %% [markdown]
# Display normalisation saturates everything above the bottom quarter of
# the range, which makes faint marks visible.

# %%
for q in (0.25, 1.0):
    cfg = heatmap.HeatmapConfig(sigma=8, display_quantile=q)
    heatmap.render_heatmap_image(heatmap.display_normalize(raw, cfg), cfg, path=out / f"heat_q{q}.png")
heatmap.render_heatmap_image(heatmap.display_normalize(raw), underlay=np.asarray(Image.open(out / "defect.png")) / 255,
                             path=out / "blend.png")
print(sorted(x.name for x in out.glob("*.png")))
