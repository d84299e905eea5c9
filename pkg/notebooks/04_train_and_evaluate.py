# %% [markdown]
# # Training and evaluation
#
# A small end-to-end run at 32 x 32 so it finishes in seconds. The
# full-resolution version is the same code with `input_size=224`.

# %%
import tempfile
from pathlib import Path

import numpy as np

from deepfcdd import evaluator
from deepfcdd.cli import heatmap_for_image
from deepfcdd.data import SynthParams, read_defects, scan_dataset, split_manifest, synth_dataset
from deepfcdd.heatmap import HeatmapConfig
from deepfcdd.trainer import TrainConfig, train

root = Path(tempfile.mkdtemp(prefix="deepfcdd_train_"))
synth_dataset(SynthParams(n_normal=80, n_anomalous=20, image_size=32, line_width=3, seed=0), root)
m = split_manifest(scan_dataset(root), (7, 1, 2), seed=0)

# %%
cfg = TrainConfig(input_size=32, batch_size=10, epochs=5, seed=0)
ckpt = train(cfg, m)
print("epoch losses", np.round(ckpt.loss_trace, 4))

# %% [markdown]
# The threshold comes from the calibration split only; the test split is
# touched once for the final numbers.

# %%
net = ckpt.network()
calib = evaluator.score_dataset(ckpt, m, "calibration", net=net)
test = evaluator.score_dataset(ckpt, m, "test", net=net)
report = evaluator.classification_metrics(test, evaluator.calibrate_threshold(calib))
print(report.as_document())

# %% [markdown]
# Where does the heatmap peak relative to the painted defect?

# %%
boxes = read_defects(root)
for r in [r for r in m.in_split("test") if r.label == 1]:
    raw, _, _ = heatmap_for_image(ckpt, net, m.abspath(r), HeatmapConfig(sigma=2))
    print(r.path, np.unravel_index(np.argmax(raw.values), raw.values.shape), boxes[r.path])
