# %% [markdown]
# # The pseudo-Huber objective
#
# Every cell of the network's output grid is a feature vector. Its anomaly
# response is `sqrt(|z|^2 + 1) - 1`: quadratic near the origin, linear far
# away. An image's loss depends only on the mean response `A` of its grid.

# %%
import numpy as np

from deepfcdd import core
from deepfcdd.core import FeatureVolume, LabeledSampleBatch, ReceptiveFieldMap

# %%
z = np.array([0.0, 1e-3, 0.5, 3.0, 100.0])
print(core.pseudo_huber(z))
print(0.5 * z ** 2)       # matches for small z
print(np.abs(z) - 1)      # and for large z

# %% [markdown]
# Normal images pay `A`; anomalous ones pay `-log(1 - exp(-A))`, which grows
# without bound as `A -> 0`. The floor on `A` keeps that finite.

# %%
for a in (1e-9, 0.01, np.log(2), 1.0, 5.0):
    m = ReceptiveFieldMap(np.full((4, 4), a))
    print(f"A={a:<10.4g} normal={core.huber_bce_loss(m, 0):.6f} anomalous={core.huber_bce_loss(m, 1):.6f}")

# %% [markdown]
# ## Gradients
#
# Training backpropagates a hand-derived gradient with respect to the
# features. A quick central-difference comparison:

# %%
rng = np.random.default_rng(0)
feats = [rng.normal(size=(3, 3, 4)) for _ in range(2)]
labels = [0, 1]
batch = LabeledSampleBatch([FeatureVolume(f) for f in feats], labels)
grads = core.loss_gradients(batch)

h = 1e-6
for img in range(2):
    idx = (1, 2, 3)
    up = [f.copy() for f in feats]
    dn = [f.copy() for f in feats]
    up[img][idx] += h
    dn[img][idx] -= h
    fd = (core.fcdd_spatial_loss(LabeledSampleBatch([FeatureVolume(f) for f in up], labels))
          - core.fcdd_spatial_loss(LabeledSampleBatch([FeatureVolume(f) for f in dn], labels))) / (2 * h)
    print(f"label {labels[img]}: analytic {grads[img][idx]:+.8f}  finite difference {fd:+.8f}")

# %% [markdown]
# A 1x1 grid is the hypersphere objective on plain embeddings.

# %%
emb = rng.normal(size=(4, 8))
lab = [0, 0, 1, 1]
print(core.deep_svdd_loss(emb, lab),
      core.fcdd_spatial_loss(LabeledSampleBatch([FeatureVolume(e[None, None]) for e in emb], lab)))
