"""Fully convolutional anomaly detection with explanation heatmaps.

A CNN maps an image to a grid of feature vectors; each grid cell's
pseudo-Huber norm is its anomaly response. The sum of responses scores the
image and a Gaussian upsampling of the grid gives a pixel heatmap.
"""
from .backbone import (BackboneSpec, FieldGeometry, LayerSpec, adapt_backbone, build_backbone,
                       cnn27_spec, forward, param_count, receptive_geometry, shape_plan)
from .core import (FeatureVolume, LabeledSampleBatch, ReceptiveFieldMap, SVDDConfig,
                   anomaly_score, deep_svdd_loss, fcdd_spatial_loss, huber_bce_loss,
                   loss_and_gradients, loss_gradients, pseudo_huber, pseudo_huber_map)
from .data import (DatasetManifest, SampleRecord, SynthParams, load_batch, load_image,
                   read_manifest, scan_dataset, split_manifest, synth_dataset, write_manifest)
from .evaluator import (MetricsReport, ScoreRecord, calibrate_threshold, classification_metrics,
                        roc_auc, score_dataset)
from .heatmap import (Heatmap, HeatmapConfig, display_normalize, render_heatmap_image,
                      score_histogram, upsample_heatmap)
from .trainer import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
