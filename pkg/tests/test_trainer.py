import math

import numpy as np
import pytest
import torch

from deepfcdd import core
from deepfcdd.backbone import build_backbone
from deepfcdd.data import DatasetManifest
from deepfcdd.errors import (CheckpointFormatError, ConfigError, InvalidInputError,
                             TrainingDivergedError, VersionMismatchError)
from deepfcdd.trainer import (Checkpoint, OptState, TrainConfig, adam_step, load_checkpoint,
                              save_checkpoint, train)


def tiny_cfg(**kw):
    kw.setdefault("input_size", 32)
    kw.setdefault("epochs", 2)
    kw.setdefault("batch_size", 10)
    return TrainConfig(**kw)


# ---------------------------------------------------------------- config

def test_defaults_follow_training_protocol():
    cfg = TrainConfig()
    assert (cfg.batch_size, cfg.epochs, cfg.learning_rate, cfg.grad_decay, cfg.sq_grad_decay) == \
        (30, 50, 1e-4, 0.9, 0.99)
    assert cfg.use_anomalous_in_train and cfg.backbone == "cnn27" and cfg.input_size == 224


@pytest.mark.parametrize("kw", [{"grad_decay": 1.0}, {"sq_grad_decay": 0.0},
                                {"learning_rate": 0.0}, {"batch_size": 0}])
def test_config_invariants(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


# ---------------------------------------------------------------- adam

def test_adam_zero_gradient_is_noop():
    p = {"w": torch.tensor([1.5, -2.0])}
    adam_step(p, {"w": torch.zeros(2)}, OptState(), TrainConfig())
    assert torch.equal(p["w"], torch.tensor([1.5, -2.0]))


@pytest.mark.parametrize("g", [3.0, -0.02])
def test_adam_first_step_moves_by_learning_rate(g):
    # after bias correction m/sqrt(v) = g/|g| on step one
    p = {"w": torch.tensor([0.5], dtype=torch.float64)}
    opt = OptState()
    adam_step(p, {"w": torch.tensor([g], dtype=torch.float64)}, opt, TrainConfig())
    expected = 0.5 - 1e-4 * g / (abs(g) + 1e-8)
    assert p["w"].item() == pytest.approx(expected, rel=1e-12)
    assert opt.step == 1


def test_adam_matches_hand_recurrence():
    grads = [0.3, -1.2, 0.7]
    b1, b2, lr, eps = 0.9, 0.99, 1e-4, 1e-8
    w, m, v = 1.0, 0.0, 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    p = {"w": torch.tensor([1.0], dtype=torch.float64)}
    opt = OptState()
    for g in grads:
        adam_step(p, {"w": torch.tensor([g], dtype=torch.float64)}, opt, TrainConfig())
    assert p["w"].item() == pytest.approx(w, rel=1e-14)


def test_adam_deterministic():
    def run():
        p = {"w": torch.linspace(-1, 1, 5)}
        opt = OptState()
        adam_step(p, {"w": torch.linspace(2, 3, 5)}, opt, TrainConfig())
        return p["w"], opt
    (a, oa), (b, ob) = run(), run()
    assert torch.equal(a, b) and torch.equal(oa.second_moment["w"], ob.second_moment["w"])


def test_adam_shape_mismatch():
    with pytest.raises(InvalidInputError):
        adam_step({"w": torch.zeros(3)}, {"w": torch.zeros(2)}, OptState(), TrainConfig())


# ---------------------------------------------------------------- training

def test_zero_epochs_returns_initialisation(tiny_manifest):
    ckpt = train(tiny_cfg(epochs=0, seed=4), tiny_manifest)
    _, net = build_backbone("cnn27", seed=4, input_size=(32, 32, 3))
    assert ckpt.loss_trace == [] and ckpt.epoch == 0
    for k, v in net.state_dict().items():
        assert np.array_equal(ckpt.state[k], v.numpy()), k


def test_same_seed_same_trace(tiny_manifest):
    a = train(tiny_cfg(seed=1), tiny_manifest)
    b = train(tiny_cfg(seed=1), tiny_manifest)
    assert a.loss_trace == b.loss_trace
    for k in a.state:
        assert np.array_equal(a.state[k], b.state[k])


def test_training_reduces_loss_for_most_seeds(tiny_manifest):
    improved = 0
    for seed in range(10):
        trace = train(tiny_cfg(epochs=5, seed=seed), tiny_manifest).loss_trace
        assert all(math.isfinite(x) for x in trace)
        improved += trace[-1] < trace[0]
    assert improved >= 9


def test_normal_only_mode_never_sees_anomalies(tiny_manifest):
    seen = []
    train(tiny_cfg(use_anomalous_in_train=False), tiny_manifest,
          on_batch=lambda epoch, step, labels, loss: seen.extend(labels))
    n_normal_train = tiny_manifest.class_counts("train")[0]
    assert seen and set(seen) == {0} and len(seen) == 2 * n_normal_train


def test_both_classes_used_by_default(tiny_manifest):
    seen = []
    train(tiny_cfg(epochs=1), tiny_manifest, on_batch=lambda e, s, labels, l: seen.extend(labels))
    assert sorted(seen) == sorted(r.label for r in tiny_manifest.in_split("train"))


def test_last_partial_batch_kept(tiny_manifest):
    sizes = []
    train(tiny_cfg(epochs=1, batch_size=8), tiny_manifest,
          on_batch=lambda e, s, labels, l: sizes.append(len(labels)))
    n = len(tiny_manifest.in_split("train"))
    assert sum(sizes) == n and len(sizes) == math.ceil(n / 8)


def test_empty_train_split(tiny_manifest):
    empty = DatasetManifest([r for r in tiny_manifest.records if r.split != "train"], tiny_manifest.root)
    with pytest.raises(ConfigError):
        train(tiny_cfg(), empty)


def test_nonfinite_loss_aborts(tiny_manifest, monkeypatch):
    monkeypatch.setattr(core, "loss_and_gradients",
                        lambda batch, cfg: (float("nan"), [np.zeros(f.shape) for f in batch.features]))
    with pytest.raises(TrainingDivergedError, match="step 1"):
        train(tiny_cfg(), tiny_manifest)


def test_train_log(tiny_manifest, tmp_path):
    train(tiny_cfg(), tiny_manifest, log_path=tmp_path / "log.tsv")
    lines = (tmp_path / "log.tsv").read_text().splitlines()
    assert lines[0] == "epoch\tmean_loss\twall_seconds" and len(lines) == 3
    assert [l.split("\t")[0] for l in lines[1:]] == ["1", "2"]


def test_feature_gradient_reaches_backbone():
    """Autograd through the net with the numpy loss gradient equals autograd of a torch loss."""
    spec, net = build_backbone("cnn27", seed=0, input_size=(16, 16, 3))
    x = torch.rand(3, 3, 16, 16, generator=torch.Generator().manual_seed(0))
    labels = [0, 1, 0]
    net.train()
    out = net(x)
    feats = out.detach().permute(0, 2, 3, 1).double().numpy()
    grads = core.loss_gradients(core.LabeledSampleBatch(list(feats), labels))
    out.backward(torch.from_numpy(np.stack(grads)).permute(0, 3, 1, 2).float())
    ours = net.layers["conv1"].weight.grad.clone()

    net.zero_grad()
    out = net(x).double()
    h = torch.sqrt((out ** 2).sum(1) + 1) - 1
    a = h.flatten(1).mean(1)
    y = torch.tensor(labels, dtype=torch.float64)
    loss = ((1 - y) * a - y * torch.log(-torch.expm1(-a))).mean()
    loss.backward()
    torch.testing.assert_close(ours, net.layers["conv1"].weight.grad, rtol=1e-4, atol=1e-6)


# ---------------------------------------------------------------- checkpoints

@pytest.fixture(scope="module")
def small_ckpt(tiny_manifest):
    return train(tiny_cfg(epochs=1, seed=2), tiny_manifest)


def test_checkpoint_round_trip(small_ckpt, tmp_path):
    save_checkpoint(small_ckpt, tmp_path / "c.bin")
    back = load_checkpoint(tmp_path / "c.bin")
    assert back.state.keys() == small_ckpt.state.keys()
    for k in back.state:
        assert np.array_equal(back.state[k], small_ckpt.state[k])
        assert back.state[k].dtype == small_ckpt.state[k].dtype
    assert back.config == small_ckpt.config and back.loss_trace == small_ckpt.loss_trace
    assert back.spec == small_ckpt.spec and back.epoch == 1


def test_checkpoint_network_restores_eval_outputs(small_ckpt, tmp_path):
    save_checkpoint(small_ckpt, tmp_path / "c.bin")
    x = torch.rand(2, 3, 32, 32)
    with torch.no_grad():
        assert torch.equal(small_ckpt.network()(x), load_checkpoint(tmp_path / "c.bin").network()(x))


def test_checkpoint_truncated(small_ckpt, tmp_path):
    save_checkpoint(small_ckpt, tmp_path / "c.bin")
    raw = (tmp_path / "c.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(tmp_path / "t.bin")


def test_checkpoint_version_mismatch(small_ckpt, tmp_path):
    old = Checkpoint(small_ckpt.spec, small_ckpt.state, small_ckpt.config, 1, [], version=0)
    save_checkpoint(old, tmp_path / "old.bin")
    with pytest.raises(VersionMismatchError):
        load_checkpoint(tmp_path / "old.bin")
