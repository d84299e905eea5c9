import pytest

from deepfcdd.data import SynthParams, scan_dataset, split_manifest, synth_dataset


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full-resolution training runs (tens of minutes)")


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """40 normal + 10 anomalous 32x32 images; CNN27 maps them to 4x4 fields."""
    root = tmp_path_factory.mktemp("tiny")
    synth_dataset(SynthParams(n_normal=40, n_anomalous=10, image_size=32, line_width=3, seed=0), root)
    return root


@pytest.fixture(scope="session")
def tiny_manifest(tiny_corpus):
    return split_manifest(scan_dataset(tiny_corpus), (7, 1, 2), seed=0)
