import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from deepfcdd.backbone import FieldGeometry
from deepfcdd.errors import InvalidInputError, InvalidParameterError
from deepfcdd.heatmap import (COLORMAP_RGB, HeatmapConfig, display_normalize, gaussian_kernel,
                              render_heatmap_image, score_histogram, upsample_heatmap,
                              write_histogram)


def brute_upsample(values, geometry, sigma):
    """Untruncated splat, one full-size Gaussian per cell."""
    h, w = geometry.image_size
    xs, ys = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    out = np.zeros((h, w))
    for i in range(values.shape[0]):
        for j in range(values.shape[1]):
            c1, c2 = geometry.center(i, j)
            g = np.exp(-((xs - c1) ** 2 + (ys - c2) ** 2) / (2 * sigma ** 2)) / (2 * math.pi * sigma ** 2)
            out += values[i, j] * g
    return out


# ---------------------------------------------------------------- kernel

def test_kernel_peak():
    g = gaussian_kernel(5, 7, 1.0, 11, 15)
    assert g[5, 7] == pytest.approx(1 / (2 * math.pi), rel=1e-12)
    assert g.argmax() == np.ravel_multi_index((5, 7), g.shape)


def test_kernel_one_pixel_away():
    g = gaussian_kernel(5, 5, 1.0, 11, 11)
    assert g[6, 5] == pytest.approx(0.096532, abs=1e-6)
    assert g[5, 4] == pytest.approx(math.exp(-0.5) / (2 * math.pi), rel=1e-12)


@pytest.mark.parametrize("sigma", [1.0, 2.0, 3.5])
def test_kernel_unit_mass(sigma):
    reach = int(math.ceil(5 * sigma)) + 1
    size = 2 * reach + 1
    assert gaussian_kernel(reach, reach, sigma, size, size).sum() == pytest.approx(1.0, abs=1e-3)


def test_kernel_bad_sigma():
    with pytest.raises(InvalidParameterError):
        gaussian_kernel(0, 0, 0.0, 3, 3)


def test_kernel_truncation_zeroes_far_rows():
    g = gaussian_kernel(10, 10, 1.0, 21, 21, truncation_radius=3)
    assert np.all(g[:7] == 0) and np.all(g[14:] == 0) and g[7, 10] > 0


# ---------------------------------------------------------------- upsampling

def test_upsample_zero_map():
    g = FieldGeometry.uniform((64, 64), (8, 8))
    assert np.all(upsample_heatmap(np.zeros((8, 8)), g).values == 0)


def test_upsample_single_cell_mass_and_peak():
    g = FieldGeometry.uniform((64, 64), (8, 8))
    m = np.zeros((8, 8))
    m[3, 4] = 5.0
    hm = upsample_heatmap(m, g, HeatmapConfig(sigma=2.0)).values
    assert hm.sum() == pytest.approx(5.0, rel=1e-3)
    peak = np.unravel_index(hm.argmax(), hm.shape)
    c = g.center(3, 4)
    assert abs(peak[0] - c[0]) <= 4 and abs(peak[1] - c[1]) <= 4


def test_upsample_matches_untruncated_splat():
    g = FieldGeometry.uniform((48, 40), (6, 5))
    m = np.random.default_rng(0).uniform(size=(6, 5))
    cfg = HeatmapConfig(sigma=3.0, truncation_radius=6)
    np.testing.assert_allclose(upsample_heatmap(m, g, cfg).values, brute_upsample(m, g, 3.0),
                               rtol=0, atol=1e-9)


def test_upsample_linear_on_random_pairs():
    g = FieldGeometry.uniform((56, 56), (7, 7))
    rng = np.random.default_rng(1)
    for _ in range(10):
        a, b = rng.uniform(0, 3, (7, 7)), rng.uniform(0, 3, (7, 7))
        lhs = upsample_heatmap(a + b, g).values
        rhs = upsample_heatmap(a, g).values + upsample_heatmap(b, g).values
        np.testing.assert_allclose(lhs, rhs, rtol=1e-9, atol=1e-15)


def test_upsample_interior_mass_preserved():
    # cells at least 4 sigma from every border
    g = FieldGeometry.uniform((160, 160), (20, 20))
    m = np.zeros((20, 20))
    m[5:15, 5:15] = np.random.default_rng(2).uniform(size=(10, 10))
    hm = upsample_heatmap(m, g, HeatmapConfig(sigma=8.0)).values
    assert hm.sum() == pytest.approx(m.sum(), rel=1e-3)


def test_upsample_geometry_mismatch():
    with pytest.raises(InvalidInputError):
        upsample_heatmap(np.zeros((4, 4)), FieldGeometry.uniform((64, 64), (8, 8)))


# ---------------------------------------------------------------- display range

def test_display_saturates_above_quarter():
    hm = np.linspace(0, 1, 101).reshape(1, -1)
    out = display_normalize(hm).values
    assert np.all(out[hm >= 0.25] == 1.0)
    assert out[0, 10] == pytest.approx(0.4)


def test_display_constant_is_zero():
    assert np.all(display_normalize(np.full((5, 5), 3.3)).values == 0)


def test_display_rule_arithmetic():
    hm = np.array([[2.0, 2.5, 6.0]])
    assert display_normalize(hm).values[0, 1] == pytest.approx(0.5)


def test_display_quantile_one_is_minmax():
    hm = np.array([[1.0, 2.0, 5.0]])
    np.testing.assert_allclose(display_normalize(hm, HeatmapConfig(display_quantile=1.0)).values,
                               [[0.0, 0.25, 1.0]])


def test_display_absolute_mode():
    hm = np.array([[1.0, 1.5, 8.0]])
    out = display_normalize(hm, HeatmapConfig(display_mode="absolute")).values   # range [1, 2]
    np.testing.assert_allclose(out, [[0.0, 0.5, 1.0]])


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (4, 5), elements=st.floats(-1e3, 1e3)),
       st.floats(0.1, 100), st.floats(-100, 100))
def test_display_bounded_and_affine_invariant(hm, a, b):
    out = display_normalize(hm).values
    assert out.min() >= 0 and out.max() <= 1
    if hm.max() - hm.min() > 1e-6 * max(1.0, np.abs(hm).max()):
        np.testing.assert_allclose(display_normalize(a * hm + b).values, out, atol=1e-6)


# ---------------------------------------------------------------- rendering

def test_render_zero_is_lowest_colour(tmp_path):
    path = tmp_path / "z.png"
    raster = render_heatmap_image(np.zeros((8, 9)), path=path)
    assert np.all(raster == COLORMAP_RGB[0].astype(np.uint8))
    assert np.array_equal(np.asarray(Image.open(path)), raster)


def test_render_one_is_highest_colour():
    raster = render_heatmap_image(np.ones((2, 2)))
    assert np.all(raster == COLORMAP_RGB[-1].astype(np.uint8))


def test_render_midpoint_is_yellow():
    assert np.array_equal(render_heatmap_image(np.full((1, 1), 0.5))[0, 0], [255, 255, 0])


def test_render_blend_over_black():
    hm = np.random.default_rng(0).uniform(size=(6, 6))
    plain = render_heatmap_image(hm).astype(float)
    blended = render_heatmap_image(hm, underlay=np.zeros((6, 6, 3), np.uint8)).astype(float)
    assert np.abs(blended - 0.5 * plain).max() <= 1.0


def test_render_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        render_heatmap_image(np.zeros((2, 2)), path=blocker / "sub" / "x.png")


# ---------------------------------------------------------------- histogram

def test_histogram_two_bins():
    h = score_histogram([0, 1, 2, 3], [0, 0, 0, 0], bins=2)
    assert list(h.counts_normal) == [2, 2] and list(h.counts_anomalous) == [0, 0]


def test_histogram_single_score():
    h = score_histogram([4.2], [1], bins=1)
    assert list(h.counts_anomalous) == [1]
    assert h.edges[0] <= 4.2 <= h.edges[1]


def test_histogram_conservation_and_edges():
    rng = np.random.default_rng(4)
    for _ in range(20):
        n = rng.integers(1, 200)
        scores = rng.exponential(size=n)
        labels = rng.integers(0, 2, size=n)
        h = score_histogram(scores, labels, bins=int(rng.integers(1, 30)))
        assert h.counts_normal.sum() == np.sum(labels == 0)
        assert h.counts_anomalous.sum() == np.sum(labels == 1)
        assert np.all(np.diff(h.edges) > 0)


def test_histogram_empty():
    with pytest.raises(InvalidInputError):
        score_histogram([], [])


def test_histogram_file(tmp_path):
    write_histogram(score_histogram([0, 1, 2, 3], [0, 1, 0, 1], bins=2), tmp_path / "h.tsv")
    lines = (tmp_path / "h.tsv").read_text().splitlines()
    assert lines[0] == "bin_lo\tbin_hi\tcount_normal\tcount_anomalous"
    assert lines[1].split("\t")[2:] == ["1", "1"]
