import io

import numpy as np
import pytest
from numpy.testing import assert_array_equal
from PIL import Image

from prospectr.render import (GRAY, HEAT, NAN_RGB, QUANTILE5, SIGNED_GREEN, STYLES, StyleError, colorize,
                              normalize01, png_bytes, reconstruction_grid, render_png, tile_grid)


def test_constant_raster_quantile5_single_colour():
    rgb = colorize(np.full((5, 4), 0.3), "quantile5")
    assert np.unique(rgb.reshape(-1, 3), axis=0).shape[0] == 1


def test_quantile5_uses_all_classes_equally():
    rgb = colorize(np.arange(100.0).reshape(10, 10), "quantile5")
    colours, counts = np.unique(rgb.reshape(-1, 3), axis=0, return_counts=True)
    assert len(colours) == 5 and (counts == 20).all()
    assert_array_equal(rgb[0, 0], QUANTILE5[0])
    assert_array_equal(rgb[-1, -1], QUANTILE5[4])


@pytest.mark.parametrize("style", STYLES)
def test_png_bytes_identical_on_repeat(style, rng):
    v = rng.normal(size=(9, 7))
    v[2, 3] = np.nan
    assert png_bytes(colorize(v, style, v)) == png_bytes(colorize(v, style, v))


def test_extremes_map_to_lut_endpoints():
    v = np.array([[0.0, 0.5, 1.0]])
    assert_array_equal(colorize(v, "gray")[0, 0], GRAY[0])
    assert_array_equal(colorize(v, "gray")[0, 2], GRAY[255])
    heat = colorize(v, "heat_over_gray")
    assert_array_equal(heat[0, 2], HEAT[255])  # full opacity at the maximum
    s = colorize(np.array([[-2.0, 0.0, 2.0]]), "signed_green")
    assert_array_equal(s[0, 0], SIGNED_GREEN[0])
    assert_array_equal(s[0, 1], SIGNED_GREEN[128])
    assert_array_equal(s[0, 2], SIGNED_GREEN[255])


def test_nan_pixels_are_white():
    v = np.array([[np.nan, 1.0], [2.0, np.inf]])
    for style in STYLES:
        rgb = colorize(v, style)
        assert_array_equal(rgb[0, 0], NAN_RGB)
        assert_array_equal(rgb[1, 1], NAN_RGB)


def test_normalize01():
    assert_array_equal(normalize01(np.array([2.0, 4.0, 3.0])), [0.0, 1.0, 0.5])
    assert_array_equal(normalize01(np.full(3, 7.0)), np.zeros(3))


def test_unknown_style():
    with pytest.raises(StyleError):
        colorize(np.zeros((2, 2)), "jet")


def test_render_png_scales_and_decodes(tmp_path):
    v = np.arange(6.0).reshape(2, 3)
    path = render_png(v, tmp_path / "sub" / "a.png", "gray", scale=4)
    img = np.asarray(Image.open(io.BytesIO(path.read_bytes())))
    assert img.shape == (8, 12, 3)
    assert_array_equal(img[::4, ::4], colorize(v, "gray"))


def test_tile_grid_layout():
    g = tile_grid([np.zeros((2, 2)), np.ones((2, 2)), np.full((2, 2), 2.0)], ncols=2)
    assert g.shape == (5, 5)
    assert np.isnan(g[2]).all() and np.isnan(g[:, 2]).all()
    assert (g[3:, 3:] != g[3:, 3:]).all()  # missing fourth tile stays NaN
    assert (g[3:, :2] == 2).all()


def test_reconstruction_grid(tmp_path, rng):
    x = rng.normal(size=(3, 4, 5, 5))
    p = reconstruction_grid(x, x * 0.5, tmp_path / "r.png", bands=2, samples=2)
    img = Image.open(p)
    # 2 samples x (original + reconstruction) rows of 2 bands, gutters of 1, scale 4
    assert img.size == ((2 * 6 - 1) * 4, (4 * 6 - 1) * 4)
