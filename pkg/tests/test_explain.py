import numpy as np
import pytest

from antispoof.explain import (
    ExplainError,
    Heatmap,
    NotConvLayerError,
    UnknownLayerError,
    default_layer,
    dump_kernels,
    grad_cam,
    overlay,
    saliency,
)
from antispoof.imaging import heat_colormap
from antispoof.models import PRESETS, build_model
from antispoof.tensor import Tensor, tsum

from helpers import single_channel_model


def _activation(model, image):
    capture = {}
    model(Tensor(image[None]), capture=capture)
    return capture["block_0"].data[0, :, :, 0].astype(np.float64)


@pytest.mark.parametrize("seed", range(5))
def test_grad_cam_matches_single_channel_closed_form(seed):
    image = np.random.default_rng(seed).random((4, 4, 3))
    model = single_channel_model(weight=1.7, seed=seed)
    a = _activation(model, image)
    # d(score)/dA = w / (H W) everywhere, so the map is ReLU(w/16 * A) / max
    raw = np.maximum(1.7 / 16 * a, 0)
    expected = raw / raw.max()
    heat = grad_cam(model, image, "block_0", target_class=1)
    np.testing.assert_allclose(heat.values, expected, atol=1e-6)
    # the fake class flips the sign of the score
    raw0 = np.maximum(-1.7 / 16 * a, 0)
    np.testing.assert_allclose(grad_cam(model, image, "block_0", 0).values, raw0 / raw0.max(), atol=1e-6)


def test_grad_cam_is_zero_when_score_ignores_the_layer():
    model = single_channel_model(weight=0.0)
    heat = grad_cam(model, np.random.default_rng(0).random((4, 4, 3)), "block_0")
    assert np.all(heat.values == 0)


@pytest.mark.parametrize("name", ["light_tiny", "heavy_tiny"])
@pytest.mark.parametrize("seed", range(3))
def test_heatmaps_respect_range_and_unit_max(name, seed):
    model = build_model(PRESETS[name](), seed=seed)
    h, w, _ = model.spec.input_shape
    image = np.random.default_rng(seed).random((h, w, 3))
    for heat in (grad_cam(model, image), saliency(model, image)):
        assert heat.values.min() >= 0 and heat.values.max() <= 1
        if np.any(heat.values > 0):
            assert heat.values.max() == 1.0
    layers = model.feature_names()
    for layer in layers[:3]:
        heat = grad_cam(model, image, layer)
        assert heat.source_layer == layer
        assert 0 <= heat.values.min() and heat.values.max() <= 1


def test_default_layer_is_deepest_inverted_residual():
    model = build_model(PRESETS["light_tiny"]())
    assert default_layer(model) == model.blocks[-1].name


def test_grad_cam_layer_errors():
    model = build_model(PRESETS["light_tiny"]())
    image = np.zeros((32, 32, 3))
    with pytest.raises(UnknownLayerError):
        grad_cam(model, image, "block_99")
    with pytest.raises(NotConvLayerError):
        grad_cam(model, image, "head_0")
    with pytest.raises(NotConvLayerError):
        grad_cam(model, image, "pool")
    with pytest.raises(ExplainError):
        grad_cam(model, image, target_class=2)
    with pytest.raises(ExplainError):
        grad_cam(model, np.zeros((2, 32, 32, 3)))


def test_saliency_of_linear_score_is_abs_weights():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(5, 6, 3))
    x = rng.random((5, 6, 3))
    heat = saliency(lambda t: tsum(t * Tensor(w[None], dtype=np.float64)), x)
    expected = np.abs(w).max(axis=-1)
    np.testing.assert_allclose(heat.values, expected / expected.max(), atol=1e-12)


def test_saliency_ignores_constant_score_offset():
    rng = np.random.default_rng(1)
    w = Tensor(rng.normal(size=(1, 4, 4, 3)), dtype=np.float64)
    x = rng.random((4, 4, 3))

    def score(t):
        return tsum(t * t * w)

    a = saliency(score, x).values
    b = saliency(lambda t: score(t) + 123.0, x).values
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_saliency_of_constant_model_is_zero():
    heat = saliency(lambda t: Tensor(2.0, dtype=np.float64), np.ones((3, 3, 3)))
    assert np.all(heat.values == 0)


def test_kernel_grid_for_paper_light_first_conv_has_16_tiles():
    grid = dump_kernels(build_model(PRESETS["light_paper"]()), "block_0/conv")
    assert grid.n_tiles == 16
    assert (grid.rows, grid.cols) == (4, 4)
    assert grid.image.shape == (4 * 3 + 3, 4 * 3 + 3, 3)
    assert grid.image.dtype == np.uint8


def test_constant_kernel_renders_mid_gray():
    model = build_model(PRESETS["light_tiny"]())
    unit = model.layer("block_1/depthwise")
    unit.kernel.data[...] = 0.25
    grid = dump_kernels(model, "block_1/depthwise")
    kh, kw = grid.tile_shape
    assert np.all(grid.image[:kh, :kw] == 128)
    assert grid.image.ndim == 2


def test_dump_kernels_errors():
    model = build_model(PRESETS["light_tiny"]())
    with pytest.raises(UnknownLayerError):
        dump_kernels(model, "nope")
    with pytest.raises(NotConvLayerError):
        dump_kernels(model, "head_0")


def test_overlay_blend_endpoints_and_midpoint():
    image = np.full((4, 4, 3), 100, np.uint8)
    heat = Heatmap(np.full((2, 2), 0.5), "x", 1)
    np.testing.assert_array_equal(overlay(heat, image, 0.0), image)
    cmap = heat_colormap(np.full((4, 4), 0.5))
    np.testing.assert_array_equal(overlay(heat, image, 1.0), np.rint(cmap).astype(np.uint8))
    mid = overlay(Heatmap(np.ones((4, 4)), "x", 1), np.full((4, 4, 3), 50, np.uint8), 0.5)
    # colormap(1) = (255, 0, 0): midpoints are (152.5, 25, 25)
    assert mid[0, 0].tolist() == [np.rint(152.5), 25, 25]
    with pytest.raises(ValueError):
        overlay(heat, image, 1.5)


def test_heatmap_validation():
    with pytest.raises(ExplainError):
        Heatmap(np.full((2, 2), 1.5), "x", 1)
    with pytest.raises(ExplainError):
        Heatmap(np.zeros(3), "x", 1)
