"""Grad-CAM, input saliency, kernel grids and heatmap overlays."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .imaging import heat_colormap, resize_bilinear, to_uint8
from .models import ConvUnit, InvertedResidual, Model
from .tensor import Tape, Tensor, backward


class ExplainError(ValueError):
    pass


class UnknownLayerError(ExplainError, KeyError):
    pass


class NotConvLayerError(ExplainError):
    pass


@dataclass(frozen=True)
class Heatmap:
    values: np.ndarray
    source_layer: str
    target_class: int

    def __post_init__(self):
        v = self.values
        if v.ndim != 2:
            raise ExplainError("heatmap values must be 2-D")
        if v.size and (v.min() < 0 or v.max() > 1):
            raise ExplainError("heatmap values must lie in [0, 1]")


def _normalize(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    peak = values.max()
    return values / peak if peak > 0 else np.zeros_like(values)


def _batch_of_one(image, dtype=np.float32) -> Tensor:
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[0] != 1:
        raise ExplainError(f"expected one HxWx3 image, got shape {arr.shape}")
    return Tensor(arr, dtype=dtype)


def class_score(model: Model, logits: Tensor, target_class: int) -> Tensor:
    """Pre-activation score of ``target_class`` (1 = real) for the first sample.

    Single-logit models score "real" with the logit and "fake" with its
    negation, so saturation of the sigmoid never hides the gradient.
    """
    if target_class not in (0, 1):
        raise ExplainError(f"target_class must be 0 (fake) or 1 (real), got {target_class}")
    if logits.shape[1] == 1:
        z = logits[0, 0]
        return z if target_class == 1 else -z
    return logits[0, target_class]


def default_layer(model: Model) -> str:
    """Output of the deepest inverted-residual block (falls back to the last block)."""
    for block in reversed(model.blocks):
        if isinstance(block, InvertedResidual):
            return block.name
    return model.blocks[-1].name


def _check_layer(model: Model, layer: str) -> None:
    if layer in model.feature_names():
        return
    try:
        unit = model.layer(layer)
    except KeyError:
        if layer in ("pool", "logits"):
            raise NotConvLayerError(f"{layer!r} is not a convolutional feature map") from None
        raise UnknownLayerError(f"model has no layer {layer!r}") from None
    if not isinstance(unit, ConvUnit):
        raise NotConvLayerError(f"{layer!r} is not a convolutional feature map")


def grad_cam(model: Model, image, target_layer: str | None = None, target_class: int = 1) -> Heatmap:
    """Gradient-weighted class activation map at the feature map's resolution.

    Channel weights are the spatial means of d(score)/d(feature); the map is
    ReLU of the weighted channel sum, divided by its maximum.
    """
    layer = target_layer or default_layer(model)
    _check_layer(model, layer)
    x = _batch_of_one(image)
    capture: dict[str, Tensor] = {}
    with Tape() as tape:
        model.forward(x, mode="infer", capture=capture)
        feature = capture[layer]
        score = class_score(model, capture["logits"], target_class)
    if not feature.requires_grad or not tape.nodes:
        return Heatmap(np.zeros(feature.shape[1:3]), layer, target_class)
    grads = backward(score, tape, wrt=[feature])
    g = grads[feature][0]
    a = feature.data[0].astype(np.float64)
    weights = g.mean(axis=(0, 1))
    cam = np.maximum((a * weights).sum(axis=-1), 0.0)
    return Heatmap(_normalize(cam), layer, target_class)


def saliency(model: Model | Callable[[Tensor], Tensor], image, target_class: int = 1) -> Heatmap:
    """Per-pixel max over channels of |d(score)/d(input)|, divided by its maximum.

    ``model`` may also be any callable mapping a batch tensor to a scalar score.
    """
    dtype = np.float32 if isinstance(model, Model) else np.float64
    x = _batch_of_one(image, dtype)
    x.requires_grad = True
    with Tape() as tape:
        if isinstance(model, Model):
            capture: dict[str, Tensor] = {}
            model.forward(x, mode="infer", capture=capture)
            score = class_score(model, capture["logits"], target_class)
        else:
            score = model(x)
    if not score.requires_grad:
        return Heatmap(np.zeros(x.shape[1:3]), "input", target_class)
    grads = backward(score, tape)
    g = np.abs(grads[x][0]).max(axis=-1)
    return Heatmap(_normalize(g), "input", target_class)


@dataclass(frozen=True)
class KernelGrid:
    image: np.ndarray
    n_tiles: int
    rows: int
    cols: int
    tile_shape: tuple[int, int]


def _tile(kernel: np.ndarray) -> np.ndarray:
    lo, hi = kernel.min(), kernel.max()
    if hi == lo:
        return np.full(kernel.shape, 128, dtype=np.uint8)
    return to_uint8((kernel - lo) / (hi - lo) * 255.0)


def dump_kernels(model: Model, layer: str) -> KernelGrid:
    """Tile every kernel of a conv layer into a near-square grid with 1-pixel gaps.

    Three-input-channel kernels become colour tiles; otherwise each
    (input, output) channel slice becomes a gray tile.
    """
    try:
        unit = model.layer(layer)
    except KeyError:
        raise UnknownLayerError(f"model has no layer {layer!r}") from None
    if not isinstance(unit, ConvUnit):
        raise NotConvLayerError(f"{layer!r} holds no convolution kernel")
    k = unit.kernel.data.astype(np.float64)
    if k.ndim == 3:
        tiles = [k[:, :, c] for c in range(k.shape[2])]
    elif k.shape[2] == 3:
        tiles = [k[:, :, :, o] for o in range(k.shape[3])]
    else:
        tiles = [k[:, :, i, o] for o in range(k.shape[3]) for i in range(k.shape[2])]
    tiles = [_tile(t) for t in tiles]
    n = len(tiles)
    cols = math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    kh, kw = tiles[0].shape[:2]
    shape = (rows * kh + rows - 1, cols * kw + cols - 1) + tiles[0].shape[2:]
    grid = np.zeros(shape, dtype=np.uint8)
    for idx, tile in enumerate(tiles):
        r, c = divmod(idx, cols)
        grid[r * (kh + 1) : r * (kh + 1) + kh, c * (kw + 1) : c * (kw + 1) + kw] = tile
    return KernelGrid(grid, n, rows, cols, (kh, kw))


def overlay(heatmap: Heatmap | np.ndarray, image: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend ``alpha * colormap(heat) + (1 - alpha) * image`` into uint8 RGB.

    The heatmap is bilinearly resized to the image first. ``image`` may be
    uint8 pixels or floats in [0, 1].
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    img = np.asarray(image)
    img = img.astype(np.float64) if img.dtype == np.uint8 else np.asarray(img, np.float64) * 255.0
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    heat = heatmap.values if isinstance(heatmap, Heatmap) else np.asarray(heatmap, dtype=np.float64)
    if heat.shape != img.shape[:2]:
        heat = resize_bilinear(heat, img.shape[0], img.shape[1])
    return to_uint8(alpha * heat_colormap(heat) + (1.0 - alpha) * img)
