"""Differentiable layer operators over NHWC tensors."""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, make_node

ACTIVATIONS = ("swish", "relu6", "tanh", "sigmoid", "softmax", "linear")
NORM_KINDS = ("batch", "group")


def _exact(*arrays: np.ndarray) -> bool:
    # float64 is the verification mode: contractions use a fixed sequential order
    return all(a.dtype == np.float64 for a in arrays)


def _window(size: int, k: int, stride: int, padding: str) -> tuple[int, int, int]:
    """Return (output size, pad before, pad after) along one spatial axis."""
    if padding == "valid":
        if size < k:
            raise ShapeError(f"kernel {k} larger than input {size} with valid padding")
        return (size - k) // stride + 1, 0, 0
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + k - size, 0)
        # odd padding puts the extra pixel bottom/right
        return out, total // 2, total - total // 2
    raise ValueError(f"unknown padding {padding!r}")


def _taps(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int):
    for i in range(kh):
        for j in range(kw):
            yield i, j, xp[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride, :]


def _check_conv_args(x: Tensor, stride: int, kh: int, kw: int) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"expected NHWC input, got shape {x.shape}")
    if stride < 1:
        raise ShapeError(f"stride must be positive, got {stride}")
    if kh < 1 or kw < 1:
        raise ShapeError("kernel extents must be positive")


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None, stride: int = 1, padding: str = "valid") -> Tensor:
    """Cross-correlation with kernels laid out as [kh, kw, Cin, Cout]."""
    if kernels.data.ndim != 4:
        raise ShapeError(f"conv kernels must be 4-D, got {kernels.shape}")
    kh, kw, cin, cout = kernels.shape
    _check_conv_args(x, stride, kh, kw)
    n, h, w, c = x.shape
    if c != cin:
        raise ShapeError(f"input has {c} channels, kernels expect {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} does not match {cout} output channels")
    ho, pt, pb = _window(h, kh, stride, padding)
    wo, pl, pr = _window(w, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if pt + pb + pl + pr else x.data
    wd = kernels.data

    if _exact(x.data, wd):
        out = np.zeros((n, ho, wo, cout), dtype=np.float64)
        for i, j, xs in _taps(xp, kh, kw, stride, ho, wo):
            for ci in range(cin):
                out = out + xs[..., ci : ci + 1] * wd[i, j, ci]
        cols = None
    else:
        cols = np.concatenate([xs for _, _, xs in _taps(xp, kh, kw, stride, ho, wo)], axis=-1)
        out = cols @ wd.reshape(kh * kw * cin, cout)
    if bias is not None:
        out = out + bias.data

    def _bw(g):
        c2 = cols
        if c2 is None:
            c2 = np.concatenate([xs for _, _, xs in _taps(xp, kh, kw, stride, ho, wo)], axis=-1)
        w2 = wd.reshape(kh * kw * cin, cout)
        dw = np.tensordot(c2, g, axes=([0, 1, 2], [0, 1, 2])).reshape(wd.shape)
        dcols = g @ w2.T
        dxp = np.zeros_like(xp)
        k = 0
        for i in range(kh):
            for j in range(kw):
                dxp[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride, :] += dcols[
                    ..., k * cin : (k + 1) * cin
                ]
                k += 1
        dx = dxp[:, pt : pt + h, pl : pl + w, :]
        db = g.sum(axis=(0, 1, 2)) if bias is not None else None
        return dx, dw, db

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return make_node(out, parents, _bw, "conv2d")


def depthwise_conv2d(
    x: Tensor, kernels: Tensor, stride: int = 1, padding: str = "valid", bias: Tensor | None = None
) -> Tensor:
    """Per-channel spatial filtering; kernels are [kh, kw, C]."""
    if kernels.data.ndim != 3:
        raise ShapeError(f"depthwise kernels must be 3-D, got {kernels.shape}")
    kh, kw, ck = kernels.shape
    _check_conv_args(x, stride, kh, kw)
    n, h, w, c = x.shape
    if c != ck:
        raise ShapeError(f"input has {c} channels, kernels expect {ck}")
    if bias is not None and bias.shape != (c,):
        raise ShapeError(f"bias shape {bias.shape} does not match {c} channels")
    ho, pt, pb = _window(h, kh, stride, padding)
    wo, pl, pr = _window(w, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if pt + pb + pl + pr else x.data
    wd = kernels.data

    out = np.zeros((n, ho, wo, c), dtype=np.result_type(xp, wd))
    for i, j, xs in _taps(xp, kh, kw, stride, ho, wo):
        out = out + xs * wd[i, j]
    if bias is not None:
        out = out + bias.data

    def _bw(g):
        dw = np.zeros_like(wd)
        dxp = np.zeros_like(xp)
        for i, j, xs in _taps(xp, kh, kw, stride, ho, wo):
            dw[i, j] = (xs * g).sum(axis=(0, 1, 2))
            dxp[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride, :] += g * wd[i, j]
        dx = dxp[:, pt : pt + h, pl : pl + w, :]
        db = g.sum(axis=(0, 1, 2)) if bias is not None else None
        return dx, dw, db

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return make_node(out, parents, _bw, "depthwise_conv2d")


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    if x.data.ndim != 2 or weights.data.ndim != 2:
        raise ShapeError(f"dense expects 2-D operands, got {x.shape} and {weights.shape}")
    din, dout = weights.shape
    if x.shape[1] != din:
        raise ShapeError(f"input width {x.shape[1]} does not match weights {weights.shape}")
    if bias.shape != (dout,):
        raise ShapeError(f"bias shape {bias.shape} does not match {dout} outputs")
    xd, wd = x.data, weights.data
    if _exact(xd, wd):
        acc = np.zeros((x.shape[0], dout), dtype=np.float64)
        for k in range(din):
            acc = acc + xd[:, k : k + 1] * wd[k]
    else:
        acc = xd @ wd
    out = acc + bias.data

    def _bw(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    return make_node(out, (x, weights, bias), _bw, "dense")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)


def apply_activation(kind: str, x: Tensor) -> Tensor:
    xd = x.data
    if kind == "linear":
        return x
    if kind == "sigmoid":
        s = _sigmoid(xd)
        return make_node(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")
    if kind == "swish":
        s = _sigmoid(xd)
        return make_node(xd * s, (x,), lambda g: (g * (s + xd * s * (1 - s)),), "swish")
    if kind == "relu6":
        live = (xd > 0) & (xd < 6)
        return make_node(np.clip(xd, 0, 6), (x,), lambda g: (g * live,), "relu6")
    if kind == "tanh":
        t = np.tanh(xd)
        return make_node(t, (x,), lambda g: (g * (1 - t * t),), "tanh")
    if kind == "softmax":
        z = xd - xd.max(axis=-1, keepdims=True)
        e = np.exp(z)
        s = e / e.sum(axis=-1, keepdims=True)

        def _bw(g):
            return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

        return make_node(s, (x,), _bw, "softmax")
    raise ValueError(f"unknown activation {kind!r}")


def swish(x: Tensor) -> Tensor:
    return apply_activation("swish", x)


def sigmoid(x: Tensor) -> Tensor:
    return apply_activation("sigmoid", x)


def softmax(x: Tensor) -> Tensor:
    return apply_activation("softmax", x)


def normalize(
    kind: str,
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    eps: float = 1e-5,
    mode: str = "train",
    running_stats: dict | None = None,
    groups: int = 8,
    momentum: float = 0.99,
) -> Tensor:
    """Batch or group normalization over the trailing channel axis.

    Batch mode pools statistics over every axis but the last and keeps
    ``running_stats['mean']``/``['var']`` up to date in train mode; those are
    used in infer mode. Group mode normalizes each sample over its spatial
    positions and the channels of one group, identically in both modes.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},)")
    xd, gd = x.data, gamma.data

    if kind == "batch":
        axes = tuple(range(xd.ndim - 1))
        training = mode == "train"
        if training:
            mu = xd.mean(axis=axes)
            var = xd.var(axis=axes)
            if running_stats is not None:
                running_stats["mean"] = momentum * running_stats["mean"] + (1 - momentum) * mu
                running_stats["var"] = momentum * running_stats["var"] + (1 - momentum) * var
        else:
            if running_stats is None:
                raise ValueError("batch normalization in infer mode needs running statistics")
            mu = running_stats["mean"].astype(xd.dtype)
            var = running_stats["var"].astype(xd.dtype)
        std = np.sqrt(var + eps)
        xhat = (xd - mu) / std
        out = xhat * gd + beta.data

        def _bw(g):
            dxhat = g * gd
            if training:
                dx = (dxhat - dxhat.mean(axis=axes) - xhat * (dxhat * xhat).mean(axis=axes)) / std
            else:
                dx = dxhat / std
            return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return make_node(out, (x, gamma, beta), _bw, "batch_norm")

    if kind == "group":
        if groups < 1 or c % groups:
            raise ShapeError(f"{c} channels are not divisible into {groups} groups")
        n = xd.shape[0]
        xr = xd.reshape(n, -1, groups, c // groups)
        mu = xr.mean(axis=(1, 3), keepdims=True)
        var = xr.var(axis=(1, 3), keepdims=True)
        std = np.sqrt(var + eps)
        xhat_r = (xr - mu) / std
        xhat = xhat_r.reshape(xd.shape)
        out = xhat * gd + beta.data
        red = tuple(range(xd.ndim - 1))

        def _bw(g):
            dxhat = (g * gd).reshape(xr.shape)
            dx = (
                dxhat
                - dxhat.mean(axis=(1, 3), keepdims=True)
                - xhat_r * (dxhat * xhat_r).mean(axis=(1, 3), keepdims=True)
            ) / std
            return dx.reshape(xd.shape), (g * xhat).sum(axis=red), g.sum(axis=red)

        return make_node(out, (x, gamma, beta), _bw, "group_norm")

    raise ValueError(f"unknown normalization {kind!r}")


def dropconnect(weights: Tensor, rate: float, rng: np.random.Generator | None, mode: str = "train") -> Tensor:
    """Zero individual weights with probability ``rate``; survivors scaled by 1/(1-rate)."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropconnect rate must be in [0, 1), got {rate}")
    if mode == "infer" or rate == 0:
        return weights
    if rng is None:
        raise ValueError("dropconnect in train mode needs a seeded generator")
    keep = (rng.random(weights.shape) >= rate).astype(weights.dtype) * weights.dtype.type(1.0 / (1.0 - rate))
    return make_node(weights.data * keep, (weights,), lambda g: (g * keep,), "dropconnect")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"expected NHWC input, got shape {x.shape}")
    n, h, w, c = x.shape
    scale = 1.0 / (h * w)

    def _bw(g):
        return (np.broadcast_to(g[:, None, None, :] * scale, x.shape).astype(x.dtype),)

    return make_node(x.data.mean(axis=(1, 2)), (x,), _bw, "global_avg_pool")


def output_size(size: int, k: int, stride: int, padding: str) -> int:
    return _window(size, k, stride, padding)[0]


__all__ = [
    "ACTIVATIONS",
    "NORM_KINDS",
    "apply_activation",
    "conv2d",
    "dense",
    "depthwise_conv2d",
    "dropconnect",
    "global_avg_pool",
    "normalize",
    "output_size",
    "sigmoid",
    "softmax",
    "swish",
]
