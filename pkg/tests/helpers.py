"""Shared fixtures: synthetic textured-vs-flat crop sets and loop oracles."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from antispoof import ops, tensor
from antispoof.data import build_manifest, write_manifest
from antispoof.imaging import write_image
from antispoof.models import BlockSpec, HeadLayer, ModelSpec, build_model
from antispoof.tensor import Tape, Tensor, backward
from antispoof.training import bce_loss


def synthetic_image(rng: np.random.Generator, textured: bool, size: int = 32) -> np.ndarray:
    """Textured images are high-contrast noise over a stripe pattern; flat ones are one colour plus faint noise."""
    base = rng.uniform(60, 190, size=3)
    if textured:
        yy, xx = np.mgrid[0:size, 0:size]
        period = rng.integers(2, 5)
        stripes = np.where(((xx + yy * rng.integers(0, 2)) // period) % 2 == 0, 50.0, -50.0)
        img = base + stripes[..., None] + rng.normal(0, 25, size=(size, size, 3))
    else:
        img = base + rng.normal(0, 2, size=(size, size, 3))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def write_synthetic_crops(root: Path, n: int = 64, subjects: int = 8, size: int = 32, seed: int = 0):
    """Write ``n`` crops (half real/textured, half fake/flat) and return the manifest."""
    rng = np.random.default_rng(seed)
    root = Path(root)
    for i in range(n):
        subject = 1 + i % subjects
        real = i % 2 == 0
        label, attack = ("real", "genuine") if real else ("fake", "paper_print")
        d = root / str(subject) / label / attack
        d.mkdir(parents=True, exist_ok=True)
        write_image(d / f"vid{subject}__f{i:06d}.ppm", synthetic_image(rng, real, size))
    manifest = build_manifest(root)
    write_manifest(manifest, root / "manifest.jsonl")
    return manifest


def write_frame_tree(src: Path, subjects=(1, 2, 3), frames: int = 4, size: int = 48, seed: int = 0) -> None:
    """Raw frame directories laid out as ``<subject>/<label>/<attack>/<video>/<frame>.ppm``."""
    rng = np.random.default_rng(seed)
    for s in subjects:
        for real in (True, False):
            label, attack = ("real", "genuine") if real else ("fake", "replay")
            vdir = Path(src) / str(s) / label / attack / f"v{s}"
            vdir.mkdir(parents=True, exist_ok=True)
            for f in range(frames):
                write_image(vdir / f"{f:04d}.ppm", synthetic_image(rng, real, size))


# brute-force oracles; float64, same summation order as the library's verification path


def conv2d_oracle(x, k, bias=None, stride=1, pad=(0, 0, 0, 0)):
    """Nested-loop NHWC convolution; ``pad`` = (top, bottom, left, right)."""
    n, h, w, cin = x.shape
    kh, kw, _, cout = k.shape
    t, b, l, r = pad
    xp = np.zeros((n, h + t + b, w + l + r, cin))
    xp[:, t : t + h, l : l + w] = x
    oh = (h + t + b - kh) // stride + 1
    ow = (w + l + r - kw) // stride + 1
    out = np.zeros((n, oh, ow, cout))
    for ni in range(n):
        for i in range(oh):
            for j in range(ow):
                for o in range(cout):
                    acc = 0.0
                    for di in range(kh):
                        for dj in range(kw):
                            for c in range(cin):
                                acc += xp[ni, i * stride + di, j * stride + dj, c] * k[di, dj, c, o]
                    out[ni, i, j, o] = acc + (bias[o] if bias is not None else 0.0)
    return out


def depthwise_oracle(x, k, stride=1, pad=(0, 0, 0, 0)):
    n, h, w, c = x.shape
    kh, kw, _ = k.shape
    t, b, l, r = pad
    xp = np.zeros((n, h + t + b, w + l + r, c))
    xp[:, t : t + h, l : l + w] = x
    oh = (h + t + b - kh) // stride + 1
    ow = (w + l + r - kw) // stride + 1
    out = np.zeros((n, oh, ow, c))
    for ni in range(n):
        for i in range(oh):
            for j in range(ow):
                for ch in range(c):
                    acc = 0.0
                    for di in range(kh):
                        for dj in range(kw):
                            acc += xp[ni, i * stride + di, j * stride + dj, ch] * k[di, dj, ch]
                    out[ni, i, j, ch] = acc
    return out


def dense_oracle(x, w, b):
    n, din = x.shape
    dout = w.shape[1]
    out = np.zeros((n, dout))
    for i in range(n):
        for o in range(dout):
            acc = 0.0
            for k in range(din):
                acc += x[i, k] * w[k, o]
            out[i, o] = acc + b[o]
    return out


def bce_oracle(p, y, eps=1e-7):
    total = 0.0
    flat_p, flat_y = np.ravel(p), np.ravel(y)
    for pi, yi in zip(flat_p, flat_y):
        q = min(max(pi, eps), 1 - eps)
        total += -(yi * np.log(q) + (1 - yi) * np.log(1 - q))
    return total / flat_p.size


def metrics_oracle(pred, true):
    tp = fp = fn = tn = 0
    for p, t in zip(pred, true):
        if p == 1 and t == 1:
            tp += 1
        elif p == 1:
            fp += 1
        elif t == 1:
            fn += 1
        else:
            tn += 1
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    acc = (tp + tn) / (tp + fp + fn + tn) if tp + fp + fn + tn else 0.0
    return dict(tp=tp, fp=fp, fn=fn, tn=tn, accuracy=acc, precision=prec, recall=rec, f1=f1)


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = f(x)
        x[i] = orig - h
        fm = f(x)
        x[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g


def gradient_check(fn, arrays, seed: int, h: float = 1e-5) -> float:
    """Relative error between tape gradients and central differences of ``sum(fn(*xs) * R)``.

    ``fn`` maps float64 Tensors to a Tensor; R is a fixed random projection so
    that symmetric gradients cannot cancel out.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = fn(*[Tensor(a, dtype=np.float64) for a in arrays]).data
    proj = np.random.default_rng(seed + 10_000).normal(size=probe.shape)

    def scalar(*arrs):
        return float(np.sum(fn(*[Tensor(a, dtype=np.float64) for a in arrs]).data * proj))

    leaves = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    with Tape() as tape:
        out = fn(*leaves)
        loss = (out * Tensor(proj, dtype=np.float64)).sum()
    grads = backward(loss, tape, wrt=leaves)
    worst = 0.0
    for i, leaf in enumerate(leaves):

        def partial(x, i=i):
            args = list(arrays)
            args[i] = x
            return scalar(*args)

        numeric = central_difference(partial, arrays[i].copy(), h)
        analytic = grads[leaf]
        denom = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / denom))
    return worst


def _away_from(x, points, margin=0.05):
    """Nudge values off the kinks of piecewise ops so finite differences stay smooth."""
    for p in points:
        close = np.abs(x - p) < margin
        x = np.where(close, p + np.sign(x - p + 1e-12) * margin * 2, x)
    return x


def _gradient_cases():
    def shape4(rng, cmax=3):
        return (int(rng.integers(1, 3)), int(rng.integers(3, 6)), int(rng.integers(3, 6)), int(rng.integers(1, cmax + 1)))

    def conv(rng):
        s = shape4(rng)
        k = int(rng.integers(1, 4))
        cout = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 3))
        pad = ("valid", "same")[int(rng.integers(0, 2))]
        if pad == "valid":
            k = min(k, s[1], s[2])
        args = [rng.normal(size=s), rng.normal(size=(k, k, s[3], cout)), rng.normal(size=cout)]
        return (lambda x, w, b: ops.conv2d(x, w, b, stride=stride, padding=pad)), args

    def depthwise(rng):
        s = shape4(rng)
        k = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 3))
        pad = ("valid", "same")[int(rng.integers(0, 2))]
        if pad == "valid":
            k = min(k, s[1], s[2])
        args = [rng.normal(size=s), rng.normal(size=(k, k, s[3])), rng.normal(size=s[3])]
        return (lambda x, w, b: ops.depthwise_conv2d(x, w, stride=stride, padding=pad, bias=b)), args

    def dense(rng):
        n, i, o = (int(v) for v in rng.integers(1, 6, size=3))
        return ops.dense, [rng.normal(size=(n, i)), rng.normal(size=(i, o)), rng.normal(size=o)]

    def activation(kind, lo=-4, hi=4, kinks=()):
        def case(rng):
            x = _away_from(rng.uniform(lo, hi, size=(int(rng.integers(1, 4)), int(rng.integers(2, 5)))), kinks)
            return (lambda t: ops.apply_activation(kind, t)), [x]
        return case

    def norm(kind):
        def case(rng):
            g = 2 if kind == "group" else 1
            c = g * int(rng.integers(1, 3))
            s = (int(rng.integers(2, 4)), int(rng.integers(2, 4)), int(rng.integers(2, 4)), c)
            args = [rng.normal(size=s), rng.uniform(0.5, 1.5, size=c), rng.normal(size=c)]
            stats = {"mean": np.zeros(c), "var": np.ones(c)}
            return (lambda x, gm, bt: ops.normalize(kind, x, gm, bt, mode="train", running_stats=dict(stats), groups=g)), args
        return case

    def pool(rng):
        return ops.global_avg_pool, [rng.normal(size=shape4(rng))]

    def dropconnect(rng):
        seed = int(rng.integers(0, 2**31))
        w = rng.normal(size=(int(rng.integers(2, 6)), int(rng.integers(2, 6))))
        return (lambda t: ops.dropconnect(t, 0.3, np.random.default_rng(seed), "train")), [w]

    def bce(rng):
        n = int(rng.integers(1, 8))
        y = rng.integers(0, 2, size=(n, 1)).astype(np.float64)
        w = rng.uniform(0.5, 2.0, size=(n, 1))
        return (lambda p: bce_loss(p, y, w)), [rng.uniform(0.05, 0.95, size=(n, 1))]

    def binary(op, bias=False):
        def case(rng):
            s = (int(rng.integers(1, 4)), int(rng.integers(1, 5)))
            other = rng.normal(size=s[-1:]) if bias else rng.normal(size=s)
            return op, [rng.normal(size=s), other]
        return case

    def unary(op, positive=False, kinks=()):
        def case(rng):
            x = rng.normal(size=(int(rng.integers(1, 4)), int(rng.integers(1, 5))))
            return op, [np.abs(x) + 0.5 if positive else _away_from(x, kinks)]
        return case

    return {
        "add": binary(tensor.add),
        "add_bias": binary(tensor.add, bias=True),
        "sub": binary(tensor.sub),
        "mul": binary(tensor.mul),
        "mul_bias": binary(tensor.mul, bias=True),
        "sum": unary(tensor.tsum),
        "mean": unary(tensor.tmean),
        "reshape": unary(lambda t: tensor.reshape(t, (-1,))),
        "getitem": unary(lambda t: t[0]),
        "log": unary(tensor.log, positive=True),
        "clip": unary(lambda t: tensor.clip(t, -0.5, 0.5), kinks=(-0.5, 0.5)),
        "conv2d": conv,
        "depthwise_conv2d": depthwise,
        "dense": dense,
        "swish": activation("swish"),
        "relu6": activation("relu6", -2, 8, kinks=(0.0, 6.0)),
        "tanh": activation("tanh"),
        "sigmoid": activation("sigmoid"),
        "softmax": activation("softmax"),
        "linear": activation("linear"),
        "batch_norm": norm("batch"),
        "group_norm": norm("group"),
        "global_avg_pool": pool,
        "dropconnect": dropconnect,
        "bce_loss": bce,
    }


GRADIENT_SEEDS = range(20)


def gradient_case_error(name: str, seed: int) -> float:
    rng = np.random.default_rng(seed)
    fn, arrays = _gradient_cases()[name](rng)
    return gradient_check(fn, arrays, seed)


GRADIENT_OPS = tuple(_gradient_cases())


def mutations(data: bytes, count: int, seed: int = 0):
    """Yield ``(description, mutated_bytes)`` pairs covering flips, truncations, splices and junk."""
    rng = np.random.default_rng(seed)
    n = len(data)
    kinds = ("flip", "truncate", "delete", "insert", "duplicate", "zero", "junk_tail")
    for i in range(count):
        kind = kinds[i % len(kinds)]
        buf = bytearray(data)
        pos = int(rng.integers(0, n))
        if kind == "flip":
            buf[pos] ^= 1 << int(rng.integers(0, 8))
        elif kind == "truncate":
            buf = buf[:pos]
        elif kind == "delete":
            del buf[pos : pos + int(rng.integers(1, 16))]
        elif kind == "insert":
            buf[pos:pos] = rng.integers(0, 256, size=int(rng.integers(1, 16))).astype(np.uint8).tobytes()
        elif kind == "duplicate":
            span = bytes(buf[pos : pos + int(rng.integers(1, 64))])
            buf[pos:pos] = span
        elif kind == "zero":
            end = min(n, pos + int(rng.integers(1, 32)))
            buf[pos:end] = bytes(end - pos)
        else:
            buf += rng.integers(0, 256, size=int(rng.integers(1, 32))).astype(np.uint8).tobytes()
        yield f"{kind}@{pos}", bytes(buf)


def single_channel_model(weight: float, seed: int = 0):
    """conv -> 1 channel map -> pool -> dense(1 -> 1) -> sigmoid."""
    spec = ModelSpec(
        family="light", input_shape=(4, 4, 3), alpha=1.0, divisor=1, groups=1,
        backbone=(BlockSpec("plain_conv", 1),), head=(HeadLayer(1, "sigmoid"),),
        block_activation="swish",
    )
    model = build_model(spec, seed=seed)
    model.head[0].weights.data[...] = weight
    model.head[0].bias.data[...] = 0.3
    return model
