"""Declarative model specs and the two anti-spoofing architectures.

The light model is a width-contracted MobileNetV2 backbone followed by a
small dense stack with a sigmoid "real" probability. The heavy model is an
EfficientNet-B0 style MBConv backbone followed by a 1024/256/32/2 head with
a softmax over [fake, real].
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Any

import numpy as np

from . import ops
from .tensor import Tensor

BLOCK_KINDS = ("plain_conv", "inverted_residual")


class SpecError(ValueError):
    pass


def round_filters(base: int, alpha: float, divisor: int = 8) -> int:
    """Scale a channel count by ``alpha`` and snap it to a multiple of ``divisor``.

    Never drops below ``divisor`` and never loses more than 10% of the scaled
    width (the usual make-divisible rule).
    """
    if base < 1 or alpha <= 0 or divisor < 1:
        raise SpecError(f"invalid rounding arguments base={base} alpha={alpha} divisor={divisor}")
    scaled = base * alpha
    rounded = max(divisor, int(scaled + divisor / 2) // divisor * divisor)
    if rounded < 0.9 * scaled:
        rounded += divisor
    return rounded


@dataclass(frozen=True)
class BlockSpec:
    kind: str
    out_channels: int
    stride: int = 1
    expansion: int = 1
    kernel_size: int = 3

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise SpecError(f"unknown block kind {self.kind!r}")
        if self.stride not in (1, 2):
            raise SpecError(f"block stride must be 1 or 2, got {self.stride}")
        if self.expansion < 1:
            raise SpecError(f"expansion must be >= 1, got {self.expansion}")
        if self.out_channels < 1 or self.kernel_size < 1:
            raise SpecError("out_channels and kernel_size must be positive")


@dataclass(frozen=True)
class HeadLayer:
    units: int
    activation: str

    def __post_init__(self):
        if self.units < 1:
            raise SpecError(f"head layer size must be >= 1, got {self.units}")
        if self.activation not in ops.ACTIVATIONS:
            raise SpecError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class ModelSpec:
    family: str = "light"
    input_shape: tuple[int, int, int] = (96, 96, 3)
    alpha: float = 0.35
    divisor: int = 8
    backbone: tuple[BlockSpec, ...] = ()
    head: tuple[HeadLayer, ...] = ()
    dropconnect_rate: float = 0.0
    norm_kind: str = "group"
    groups: int = 8
    norm_eps: float = 1e-5
    momentum: float = 0.99
    block_activation: str = "relu6"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "backbone", tuple(self.backbone))
        object.__setattr__(self, "head", tuple(self.head))
        if self.family not in ("light", "heavy"):
            raise SpecError(f"unknown model family {self.family!r}")
        if len(self.input_shape) != 3 or self.input_shape[2] != 3 or min(self.input_shape) < 1:
            raise SpecError(f"input_shape must be (H, W, 3), got {self.input_shape}")
        if self.alpha <= 0 or self.divisor < 1:
            raise SpecError("alpha must be positive and divisor >= 1")
        if not self.backbone:
            raise SpecError("backbone must contain at least one block")
        if not self.head:
            raise SpecError("head must contain at least one layer")
        last = self.head[-1]
        if (last.units, last.activation) not in ((1, "sigmoid"), (2, "softmax")):
            raise SpecError("the last head layer must be 1 unit + sigmoid or 2 units + softmax")
        if not 0 <= self.dropconnect_rate < 1:
            raise SpecError(f"dropconnect_rate must be in [0, 1), got {self.dropconnect_rate}")
        if self.norm_kind not in ops.NORM_KINDS:
            raise SpecError(f"unknown norm kind {self.norm_kind!r}")
        if self.groups < 1 or self.norm_eps <= 0 or not 0 <= self.momentum < 1:
            raise SpecError("invalid normalization settings")
        if self.block_activation not in ("relu6", "swish"):
            raise SpecError(f"unsupported block activation {self.block_activation!r}")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["backbone"] = [asdict(b) for b in self.backbone]
        d["head"] = [asdict(h) for h in self.head]
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelSpec":
        if not isinstance(d, dict):
            raise SpecError("model spec must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown model spec keys: {sorted(unknown)}")
        kw = dict(d)
        try:
            if "backbone" in kw:
                kw["backbone"] = tuple(_strict(BlockSpec, b) for b in kw["backbone"])
            if "head" in kw:
                kw["head"] = tuple(_strict(HeadLayer, h) for h in kw["head"])
            if "input_shape" in kw:
                kw["input_shape"] = tuple(kw["input_shape"])
            return cls(**kw)
        except (TypeError, KeyError) as exc:
            raise SpecError(f"malformed model spec: {exc}") from exc


def _strict(kind, d):
    if not isinstance(d, dict):
        raise SpecError(f"{kind.__name__} entries must be objects")
    unknown = set(d) - {f.name for f in fields(kind)}
    if unknown:
        raise SpecError(f"unknown {kind.__name__} keys: {sorted(unknown)}")
    return kind(**d)


# block tables ----------------------------------------------------------------

# (expansion, channels, repeats, first stride)
MOBILENET_V2_TABLE = [
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
]

# (expansion, kernel, channels, repeats, first stride)
EFFICIENTNET_B0_TABLE = [
    (1, 3, 16, 1, 1),
    (6, 3, 24, 2, 2),
    (6, 5, 40, 2, 2),
    (6, 3, 80, 3, 2),
    (6, 5, 112, 3, 1),
    (6, 5, 192, 4, 2),
    (6, 3, 320, 1, 1),
]

LIGHT_HEAD = (HeadLayer(336, "swish"), HeadLayer(112, "swish"), HeadLayer(1, "sigmoid"))
HEAVY_HEAD = (HeadLayer(1024, "swish"), HeadLayer(256, "swish"), HeadLayer(32, "tanh"), HeadLayer(2, "softmax"))


def mobilenet_v2_backbone(table=MOBILENET_V2_TABLE, stem: int = 32) -> tuple[BlockSpec, ...]:
    blocks = [BlockSpec("plain_conv", stem, stride=2)]
    for t, c, n, s in table:
        for i in range(n):
            blocks.append(BlockSpec("inverted_residual", c, stride=s if i == 0 else 1, expansion=t))
    return tuple(blocks)


def efficientnet_b0_backbone(table=EFFICIENTNET_B0_TABLE, stem: int = 32, top: int | None = 1280):
    blocks = [BlockSpec("plain_conv", stem, stride=2)]
    for t, k, c, n, s in table:
        for i in range(n):
            blocks.append(BlockSpec("inverted_residual", c, stride=s if i == 0 else 1, expansion=t, kernel_size=k))
    if top:
        blocks.append(BlockSpec("plain_conv", top, kernel_size=1))
    return tuple(blocks)


def light_paper_spec() -> ModelSpec:
    return ModelSpec(
        family="light",
        input_shape=(96, 96, 3),
        alpha=0.35,
        backbone=mobilenet_v2_backbone(),
        head=LIGHT_HEAD,
        norm_kind="group",
        block_activation="relu6",
    )


def light_tiny_spec(input_size: int = 32) -> ModelSpec:
    return ModelSpec(
        family="light",
        input_shape=(input_size, input_size, 3),
        alpha=0.35,
        backbone=(
            BlockSpec("plain_conv", 32, stride=2),
            BlockSpec("inverted_residual", 16, stride=1, expansion=1),
            BlockSpec("inverted_residual", 24, stride=2, expansion=6),
            BlockSpec("inverted_residual", 32, stride=2, expansion=6),
        ),
        head=(HeadLayer(32, "swish"), HeadLayer(16, "swish"), HeadLayer(1, "sigmoid")),
        norm_kind="group",
        block_activation="relu6",
    )


def heavy_paper_spec() -> ModelSpec:
    return ModelSpec(
        family="heavy",
        input_shape=(224, 224, 3),
        alpha=1.0,
        backbone=efficientnet_b0_backbone(),
        head=HEAVY_HEAD,
        dropconnect_rate=0.2,
        norm_kind="batch",
        block_activation="swish",
    )


def heavy_tiny_spec(input_size: int = 16) -> ModelSpec:
    return ModelSpec(
        family="heavy",
        input_shape=(input_size, input_size, 3),
        alpha=1.0,
        backbone=(
            BlockSpec("plain_conv", 16, stride=2),
            BlockSpec("inverted_residual", 24, stride=2, expansion=6, kernel_size=5),
        ),
        head=HEAVY_HEAD,
        dropconnect_rate=0.2,
        norm_kind="batch",
        block_activation="swish",
    )


PRESETS = {
    "light_paper": light_paper_spec,
    "light_tiny": light_tiny_spec,
    "heavy_paper": heavy_paper_spec,
    "heavy_tiny": heavy_tiny_spec,
}


# realized layers -------------------------------------------------------------


@dataclass
class Context:
    """Per-forward settings shared by every layer."""

    mode: str = "infer"
    rng: np.random.Generator | None = None
    capture: dict[str, Tensor] | None = None
    dropconnect_rate: float = 0.0


@dataclass
class Norm:
    kind: str
    gamma: Tensor
    beta: Tensor
    groups: int
    eps: float
    momentum: float
    stats: dict[str, np.ndarray] | None = None

    def __call__(self, x: Tensor, ctx: Context) -> Tensor:
        return ops.normalize(
            self.kind, x, self.gamma, self.beta, eps=self.eps, mode=ctx.mode,
            running_stats=self.stats, groups=self.groups, momentum=self.momentum,
        )


@dataclass
class ConvUnit:
    """Convolution (full or depthwise) followed by normalization and activation."""

    name: str
    kernel: Tensor
    norm: Norm
    stride: int
    activation: str
    depthwise: bool = False

    def __call__(self, x: Tensor, ctx: Context) -> Tensor:
        if self.depthwise:
            y = ops.depthwise_conv2d(x, self.kernel, stride=self.stride, padding="same")
        else:
            y = ops.conv2d(x, self.kernel, stride=self.stride, padding="same")
        return ops.apply_activation(self.activation, self.norm(y, ctx))


@dataclass
class PlainBlock:
    name: str
    conv: ConvUnit

    def units(self):
        return [self.conv]

    def __call__(self, x: Tensor, ctx: Context) -> Tensor:
        return self.conv(x, ctx)


@dataclass
class InvertedResidual:
    """expand (1x1) -> depthwise -> linear project, with a skip when shapes allow."""

    name: str
    expand: ConvUnit | None
    depthwise: ConvUnit
    project: ConvUnit
    residual: bool

    def units(self):
        return [u for u in (self.expand, self.depthwise, self.project) if u is not None]

    def __call__(self, x: Tensor, ctx: Context) -> Tensor:
        h = x
        for u in self.units():
            h = u(h, ctx)
            if ctx.capture is not None:
                ctx.capture[u.name] = h
        return x + h if self.residual else h


@dataclass
class DenseUnit:
    name: str
    weights: Tensor
    bias: Tensor
    activation: str
    norm: Norm | None = None

    def __call__(self, x: Tensor, ctx: Context) -> tuple[Tensor, Tensor]:
        w = ops.dropconnect(self.weights, ctx.dropconnect_rate, ctx.rng, ctx.mode) if ctx.dropconnect_rate else self.weights
        z = ops.dense(x, w, self.bias)
        y = ops.apply_activation(self.activation, z)
        if self.norm is not None:
            y = self.norm(y, ctx)
        return z, y


class Model:
    """A realized network: its spec, named parameters and running statistics."""

    def __init__(self, spec: ModelSpec, blocks: list, head: list[DenseUnit]):
        self.spec = spec
        self.blocks = blocks
        self.head = head
        names = list(self.params)
        if len(names) != len(set(names)):
            raise SpecError("duplicate parameter names")

    @property
    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for unit in self._units():
            if isinstance(unit, ConvUnit):
                out[f"{unit.name}/kernel"] = unit.kernel
            else:
                out[f"{unit.name}/weights"] = unit.weights
                out[f"{unit.name}/bias"] = unit.bias
            if unit.norm is not None:
                out[f"{unit.name}/norm/gamma"] = unit.norm.gamma
                out[f"{unit.name}/norm/beta"] = unit.norm.beta
        return out

    @property
    def state(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for unit in self._units():
            if unit.norm is not None and unit.norm.stats is not None:
                out[f"{unit.name}/norm/mean"] = unit.norm.stats["mean"]
                out[f"{unit.name}/norm/var"] = unit.norm.stats["var"]
        return out

    def _units(self):
        for b in self.blocks:
            yield from b.units()
        yield from self.head

    def layer(self, name: str):
        for unit in self._units():
            if unit.name == name:
                return unit
        raise KeyError(name)

    def feature_names(self) -> list[str]:
        """Names of every spatial feature map recorded during a captured forward."""
        names = []
        for b in self.blocks:
            if isinstance(b, InvertedResidual):
                names.extend(u.name for u in b.units())
            names.append(b.name)
        return names

    def set_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Overwrite parameters and running stats in place (shapes must match)."""
        params, state = self.params, self.state
        for name, arr in arrays.items():
            if name in params:
                target = params[name].data
            elif name in state:
                target = state[name]
            else:
                raise KeyError(name)
            if target.shape != tuple(arr.shape):
                raise ValueError(f"{name}: shape {tuple(arr.shape)} != {target.shape}")
            target[...] = arr

    def snapshot(self) -> dict[str, np.ndarray]:
        out = {k: v.data.copy() for k, v in self.params.items()}
        out.update({k: v.copy() for k, v in self.state.items()})
        return out

    def forward(
        self,
        x: Tensor,
        mode: str = "infer",
        rng: np.random.Generator | None = None,
        capture: dict[str, Tensor] | None = None,
        dropconnect_rate: float | None = None,
    ) -> Tensor:
        """Map an NHWC batch to class probabilities.

        When ``capture`` is a dict it receives every block output, the
        inner stages of inverted-residual blocks, the pooled features and
        the pre-activation ``logits`` of the classifier.
        """
        if x.data.ndim != 4 or x.shape[1:] != self.spec.input_shape:
            raise ValueError(f"expected input (N, {', '.join(map(str, self.spec.input_shape))}), got {x.shape}")
        rate = self.spec.dropconnect_rate if dropconnect_rate is None else dropconnect_rate
        ctx = Context(mode=mode, rng=rng, capture=capture, dropconnect_rate=rate if mode == "train" else 0.0)
        h = x
        for b in self.blocks:
            h = b(h, ctx)
            if capture is not None:
                capture[b.name] = h
        h = ops.global_avg_pool(h)
        if capture is not None:
            capture["pool"] = h
        z = h
        for unit in self.head:
            z, h = unit(h, ctx)
        if capture is not None:
            capture["logits"] = z
        return h

    __call__ = forward

    def parameter_count(self) -> int:
        return parameter_count(self)


def parameter_count(model: Model) -> int:
    """Trainable parameter total; running statistics are not counted."""
    return int(sum(t.size for t in model.params.values()))


# construction ----------------------------------------------------------------


class _Init:
    def __init__(self, spec: ModelSpec, seed: int):
        self.spec = spec
        self.rng = np.random.default_rng(seed)

    def uniform(self, shape, fan_in: int) -> Tensor:
        limit = np.sqrt(6.0 / fan_in)
        return Tensor(self.rng.uniform(-limit, limit, size=shape), requires_grad=True)

    def norm(self, channels: int) -> Norm:
        s = self.spec
        stats = None
        if s.norm_kind == "batch":
            stats = {"mean": np.zeros(channels, np.float32), "var": np.ones(channels, np.float32)}
        elif channels % s.groups:
            raise SpecError(f"{channels} channels are not divisible into {s.groups} groups")
        return Norm(
            s.norm_kind,
            Tensor(np.ones(channels), requires_grad=True),
            Tensor(np.zeros(channels), requires_grad=True),
            s.groups, s.norm_eps, s.momentum, stats,
        )

    def conv(self, name, cin, cout, k, stride, act) -> ConvUnit:
        return ConvUnit(name, self.uniform((k, k, cin, cout), k * k * cin), self.norm(cout), stride, act)

    def depthwise(self, name, ch, k, stride, act) -> ConvUnit:
        return ConvUnit(name, self.uniform((k, k, ch), k * k), self.norm(ch), stride, act, depthwise=True)


def build_inverted_residual(name: str, in_ch: int, out_ch: int, stride: int, expansion: int,
                            init: _Init, kernel_size: int = 3, activation: str = "relu6") -> InvertedResidual:
    if stride not in (1, 2):
        raise SpecError(f"block stride must be 1 or 2, got {stride}")
    hidden = in_ch * expansion
    expand = init.conv(f"{name}/expand", in_ch, hidden, 1, 1, activation) if expansion != 1 else None
    dw = init.depthwise(f"{name}/depthwise", hidden, kernel_size, stride, activation)
    project = init.conv(f"{name}/project", hidden, out_ch, 1, 1, "linear")
    return InvertedResidual(name, expand, dw, project, residual=stride == 1 and in_ch == out_ch)


def _build(spec: ModelSpec, seed: int) -> Model:
    init = _Init(spec, seed)
    act = spec.block_activation
    blocks = []
    cin = spec.input_shape[2]
    for i, b in enumerate(spec.backbone):
        name = f"block_{i}"
        cout = round_filters(b.out_channels, spec.alpha, spec.divisor)
        if b.kind == "plain_conv":
            blocks.append(PlainBlock(name, init.conv(f"{name}/conv", cin, cout, b.kernel_size, b.stride, act)))
        else:
            blocks.append(build_inverted_residual(name, cin, cout, b.stride, b.expansion, init, b.kernel_size, act))
        cin = cout
    head = []
    width = cin
    for j, layer in enumerate(spec.head):
        last = j == len(spec.head) - 1
        head.append(DenseUnit(
            f"head_{j}",
            init.uniform((width, layer.units), width),
            Tensor(np.zeros(layer.units), requires_grad=True),
            layer.activation,
            None if last else init.norm(layer.units),
        ))
        width = layer.units
    return Model(spec, blocks, head)


def build_light_model(spec: ModelSpec, seed: int = 0) -> Model:
    if spec.family != "light":
        raise SpecError("build_light_model needs a light-family spec")
    if (spec.head[-1].units, spec.head[-1].activation) != (1, "sigmoid"):
        raise SpecError("the light model ends in a single sigmoid unit")
    return _build(spec, seed)


def build_heavy_model(spec: ModelSpec, seed: int = 0) -> Model:
    if spec.family != "heavy":
        raise SpecError("build_heavy_model needs a heavy-family spec")
    if (spec.head[-1].units, spec.head[-1].activation) != (2, "softmax"):
        raise SpecError("the heavy model ends in a two-way softmax")
    return _build(spec, seed)


def build_model(spec: ModelSpec, seed: int = 0) -> Model:
    return build_light_model(spec, seed) if spec.family == "light" else build_heavy_model(spec, seed)


__all__ = [
    "BlockSpec",
    "HeadLayer",
    "Model",
    "ModelSpec",
    "PRESETS",
    "SpecError",
    "build_heavy_model",
    "build_inverted_residual",
    "build_light_model",
    "build_model",
    "parameter_count",
    "round_filters",
]
