"""Encoder/decoder segmentation network with a swappable bottleneck.

The encoder is a stem DoubleConv plus ``depth`` down blocks (max-pool then
DoubleConv), doubling channel width at each level; the decoder mirrors it
with transposed convolutions and skip concatenations; a 1x1 head emits
per-class logits at the input resolution. The bottleneck is either the
quantum module from :mod:`hqseg.quanv` or a classical DoubleConv of the same
shape, so both variants can be compared under identical conditions.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import quanv
from .layers import (
    BatchNormState,
    Conv2dParams,
    batch_norm,
    concat_channels,
    conv2d,
    depthwise_separable_conv,
    max_pool_2x2,
    transposed_conv_2x2_stride2,
)
from .tensor import Tensor

BOTTLENECKS = ("quantum", "classical")


@dataclass
class ModelConfig:
    in_channels: int = 3
    num_classes: int = 5
    base_width: int = 16
    depth: int = 4
    input_size: int = 64
    bottleneck: str = "quantum"
    filter_layout: str = "chain"

    def validate(self) -> None:
        errs = []
        if self.in_channels < 1:
            errs.append(f"in_channels must be >= 1, got {self.in_channels}")
        if self.num_classes < 1:
            errs.append(f"num_classes must be >= 1, got {self.num_classes}")
        if self.base_width < 1:
            errs.append(f"base_width must be >= 1, got {self.base_width}")
        if self.depth < 1:
            errs.append(f"depth must be >= 1, got {self.depth}")
        if self.bottleneck not in BOTTLENECKS:
            errs.append(f"bottleneck must be one of {BOTTLENECKS}, got {self.bottleneck!r}")
        if self.filter_layout not in quanv.LAYOUTS:
            errs.append(f"filter_layout must be one of {quanv.LAYOUTS}, got {self.filter_layout!r}")
        if self.depth >= 1:
            factor = 1 << self.depth
            if self.input_size % factor:
                errs.append(
                    f"input_size must be divisible by {factor} for depth {self.depth}, "
                    f"got {self.input_size}"
                )
            elif self.input_size // factor < quanv.GRID:
                errs.append(
                    f"bottleneck extent {self.input_size // factor} < {quanv.GRID}; "
                    f"input_size must be >= {quanv.GRID * factor}"
                )
        if errs:
            raise ValueError("; ".join(errs))

    @property
    def widths(self) -> list[int]:
        """Channel ladder from stem to bottleneck."""
        return [self.base_width << i for i in range(self.depth + 1)]

    @property
    def bottleneck_extent(self) -> int:
        return self.input_size >> self.depth


def _conv_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), shape), requires_grad=True)


def _bias_init(n: int) -> Tensor:
    return Tensor(np.zeros(n), requires_grad=True)


class SeparableStage:
    """Depthwise-separable conv -> BatchNorm -> ReLU."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.depthwise = Conv2dParams(
            kernel=_conv_init(rng, (cin, 1, 3, 3), 9),
            bias=_bias_init(cin),
            padding=1,
            groups=cin,
        )
        self.pointwise = Conv2dParams(
            kernel=_conv_init(rng, (cout, cin, 1, 1), cin),
            bias=_bias_init(cout),
        )
        self.bn = BatchNormState.create(cout)

    def forward(self, x: Tensor, training: bool, update_stats: bool) -> Tensor:
        y = depthwise_separable_conv(x, self.depthwise, self.pointwise)
        return batch_norm(y, self.bn, training, update_stats).relu()

    def named_parameters(self, prefix: str):
        return [
            (f"{prefix}.dw.kernel", self.depthwise.kernel),
            (f"{prefix}.dw.bias", self.depthwise.bias),
            (f"{prefix}.pw.kernel", self.pointwise.kernel),
            (f"{prefix}.pw.bias", self.pointwise.bias),
            (f"{prefix}.bn.gamma", self.bn.gamma),
            (f"{prefix}.bn.beta", self.bn.beta),
        ]

    def named_buffers(self, prefix: str):
        return [
            (f"{prefix}.bn.running_mean", self.bn.running_mean),
            (f"{prefix}.bn.running_var", self.bn.running_var),
        ]


class DoubleConv:
    """Two separable stages; spatial extents are preserved."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.s1 = SeparableStage(cin, cout, rng)
        self.s2 = SeparableStage(cout, cout, rng)

    def forward(self, x: Tensor, training: bool, update_stats: bool) -> Tensor:
        return self.s2.forward(self.s1.forward(x, training, update_stats), training, update_stats)

    def named_parameters(self, prefix: str):
        return self.s1.named_parameters(f"{prefix}.s1") + self.s2.named_parameters(f"{prefix}.s2")

    def named_buffers(self, prefix: str):
        return self.s1.named_buffers(f"{prefix}.s1") + self.s2.named_buffers(f"{prefix}.s2")


class DownBlock:
    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.conv = DoubleConv(cin, cout, rng)

    def forward(self, x: Tensor, training: bool, update_stats: bool) -> Tensor:
        return self.conv.forward(max_pool_2x2(x), training, update_stats)

    def named_parameters(self, prefix: str):
        return self.conv.named_parameters(prefix)

    def named_buffers(self, prefix: str):
        return self.conv.named_buffers(prefix)


class UpBlock:
    """Transposed conv doubling extents and halving channels, skip concat,
    DoubleConv refinement."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.up_kernel = _conv_init(rng, (cin, cout, 2, 2), cin * 4)
        self.up_bias = _bias_init(cout)
        self.conv = DoubleConv(2 * cout, cout, rng)

    def forward(self, x: Tensor, skip: Tensor, training: bool, update_stats: bool) -> Tensor:
        y = transposed_conv_2x2_stride2(x, self.up_kernel, self.up_bias)
        if y.shape[2:] != skip.shape[2:]:
            raise ValueError(
                f"skip connection extent mismatch: decoder {y.shape[2:]} vs encoder {skip.shape[2:]}"
            )
        return self.conv.forward(concat_channels([skip, y]), training, update_stats)

    def named_parameters(self, prefix: str):
        return [
            (f"{prefix}.up.kernel", self.up_kernel),
            (f"{prefix}.up.bias", self.up_bias),
        ] + self.conv.named_parameters(f"{prefix}.conv")

    def named_buffers(self, prefix: str):
        return self.conv.named_buffers(f"{prefix}.conv")


class QuantumBottleneck:
    def __init__(self, channels: int, extent: int, rng: np.random.Generator, layout: str):
        self.params = quanv.QuanvParams.create(channels, extent, extent, rng, layout)

    def forward(self, x: Tensor, training: bool, update_stats: bool) -> Tensor:
        return quanv.quantum_bottleneck(x, self.params)

    def named_parameters(self, prefix: str):
        p = self.params
        return [
            (f"{prefix}.circuit_angles", p.circuit_angles),
            (f"{prefix}.pre.kernel", p.pre_conv.kernel),
            (f"{prefix}.pre.bias", p.pre_conv.bias),
            (f"{prefix}.post.weight", p.post_weight),
            (f"{prefix}.post.bias", p.post_bias),
        ]

    def named_buffers(self, prefix: str):
        return []


class ClassicalBottleneck:
    def __init__(self, channels: int, extent: int, rng: np.random.Generator, layout: str):
        self.conv = DoubleConv(channels, channels, rng)

    def forward(self, x: Tensor, training: bool, update_stats: bool) -> Tensor:
        return self.conv.forward(x, training, update_stats)

    def named_parameters(self, prefix: str):
        return self.conv.named_parameters(prefix)

    def named_buffers(self, prefix: str):
        return self.conv.named_buffers(prefix)


class HybridUNet:
    """The full segmentation model; construction order is deterministic for a
    fixed seed, so identical seeds give identical parameters."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        widths = cfg.widths
        self.stem = DoubleConv(cfg.in_channels, widths[0], rng)
        self.downs = [DownBlock(widths[i], widths[i + 1], rng) for i in range(cfg.depth)]
        kind = QuantumBottleneck if cfg.bottleneck == "quantum" else ClassicalBottleneck
        self.bottleneck = kind(widths[-1], cfg.bottleneck_extent, rng, cfg.filter_layout)
        self.ups = [UpBlock(widths[i + 1], widths[i], rng) for i in reversed(range(cfg.depth))]
        self.head = Conv2dParams(
            kernel=_conv_init(rng, (cfg.num_classes, widths[0], 1, 1), widths[0]),
            bias=_bias_init(cfg.num_classes),
        )

    def forward(self, x: Tensor, training: bool = False, update_stats: bool | None = None) -> Tensor:
        if update_stats is None:
            update_stats = training
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(
                f"expected input [N,{self.cfg.in_channels},H,W], got shape {x.shape}"
            )
        factor = 1 << self.cfg.depth
        n, _, h, w = x.shape
        if h % factor or w % factor:
            raise ValueError(
                f"input extents ({h},{w}) must be divisible by {factor} "
                f"for {self.cfg.depth} down blocks"
            )
        if h // factor < quanv.GRID or w // factor < quanv.GRID:
            raise ValueError(
                f"bottleneck extent ({h // factor},{w // factor}) below minimum {quanv.GRID}"
            )
        skips = [self.stem.forward(x, training, update_stats)]
        for down in self.downs:
            skips.append(down.forward(skips[-1], training, update_stats))
        y = self.bottleneck.forward(skips[-1], training, update_stats)
        for up, skip in zip(self.ups, reversed(skips[:-1])):
            y = up.forward(y, skip, training, update_stats)
        return conv2d(y, self.head)

    def encoder_features(self, x: Tensor, training: bool = False) -> Tensor:
        """Feature map entering the bottleneck (used by circuit inspection)."""
        y = self.stem.forward(x, training, update_stats=False)
        for down in self.downs:
            y = down.forward(y, training, update_stats=False)
        return y

    def _modules(self):
        mods = [("stem", self.stem)]
        mods += [(f"down{i + 1}", d) for i, d in enumerate(self.downs)]
        mods.append(("bottleneck", self.bottleneck))
        mods += [(f"up{i + 1}", u) for i, u in enumerate(self.ups)]
        return mods

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for name, mod in self._modules():
            out.extend(mod.named_parameters(name))
        out.append(("head.kernel", self.head.kernel))
        out.append(("head.bias", self.head.bias))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for name, mod in self._modules():
            out.extend(mod.named_buffers(name))
        return out

    def parameter_counts(self) -> dict[str, int]:
        """Trainable scalar count per top-level module, plus the total."""
        counts: dict[str, int] = {}
        for name, mod in self._modules():
            counts[name] = sum(t.size for _, t in mod.named_parameters(name))
        counts["head"] = self.head.kernel.size + self.head.bias.size
        counts["total"] = sum(counts.values())
        return counts


def predict(logits) -> np.ndarray:
    """Per-pixel argmax over the class axis; ties resolve to the lowest id."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if arr.ndim != 4:
        raise ValueError(f"predict expects logits [N,K,H,W], got {arr.shape}")
    return arr.argmax(axis=1)


def count_parameters(cfg: ModelConfig, seed: int = 0) -> dict[str, int]:
    return HybridUNet(cfg, seed).parameter_counts()
