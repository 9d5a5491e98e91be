"""Network blocks: dense / refined-dense blocks, r-RDB, GDB, down-sampling,
and full model assembly for classification and sequence heads.

Block wiring in brief:

* A dense block's layer i consumes the concatenation of the input and all
  earlier layer outputs (c0 + (i-1)*k channels).
* A refined dense block replaces the inner concatenations with elementwise
  sums, so layer i > 1 consumes exactly k channels (the running sum of the
  earlier layer outputs, the block input excluded). The block still emits
  the concatenation of the input and every layer output, so its shape
  matches the dense block's.
* An r-RDB fuses that concatenation back to c0 channels with a bare 1x1
  convolution and adds the block input (local residual learning).
* The GDB extracts shallow features with a 5x5 conv group, then chains B
  r-RDBs with sum-based dense connectivity: block i receives the shallow
  features plus the sum of all earlier block outputs, and the final output
  adds the shallow features to the sum of every block output.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .nn import ConvGroup, Conv2d, Dropout, Linear, Module
from .rng import Rng
from .tensor import ShapeMismatchError, Tensor


class ConfigError(ValueError):
    """Raised when a block or model specification is inconsistent."""


def _positive(name: str, *values) -> None:
    for v in values:
        if int(v) < 1:
            raise ConfigError(f"{name} extents must be positive, got {values}")


# ---------------------------------------------------------------------------
# specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvGroupSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (1, 1)
    conv_flavor: str = "depthwise_separable"

    def validate(self) -> None:
        _positive("ConvGroupSpec", self.in_channels, self.out_channels, *self.kernel, *self.stride)
        if self.padding[0] >= self.kernel[0] or self.padding[1] >= self.kernel[1]:
            raise ConfigError(
                f"padding {self.padding} must be smaller than kernel {self.kernel}"
            )
        if self.conv_flavor not in ("standard", "depthwise_separable"):
            raise ConfigError(f"unknown conv_flavor {self.conv_flavor!r}")

    def out_extent(self, h: int, w: int) -> tuple[int, int]:
        ho = (h + 2 * self.padding[0] - self.kernel[0]) // self.stride[0] + 1
        wo = (w + 2 * self.padding[1] - self.kernel[1]) // self.stride[1] + 1
        return ho, wo


@dataclass(frozen=True)
class DenseBlockSpec:
    num_layers: int                      # L
    growth_rate: int                     # k, channels added per inner layer
    in_channels: int                     # c0
    kernel: tuple[int, int] = (3, 3)
    combine_rule: str = "concat"         # "concat" (dense) or "sum" (refined)
    conv_flavor: str = "depthwise_separable"
    sum_includes_input: bool = False     # optional variant: input joins the inner sums

    def validate(self) -> None:
        if self.num_layers < 1:
            raise ConfigError(f"num_layers must be >= 1, got {self.num_layers}")
        _positive("DenseBlockSpec", self.growth_rate, self.in_channels, *self.kernel)
        if self.combine_rule not in ("concat", "sum"):
            raise ConfigError(f"unknown combine_rule {self.combine_rule!r}")
        if self.sum_includes_input:
            if self.combine_rule != "sum":
                raise ConfigError("sum_includes_input requires combine_rule='sum'")
            if self.in_channels != self.growth_rate:
                raise ConfigError(
                    "sum_includes_input needs in_channels == growth_rate, "
                    f"got {self.in_channels} != {self.growth_rate}"
                )

    @property
    def out_channels(self) -> int:
        return self.in_channels + self.num_layers * self.growth_rate

    def layer_in_channels(self, i: int) -> int:
        """Input channel count of inner layer i (1-based)."""
        if self.combine_rule == "concat":
            return self.in_channels + (i - 1) * self.growth_rate
        return self.in_channels if i == 1 else self.growth_rate


@dataclass(frozen=True)
class RrdbSpec:
    dense: DenseBlockSpec

    def validate(self) -> None:
        self.dense.validate()
        if self.dense.combine_rule != "sum":
            raise ConfigError("r-RDB requires a refined dense block (combine_rule='sum')")

    @property
    def channels(self) -> int:
        return self.dense.in_channels


@dataclass(frozen=True)
class GdbSpec:
    shallow: ConvGroupSpec
    rrdb: RrdbSpec
    num_blocks: int = 5                  # B

    def validate(self) -> None:
        self.shallow.validate()
        self.rrdb.validate()
        if self.shallow.kernel != (5, 5):
            raise ConfigError(f"shallow extraction kernel must be 5x5, got {self.shallow.kernel}")
        if self.num_blocks < 1:
            raise ConfigError(f"num_blocks must be >= 1, got {self.num_blocks}")
        if self.rrdb.channels != self.shallow.out_channels:
            raise ConfigError(
                f"r-RDB channels {self.rrdb.channels} must equal shallow out_channels "
                f"{self.shallow.out_channels}"
            )


@dataclass(frozen=True)
class DownsampleSpec:
    layer1: ConvGroupSpec
    layer2: ConvGroupSpec

    def validate(self) -> None:
        for i, layer in enumerate((self.layer1, self.layer2), 1):
            layer.validate()
            if max(layer.stride) < 2:
                raise ConfigError(f"down-sampling layer {i} needs a stride-2 axis, got {layer.stride}")
        if self.layer2.in_channels != self.layer1.out_channels:
            raise ConfigError(
                f"down-sampling channel chain broken: {self.layer1.out_channels} -> "
                f"{self.layer2.in_channels}"
            )

    @property
    def out_channels(self) -> int:
        return self.layer2.out_channels

    def out_extent(self, h: int, w: int) -> tuple[int, int]:
        return self.layer2.out_extent(*self.layer1.out_extent(h, w))


@dataclass(frozen=True)
class DrnConfig:
    """Full model geometry: GDB, down-sampling, head, and dropout sites."""

    gdb: GdbSpec
    down: DownsampleSpec
    head: str                            # "classify" or "sequence"
    image_size: tuple[int, int]          # (H, W)
    num_classes: int = 10                # classify head width
    alphabet_size: int = 11              # sequence head width, blank included
    max_label_len: int = 5               # sequence targets, for frame-budget checks
    dropout_shallow: float = 0.0
    dropout_down: float = 0.0
    dropout_fc: float = 0.0

    def validate(self) -> None:
        self.gdb.validate()
        self.down.validate()
        if self.head not in ("classify", "sequence"):
            raise ConfigError(f"unknown head {self.head!r}")
        if self.down.layer1.in_channels != self.gdb.shallow.out_channels:
            raise ConfigError(
                f"down-sampling input channels {self.down.layer1.in_channels} must equal "
                f"GDB output channels {self.gdb.shallow.out_channels}"
            )
        for rate in (self.dropout_shallow, self.dropout_down, self.dropout_fc):
            if not 0.0 <= rate < 1.0:
                raise ConfigError(f"dropout rates must be in [0, 1), got {rate}")
        c, h, w = self.feature_geometry()
        if h < 1 or w < 1:
            raise ConfigError(f"image {self.image_size} collapses to {h}x{w} features")
        if self.head == "classify":
            if self.num_classes < 2:
                raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        else:
            if self.alphabet_size < 2:
                raise ConfigError(f"alphabet_size must be >= 2, got {self.alphabet_size}")
            frames = w
            if frames < 2 * self.max_label_len + 1:
                raise ConfigError(
                    f"sequence head yields {frames} frames but max_label_len "
                    f"{self.max_label_len} needs >= {2 * self.max_label_len + 1}"
                )

    def feature_geometry(self) -> tuple[int, int, int]:
        """(channels, height, width) of the down-sampled feature map."""
        h, w = self.gdb.shallow.out_extent(*self.image_size)
        h, w = self.down.out_extent(h, w)
        return self.down.out_channels, h, w


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------

class DenseBlock(Module):
    """Inner layers consume the concatenation of everything before them."""

    def __init__(self, spec: DenseBlockSpec, rng: Optional[Rng] = None, dtype=np.float32):
        super().__init__()
        spec.validate()
        if spec.combine_rule != "concat":
            raise ConfigError("DenseBlock requires combine_rule='concat'")
        self.spec = spec
        rng = rng if rng is not None else Rng(0)
        for i in range(1, spec.num_layers + 1):
            layer = ConvGroup(
                spec.layer_in_channels(i), spec.growth_rate, spec.kernel,
                padding=(spec.kernel[0] // 2, spec.kernel[1] // 2),
                conv_flavor=spec.conv_flavor, rng=rng, dtype=dtype,
            )
            setattr(self, f"layer{i}", layer)

    def _layers(self):
        return [self._children[f"layer{i}"] for i in range(1, self.spec.num_layers + 1)]

    def forward(self, x: Tensor) -> Tensor:
        feats = [x]
        for layer in self._layers():
            inp = feats[0] if len(feats) == 1 else ops.concat_channels(feats)
            feats.append(layer(inp))
        return ops.concat_channels(feats)

    def inner_kernel_param_count(self) -> int:
        return sum(layer.kernel_param_count() for layer in self._layers())


class RefinedDenseBlock(Module):
    """Inner layers consume the running sum of earlier layer outputs."""

    def __init__(self, spec: DenseBlockSpec, rng: Optional[Rng] = None, dtype=np.float32):
        super().__init__()
        spec.validate()
        if spec.combine_rule != "sum":
            raise ConfigError("RefinedDenseBlock requires combine_rule='sum'")
        self.spec = spec
        rng = rng if rng is not None else Rng(0)
        for i in range(1, spec.num_layers + 1):
            layer = ConvGroup(
                spec.layer_in_channels(i), spec.growth_rate, spec.kernel,
                padding=(spec.kernel[0] // 2, spec.kernel[1] // 2),
                conv_flavor=spec.conv_flavor, rng=rng, dtype=dtype,
            )
            setattr(self, f"layer{i}", layer)

    def _layers(self):
        return [self._children[f"layer{i}"] for i in range(1, self.spec.num_layers + 1)]

    def forward(self, x: Tensor) -> Tensor:
        layers = self._layers()
        feats = [layers[0](x)]
        for layer in layers[1:]:
            pool = ([x] if self.spec.sum_includes_input else []) + feats
            feats.append(layer(ops.sum_features(pool)))
        return ops.concat_channels([x] + feats)

    def inner_kernel_param_count(self) -> int:
        return sum(layer.kernel_param_count() for layer in self._layers())


def local_feature_fusion(x: Tensor, features: list[Tensor],
                         weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Bare 1x1 convolution over [x, features...], compressing back to c0."""
    cat = ops.concat_channels([x] + list(features))
    return ops.conv2d(cat, weight, bias, stride=(1, 1), padding=(0, 0))


class Rrdb(Module):
    """Refined dense block + 1x1 fusion + local residual add.

    Zeroing the fusion weights (and bias) makes the whole block the
    identity map, exactly.
    """

    def __init__(self, spec: RrdbSpec, rng: Optional[Rng] = None, dtype=np.float32):
        super().__init__()
        spec.validate()
        self.spec = spec
        rng = rng if rng is not None else Rng(0)
        self.dense = RefinedDenseBlock(spec.dense, rng=rng, dtype=dtype)
        self.fusion = Conv2d(spec.dense.out_channels, spec.channels, kernel=(1, 1),
                             padding=(0, 0), bias=True, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        fused = self.fusion(self.dense(x))
        return ops.sum_features([x, fused])

    def zero_fusion(self) -> None:
        self.fusion.weight.value.data.fill(0.0)
        self.fusion.bias.value.data.fill(0.0)


class Gdb(Module):
    """Shallow 5x5 extraction plus B r-RDBs with sum-based dense wiring."""

    def __init__(self, spec: GdbSpec, rng: Optional[Rng] = None, dtype=np.float32,
                 dropout_shallow: float = 0.0, dropout_rng: Optional[Rng] = None):
        super().__init__()
        spec.validate()
        self.spec = spec
        rng = rng if rng is not None else Rng(0)
        self.shallow = ConvGroup(
            spec.shallow.in_channels, spec.shallow.out_channels, spec.shallow.kernel,
            stride=spec.shallow.stride, padding=spec.shallow.padding,
            conv_flavor=spec.shallow.conv_flavor, rng=rng, dtype=dtype,
        )
        self.drop_shallow = Dropout(dropout_shallow, dropout_rng)
        for i in range(spec.num_blocks):
            setattr(self, f"rrdb{i}", Rrdb(spec.rrdb, rng=rng, dtype=dtype))

    def _blocks(self):
        return [self._children[f"rrdb{i}"] for i in range(self.spec.num_blocks)]

    def forward(self, x: Tensor) -> Tensor:
        fs = self.drop_shallow(self.shallow(x))
        outs: list[Tensor] = []
        for block in self._blocks():
            inp = fs if not outs else ops.sum_features([fs] + outs)
            outs.append(block(inp))
        return ops.sum_features([fs] + outs)

    def shallow_features(self, x: Tensor) -> Tensor:
        return self.shallow(x)

    def zero_all_fusions(self) -> None:
        for block in self._blocks():
            block.zero_fusion()


class Downsample(Module):
    """Two stride-2 conv groups: spatial extent shrinks, channels widen."""

    def __init__(self, spec: DownsampleSpec, rng: Optional[Rng] = None, dtype=np.float32):
        super().__init__()
        spec.validate()
        self.spec = spec
        rng = rng if rng is not None else Rng(0)
        self.layer1 = ConvGroup(
            spec.layer1.in_channels, spec.layer1.out_channels, spec.layer1.kernel,
            stride=spec.layer1.stride, padding=spec.layer1.padding,
            conv_flavor=spec.layer1.conv_flavor, rng=rng, dtype=dtype,
        )
        self.layer2 = ConvGroup(
            spec.layer2.in_channels, spec.layer2.out_channels, spec.layer2.kernel,
            stride=spec.layer2.stride, padding=spec.layer2.padding,
            conv_flavor=spec.layer2.conv_flavor, rng=rng, dtype=dtype,
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.layer2(self.layer1(x))


def residual_block_forward(x: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """Classic two-weight residual unit: w2 . relu(w1 . x) + x.

    Rank-2 inputs use matrix weights (D x D); rank-4 inputs use conv
    weights with same-shape padding. Both weights must preserve the
    feature width so the skip connection is shape-valid.
    """
    if x.ndim == 2:
        d = x.shape[1]
        if w1.shape != (d, d) or w2.shape != (d, d):
            raise ShapeMismatchError(
                f"residual weights must be ({d}, {d}), got {w1.shape} and {w2.shape}"
            )
        zero = Tensor(np.zeros(d, dtype=x.dtype))
        h = ops.fully_connected(ops.relu(ops.fully_connected(x, w1, zero)), w2, zero)
        return ops.sum_features([h, x])
    if x.ndim == 4:
        c = x.shape[1]
        for w in (w1, w2):
            if w.ndim != 4 or w.shape[0] != c or w.shape[1] != c:
                raise ShapeMismatchError(
                    f"residual conv weights must preserve {c} channels, got {w.shape}"
                )
            if w.shape[2] % 2 == 0 or w.shape[3] % 2 == 0:
                raise ShapeMismatchError("residual conv kernels must be odd for same padding")
        p1 = (w1.shape[2] // 2, w1.shape[3] // 2)
        p2 = (w2.shape[2] // 2, w2.shape[3] // 2)
        h = ops.conv2d(ops.relu(ops.conv2d(x, w1, padding=p1)), w2, padding=p2)
        return ops.sum_features([h, x])
    raise ShapeMismatchError(f"residual block input must be rank 2 or 4, got {x.shape}")


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------

def classify_config(
    image_size=(28, 28),
    num_classes=10,
    shallow_channels=16,
    shallow_stride=(1, 1),
    num_rrdbs=5,
    layers_per_block=4,
    growth_rate=12,
    conv_flavor="depthwise_separable",
    down_channels=None,
    dropout=(0.0, 0.0, 0.0),
    sum_includes_input=False,
) -> DrnConfig:
    """Classification geometry from scalar knobs.

    Down-sampling uses two 3x3 stride-(2,2) groups; each doubles the
    channel count unless ``down_channels`` overrides the pair.
    """
    c = shallow_channels
    d1, d2 = down_channels if down_channels is not None else (2 * c, 4 * c)
    dense = DenseBlockSpec(
        num_layers=layers_per_block, growth_rate=growth_rate, in_channels=c,
        combine_rule="sum", conv_flavor=conv_flavor,
        sum_includes_input=sum_includes_input,
    )
    cfg = DrnConfig(
        gdb=GdbSpec(
            shallow=ConvGroupSpec(1, c, kernel=(5, 5), stride=shallow_stride,
                                  padding=(2, 2), conv_flavor=conv_flavor),
            rrdb=RrdbSpec(dense=dense),
            num_blocks=num_rrdbs,
        ),
        down=DownsampleSpec(
            layer1=ConvGroupSpec(c, d1, stride=(2, 2), conv_flavor=conv_flavor),
            layer2=ConvGroupSpec(d1, d2, stride=(2, 2), conv_flavor=conv_flavor),
        ),
        head="classify",
        image_size=tuple(image_size),
        num_classes=num_classes,
        dropout_shallow=dropout[0],
        dropout_down=dropout[1],
        dropout_fc=dropout[2],
    )
    cfg.validate()
    return cfg


def sequence_config(
    image_size=(32, 160),
    alphabet_size=11,
    max_label_len=5,
    shallow_channels=32,
    num_rrdbs=5,
    layers_per_block=4,
    growth_rate=16,
    conv_flavor="depthwise_separable",
    down_channels=None,
    dropout_down=0.2,
    sum_includes_input=False,
) -> DrnConfig:
    """Transcription geometry from scalar knobs.

    The shallow 5x5 group takes stride (2,2); down-sampling strides are
    (2,2) then (2,1), keeping one frame per remaining feature column.
    """
    c = shallow_channels
    d1, d2 = down_channels if down_channels is not None else (2 * c, 4 * c)
    dense = DenseBlockSpec(
        num_layers=layers_per_block, growth_rate=growth_rate, in_channels=c,
        combine_rule="sum", conv_flavor=conv_flavor,
        sum_includes_input=sum_includes_input,
    )
    cfg = DrnConfig(
        gdb=GdbSpec(
            shallow=ConvGroupSpec(1, c, kernel=(5, 5), stride=(2, 2),
                                  padding=(2, 2), conv_flavor=conv_flavor),
            rrdb=RrdbSpec(dense=dense),
            num_blocks=num_rrdbs,
        ),
        down=DownsampleSpec(
            layer1=ConvGroupSpec(c, d1, stride=(2, 2), conv_flavor=conv_flavor),
            layer2=ConvGroupSpec(d1, d2, stride=(2, 1), conv_flavor=conv_flavor),
        ),
        head="sequence",
        image_size=tuple(image_size),
        alphabet_size=alphabet_size,
        max_label_len=max_label_len,
        dropout_down=dropout_down,
    )
    cfg.validate()
    return cfg


FEATURE_TAGS = ("shallow", "gdb", "downsample", "penultimate", "logits")


class UnknownFeatureTagError(ValueError):
    pass


class DrnNet(Module):
    """GDB -> down-sampling -> head, with configured dropout sites.

    The classify head flattens the feature map into one fully-connected
    layer; the sequence head maps each feature-map column through a shared
    fully-connected layer, yielding per-frame logits (B, T, V).

    A model instance is single-writer: forward, backward, and optimizer
    updates must not run concurrently on the same parameter set. Kernels
    may parallelize internally (BLAS) with fixed reduction orders, so
    repeated passes stay bitwise identical.
    """

    def __init__(self, config: DrnConfig, seed: int = 0, dtype=np.float32):
        super().__init__()
        config.validate()
        self.config = config
        self.dtype = dtype
        init_rng = Rng(seed).child("init")
        # one live stream drives every dropout site; the trainer swaps in
        # its own stream so checkpoints capture a single rng state
        self.rng = Rng(seed).child("model")

        self.gdb = Gdb(config.gdb, rng=init_rng, dtype=dtype,
                       dropout_shallow=config.dropout_shallow, dropout_rng=self.rng)
        self.down = Downsample(config.down, rng=init_rng, dtype=dtype)
        self.drop_down = Dropout(config.dropout_down, self.rng)
        c, h, w = config.feature_geometry()
        if config.head == "classify":
            self.fc = Linear(c * h * w, config.num_classes, rng=init_rng, dtype=dtype)
            self.drop_fc = Dropout(config.dropout_fc, self.rng)
        else:
            self.fc = Linear(c * h, config.alphabet_size, rng=init_rng, dtype=dtype)
        self.assign_parameter_names()

    def set_rng(self, rng: Rng) -> None:
        self.rng = rng
        self.gdb.drop_shallow.rng = rng
        self.drop_down.rng = rng
        if self.config.head == "classify":
            self.drop_fc.rng = rng

    def _check_input(self, x: Tensor) -> None:
        h, w = self.config.image_size
        expect_c = self.config.gdb.shallow.in_channels
        if x.ndim != 4 or x.shape[1] != expect_c or x.shape[2:] != (h, w):
            raise ShapeMismatchError(
                f"model expects (B, {expect_c}, {h}, {w}) images, got {x.shape}"
            )

    def forward(self, x: Tensor) -> Tensor:
        self._check_input(x)
        f = self.drop_down(self.down(self.gdb(x)))
        b, (c, h, w) = x.shape[0], self.config.feature_geometry()
        if self.config.head == "classify":
            logits = self.fc(ops.reshape(f, (b, c * h * w)))
            return self.drop_fc(logits)
        frames = ops.frames_from_columns(f)          # (B, T, C*H)
        t = frames.shape[1]
        rows = ops.reshape(frames, (b * t, c * h))
        return ops.reshape(self.fc(rows), (b, t, self.config.alphabet_size))

    def forward_features(self, x: Tensor, tag: str) -> np.ndarray:
        """Flat per-sample feature rows for a named stage (inference mode)."""
        if tag not in FEATURE_TAGS:
            raise UnknownFeatureTagError(f"unknown feature tag {tag!r}; choose from {FEATURE_TAGS}")
        self._check_input(x)
        was_training = self.training
        self.eval()
        try:
            b = x.shape[0]
            fs = self.gdb.shallow(x)
            if tag == "shallow":
                return fs.data.reshape(b, -1).copy()
            outs: list[Tensor] = []
            for block in self.gdb._blocks():
                inp = fs if not outs else ops.sum_features([fs] + outs)
                outs.append(block(inp))
            g = ops.sum_features([fs] + outs)
            if tag == "gdb":
                return g.data.reshape(b, -1).copy()
            f = self.down(g)
            if tag in ("downsample", "penultimate"):
                return f.data.reshape(b, -1).copy()
            logits = self.forward(x)
            return logits.data.reshape(b, -1).copy()
        finally:
            self.train(was_training)
