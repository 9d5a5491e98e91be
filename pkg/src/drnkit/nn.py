"""Stateful layers over the primitives, with hierarchically named parameters."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import ops
from .rng import Rng
from .tensor import Parameter, Tensor


class Module:
    """Minimal layer container: child modules, parameters, buffers, mode."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, Parameter):
            self._params[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, array: np.ndarray) -> np.ndarray:
        self._buffers[name] = array
        object.__setattr__(self, name, array)
        return array

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield (f"{prefix}{name}", p)
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}/")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield (f"{prefix}{name}", b)
        for name, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{name}/")

    def assign_parameter_names(self, prefix: str = "") -> None:
        """Stamp full slash-separated paths onto parameters; paths are unique."""
        seen = set()
        for path, p in self.named_parameters(prefix):
            if path in seen:
                raise ValueError(f"duplicate parameter path {path!r}")
            seen.add(path)
            p.name = path

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()

    def parameter_count(self) -> int:
        return sum(p.value.size for _, p in self.named_parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def _uniform_init(rng: Rng, shape, fan_in: int, dtype) -> Tensor:
    bound = float(np.sqrt(6.0 / fan_in))
    return Tensor(rng.uniform(-bound, bound, shape).astype(dtype))


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel=(3, 3), stride=(1, 1),
                 padding=(0, 0), bias=True, rng: Optional[Rng] = None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else Rng(0)
        kh, kw = ops._pair(kernel)
        self.stride = ops._pair(stride)
        self.padding = ops._pair(padding)
        fan_in = in_channels * kh * kw
        self.weight = Parameter(
            "weight", _uniform_init(rng, (out_channels, in_channels, kh, kw), fan_in, dtype)
        )
        self.bias = Parameter("bias", Tensor(np.zeros(out_channels, dtype=dtype))) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        b = self.bias.value if self.bias is not None else None
        return ops.conv2d(x, self.weight.value, b, self.stride, self.padding)

    def kernel_param_count(self) -> int:
        return self.weight.value.size


class DepthwiseSeparableConv2d(Module):
    def __init__(self, in_channels, out_channels, kernel=(3, 3), stride=(1, 1),
                 padding=(0, 0), bias=True, rng: Optional[Rng] = None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else Rng(0)
        kh, kw = ops._pair(kernel)
        self.stride = ops._pair(stride)
        self.padding = ops._pair(padding)
        self.dw_weight = Parameter(
            "dw_weight", _uniform_init(rng, (in_channels, 1, kh, kw), kh * kw, dtype)
        )
        self.pw_weight = Parameter(
            "pw_weight", _uniform_init(rng, (out_channels, in_channels, 1, 1), in_channels, dtype)
        )
        self.bias = Parameter("bias", Tensor(np.zeros(out_channels, dtype=dtype))) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        b = self.bias.value if self.bias is not None else None
        return ops.depthwise_separable_conv(
            x, self.dw_weight.value, self.pw_weight.value, b, self.stride, self.padding
        )

    def kernel_param_count(self) -> int:
        return self.dw_weight.value.size + self.pw_weight.value.size


class BatchNorm2d(Module):
    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=np.float32):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter("gamma", Tensor(np.ones(channels, dtype=dtype)))
        self.beta = Parameter("beta", Tensor(np.zeros(channels, dtype=dtype)))
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm(
            x, self.gamma.value, self.beta.value,
            self.running_mean, self.running_var,
            self.training, self.eps, self.momentum,
        )


class Dropout(Module):
    def __init__(self, rate: float, rng: Optional[Rng] = None):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng if rng is not None else Rng(0)

    def forward(self, x: Tensor) -> Tensor:
        return ops.dropout(x, self.rate, self.training, self.rng)


class Linear(Module):
    def __init__(self, in_features, out_features, rng: Optional[Rng] = None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else Rng(0)
        self.weight = Parameter(
            "weight", _uniform_init(rng, (in_features, out_features), in_features, dtype)
        )
        self.bias = Parameter("bias", Tensor(np.zeros(out_features, dtype=dtype)))

    def forward(self, x: Tensor) -> Tensor:
        return ops.fully_connected(x, self.weight.value, self.bias.value)


class ConvGroup(Module):
    """The composite conv unit: BN -> ReLU -> convolution.

    ``conv_flavor`` selects a standard or depthwise-separable convolution;
    the pre-activation order is the same for every group in the network.
    """

    def __init__(self, in_channels, out_channels, kernel=(3, 3), stride=(1, 1),
                 padding=(1, 1), conv_flavor="depthwise_separable",
                 rng: Optional[Rng] = None, dtype=np.float32,
                 eps=1e-5, momentum=0.1):
        super().__init__()
        self.bn = BatchNorm2d(in_channels, eps=eps, momentum=momentum, dtype=dtype)
        if conv_flavor == "standard":
            self.conv = Conv2d(in_channels, out_channels, kernel, stride, padding,
                               bias=True, rng=rng, dtype=dtype)
        elif conv_flavor == "depthwise_separable":
            self.conv = DepthwiseSeparableConv2d(in_channels, out_channels, kernel,
                                                 stride, padding, bias=True, rng=rng, dtype=dtype)
        else:
            raise ValueError(f"unknown conv_flavor {conv_flavor!r}")

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(ops.relu(self.bn(x)))

    def kernel_param_count(self) -> int:
        return self.conv.kernel_param_count()
