"""Fuzzy sigmoid convolution layers and the binary classification network.

The core operator runs a dilated convolution and batch norm, derives
complementary high/low fuzzy memberships from the normalized map via
sigmoids, and recombines:

    high = sigmoid(x)          low = sigmoid(-x)
    out  = relu(high * x + low * (1 - x))

Two block types stack the operator: a top-of-funnel block (three layers
with channel concatenation and a 1x1 compression) and a middle-of-funnel
block (three sequential layers plus batch norm). ``FscNet`` assembles the
full classifier and emits raw logits; the loss applies the sigmoid.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


class Module:
    """Minimal layer container: tracked parameters, buffers, train/eval mode.

    Parameters and submodules are discovered from instance attributes in
    definition order, which fixes the iteration order of
    ``named_parameters`` / ``state_dict`` and keeps checkpoints stable.
    """

    def __init__(self):
        self.training = True
        self._buffers: dict[str, np.ndarray] = {}

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value

    def _children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in self.__dict__.items():
            if isinstance(value, Module):
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self.__dict__.items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self._buffers.items():
            yield prefix + name, value
        for name, child in self._children():
            yield from child.named_buffers(prefix + name + ".")

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, buf in self.named_buffers():
            state[name] = buf.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        expected = set(own) | set(bufs)
        missing = expected - set(state)
        extra = set(state) - expected
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in own.items():
            if p.data.shape != state[name].shape:
                raise ShapeError(f"{name}: checkpoint shape {state[name].shape} vs model {p.data.shape}")
            p.data[...] = state[name]
        for name, buf in bufs.items():
            buf[...] = state[name]

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class Conv2d(Module):
    """Dilated square-kernel convolution with bias and zero padding."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, *,
                 stride: int = 1, dilation: int = 1, padding: int = 0,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.dilation = dilation
        self.padding = padding
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = _uniform_init(rng, (out_channels, in_channels, kernel_size, kernel_size),
                                    fan_in, dtype)
        self.bias = _uniform_init(rng, (out_channels,), fan_in, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride,
                        dilation=self.dilation, padding=self.padding)


class BatchNorm2d(Module):
    """Per-channel batch norm with biased-variance running statistics."""

    def __init__(self, num_features: int, *, eps: float = 1e-5, momentum: float = 0.1,
                 dtype=np.float32):
        super().__init__()
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(num_features, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features, dtype=dtype), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(num_features, dtype=dtype))
        self.register_buffer("running_var", np.ones(num_features, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return T.batchnorm2d(x, self.gamma, self.beta,
                             self._buffers["running_mean"], self._buffers["running_var"],
                             eps=self.eps, momentum=self.momentum, training=self.training)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, *,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = _uniform_init(rng, (out_features, in_features), in_features, dtype)
        self.bias = _uniform_init(rng, (out_features,), in_features, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


def fuzzy_membership(x: Tensor) -> tuple[Tensor, Tensor]:
    """Complementary fuzzy weights (sigmoid(x), sigmoid(-x)); they sum to 1."""
    return T.sigmoid(x), T.sigmoid(T.neg(x))


def fsc_modulate(x: Tensor) -> Tensor:
    """Membership-weighted recombination high*x + low*(1-x).

    Forward arithmetic is the exact numpy sequence the composed primitives
    perform, so a hand-built sigmoid/mul/add pipeline reproduces it bit for
    bit; only the backward pass is fused into one closed-form step.
    """
    d = x.data
    high = T._sigmoid_stable(d)
    low = T._sigmoid_stable(np.negative(d))
    out = np.multiply(high, d) + np.multiply(low, np.subtract(1.0, d))

    def vjp(g):
        s = T._sigmoid_stable(d)
        ds = s * (1.0 - s)
        return (g * (ds * (2.0 * d - 1.0) + 2.0 * s - 1.0),)

    return T.apply_op(out, (x,), vjp)


class FuzzySigConv(Module):
    """Convolution + batch norm + fuzzy membership modulation + ReLU.

    With the block defaults (kernel 3, dilation 2, padding 2) spatial size
    is preserved. The constructor default padding stays at 1; the funnel
    blocks pass padding=2 explicitly.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, *,
                 dilation: int = 2, padding: int = 1, rng: np.random.Generator,
                 dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, kernel_size,
                           dilation=dilation, padding=padding, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(out_channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        x = self.conv(x)
        x = self.bn(x)
        return T.relu(fsc_modulate(x))


class Tofu(Module):
    """Top-of-funnel block: three stacked fuzzy conv layers with concatenation.

    Channel plan: in -> 16, 16 -> 32, (16+32) -> 48; all three maps are then
    concatenated (96 channels) and compressed by a 1x1 convolution.
    """

    def __init__(self, in_channels: int, out_channels: int, *,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.conv1 = FuzzySigConv(in_channels, 16, 3, dilation=2, padding=2, rng=rng, dtype=dtype)
        self.conv2 = FuzzySigConv(16, 32, 3, dilation=2, padding=2, rng=rng, dtype=dtype)
        self.conv3 = FuzzySigConv(32 + 16, 48, 3, dilation=2, padding=2, rng=rng, dtype=dtype)
        self.compress = Conv2d(96, out_channels, 1, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(out_channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        x1 = self.conv1(x)
        x2 = self.conv2(x1)
        x3 = self.conv3(T.concat_channels([x1, x2]))
        x4 = T.relu(self.compress(T.concat_channels([x1, x2, x3])))
        return self.bn(x4)


class Mofu(Module):
    """Middle-of-funnel block: sequential fuzzy conv chain in -> 16 -> 32 -> out."""

    def __init__(self, in_channels: int, out_channels: int, *,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.conv1 = FuzzySigConv(in_channels, 16, 3, dilation=2, padding=2, rng=rng, dtype=dtype)
        self.conv2 = FuzzySigConv(16, 32, 3, dilation=2, padding=2, rng=rng, dtype=dtype)
        self.conv3 = FuzzySigConv(32, out_channels, 3, dilation=2, padding=2, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(out_channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        x = self.conv1(x)
        x = self.conv2(x)
        x = self.conv3(x)
        return self.bn(x)


class FscNet(Module):
    """Binary classifier over 3-channel images; emits raw logits.

    Stem conv (3->32) -> two top-of-funnel blocks (32->dim->128) -> one
    middle-of-funnel block (128->256) -> global average pool -> two hidden
    linear layers with dropout 0.2 -> ``num_classes`` logits. ``dim`` is the
    width of the first funnel block's output and is a required architecture
    knob, default 64.
    """

    def __init__(self, dim: int = 64, num_classes: int = 1, *,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        if dim < 1 or num_classes < 1:
            raise ValueError(f"dim and num_classes must be positive, got {dim}, {num_classes}")
        self.dim = dim
        self.num_classes = num_classes
        self.initial_conv = Conv2d(3, 32, 3, stride=1, padding=1, rng=rng, dtype=dtype)
        self.initial_bn = BatchNorm2d(32, dtype=dtype)
        self.tofu1 = Tofu(32, dim, rng=rng, dtype=dtype)
        self.tofu2 = Tofu(dim, 128, rng=rng, dtype=dtype)
        self.mofu = Mofu(128, 256, rng=rng, dtype=dtype)
        self.fc1 = Linear(256, 256, rng=rng, dtype=dtype)
        self.fc2 = Linear(256, 128, rng=rng, dtype=dtype)
        self.classifier = Linear(128, num_classes, rng=rng, dtype=dtype)
        self.dropout_p = 0.2

    def _stage(self, name: str, fn, x: Tensor) -> Tensor:
        try:
            return fn(x)
        except ShapeError as e:
            raise ShapeError(f"{name}: {e}") from None

    def forward(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected an N,3,H,W input, got {x.shape}")
        if self.training and rng is None:
            raise ValueError("training-mode forward needs an rng for dropout")
        h = self._stage("initial_conv", self.initial_conv, x)
        h = self._stage("initial_bn", self.initial_bn, h)
        h = T.relu(h)
        h = self._stage("tofu1", self.tofu1, h)
        h = self._stage("tofu2", self.tofu2, h)
        h = self._stage("mofu", self.mofu, h)
        h = T.adaptive_avg_pool_1x1(h)
        h = T.relu(self.fc1(h))
        h = T.dropout(h, self.dropout_p, self.training, rng)
        h = T.relu(self.fc2(h))
        h = T.dropout(h, self.dropout_p, self.training, rng)
        return self.classifier(h)


def count_parameters(module: Module) -> tuple[list[tuple[str, tuple[int, ...], int]], int]:
    """Trainable-scalar count per named tensor plus the grand total.

    Batch-norm scale/shift count; running statistics are buffers and do not.
    """
    rows = [(name, p.shape, p.size) for name, p in module.named_parameters()]
    return rows, sum(r[2] for r in rows)


def format_parameter_table(rows: list[tuple[str, tuple[int, ...], int]], total: int) -> str:
    name_w = max(len(r[0]) for r in rows) if rows else 4
    lines = [f"{'tensor':<{name_w}}  {'shape':<18}  {'count':>9}"]
    for name, shape, count in rows:
        lines.append(f"{name:<{name_w}}  {str(tuple(shape)):<18}  {count:>9,}")
    lines.append(f"{'total':<{name_w}}  {'':<18}  {total:>9,}")
    return "\n".join(lines)
