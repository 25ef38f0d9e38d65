"""ResNet generator and PatchGAN discriminator built on :mod:`sgan.tensor`."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import BatchNormStats, Tensor


@dataclass(frozen=True)
class GeneratorConfig:
    in_channels: int = 2
    out_channels: int = 1
    base_width: int = 64
    n_downsample: int = 3
    n_residual_blocks: int = 9
    n_upsample: int = 3
    final_activation: str = "tanh"
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.n_downsample != self.n_upsample:
            raise ValueError("n_downsample must equal n_upsample so output size matches input size")
        if min(self.in_channels, self.out_channels, self.base_width) < 1:
            raise ValueError("channel counts must be positive")

    @property
    def bottleneck_width(self) -> int:
        return self.base_width * 2**self.n_downsample

    @property
    def size_multiple(self) -> int:
        return 2**self.n_downsample


@dataclass(frozen=True)
class DiscriminatorConfig:
    in_channels: int = 3
    base_width: int = 64
    n_strided: int = 3
    n_plain: int = 2
    leaky_slope: float = 0.2
    kernel_size: int = 4
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.n_plain < 1:
            raise ValueError("at least one stride-1 layer is needed to produce the logit grid")


# -- layers -----------------------------------------------------------------


class Module:
    """Minimal parameter container with train/eval switching."""

    def __init__(self):
        self.training = True

    def children(self) -> Iterator[tuple[str, Module]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, list):
                for i, v in enumerate(value):
                    if isinstance(v, Module):
                        yield f"{name}.{i}", v

    def own_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(())

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self.own_parameters():
            yield prefix + name, p
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, BatchNormStats]]:
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def train(self, mode: bool = True) -> Module:
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> Module:
        return self.train(False)

    def __call__(self, *args):
        return self.forward(*args)


class Conv2d(Module):
    def __init__(self, cin, cout, k, stride=1, padding=0, bias=True, *, rng: np.random.Generator):
        super().__init__()
        self.stride, self.padding = stride, padding
        self.weight = Tensor(rng.normal(0.0, 0.02, (cout, cin, k, k)), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True) if bias else None

    def own_parameters(self):
        yield "weight", self.weight
        if self.bias is not None:
            yield "bias", self.bias

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Conv2d):
    def __init__(self, cin, cout, k, stride=1, padding=0, bias=True, *, rng: np.random.Generator):
        Module.__init__(self)
        self.stride, self.padding = stride, padding
        self.weight = Tensor(rng.normal(0.0, 0.02, (cin, cout, k, k)), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True) if bias else None

    def forward(self, x):
        return T.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5, *, rng: np.random.Generator):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gamma = Tensor(rng.normal(1.0, 0.02, channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.stats = BatchNormStats(channels)

    def own_parameters(self):
        yield "gamma", self.gamma
        yield "beta", self.beta

    def named_buffers(self, prefix=""):
        yield prefix + "stats", self.stats

    def forward(self, x):
        return T.batch_norm(x, self.gamma, self.beta, self.stats, self.training, self.momentum, self.eps)


class ConvBlock(Module):
    """conv -> batch norm -> activation."""

    def __init__(self, conv: Conv2d, norm: BatchNorm2d | None, act: str | None, slope: float = 0.2):
        super().__init__()
        self.conv, self.norm = conv, norm
        self.act, self.slope = act, slope

    def forward(self, x):
        x = self.conv(x)
        if self.norm is not None:
            x = self.norm(x)
        if self.act is not None:
            x = T.activation(x, self.act, self.slope)
        return x


class ResidualBlock(Module):
    def __init__(self, channels: int, cfg: GeneratorConfig, rng: np.random.Generator):
        super().__init__()
        self.channels = channels
        bn = dict(momentum=cfg.bn_momentum, eps=cfg.bn_eps, rng=rng)
        self.body = [
            ConvBlock(Conv2d(channels, channels, 3, 1, 1, bias=False, rng=rng), BatchNorm2d(channels, **bn), "relu"),
            ConvBlock(Conv2d(channels, channels, 3, 1, 1, bias=False, rng=rng), BatchNorm2d(channels, **bn), None),
        ]

    def forward(self, x):
        h = x
        for layer in self.body:
            h = layer(h)
        return T.add(x, h)


# -- networks ---------------------------------------------------------------


class GeneratorNet(Module):
    """Encoder / residual bottleneck / decoder.

    7x7 stem, ``n_downsample`` stride-2 3x3 convolutions, residual blocks,
    ``n_upsample`` stride-2 4x4 transposed convolutions, and a 7x7 output
    convolution with tanh. Every layer but the output one is followed by
    batch normalization and ReLU.
    """

    def __init__(self, cfg: GeneratorConfig = GeneratorConfig(), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        bn = dict(momentum=cfg.bn_momentum, eps=cfg.bn_eps, rng=rng)
        w = cfg.base_width
        layers = [ConvBlock(Conv2d(cfg.in_channels, w, 7, 1, 3, bias=False, rng=rng), BatchNorm2d(w, **bn), "relu")]
        for i in range(cfg.n_downsample):
            cin, cout = w * 2**i, w * 2 ** (i + 1)
            layers.append(ConvBlock(Conv2d(cin, cout, 3, 2, 1, bias=False, rng=rng), BatchNorm2d(cout, **bn), "relu"))
        layers += [ResidualBlock(cfg.bottleneck_width, cfg, rng) for _ in range(cfg.n_residual_blocks)]
        for i in reversed(range(cfg.n_upsample)):
            cin, cout = w * 2 ** (i + 1), w * 2**i
            layers.append(
                ConvBlock(ConvTranspose2d(cin, cout, 4, 2, 1, bias=False, rng=rng), BatchNorm2d(cout, **bn), "relu")
            )
        layers.append(ConvBlock(Conv2d(w, cfg.out_channels, 7, 1, 3, bias=True, rng=rng), None, cfg.final_activation))
        self.layers = layers

    def forward(self, x: Tensor) -> Tensor:
        return generator_forward(self, x)


class DiscriminatorNet(Module):
    """PatchGAN: stride-2 layers, then stride-1 layers ending in a logit grid."""

    def __init__(self, cfg: DiscriminatorConfig = DiscriminatorConfig(), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        bn = dict(momentum=cfg.bn_momentum, eps=cfg.bn_eps, rng=rng)
        k, w, slope = cfg.kernel_size, cfg.base_width, cfg.leaky_slope
        layers = []
        cin = cfg.in_channels
        for i in range(cfg.n_strided):
            cout = w * 2**i
            layers.append(ConvBlock(Conv2d(cin, cout, k, 2, 1, bias=False, rng=rng), BatchNorm2d(cout, **bn), "leaky_relu", slope))
            cin = cout
        for _ in range(cfg.n_plain - 1):
            cout = cin * 2
            layers.append(ConvBlock(Conv2d(cin, cout, k, 1, 1, bias=False, rng=rng), BatchNorm2d(cout, **bn), "leaky_relu", slope))
            cin = cout
        layers.append(ConvBlock(Conv2d(cin, 1, k, 1, 1, bias=True, rng=rng), None, None))
        self.layers = layers

    def forward(self, x: Tensor, y: Tensor) -> Tensor:
        return discriminator_forward(self, x, y)


def generator_forward(net: GeneratorNet, x: Tensor) -> Tensor:
    cfg = net.cfg
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ValueError(f"generator expects (N,{cfg.in_channels},H,W) input, got {x.shape}")
    m = cfg.size_multiple
    if x.shape[2] % m or x.shape[3] % m:
        raise ValueError(f"generator input size {x.shape[2]}x{x.shape[3]} must be a multiple of {m}")
    for layer in net.layers:
        x = layer(x)
    return x


def discriminator_forward(net: DiscriminatorNet, x: Tensor, y: Tensor) -> Tensor:
    if x.ndim != 4 or y.ndim != 4 or x.shape[0] != y.shape[0] or x.shape[2:] != y.shape[2:]:
        raise ValueError(f"discriminator inputs are not aligned: {x.shape} vs {y.shape}")
    h = T.concat_channels(x, y)
    if h.shape[1] != net.cfg.in_channels:
        raise ValueError(f"discriminator expects {net.cfg.in_channels} channels in total, got {h.shape[1]}")
    for layer in net.layers:
        h = layer(h)
    return h


def patch_grid_size(size: int, cfg: DiscriminatorConfig = DiscriminatorConfig()) -> int:
    for _ in range(cfg.n_strided):
        size = (size + 2 - cfg.kernel_size) // 2 + 1
    for _ in range(cfg.n_plain):
        size = size + 2 - cfg.kernel_size + 1
    return size


def state_arrays(net: Module) -> "OrderedDict[str, np.ndarray]":
    """Parameters and batch-norm running statistics, by name."""
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for name, p in net.named_parameters():
        out[name] = p.data
    for name, st in net.named_buffers():
        if st.initialized:
            out[name + ".mean"] = st.mean
            out[name + ".var"] = st.var
    return out


def config_dict(cfg) -> dict:
    return asdict(cfg)
