# src/msdpn/nn.py
"""
Multi-stage depth prediction network on the autodiff core.

Each stage is a truncated ResNet-18 encoder (no average pooling, no linear
layer) followed by an UpProj / UpProj_Cat decoder and a depth head. From the
second stage on, the inputs of encoder blocks 2..4 are aggregated with the
previous stage's encoder block input X[k] and decoder block output Y[k]
(cross stage feature aggregation).
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from . import ConfigError, ShapeError
from . import autodiff as ad
from .autodiff import Parameter, RunningStats, Tensor
from .encoding import INPUT_MODES, DepthImage, InputTensor

logger = logging.getLogger(__name__)

CSFA_MODES = ("none", "connect", "full")
BASE_WIDTHS = (64, 128, 256, 512)
CSFA_TAPS = (2, 3, 4)


@dataclass(frozen=True)
class NetworkConfig:
    stages: int = 2
    width_mult: float = 1.0
    csfa_mode: str = "full"
    input_mode: str = "ref-d"
    height: int = 64
    width: int = 64
    input_channels: Optional[int] = None

    def __post_init__(self):
        if self.input_mode not in INPUT_MODES:
            raise ConfigError(f"input_mode must be one of {INPUT_MODES}, got '{self.input_mode}'.")
        if self.csfa_mode not in CSFA_MODES:
            raise ConfigError(f"csfa_mode must be one of {CSFA_MODES}, got '{self.csfa_mode}'.")
        if not isinstance(self.stages, int) or self.stages < 1:
            raise ConfigError(f"stages must be an integer >= 1, got {self.stages}.")
        if self.height <= 0 or self.width <= 0 or self.height % 32 or self.width % 32:
            raise ConfigError(f"Input size {self.height}x{self.width} must be positive multiples of 32.")
        for base in BASE_WIDTHS:
            scaled = self.width_mult * base
            if scaled < 1 or abs(scaled - round(scaled)) > 1e-9:
                raise ConfigError(f"width_mult={self.width_mult} gives non-integral width {scaled} for {base}.")
        expected = 3 if self.input_mode == "rgb-only" else 4
        if self.input_channels is None:
            object.__setattr__(self, "input_channels", expected)
        elif self.input_channels != expected:
            raise ConfigError(f"input_mode '{self.input_mode}' needs {expected} input channels, "
                              f"got {self.input_channels}.")

    @property
    def widths(self) -> Tuple[int, int, int, int]:
        return tuple(int(round(self.width_mult * base)) for base in BASE_WIDTHS)

    def to_dict(self) -> dict:
        return asdict(self)


# --- module plumbing ---

class Module:
    """Owns parameters, running statistics and sub-modules, in definition order."""

    def __init__(self):
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_stats", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._modules[name] = value
        elif isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, RunningStats):
            self._stats[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, param in self._params.items():
            yield prefix + name, param
        for name, module in self._modules.items():
            yield from module.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_running_stats(self, prefix: str = "") -> Iterator[Tuple[str, RunningStats]]:
        for name, stats in self._stats.items():
            yield prefix + name, stats
        for name, module in self._modules.items():
            yield from module.named_running_stats(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for module in self._modules.values():
            yield from module.modules()

    def train(self, mode: bool = True) -> "Module":
        for module in self.modules():
            object.__setattr__(module, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        object.__setattr__(self, "_items", [])
        for module in modules:
            self.append(module)

    def append(self, module: Module) -> None:
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __getitem__(self, index: int):
        return self._items[index]

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)


class Conv2d(Module):
    """k×k convolution, He-normal weights (fan-in, ReLU gain) or zeros."""

    def __init__(self, ch_in: int, ch_out: int, k: int, rng: np.random.Generator, stride: int = 1,
                 pad: int = 0, bias: bool = False, floor_mode: bool = False, zero_init: bool = False):
        super().__init__()
        self.stride, self.pad, self.floor_mode = stride, pad, floor_mode
        shape = (ch_out, ch_in, k, k)
        if zero_init:
            weight = np.zeros(shape)
        else:
            weight = rng.standard_normal(shape) * np.sqrt(2.0 / (ch_in * k * k))
        self.weight = Parameter(weight, name="weight")
        if bias:
            self.bias = Parameter(np.zeros(ch_out), name="bias")
        else:
            object.__setattr__(self, "bias", None)

    def forward(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad, floor_mode=self.floor_mode)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gamma = Parameter(np.ones(channels), name="gamma")
        self.beta = Parameter(np.zeros(channels), name="beta")
        self.running = RunningStats.initial(channels)

    def forward(self, x: Tensor) -> Tensor:
        return ad.batchnorm2d(x, self.gamma, self.beta, self.running, self.training, self.momentum, self.eps)


class BasicBlock(Module):
    """conv3×3-BN-ReLU-conv3×3-BN plus identity (or 1×1 projection), then ReLU."""

    def __init__(self, ch_in: int, ch_out: int, stride: int, rng: np.random.Generator):
        super().__init__()
        if stride not in (1, 2):
            raise ConfigError(f"BasicBlock stride must be 1 or 2, got {stride}.")
        self.conv1 = Conv2d(ch_in, ch_out, 3, rng, stride=stride, pad=1, floor_mode=True)
        self.bn1 = BatchNorm2d(ch_out)
        self.conv2 = Conv2d(ch_out, ch_out, 3, rng, pad=1)
        self.bn2 = BatchNorm2d(ch_out)
        if stride != 1 or ch_in != ch_out:
            self.proj = Conv2d(ch_in, ch_out, 1, rng, stride=stride, floor_mode=True)
            self.proj_bn = BatchNorm2d(ch_out)
        else:
            object.__setattr__(self, "proj", None)

    def forward(self, x: Tensor) -> Tensor:
        out = ad.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x if self.proj is None else self.proj_bn(self.proj(x))
        if skip.shape != out.shape:
            raise ShapeError(f"BasicBlock skip {skip.shape} does not match residual {out.shape}.")
        return ad.relu(ad.add(out, skip))


class UpProj(Module):
    """Zero-unpool ×2, then (5×5-BN-ReLU-3×3-BN) + (5×5-BN), ReLU."""

    def __init__(self, ch_in: int, ch_out: int, rng: np.random.Generator):
        super().__init__()
        self.upper_conv1 = Conv2d(ch_in, ch_out, 5, rng, pad=2)
        self.upper_bn1 = BatchNorm2d(ch_out)
        self.upper_conv2 = Conv2d(ch_out, ch_out, 3, rng, pad=1)
        self.upper_bn2 = BatchNorm2d(ch_out)
        self.lower_conv = Conv2d(ch_in, ch_out, 5, rng, pad=2)
        self.lower_bn = BatchNorm2d(ch_out)

    def forward(self, x: Tensor) -> Tensor:
        x = ad.unpool_zero_x2(x)
        upper = self.upper_bn2(self.upper_conv2(ad.relu(self.upper_bn1(self.upper_conv1(x)))))
        lower = self.lower_bn(self.lower_conv(x))
        return ad.relu(ad.add(upper, lower))


class UpProjCat(UpProj):
    """UpProj over the input concatenated with the same-resolution encoder feature."""

    def __init__(self, ch_in: int, ch_skip: int, ch_out: int, rng: np.random.Generator):
        super().__init__(ch_in + ch_skip, ch_out, rng)

    def forward(self, x: Tensor, skip: Tensor) -> Tensor:
        return super().forward(ad.concat_channels(x, skip))


class CrossStageAggregation(Module):
    """Aggregation at one encoder tap; holds phi/psi only in 'full' mode."""

    def __init__(self, channels: int, mode: str, rng: np.random.Generator):
        super().__init__()
        self.mode = mode
        if mode == "full":
            self.phi = Conv2d(channels, channels, 1, rng, bias=True, zero_init=True)
            self.psi = Conv2d(channels, channels, 1, rng, bias=True, zero_init=True)
        else:
            object.__setattr__(self, "phi", None)
            object.__setattr__(self, "psi", None)

    def forward(self, x_cur: Tensor, x_prev: Tensor, y_prev: Tensor) -> Tensor:
        return csfa_aggregate(x_cur, x_prev, y_prev, self.mode, self.phi, self.psi)


def csfa_aggregate(x_cur: Tensor, x_prev: Tensor, y_prev: Tensor, mode: str,
                   phi: Optional[Conv2d] = None, psi: Optional[Conv2d] = None) -> Tensor:
    """
    none:    X_cur
    connect: X_cur + X_prev + Y_prev
    full:    X_cur + (phi(X_prev) + psi(Y_prev))
    """
    if not (x_cur.shape == x_prev.shape == y_prev.shape):
        raise ShapeError(f"CSFA inputs differ in shape: {x_cur.shape}, {x_prev.shape}, {y_prev.shape}.")
    if mode == "none":
        return x_cur
    if mode == "connect":
        return ad.add(ad.add(x_cur, x_prev), y_prev)
    if mode == "full":
        if phi is None or psi is None:
            raise ConfigError("CSFA 'full' mode needs both phi and psi.")
        return ad.add(x_cur, ad.add(phi(x_prev), psi(y_prev)))
    raise ConfigError(f"Unknown CSFA mode '{mode}'.")


@dataclass
class StageFeatures:
    """X[k]: encoder block-k input (after aggregation); Y[k]: decoder block-k output."""
    x: Dict[int, Tensor] = field(default_factory=dict)
    y: Dict[int, Tensor] = field(default_factory=dict)
    bottleneck: Optional[Tensor] = None
    depth: Optional[Tensor] = None


class Encoder(Module):
    def __init__(self, ch_in: int, widths: Tuple[int, int, int, int], rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv2d(ch_in, widths[0], 7, rng, stride=2, pad=3, floor_mode=True)
        self.bn1 = BatchNorm2d(widths[0])
        previous = widths[0]
        for k, width in enumerate(widths, start=1):
            stride = 1 if k == 1 else 2
            setattr(self, f"layer{k}", ModuleList([BasicBlock(previous, width, stride, rng),
                                                  BasicBlock(width, width, 1, rng)]))
            previous = width

    def forward(self, x: Tensor, features: StageFeatures, aggregate=None) -> Tensor:
        out = ad.maxpool2d(ad.relu(self.bn1(self.conv1(x))), k=3, stride=2, pad=1, floor_mode=True)
        for k in range(1, 5):
            if k in CSFA_TAPS:
                if aggregate is not None:
                    out = aggregate(k, out)
                features.x[k] = out
            for block in getattr(self, f"layer{k}"):
                out = block(out)
        features.bottleneck = out
        return out


class Decoder(Module):
    """Block 4 (on the bottleneck) is UpProj; blocks 3..1 are UpProj_Cat with X[4..2]."""

    def __init__(self, widths: Tuple[int, int, int, int], rng: np.random.Generator):
        super().__init__()
        w64, w128, w256, w512 = widths
        self.block4 = UpProj(w512, w256, rng)
        self.block3 = UpProjCat(w256, w256, w128, rng)
        self.block2 = UpProjCat(w128, w128, w64, rng)
        self.block1 = UpProjCat(w64, w64, w64, rng)
        self.head = Conv2d(w64, 1, 3, rng, pad=1, bias=True)

    def forward(self, bottleneck: Tensor, features: StageFeatures) -> Tensor:
        features.y[4] = self.block4(bottleneck)
        features.y[3] = self.block3(features.y[4], features.x[4])
        features.y[2] = self.block2(features.y[3], features.x[3])
        out = self.block1(features.y[2], features.x[2])
        features.depth = ad.upsample_bilinear_x2(self.head(out))
        return features.depth


class Stage(Module):
    def __init__(self, config: NetworkConfig, rng: np.random.Generator):
        super().__init__()
        self.encoder = Encoder(config.input_channels, config.widths, rng)
        self.decoder = Decoder(config.widths, rng)

    def forward(self, x: Tensor, aggregate=None) -> StageFeatures:
        features = StageFeatures()
        bottleneck = self.encoder(x, features, aggregate)
        self.decoder(bottleneck, features)
        return features


class StageAggregation(Module):
    """The three taps (k = 2, 3, 4) feeding one stage from its predecessor."""

    def __init__(self, widths: Tuple[int, int, int, int], mode: str, rng: np.random.Generator):
        super().__init__()
        for k in CSFA_TAPS:
            setattr(self, f"k{k}", CrossStageAggregation(widths[k - 2], mode, rng))

    def bind(self, previous: StageFeatures):
        def aggregate(k: int, x_cur: Tensor) -> Tensor:
            return getattr(self, f"k{k}")(x_cur, previous.x[k], previous.y[k])
        return aggregate


class MSDPN(Module):
    def __init__(self, config: NetworkConfig, seed: int = 0):
        super().__init__()
        object.__setattr__(self, "config", config)
        rng = np.random.default_rng(seed)
        self.stages = ModuleList([Stage(config, rng) for _ in range(config.stages)])
        self.csfa = ModuleList([StageAggregation(config.widths, config.csfa_mode, rng)
                                for _ in range(config.stages - 1)])
        for name, param in self.named_parameters():
            param.name = name


def build_msdpn(config: NetworkConfig, seed: int = 0, logger_instance: Optional[logging.Logger] = None) -> MSDPN:
    """
    Builds an MSDPN with independent weights per stage.

    Conv weights are He-normal from `seed`, BN gamma = 1 / beta = 0, CSFA 1×1
    convolutions start at zero.
    """
    log = logger_instance if logger_instance is not None else logger
    model = MSDPN(config, seed)
    log.info(f"Built MSDPN: {config.stages} stage(s), width x{config.width_mult}, "
             f"csfa={config.csfa_mode}, input={config.input_mode}, {param_count(model)} parameters, "
             f"{mac_count(model) / 1e6:.1f}M MACs per image")
    return model


def param_count(model: Module) -> int:
    """
    Number of trainable scalars.

    Args:
        model (Module): Any module; sub-modules are included.

    Returns:
        int: Sum of the element counts of all parameters (running statistics excluded).
    """
    return sum(p.size for p in model.parameters())



def _conv_macs(conv: Conv2d, h: int, w: int) -> Tuple[int, int, int]:
    ch_out, ch_in, k, _ = conv.weight.shape
    ho = (h + 2 * conv.pad - k) // conv.stride + 1
    wo = (w + 2 * conv.pad - k) // conv.stride + 1
    return ch_out * ch_in * k * k * ho * wo, ho, wo


def mac_count(model: MSDPN) -> int:
    """
    Multiply-accumulates of every convolution in one forward pass of a single image.

    Batch norm, pooling, unpooling, additions and the final bilinear upsampling
    are not counted.

    Args:
        model (MSDPN): The network; sizes come from its config.

    Returns:
        int: Total MACs across all stages and CSFA taps.
    """
    config = model.config
    total = 0
    tap_sizes: Dict[int, Tuple[int, int]] = {}
    for stage in model.stages:
        encoder, decoder = stage.encoder, stage.decoder
        macs, h, w = _conv_macs(encoder.conv1, config.height, config.width)
        total += macs
        h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1  # max-pool 3/2, pad 1
        for k in range(1, 5):
            tap_sizes[k] = (h, w)
            for block in getattr(encoder, f"layer{k}"):
                macs, ho, wo = _conv_macs(block.conv1, h, w)
                total += macs + _conv_macs(block.conv2, ho, wo)[0]
                if block.proj is not None:
                    total += _conv_macs(block.proj, h, w)[0]
                h, w = ho, wo
        for block in (decoder.block4, decoder.block3, decoder.block2, decoder.block1):
            h, w = 2 * h, 2 * w
            for conv in (block.upper_conv1, block.upper_conv2, block.lower_conv):
                total += _conv_macs(conv, h, w)[0]
        total += _conv_macs(decoder.head, h, w)[0]
    for aggregation in model.csfa:
        for k in CSFA_TAPS:
            tap = getattr(aggregation, f"k{k}")
            if tap.phi is not None:
                total += _conv_macs(tap.phi, *tap_sizes[k])[0] + _conv_macs(tap.psi, *tap_sizes[k])[0]
    return total


def flop_count(model: MSDPN) -> int:
    """Two floating-point operations per multiply-accumulate."""
    return 2 * mac_count(model)


@dataclass
class ForwardResult:
    depth: Tensor                         # final prediction, N×1×H×W, clamped at 0 in ref-d mode
    residual: Tensor                      # last head output (the residual in ref-d mode)
    stages: List[StageFeatures]
    pre_clamp: Optional[np.ndarray] = None  # float64 head + ref-d, before the clamp


def _batch_input(inputs: Union[InputTensor, np.ndarray, Tensor]) -> Tensor:
    if isinstance(inputs, InputTensor):
        inputs = inputs.tensor
    if isinstance(inputs, Tensor):
        return inputs if inputs.data.ndim == 4 else Tensor(inputs.data[None])
    array = np.asarray(inputs)
    return ad.constant(array[None] if array.ndim == 3 else array)


def _batch_ref(ref_d, batch: int, height: int, width: int) -> np.ndarray:
    if isinstance(ref_d, DepthImage):
        ref_d = ref_d.data
    ref = np.asarray(ref_d, dtype=np.float32)
    if ref.ndim == 2:
        ref = ref[None, None]
    elif ref.ndim == 3:
        ref = ref[:, None]
    if ref.shape != (batch, 1, height, width):
        raise ShapeError(f"ref-d of shape {ref.shape} does not match batch ({batch}, 1, {height}, {width}).")
    return ref


def msdpn_forward(model: MSDPN, inputs: Union[InputTensor, np.ndarray, Tensor], ref_d=None) -> ForwardResult:
    """
    Runs every stage on the same input; stage n >= 2 aggregates stage n-1's
    features at encoder taps k = 2..4.

    In ref-d mode the final depth is head + ref-d, clamped below at 0.

    Raises:
        ShapeError: If the input does not match the configuration.
        ValueError: If ref-d is missing in ref-d mode.
    """
    config = model.config
    x = _batch_input(inputs)
    n, c, h, w = x.shape
    if (c, h, w) != (config.input_channels, config.height, config.width):
        raise ShapeError(f"Input {x.shape} does not match the network "
                         f"({config.input_channels}x{config.height}x{config.width}).")
    if isinstance(inputs, InputTensor) and inputs.mode != config.input_mode:
        raise ValueError(f"Input encoded as '{inputs.mode}' but the network expects '{config.input_mode}'.")

    features: List[StageFeatures] = []
    for index, stage in enumerate(model.stages):
        aggregate = None if index == 0 else model.csfa[index - 1].bind(features[-1])
        features.append(stage(x, aggregate))
    head = features[-1].depth

    if config.input_mode != "ref-d":
        return ForwardResult(depth=head, residual=head, stages=features)
    if ref_d is None:
        raise ValueError("ref-d mode needs the ref-d image for the residual head.")
    ref = _batch_ref(ref_d, n, h, w)
    pre_clamp = head.data.astype(np.float64) + ref.astype(np.float64)
    depth = ad.relu(ad.add(head, ad.constant(ref)))
    return ForwardResult(depth=depth, residual=head, stages=features, pre_clamp=pre_clamp)
