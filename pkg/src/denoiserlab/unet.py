"""Fully convolutional UNet blind denoiser with named, probe-able blocks.

Blocks are named ``E1..Ek`` (encoder), ``M`` (middle) and ``Dk..D1`` (decoder).
Each hidden layer is conv3x3 (no bias) -> layer norm -> ReLU. Encoder blocks
after the first start with a 2x2 average pool; decoder blocks start by
upsampling the path from below and concatenating the skip from the matching
encoder block. A final plain 3x3 conv produces the residual
``f(x_sigma) ~ x - x_sigma``, so ``denoise(x) = x + f(x)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from . import ndnet
from .ndnet import Tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 1
    base_channels: int = 16
    encoder_blocks: int = 2
    layers_per_encoder: int = 2
    layers_middle: int = 3
    layers_per_decoder: int = 3
    kernel_size: int = 3
    image_size: int = 16

    def validate(self) -> None:
        for name in ("in_channels", "base_channels", "encoder_blocks", "layers_per_encoder",
                     "layers_middle", "layers_per_decoder", "image_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be odd")
        if self.image_size % (2 ** self.encoder_blocks):
            raise ConfigError(
                f"image_size {self.image_size} not divisible by 2^{self.encoder_blocks}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return cls(**d)

    @classmethod
    def full_scale(cls, image_size: int = 64) -> "UNetConfig":
        """RGB, 64-512 channels, 3 encoder blocks: about 13M parameters."""
        return cls(in_channels=3, base_channels=64, encoder_blocks=3, layers_per_encoder=2,
                   layers_middle=3, layers_per_decoder=6, image_size=image_size)


@dataclass(frozen=True)
class Probe:
    block: str
    position: str = "output"   # "input" | "output"

    @property
    def name(self) -> str:
        return f"{self.block}.{self.position}"

    @classmethod
    def parse(cls, text: str) -> "Probe":
        block, _, pos = text.partition(".")
        return cls(block, pos or "output")


MIDDLE_OUT = Probe("M", "output")


@dataclass(frozen=True)
class BlockSpec:
    name: str
    in_channels: int
    out_channels: int
    n_layers: int
    scale: int           # spatial downsampling factor relative to the input image


def block_specs(config: UNetConfig) -> list[BlockSpec]:
    """Block layout in execution order: E1..Ek, M, Dk..D1."""
    c = config.base_channels
    k = config.encoder_blocks
    specs = [BlockSpec("E1", config.in_channels, c, config.layers_per_encoder, 1)]
    for j in range(2, k + 1):
        specs.append(BlockSpec(f"E{j}", c * 2 ** (j - 2), c * 2 ** (j - 1),
                               config.layers_per_encoder, 2 ** (j - 1)))
    specs.append(BlockSpec("M", c * 2 ** (k - 1), c * 2 ** k, config.layers_middle, 2 ** k))
    for j in range(k, 0, -1):
        below = c * 2 ** j
        skip = c * 2 ** (j - 1)
        specs.append(BlockSpec(f"D{j}", below + skip, skip, config.layers_per_decoder,
                               2 ** (j - 1)))
    return specs


def _layer_shapes(config: UNetConfig) -> Iterator[tuple[str, tuple[int, ...]]]:
    K = config.kernel_size
    for spec in block_specs(config):
        cin = spec.in_channels
        for i in range(spec.n_layers):
            yield f"{spec.name}.{i}.weight", (spec.out_channels, cin, K, K)
            yield f"{spec.name}.{i}.gain", (spec.out_channels,)
            yield f"{spec.name}.{i}.bias", (spec.out_channels,)
            cin = spec.out_channels
    yield "out.weight", (config.in_channels, config.base_channels, K, K)
    yield "out.bias", (config.in_channels,)


def parameter_count(config: UNetConfig) -> int:
    """Closed-form parameter count: sum over layers of K^2*Cin*Cout + 2*Cout, plus the output conv."""
    config.validate()
    K2 = config.kernel_size ** 2
    total = 0
    for spec in block_specs(config):
        cin = spec.in_channels
        for _ in range(spec.n_layers):
            total += K2 * cin * spec.out_channels + 2 * spec.out_channels
            cin = spec.out_channels
    return total + K2 * config.base_channels * config.in_channels + config.in_channels


class UNetModel:
    def __init__(self, config: UNetConfig, params: dict[str, Tensor]):
        config.validate()
        self.config = config
        self.params = params
        self.blocks = block_specs(config)
        self.eps = 1e-5

    # -- registry ------------------------------------------------------------
    @property
    def block_names(self) -> list[str]:
        return [b.name for b in self.blocks]

    @property
    def skips(self) -> list[tuple[str, str]]:
        return [(f"E{j}", f"D{j}") for j in range(1, self.config.encoder_blocks + 1)]

    def block(self, name: str) -> BlockSpec:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(f"unknown block {name!r}; have {self.block_names}")

    def probes(self) -> list[Probe]:
        return [Probe(b.name, pos) for b in self.blocks for pos in ("input", "output")]

    def probe_channels(self, probe: Probe) -> int:
        spec = self.block(probe.block)
        return spec.in_channels if probe.position == "input" else spec.out_channels

    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def astype(self, dtype) -> "UNetModel":
        return UNetModel(self.config, {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad)
                                       for k, v in self.params.items()})

    def copy(self) -> "UNetModel":
        return UNetModel(self.config, {k: Tensor(v.data.copy(), requires_grad=v.requires_grad)
                                       for k, v in self.params.items()})

    def requires_grad_(self, flag: bool) -> "UNetModel":
        for p in self.params.values():
            p.requires_grad = flag
        return self

    def residual(self, x, sigma=None) -> np.ndarray:
        """Denoiser interface shared with analytic oracles; the UNet is blind and ignores sigma."""
        return residual(self, x)

    # -- forward -------------------------------------------------------------
    def _layer(self, h: Tensor, prefix: str) -> Tensor:
        p = self.params
        h = ndnet.conv2d(h, p[prefix + ".weight"])
        h = ndnet.layer_norm(h, p[prefix + ".gain"], p[prefix + ".bias"], self.eps)
        return ndnet.relu(h)

    def _block(self, h: Tensor, spec: BlockSpec) -> Tensor:
        for i in range(spec.n_layers):
            h = self._layer(h, f"{spec.name}.{i}")
        return h

    def forward(self, x, capture: set[str] | None = None, stop_after: str | None = None):
        """Run the network; returns (residual or None, captured probe maps).

        ``capture`` holds probe names like ``"M.output"``. With ``stop_after``
        the pass ends after that block and the residual is None.
        """
        x = ndnet.as_tensor(x)
        self._check_input(x)
        captured: dict[str, Tensor] = {}
        want = capture or set()

        def grab(block, pos, t):
            key = f"{block}.{pos}"
            if key in want:
                captured[key] = t

        k = self.config.encoder_blocks
        skips = {}
        h = x
        for j in range(1, k + 1):
            spec = self.blocks[j - 1]
            if j > 1:
                h = ndnet.avg_pool2(h)
            grab(spec.name, "input", h)
            h = self._block(h, spec)
            grab(spec.name, "output", h)
            skips[j] = h
            if stop_after == spec.name:
                return None, captured
        mid = self.blocks[k]
        h = ndnet.avg_pool2(h)
        grab("M", "input", h)
        h = self._block(h, mid)
        grab("M", "output", h)
        if stop_after == "M":
            return None, captured
        for idx, j in enumerate(range(k, 0, -1)):
            spec = self.blocks[k + 1 + idx]
            h = ndnet.concat([ndnet.upsample_nearest2(h), skips[j]], axis=1)
            grab(spec.name, "input", h)
            h = self._block(h, spec)
            grab(spec.name, "output", h)
            if stop_after == spec.name:
                return None, captured
        out = ndnet.conv2d(h, self.params["out.weight"], self.params["out.bias"])
        return out, captured

    def _check_input(self, x: Tensor) -> None:
        c = self.config
        if x.ndim != 4 or x.shape[1] != c.in_channels or x.shape[2] % 2 ** c.encoder_blocks \
                or x.shape[3] % 2 ** c.encoder_blocks:
            raise ndnet.ShapeError(
                f"input {x.shape} incompatible with model (C={c.in_channels}, "
                f"spatial divisible by {2 ** c.encoder_blocks})")


def build(config: UNetConfig, seed: int = 0) -> UNetModel:
    """Deterministic init: conv weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); norm gain 1, bias 0."""
    config.validate()
    rng = np.random.default_rng(seed)
    dtype = ndnet.default_dtype()
    params: dict[str, Tensor] = {}
    for name, shape in _layer_shapes(config):
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[1:]))
            bound = 1.0 / np.sqrt(fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".gain"):
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    return UNetModel(config, params)


def _as_batch(x) -> tuple[np.ndarray, bool]:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if arr.ndim == 3:
        return arr[None], True
    return arr, False


def residual(model: UNetModel, x_sigma) -> np.ndarray:
    """Network output f(x_sigma), an estimate of x - x_sigma. Accepts CHW or BCHW."""
    arr, single = _as_batch(x_sigma)
    out, _ = model.forward(arr.astype(model.params["out.weight"].dtype, copy=False))
    return out.data[0] if single else out.data


def denoise(model: UNetModel, x_sigma) -> np.ndarray:
    arr, single = _as_batch(x_sigma)
    r = residual(model, arr)
    out = arr + r
    return out[0] if single else out


def activations(model: UNetModel, x_sigma, probe: Probe) -> np.ndarray:
    """Activation map at a probe, BCHW (or CHW for a single image)."""
    if probe.position not in ("input", "output"):
        raise KeyError(f"probe position must be input/output, got {probe.position!r}")
    model.block(probe.block)
    arr, single = _as_batch(x_sigma)
    _, cap = model.forward(arr.astype(model.params["out.weight"].dtype, copy=False),
                           capture={probe.name}, stop_after=probe.block)
    a = cap[probe.name].data
    return a[0] if single else a


def receptive_field(config: UNetConfig, block: str = "M") -> int:
    """Analytic receptive field (pixels, one axis) at the output of ``block``.

    Each KxK conv adds (K-1)*jump; each 2x2 pool adds jump and doubles it.
    """
    config.validate()
    rf, jump = 1, 1
    K = config.kernel_size
    for spec in block_specs(config):
        if spec.name.startswith("D"):
            raise ValueError("receptive field is defined here for encoder/middle blocks only")
        if spec.name != "E1":
            rf += jump
            jump *= 2
        rf += spec.n_layers * (K - 1) * jump
        if spec.name == block:
            return rf
    raise KeyError(block)


def measure_receptive_field(config: UNetConfig, block: str = "M") -> int:
    """Impulse-propagation measurement of the receptive field.

    Runs the linear skeleton of the network (all-ones kernels, no norm or
    rectification, so no cancellation or clipping) and back-propagates from
    one central unit of the block output; the extent of the nonzero input
    gradient is the receptive field.
    """
    config.validate()
    rf = receptive_field(config, block)
    scale = 2 ** config.encoder_blocks
    size = scale * int(np.ceil((2 * rf + 4) / scale))
    K = config.kernel_size
    with ndnet.precision(np.float64):
        x = Tensor(np.zeros((1, 1, size, size)), requires_grad=True)
        with ndnet.Tape() as tape:
            h = x
            out = None
            for spec in block_specs(config):
                if spec.name.startswith("D"):
                    break
                if spec.name != "E1":
                    h = ndnet.avg_pool2(h)
                cin = h.shape[1]
                for _ in range(spec.n_layers):
                    h = ndnet.conv2d(h, Tensor(np.ones((1, cin, K, K))))
                    cin = 1
                if spec.name == block:
                    out = h
                    break
            H = out.shape[2]
            seed = np.zeros(out.shape)
            seed[0, 0, H // 2, H // 2] = 1.0
        tape.backward(out, seed_grad=seed)
    support = np.nonzero(x.grad[0, 0] != 0)
    return int(support[0].max() - support[0].min() + 1)
