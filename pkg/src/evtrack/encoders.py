"""Convolutional feature encoders and motion-gated frame/event fusion.

Two pyramid encoders with identical architecture but independent weights
map frames and event stacks to (C, H/S, W/S) feature grids. Fusion blends
the two feature maps with a scalar gate driven by the mean flow magnitude
of the previous slice, plus a 1x1-projected image skip path so frame
texture survives any gate value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ParamStore, Tensor, ops
from .errors import ConfigError


@dataclass
class EncoderConfig:
    channels: int = 128  # C
    downsample: int = 4  # S, 4 or 8
    in_channels: int = 1
    widths: tuple[int, int, int] = ()  # stem/stage1/stage2; derived from C when empty
    input_scale: float = 1.0

    def __post_init__(self):
        if self.downsample not in (4, 8):
            raise ConfigError(f"downsample factor must be 4 or 8, got {self.downsample}")
        if self.channels <= 0:
            raise ConfigError(f"channels must be positive, got {self.channels}")
        if not self.widths:
            c = self.channels
            self.widths = (max(8, c // 4), max(16, c // 2), c)


@dataclass
class FeatureMap:
    """A (C, h, w) feature grid tied to its source timestamps.

    `scale` is the full-resolution pixel span of one feature cell.
    """

    tensor: Tensor
    source: str  # frame | event | fused
    t_frame: int
    t_slice: int
    scale: int


@dataclass
class FusionState:
    """Mean flow magnitude of the previous slice, in pixels per slice."""

    dp_prev: float = 0.0


class Conv2dLayer:
    def __init__(self, store: ParamStore, name: str, cin: int, cout: int, k: int, rng,
                 stride: int = 1, zero_init: bool = False):
        std = np.sqrt(2.0 / (cin * k * k))
        w = np.zeros((cout, cin, k, k)) if zero_init else rng.standard_normal((cout, cin, k, k)) * std
        self.weight = store.create(f"{name}.w", w.astype(np.float32))
        self.bias = store.create(f"{name}.b", np.zeros(cout, dtype=np.float32))
        self.stride = stride
        self.pad = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class LinearLayer:
    def __init__(self, store: ParamStore, name: str, din: int, dout: int, rng,
                 zero_init: bool = False):
        std = np.sqrt(1.0 / din)
        w = np.zeros((dout, din)) if zero_init else rng.standard_normal((dout, din)) * std
        self.weight = store.create(f"{name}.w", w.astype(np.float32))
        self.bias = store.create(f"{name}.b", np.zeros(dout, dtype=np.float32))

    def __call__(self, x) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class _ResStage:
    """3x3 stride-2 conv, 3x3 conv, 1x1 stride-2 shortcut, residual ReLU."""

    def __init__(self, store, name, cin, cout, rng):
        self.conv1 = Conv2dLayer(store, f"{name}.conv1", cin, cout, 3, rng, stride=2)
        self.conv2 = Conv2dLayer(store, f"{name}.conv2", cout, cout, 3, rng)
        self.short = Conv2dLayer(store, f"{name}.short", cin, cout, 1, rng, stride=2)

    def __call__(self, x):
        main = self.conv2(ops.relu(self.conv1(x)))
        return ops.relu(main + self.short(x))


class FpnEncoder:
    """Stem + two residual stages + lateral/top-down pyramid head.

    The stem halves resolution, the stages reach 1/4 and 1/8; the output
    is taken at 1/downsample with `channels` channels after a 3x3 smooth.
    """

    def __init__(self, store: ParamStore, prefix: str, cfg: EncoderConfig, rng):
        self.cfg = cfg
        w0, w1, w2 = cfg.widths
        c = cfg.channels
        self.stem = Conv2dLayer(store, f"{prefix}.stem", cfg.in_channels, w0, 7, rng, stride=2)
        self.stage1 = _ResStage(store, f"{prefix}.stage1", w0, w1, rng)
        self.stage2 = _ResStage(store, f"{prefix}.stage2", w1, w2, rng)
        self.lateral1 = Conv2dLayer(store, f"{prefix}.lat1", w1, c, 1, rng)
        self.lateral2 = Conv2dLayer(store, f"{prefix}.lat2", w2, c, 1, rng)
        self.smooth = Conv2dLayer(store, f"{prefix}.smooth", c, c, 3, rng)

    def __call__(self, x: Tensor) -> Tensor:
        """Encode (Cin,H,W) or (N,Cin,H,W) to features at 1/downsample."""
        cin = x.shape[-3]
        if cin != self.cfg.in_channels:
            raise ConfigError(
                f"encoder expects {self.cfg.in_channels} input channels, got {cin}"
            )
        if min(x.shape[-1], x.shape[-2]) < self.cfg.downsample:
            raise ConfigError(
                f"input extents {x.shape[-2]}x{x.shape[-1]} too small for 1/{self.cfg.downsample} features"
            )
        if self.cfg.input_scale != 1.0:
            x = x * self.cfg.input_scale
        t = ops.relu(self.stem(x))
        s1 = self.stage1(t)
        s2 = self.stage2(s1)
        p8 = self.lateral2(s2)
        if self.cfg.downsample == 8:
            return self.smooth(p8)
        p4 = self.lateral1(s1) + ops.upsample2_nearest(p8, (s1.shape[-2], s1.shape[-1]))
        return self.smooth(p4)


class MotionGatedFusion:
    """Blend image and event features with a flow-driven scalar gate.

    gate = sigmoid(linear(mean_flow_prev)) weights the image branch; the
    event branch gets (1 - gate). The gate layer is zero-initialized so
    untrained models fuse at exactly 0.5.
    """

    def __init__(self, store: ParamStore, prefix: str, channels: int, rng):
        self.channels = channels
        self.conv_event = Conv2dLayer(store, f"{prefix}.conv_event", channels, channels, 3, rng)
        self.conv_image = Conv2dLayer(store, f"{prefix}.conv_image", channels, channels, 3, rng)
        self.conv_mix = Conv2dLayer(store, f"{prefix}.conv_mix", channels, channels, 3, rng)
        self.image_skip = Conv2dLayer(store, f"{prefix}.image_skip", channels, channels, 1, rng)
        self.gate = LinearLayer(store, f"{prefix}.gate", 1, 1, rng, zero_init=True)

    def gate_value(self, dp_prev: float) -> Tensor:
        """Image-branch weight in (0, 1) for a given previous mean flow."""
        return ops.sigmoid(self.gate(Tensor(np.array([dp_prev], dtype=np.float32))))

    def __call__(self, f_image, f_event, dp_prev: float,
                 use_frames: bool = True, use_events: bool = True) -> Tensor:
        """Fuse feature tensors of identical shape (C,h,w) or (N,C,h,w).

        With use_events=False the image features pass through unchanged;
        with use_frames=False the fused map depends on events only.
        """
        if not use_events:
            return f_image
        f_e = ops.relu(self.conv_event(f_event))
        if not use_frames:
            return ops.relu(self.conv_mix(f_e))
        if f_image.shape != f_event.shape:
            raise ConfigError(f"fusion shape mismatch: image {f_image.shape}, event {f_event.shape}")
        f_i = ops.relu(self.conv_image(f_image))
        beta = self.gate_value(dp_prev).reshape((1,) * (f_i.ndim - 3) + (1, 1, 1))
        mixed = beta * f_i + (1.0 - beta) * f_e
        return ops.relu(self.conv_mix(mixed) + self.image_skip(f_i))


def mean_flow(prev1: np.ndarray | None, prev2: np.ndarray | None,
              active: np.ndarray | None = None) -> float:
    """Mean Euclidean displacement between the two latest predicted positions.

    Returns 0 when fewer than two timesteps exist or no query is active.
    """
    if prev1 is None or prev2 is None:
        return 0.0
    prev1 = np.asarray(prev1, dtype=np.float64)
    prev2 = np.asarray(prev2, dtype=np.float64)
    if active is not None:
        prev1 = prev1[active]
        prev2 = prev2[active]
    if prev1.size == 0:
        return 0.0
    return float(np.linalg.norm(prev1 - prev2, axis=-1).mean())
