"""Set-pooling silhouette backbone (Gaitset family).

Frames go through ``conv -> leaky_relu -> max_pool`` blocks independently,
then an elementwise max over the frame axis turns the sequence into a single
feature map.  The optional global path set-pools the output of the first
block and runs it through its own copy of the remaining blocks.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Protocol

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor


@dataclass
class BackboneConfig:
    widths: tuple[int, ...] = (8, 16, 32)
    kernel_size: int = 3
    slope: float = 0.01
    pool: int = 2
    emit_global: bool = True

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if not self.widths:
            raise ValueError("backbone needs at least one block")
        if any(w < 1 for w in self.widths):
            raise ValueError(f"block widths must be >= 1, got {self.widths}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be a positive odd number")
        if self.pool < 1:
            raise ValueError("pool must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


def feature_shape(cfg: BackboneConfig, height: int, width: int) -> tuple[int, int, int]:
    """Closed-form (C_f, H_f, W_f) for an input frame of ``height x width``."""
    h, w = height, width
    for _ in cfg.widths:
        # 'same' padding keeps the size, the pool floors it
        h, w = h // cfg.pool, w // cfg.pool
    if h < 1 or w < 1:
        raise DimensionError(f"{height}x{width} input collapses to {h}x{w} after {len(cfg.widths)} blocks")
    return cfg.widths[-1], h, w


@dataclass
class FeatureMaps:
    x_f: Tensor
    x_g: Tensor | None = None

    def __post_init__(self):
        if self.x_g is not None and self.x_g.shape != self.x_f.shape:
            raise DimensionError(f"x_g shape {self.x_g.shape} differs from x_f {self.x_f.shape}")


class Backbone(Protocol):
    """What the rest of the pipeline needs from a feature extractor."""

    channels: int

    def parameters(self) -> dict[str, Tensor]: ...

    def output_shape(self, height: int, width: int) -> tuple[int, int, int]: ...

    def extract(self, frames: Tensor) -> FeatureMaps: ...


class SetPoolingBackbone:
    def __init__(self, cfg: BackboneConfig, input_size: tuple[int, int] = (64, 44), rng=None):
        self.cfg = cfg
        self.input_size = tuple(input_size)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels, self.map_h, self.map_w = feature_shape(cfg, *self.input_size)
        if self.map_h < 2 or self.map_w < 2:
            raise ValueError(f"final map {self.map_h}x{self.map_w} is smaller than 2x2")
        self.params: dict[str, Tensor] = {}
        k = cfg.kernel_size
        c_in = 1
        for i, c_out in enumerate(cfg.widths):
            self._add_conv(f"backbone.conv{i}", c_in, c_out, k, rng)
            c_in = c_out
        if cfg.emit_global:
            c_in = cfg.widths[0]
            for i, c_out in enumerate(cfg.widths[1:], start=1):
                self._add_conv(f"backbone.global.conv{i}", c_in, c_out, k, rng)
                c_in = c_out

    def _add_conv(self, name: str, c_in: int, c_out: int, k: int, rng) -> None:
        std = np.sqrt(2.0 / (c_in * k * k))
        self.params[f"{name}.weight"] = Tensor(rng.normal(0.0, std, (c_out, c_in, k, k)), requires_grad=True, name=f"{name}.weight")
        self.params[f"{name}.bias"] = Tensor(np.zeros(c_out), requires_grad=True, name=f"{name}.bias")

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def output_shape(self, height: int, width: int) -> tuple[int, int, int]:
        return feature_shape(self.cfg, height, width)

    def _block(self, x: Tensor, name: str) -> Tensor:
        w = self.params[f"{name}.weight"]
        b = self.params[f"{name}.bias"]
        x = ad.conv2d(x, w, stride=1, padding=self.cfg.kernel_size // 2)
        # bias and leaky_relu are per-channel monotone, so pooling first gives
        # bitwise the same values and maximizers as conv -> act -> pool
        x = ad.max_pool2d(x, self.cfg.pool)
        x = ad.bias_add(x, b, axis=1)
        return ad.leaky_relu(x, self.cfg.slope)

    def extract(self, frames: Tensor) -> FeatureMaps:
        """Feature maps for ``(T, H, W)`` frames or a ``(B, T, H, W)`` batch."""
        single = frames.ndim == 3
        if frames.ndim not in (3, 4):
            raise DimensionError(f"expected (T,H,W) or (B,T,H,W) frames, got {frames.shape}")
        if tuple(frames.shape[-2:]) != self.input_size:
            raise DimensionError(f"frame size {frames.shape[-2:]} does not match configured {self.input_size}")
        if frames.shape[-3] == 0:
            raise ad.EmptySequenceError("sequence has no frames")
        b = 1 if single else frames.shape[0]
        t, h, w = frames.shape[-3:]

        x = ad.reshape(frames, (b * t, 1, h, w))
        x = self._block(x, "backbone.conv0")
        first = x
        for i in range(1, len(self.cfg.widths)):
            x = self._block(x, f"backbone.conv{i}")
        x_f = ad.set_max_pool(ad.reshape(x, (b, t) + x.shape[1:]), axis=1)

        x_g = None
        if self.cfg.emit_global:
            g = ad.set_max_pool(ad.reshape(first, (b, t) + first.shape[1:]), axis=1)
            for i in range(1, len(self.cfg.widths)):
                g = self._block(g, f"backbone.global.conv{i}")
            x_g = g

        if single:
            x_f = ad.reshape(x_f, x_f.shape[1:])
            x_g = None if x_g is None else ad.reshape(x_g, x_g.shape[1:])
        return FeatureMaps(x_f, x_g)


def frames_tensor(frames: np.ndarray) -> Tensor:
    """0/255 silhouettes (or floats already in [0, 1]) as a network input."""
    frames = np.asarray(frames)
    if np.issubdtype(frames.dtype, np.integer):
        return Tensor(frames.astype(np.float64) / 255.0)
    return Tensor(frames)


def extract(seq, backbone: Backbone) -> FeatureMaps:
    """Run one :class:`~vigait.data.SilhouetteSequence` through ``backbone``."""
    return backbone.extract(frames_tensor(seq.frames))
