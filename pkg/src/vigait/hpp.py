"""Horizontal pyramid pooling and mapping.

The feature map is cut into ``s`` horizontal bands for every scale ``s``;
each band is pooled (max + mean over its rows and columns) and then mapped
by its own linear layer to a ``D``-dimensional strip feature.  Rows are
ordered scale-major, band index minor.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor


@dataclass
class HppConfig:
    scales: tuple[int, ...] = (1, 2, 4)
    dim: int = 64

    def __post_init__(self):
        self.scales = tuple(int(s) for s in self.scales)
        if not self.scales or any(s < 1 for s in self.scales):
            raise ValueError(f"scales must be positive, got {self.scales}")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")

    @property
    def n(self) -> int:
        return sum(self.scales)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scales"] = list(self.scales)
        return d


def band_bounds(height: int, count: int) -> list[tuple[int, int]]:
    """Split ``height`` rows into ``count`` contiguous bands.

    Sizes differ by at most one; the earlier bands take the extra rows.
    """
    if count > height:
        raise DimensionError(f"cannot cut {height} rows into {count} bands")
    base, extra = divmod(height, count)
    bounds, start = [], 0
    for b in range(count):
        stop = start + base + (1 if b < extra else 0)
        bounds.append((start, stop))
        start = stop
    return bounds


def _pool_band(x: Tensor, start: int, stop: int) -> Tensor:
    band = x[..., start:stop, :]
    return ad.amax(band, (-2, -1)) + ad.tmean(band, (-2, -1))


def pool_strips(x_f: Tensor, x_g: Tensor | None, scales) -> Tensor:
    """Pool ``(..., C, H, W)`` maps into ``(..., n, C)`` strip vectors."""
    if isinstance(scales, HppConfig):
        scales = scales.scales
    height = x_f.shape[-2]
    if height < max(scales):
        raise DimensionError(f"feature map height {height} is smaller than the largest scale {max(scales)}")
    if x_g is not None and x_g.shape != x_f.shape:
        raise DimensionError(f"x_g shape {x_g.shape} differs from x_f {x_f.shape}")
    rows = []
    for s in scales:
        for start, stop in band_bounds(height, s):
            v = _pool_band(x_f, start, stop)
            if x_g is not None:
                v = v + _pool_band(x_g, start, stop)
            rows.append(v)
    return ad.stack(rows, axis=-2)


def init_separate_fc(n: int, in_dim: int, dim: int, rng) -> Tensor:
    w = rng.normal(0.0, 1.0 / np.sqrt(in_dim), (n, dim, in_dim))
    return Tensor(w, requires_grad=True, name="hpp.fc")


def separate_fc(strips: Tensor, weights: Tensor) -> Tensor:
    """Row ``i`` of the result is ``weights[i] @ strips[..., i, :]``.

    ``strips`` is ``(n, C)`` or ``(B, n, C)``; ``weights`` is ``(n, D, C)``.
    """
    n = strips.shape[-2]
    if weights.ndim != 3 or weights.shape[0] != n:
        raise DimensionError(f"need one weight matrix per strip ({n}), got weights of shape {weights.shape}")
    if weights.shape[2] != strips.shape[-1]:
        raise DimensionError(f"weights {weights.shape} do not accept strip vectors of width {strips.shape[-1]}")
    single = strips.ndim == 2
    x = ad.reshape(strips, (1,) + strips.shape) if single else strips
    # (B, n, C) -> (n, B, C) @ (n, C, D) -> (n, B, D)
    out = ad.matmul(ad.transpose(x, (1, 0, 2)), ad.transpose(weights, (0, 2, 1)))
    out = ad.transpose(out, (1, 0, 2))
    return ad.reshape(out, out.shape[1:]) if single else out
