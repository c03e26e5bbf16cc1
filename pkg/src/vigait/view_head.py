"""View classification branch: pooled feature -> view feature -> view logits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .backbone import FeatureMaps


class ViewHead:
    """Parameters ``fc`` (D_v x C), ``fc_bias``, ``w_view`` (M x D_v), ``b_view``.

    ``C`` is the backbone channel count, doubled when the global map is
    concatenated on the channel axis.
    """

    def __init__(self, in_channels: int, view_dim: int, num_views: int, rng=None):
        if num_views < 2:
            raise ValueError(f"need at least two views, got {num_views}")
        if view_dim < 1:
            raise ValueError("view_dim must be >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = in_channels
        self.view_dim = view_dim
        self.num_views = num_views
        self.fc = Tensor(rng.normal(0, 1 / np.sqrt(in_channels), (view_dim, in_channels)), True, "head.fc")
        self.fc_bias = Tensor(np.zeros(view_dim), True, "head.fc_bias")
        self.w_view = Tensor(rng.normal(0, 1 / np.sqrt(view_dim), (num_views, view_dim)), True, "head.w_view")
        self.b_view = Tensor(np.zeros(num_views), True, "head.b_view")

    def parameters(self) -> dict[str, Tensor]:
        return {t.name: t for t in (self.fc, self.fc_bias, self.w_view, self.b_view)}


@dataclass
class ViewPrediction:
    logits: Tensor
    probs: np.ndarray
    y_hat: np.ndarray | int


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def view_feature(maps: FeatureMaps, head: ViewHead) -> Tensor:
    """Global-average-pool the map(s) and apply the affine layer."""
    pooled = ad.global_avg_pool(maps.x_f)
    if maps.x_g is not None:
        pooled = ad.concat([pooled, ad.global_avg_pool(maps.x_g)], axis=-1)
    if pooled.shape[-1] != head.in_channels:
        raise DimensionError(f"view head expects {head.in_channels} pooled channels, got {pooled.shape[-1]}")
    if pooled.ndim == 1:
        return ad.bias_add(ad.matmul(head.fc, pooled), head.fc_bias)
    return ad.bias_add(ad.matmul(pooled, ad.transpose(head.fc)), head.fc_bias, axis=-1)


def predict_view(f_v: Tensor, head: ViewHead) -> ViewPrediction:
    """Logits, probabilities and the argmax view (first index on ties)."""
    if f_v.ndim == 1:
        logits = ad.bias_add(ad.matmul(head.w_view, f_v), head.b_view)
    else:
        logits = ad.bias_add(ad.matmul(f_v, ad.transpose(head.w_view)), head.b_view, axis=-1)
    probs = softmax(logits.data)
    y_hat = np.argmax(logits.data, axis=-1)
    return ViewPrediction(logits, probs, int(y_hat) if y_hat.ndim == 0 else y_hat)
