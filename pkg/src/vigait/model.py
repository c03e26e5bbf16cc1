"""The full two-branch network: backbone, HPP/HPM, view head, projection bank."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .backbone import BackboneConfig, SetPoolingBackbone, frames_tensor
from .hpp import HppConfig, init_separate_fc, pool_strips, separate_fc
from .projection import PLACEMENTS, FinalFeature, ProjectionBank, project_batch
from .view_head import ViewHead, predict_view, view_feature

SELECTION_MODES = ("predicted", "ground-truth")


@dataclass
class ModelConfig:
    num_views: int
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    hpp: HppConfig = field(default_factory=HppConfig)
    view_dim: int = 32
    input_size: tuple[int, int] = (64, 44)
    use_bank: bool = True
    placement: str = "after-separate-fc"
    shared: bool = False
    bank_init: str = "identity-perturbed"
    bank_eps: float = 0.01

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**self.backbone)
        if isinstance(self.hpp, dict):
            self.hpp = HppConfig(**self.hpp)
        self.input_size = tuple(int(v) for v in self.input_size)
        if self.placement not in PLACEMENTS:
            raise ValueError(f"placement must be one of {PLACEMENTS}, got {self.placement!r}")

    def to_dict(self) -> dict:
        return {
            "num_views": self.num_views,
            "backbone": self.backbone.to_dict(),
            "hpp": self.hpp.to_dict(),
            "view_dim": self.view_dim,
            "input_size": list(self.input_size),
            "use_bank": self.use_bank,
            "placement": self.placement,
            "shared": self.shared,
            "bank_init": self.bank_init,
            "bank_eps": self.bank_eps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ModelOutput:
    logits: Tensor
    probs: np.ndarray
    y_hat: np.ndarray
    hpm: Tensor
    final: FinalFeature


class ViGaitModel:
    """Backbone + HPP + view head, optionally with the per-view projection bank.

    ``use_bank=False`` is the baseline: the HPM features are the embedding.
    With the bank, ``after-separate-fc`` projects the HPM output, while
    ``replace-separate-fc`` drops the separate FC and projects the pooled
    strips directly (bank matrices are then ``D x C_f``).
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.backbone = SetPoolingBackbone(cfg.backbone, cfg.input_size, rng)
        c_f = self.backbone.channels
        n, d = cfg.hpp.n, cfg.hpp.dim
        self.head = ViewHead(c_f * (2 if cfg.backbone.emit_global else 1), cfg.view_dim, cfg.num_views, rng)
        replace = cfg.use_bank and cfg.placement == "replace-separate-fc"
        self.fc = None if replace else init_separate_fc(n, c_f, d, rng)
        self.bank = None
        if cfg.use_bank:
            self.bank = ProjectionBank.init(
                cfg.num_views,
                n,
                d,
                scheme=cfg.bank_init,
                eps=cfg.bank_eps,
                rng=rng,
                placement=cfg.placement,
                shared=cfg.shared,
                in_dim=c_f if replace else d,
            )

    def parameters(self) -> dict[str, Tensor]:
        params = dict(self.backbone.parameters())
        if self.fc is not None:
            params["hpp.fc"] = self.fc
        params.update(self.head.parameters())
        if self.bank is not None:
            params.update(self.bank.parameters())
        return params

    def forward(self, frames, views=None, selection: str = "predicted") -> ModelOutput:
        """Run a ``(B, T, H, W)`` batch.

        ``views`` are the ground-truth labels, used for matrix selection only
        when ``selection == "ground-truth"``.
        """
        if selection not in SELECTION_MODES:
            raise ValueError(f"selection must be one of {SELECTION_MODES}")
        x = frames if isinstance(frames, Tensor) else frames_tensor(frames)
        if x.ndim != 4:
            raise DimensionError(f"expected (B, T, H, W) frames, got {x.shape}")
        maps = self.backbone.extract(x)
        pred = predict_view(view_feature(maps, self.head), self.head)
        y_hat = np.atleast_1d(pred.y_hat)

        strips = pool_strips(maps.x_f, maps.x_g, self.cfg.hpp.scales)
        hpm = separate_fc(strips, self.fc) if self.fc is not None else strips
        if self.bank is None:
            final = FinalFeature(hpm, y_hat)
        else:
            if selection == "ground-truth":
                if views is None:
                    raise ValueError("ground-truth selection needs view labels")
                route = np.asarray(views, dtype=int)
            else:
                route = y_hat
            final = project_batch(hpm, self.bank, route)
        return ModelOutput(pred.logits, pred.probs, y_hat, hpm, final)

    def embed(self, frames) -> tuple[np.ndarray, int]:
        """Inference embedding ``(n, D)`` of one ``(T, H, W)`` sequence and its predicted view."""
        frames = np.asarray(frames)
        with ad.no_tape():
            out = self.forward(frames[None])
        return out.final.rows.data[0], int(out.y_hat[0])
