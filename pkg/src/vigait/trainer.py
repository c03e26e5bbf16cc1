"""Adam training against the joint view/identity loss."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .backbone import BackboneConfig
from .checkpoint import Checkpoint
from .data.dataset import SilhouetteSequence
from .data.sampler import sample_batch
from .hpp import HppConfig
from .losses import LossWeights, ce_loss, joint_loss, mine_all, triplet_loss
from .model import SELECTION_MODES, ModelConfig, ViGaitModel

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iteration", "ce", "trip", "joint", "batch_view_acc", "lr")


class NumericalAbort(RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    lr_drop: tuple[float, int] | None = None
    iterations: int = 1000
    p: int = 4
    k: int = 4
    frames: int = 8
    weights: LossWeights = field(default_factory=LossWeights)
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    selection_mode: str = "predicted"
    frozen: tuple[str, ...] = ()

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.lr_drop is not None:
            self.lr_drop = (float(self.lr_drop[0]), int(self.lr_drop[1]))
        self.betas = tuple(float(b) for b in self.betas)
        self.frozen = tuple(self.frozen)
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.selection_mode not in SELECTION_MODES:
            raise ValueError(f"selection_mode must be one of {SELECTION_MODES}")

    def lr_at(self, iteration: int) -> float:
        if self.lr_drop is not None and iteration >= self.lr_drop[1]:
            return self.learning_rate * self.lr_drop[0]
        return self.learning_rate

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_drop"] = None if self.lr_drop is None else list(self.lr_drop)
        d["betas"] = list(self.betas)
        d["frozen"] = list(self.frozen)
        return d


def adam_step(param, grad, m, v, lr, betas=(0.9, 0.999), eps=1e-8, t=1):
    """One bias-corrected Adam update; returns ``(param, m, v)`` as new arrays."""
    param, grad, m, v = (np.asarray(a, dtype=np.float64) for a in (param, grad, m, v))
    if not (param.shape == grad.shape == m.shape == v.shape):
        raise DimensionError(f"adam_step: shapes {param.shape}, {grad.shape}, {m.shape}, {v.shape} differ")
    if t < 1:
        raise ValueError("t must be >= 1")
    b1, b2 = betas
    m = b1 * m + (1 - b1) * grad
    v = b2 * v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class Adam:
    """Per-parameter Adam state; parameters without a gradient are left untouched.

    Each parameter keeps its own step count, so bias correction follows the
    number of updates that parameter actually received.
    """

    def __init__(self, betas=(0.9, 0.999), eps=1e-8):
        self.betas = tuple(betas)
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, params: dict[str, Tensor], lr: float, frozen: Sequence[str] = ()) -> None:
        for name, p in params.items():
            if p.grad is None or any(name.startswith(f) for f in frozen):
                continue
            t = self.t.get(name, 0) + 1
            m = self.m.get(name, np.zeros_like(p.data))
            v = self.v.get(name, np.zeros_like(p.data))
            p.data, self.m[name], self.v[name] = adam_step(p.data, p.grad, m, v, lr, self.betas, self.eps, t)
            self.t[name] = t

    def state(self) -> dict[str, dict[str, np.ndarray]]:
        return {
            "m": dict(self.m),
            "v": dict(self.v),
            "t": {k: np.array(float(t)) for k, t in self.t.items()},
        }

    def load_state(self, moments: dict) -> None:
        self.m = {k: np.array(v) for k, v in moments.get("m", {}).items()}
        self.v = {k: np.array(v) for k, v in moments.get("v", {}).items()}
        self.t = {k: int(v) for k, v in moments.get("t", {}).items()}


def batch_loss(model: ViGaitModel, frames, labels, views, weights: LossWeights, selection: str = "predicted"):
    """Forward one batch; returns ``(joint, ce, trip, output)``."""
    out = model.forward(frames, views=views, selection=selection)
    ce = ce_loss(out.logits, views)
    trip = triplet_loss(out.final.rows, mine_all(labels), weights.margin)
    return joint_loss(ce, trip, weights), ce, trip, out


@dataclass
class TrainResult:
    model: ViGaitModel
    checkpoint: Checkpoint
    log: list[dict]


def make_checkpoint(model: ViGaitModel, cfg: TrainConfig, opt: Adam, iteration: int, rng, meta=None) -> Checkpoint:
    config = {"model": model.cfg.to_dict(), "train": cfg.to_dict(), "meta": meta or {}}
    params = {k: p.data.copy() for k, p in model.parameters().items()}
    return Checkpoint(config, params, opt.state(), iteration, rng.bit_generator.state if rng is not None else None)


def model_from_checkpoint(ckpt: Checkpoint) -> ViGaitModel:
    model = ViGaitModel(ModelConfig.from_dict(ckpt.config["model"]))
    params = model.parameters()
    if set(params) != set(ckpt.params):
        missing = sorted(set(params) ^ set(ckpt.params))
        raise ValueError(f"checkpoint parameters do not match the model: {missing[:5]}")
    for name, p in params.items():
        if p.shape != ckpt.params[name].shape:
            raise DimensionError(f"{name}: checkpoint shape {ckpt.params[name].shape} != model {p.shape}")
        p.data = ckpt.params[name].copy()
    return model


def _grad_norms(params: dict[str, Tensor]) -> dict[str, float]:
    return {k: float(np.linalg.norm(p.grad)) for k, p in params.items() if p.grad is not None}


def train(
    sequences: Sequence[SilhouetteSequence],
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    resume: Checkpoint | None = None,
    log_path=None,
    meta: dict | None = None,
    model_seed: int | None = None,
) -> TrainResult:
    """Train from scratch (or continue ``resume``) up to ``cfg.iterations``."""
    opt = Adam(cfg.betas, cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    if resume is not None:
        model = model_from_checkpoint(resume)
        opt.load_state(resume.moments)
        if resume.rng_state is not None:
            rng.bit_generator.state = resume.rng_state
        start = resume.iteration
    else:
        model = ViGaitModel(model_cfg, seed=cfg.seed if model_seed is None else model_seed)
        start = 0
    params = model.parameters()
    rows: list[dict] = []
    fh = None
    if log_path is not None:
        fh = open(log_path, "a" if resume is not None else "w", encoding="utf-8")
        if resume is None:
            fh.write("\t".join(LOG_COLUMNS) + "\n")
    try:
        for it in range(start, cfg.iterations):
            lr = cfg.lr_at(it)
            batch = sample_batch(sequences, cfg.p, cfg.k, cfg.frames, rng)
            for p in params.values():
                p.grad = None
            ce = trip = None
            try:
                with ad.Tape() as tape:
                    loss, ce, trip, out = batch_loss(
                        model, batch.frames, batch.labels, batch.views, cfg.weights, cfg.selection_mode
                    )
                ad.backward(loss, tape)
            except FloatingPointError as exc:
                raise NumericalAbort(
                    f"non-finite value at iteration {it}: {exc}",
                    {"iteration": it, "ce": None if ce is None else ce.item(), "trip": None if trip is None else trip.item()},
                ) from exc
            norms = _grad_norms(params)
            if not np.isfinite(loss.item()) or not all(np.isfinite(v) for v in norms.values()):
                raise NumericalAbort(
                    f"non-finite loss or gradient at iteration {it}",
                    {"iteration": it, "ce": ce.item(), "trip": trip.item(), "grad_norms": norms},
                )
            opt.step(params, lr, cfg.frozen)
            row = {
                "iteration": it + 1,
                "ce": ce.item(),
                "trip": trip.item(),
                "joint": loss.item(),
                "batch_view_acc": float(np.mean(out.y_hat == batch.views)),
                "lr": lr,
            }
            rows.append(row)
            if fh is not None:
                fh.write("\t".join(repr(row[c]) for c in LOG_COLUMNS) + "\n")
            if (it + 1) % 100 == 0:
                log.info("iter %d ce %.4f trip %.4f acc %.2f", it + 1, row["ce"], row["trip"], row["batch_view_acc"])
    finally:
        if fh is not None:
            fh.close()
    ckpt = make_checkpoint(model, cfg, opt, max(start, cfg.iterations), rng, meta)
    return TrainResult(model, ckpt, rows)


# ------------------------------------------------------------ gradient checking


def tiny_model_config(num_views: int = 3) -> ModelConfig:
    """The small configuration used for full-model finite-difference checks."""
    return ModelConfig(
        num_views=num_views,
        backbone=BackboneConfig(widths=(2, 2), emit_global=True),
        hpp=HppConfig(scales=(1, 2), dim=4),
        view_dim=4,
        input_size=(16, 12),
    )


def gradcheck_model(
    model_cfg: ModelConfig | None = None,
    p: int = 2,
    k: int = 2,
    frames: int = 2,
    eps: float = 1e-5,
    samples: int = 5,
    seed: int = 0,
    selection: str = "ground-truth",
) -> dict[str, float]:
    """Max relative finite-difference error for every parameter tensor of a
    randomly initialised model on a random batch.
    """
    model_cfg = model_cfg or tiny_model_config()
    rng = np.random.default_rng(seed)
    model = ViGaitModel(model_cfg, seed=seed)
    params = model.parameters()
    for t in params.values():
        # break the exact zeros / identities of the default init
        t.data = t.data + 0.1 * rng.normal(size=t.shape)
    h, w = model_cfg.input_size
    x = rng.uniform(0.0, 1.0, (p * k, frames, h, w))
    labels = np.repeat(np.arange(p), k)
    views = np.arange(p * k) % model_cfg.num_views
    weights = LossWeights()

    def f(_):
        return batch_loss(model, x, labels, views, weights, selection)[0]

    return {name: ad.finite_diff_check(f, t, eps, coords=samples, rng=rng) for name, t in params.items()}
