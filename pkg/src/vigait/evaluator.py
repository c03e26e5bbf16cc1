"""Gallery/probe rank-1 retrieval and view-classification accuracy."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import DimensionError
from .data.dataset import SilhouetteSequence
from .model import ViGaitModel

_SELECTOR = re.compile(r"^\s*([A-Za-z]+)\s*#\s*(\d+)(?:\s*-\s*(\d+))?\s*$")


@dataclass(frozen=True)
class Selector:
    """Condition tag plus an inclusive 1-based sequence-index range, e.g. ``NM#1-4``."""

    condition: str
    first: int
    last: int

    @classmethod
    def parse(cls, text: str) -> "Selector":
        m = _SELECTOR.match(text)
        if not m:
            raise ValueError(f"bad selector {text!r}; expected e.g. NM#1-4")
        first = int(m.group(2))
        last = int(m.group(3) or first)
        if first < 1 or last < first:
            raise ValueError(f"bad sequence range in selector {text!r}")
        return cls(m.group(1).lower(), first, last)

    def matches(self, condition: str, seq_id: str) -> bool:
        try:
            idx = int(seq_id)
        except ValueError:
            return False
        return condition.lower() == self.condition and self.first <= idx <= self.last

    def __str__(self) -> str:
        span = f"{self.first}" if self.first == self.last else f"{self.first}-{self.last}"
        return f"{self.condition.upper()}#{span}"


def _selectors(value) -> tuple[Selector, ...]:
    if isinstance(value, (str, Selector)):
        value = [value]
    return tuple(v if isinstance(v, Selector) else Selector.parse(v) for v in value)


def _overlaps(a: Selector, b: Selector) -> bool:
    return a.condition == b.condition and a.first <= b.last and b.first <= a.last


@dataclass
class EvalProtocol:
    gallery: tuple[Selector, ...] = ("NM#1-2",)
    probes: tuple[Selector, ...] = ("NM#3-4",)
    exclude_identical_view: bool = True

    def __post_init__(self):
        self.gallery = _selectors(self.gallery)
        self.probes = _selectors(self.probes)
        for g in self.gallery:
            for p in self.probes:
                if _overlaps(g, p):
                    raise ValueError(f"gallery {g} and probe {p} overlap")

    @classmethod
    def casia_b(cls) -> "EvalProtocol":
        return cls(("NM#1-4",), ("NM#5-6", "BG#1-2", "CL#1-2"))

    def in_gallery(self, condition: str, seq_id: str) -> bool:
        return any(s.matches(condition, seq_id) for s in self.gallery)

    def probe_group(self, condition: str, seq_id: str) -> str | None:
        """Name of the probe selector a sequence belongs to (its condition tag)."""
        for s in self.probes:
            if s.matches(condition, seq_id):
                return s.condition.upper()
        return None


@dataclass
class Embedded:
    """Stacked embeddings with their labels."""

    features: np.ndarray  # (N, n, D)
    subjects: np.ndarray
    views: np.ndarray
    predicted: np.ndarray | None = None
    groups: np.ndarray | None = None  # probe condition per row


@dataclass
class EvalReport:
    views: list
    cells: dict[str, list[float | None]]
    view_accuracy: float | None = None
    counts: dict[str, list[int]] = field(default_factory=dict)

    def condition_mean(self, condition: str) -> float | None:
        vals = [v for v in self.cells[condition] if v is not None]
        return sum(vals) / len(vals) if vals else None

    @property
    def condition_means(self) -> dict[str, float | None]:
        return {c: self.condition_mean(c) for c in self.cells}

    @property
    def overall_mean(self) -> float | None:
        vals = [m for m in self.condition_means.values() if m is not None]
        return sum(vals) / len(vals) if vals else None

    def to_tsv(self) -> str:
        def fmt(v):
            return "NA" if v is None else repr(float(v))

        lines = ["condition\t" + "\t".join(_label(v) for v in self.views) + "\tmean"]
        for cond, row in self.cells.items():
            lines.append("\t".join([cond, *map(fmt, row), fmt(self.condition_mean(cond))]))
        lines.append(f"overall\t{fmt(self.overall_mean)}")
        lines.append(f"view_accuracy\t{fmt(self.view_accuracy)}")
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        def fmt(v):
            return "  -  " if v is None else f"{v:5.1f}"

        head = ["Probe"] + [_label(v) for v in self.views] + ["Mean"]
        rows = [[c, *map(fmt, r), fmt(self.condition_mean(c))] for c, r in self.cells.items()]
        widths = [max(len(r[i]) for r in [head, *rows]) for i in range(len(head))]
        out = ["  ".join(s.rjust(w) for s, w in zip(r, widths)) for r in [head, *rows]]
        out.append(f"Overall mean: {fmt(self.overall_mean).strip()}")
        if self.view_accuracy is not None:
            out.append(f"View accuracy: {self.view_accuracy:.1f}")
        return "\n".join(out) + "\n"


def _label(v) -> str:
    v = float(v)
    return f"{int(v)}" if v.is_integer() else f"{v:g}"


def embed(model: ViGaitModel, sequence: SilhouetteSequence | np.ndarray) -> tuple[np.ndarray, int]:
    """Deterministic ``(n, D)`` embedding using the predicted view for selection."""
    frames = sequence.frames if isinstance(sequence, SilhouetteSequence) else np.asarray(sequence)
    if frames.ndim != 3 or frames.shape[1:] != tuple(model.cfg.input_size):
        raise DimensionError(f"frames {frames.shape} do not match model input {model.cfg.input_size}")
    return model.embed(frames)


def embed_all(model: ViGaitModel, sequences: Sequence[SilhouetteSequence]) -> Embedded:
    feats, preds = zip(*(embed(model, s) for s in sequences)) if sequences else ((), ())
    return Embedded(
        np.stack(feats) if feats else np.zeros((0, 0, 0)),
        np.array([s.subject_id for s in sequences]),
        np.array([s.view for s in sequences], dtype=int),
        np.array(preds, dtype=int),
    )


def distances(probe: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Sum over strips of squared Euclidean distance, ``(P, G)``."""
    diff = probe[:, None] - gallery[None]
    return np.einsum("pgnd,pgnd->pg", diff, diff)


def rank1_hits(gallery: Embedded, probe: Embedded, exclude_identical_view: bool = True) -> np.ndarray:
    """Per probe: 1.0 for a hit, 0.0 for a miss, NaN when the effective gallery is empty.

    Ties go to the smallest gallery index.
    """
    d = distances(probe.features, gallery.features)
    if exclude_identical_view:
        d = np.where(probe.views[:, None] == gallery.views[None], np.inf, d)
    hits = np.full(len(d), np.nan)
    for i, row in enumerate(d):
        if row.size and np.isfinite(row).any():
            hits[i] = float(gallery.subjects[int(np.argmin(row))] == probe.subjects[i])
    return hits


def rank1(gallery: Embedded, probe: Embedded, views: Sequence, exclude_identical_view: bool = True) -> EvalReport:
    """Rank-1 percentages per (probe condition, probe view); undefined cells are ``None``."""
    hits = rank1_hits(gallery, probe, exclude_identical_view)
    groups = probe.groups if probe.groups is not None else np.full(len(hits), "ALL")
    cells, counts = {}, {}
    for cond in dict.fromkeys(groups.tolist()):
        row, cnt = [], []
        for v in range(len(views)):
            sel = (groups == cond) & (probe.views == v)
            vals = hits[sel]
            vals = vals[~np.isnan(vals)]
            row.append(100.0 * vals.mean() if vals.size else None)
            cnt.append(int(vals.size))
        cells[cond], counts[cond] = row, cnt
    return EvalReport(list(views), cells, counts=counts)


def accuracy(predicted, labels) -> float:
    predicted, labels = np.asarray(predicted), np.asarray(labels)
    if predicted.shape != labels.shape:
        raise DimensionError(f"{predicted.shape} predictions vs {labels.shape} labels")
    if labels.size == 0:
        return math.nan
    return 100.0 * float(np.mean(predicted == labels))


def view_accuracy(model: ViGaitModel, sequences: Sequence[SilhouetteSequence]) -> float:
    preds = [embed(model, s)[1] for s in sequences]
    return accuracy(preds, [s.view for s in sequences])


def _subset(e: Embedded, mask: np.ndarray, groups=None) -> Embedded:
    return Embedded(e.features[mask], e.subjects[mask], e.views[mask], e.predicted[mask], groups)


def evaluate(
    model: ViGaitModel,
    sequences: Sequence[SilhouetteSequence],
    protocol: EvalProtocol,
    views: Sequence | None = None,
) -> EvalReport:
    """Embed every sequence once, split into gallery/probe and score."""
    sequences = list(sequences)
    emb = embed_all(model, sequences)
    in_gallery = np.array([protocol.in_gallery(s.condition, s.seq_id) for s in sequences], dtype=bool)
    group = np.array([protocol.probe_group(s.condition, s.seq_id) or "" for s in sequences])
    is_probe = group != ""
    if not in_gallery.any() or not is_probe.any():
        raise ValueError("protocol selects an empty gallery or probe set")
    if views is None:
        views = sorted({s.angle for s in sequences})
    report = rank1(
        _subset(emb, in_gallery), _subset(emb, is_probe, group[is_probe]), views, protocol.exclude_identical_view
    )
    report.view_accuracy = accuracy(emb.predicted, emb.views)
    return report
