"""P x K batch sampling for triplet training."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dataset import SilhouetteSequence


@dataclass
class Batch:
    frames: np.ndarray
    subjects: list[str]
    labels: np.ndarray
    views: np.ndarray
    replaced: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.subjects)


def sample_frames(num_frames: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """Sorted frame indices; with replacement only when the clip is too short."""
    idx = rng.choice(num_frames, size=count, replace=num_frames < count)
    return np.sort(idx)


def sample_batch(
    sequences: Sequence[SilhouetteSequence],
    p: int,
    k: int,
    frames: int,
    rng: np.random.Generator,
) -> Batch:
    """``p`` distinct subjects, ``k`` sequences each, ``frames`` frames per sequence.

    Subjects holding fewer than ``k`` sequences are sampled with replacement
    and reported in ``Batch.replaced``.
    """
    by_subject: dict[str, list[int]] = {}
    for i, s in enumerate(sequences):
        by_subject.setdefault(s.subject_id, []).append(i)
    names = sorted(by_subject)
    if len(names) < 2:
        raise ValueError(f"need at least two subjects to form a batch, have {len(names)}")
    if p > len(names):
        raise ValueError(f"cannot draw {p} distinct subjects from {len(names)}")
    if min(p, k, frames) < 1:
        raise ValueError("p, k and frames must be >= 1")

    chosen = [names[i] for i in rng.choice(len(names), size=p, replace=False)]
    clips, subjects, views, replaced = [], [], [], []
    for name in chosen:
        pool = by_subject[name]
        short = len(pool) < k
        if short:
            replaced.append(name)
        for j in rng.choice(len(pool), size=k, replace=short):
            seq = sequences[pool[j]]
            clips.append(seq.frames[sample_frames(seq.num_frames, frames, rng)])
            subjects.append(name)
            views.append(seq.view)
    labels = np.repeat(np.arange(p), k)
    return Batch(np.stack(clips), subjects, labels, np.asarray(views), replaced)
