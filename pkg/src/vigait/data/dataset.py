"""Silhouette sequences on disk: indexing, loading and frame alignment.

Layout::

    root/<subject>/<condition>/<angle-deg>/<seq>/<frame-index>.pgm

A flat ``root/<subject>/<condition>/<angle-deg>/<frames>`` tree (one sequence
per angle directory) is accepted as well.  Frames may be binary PGM or PNG.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .pgm import read_pgm

log = logging.getLogger(__name__)

FRAME_SUFFIXES = (".pgm", ".png")
INPUT_SIZE = (64, 44)


@dataclass
class SilhouetteSequence:
    frames: np.ndarray
    subject_id: str
    view: int
    angle: float
    condition: str = "nm"
    seq_id: str = "01"

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.uint8)
        if self.frames.ndim != 3 or self.frames.shape[0] < 1:
            raise ValueError(f"sequence needs (T>=1, H, W) frames, got {self.frames.shape}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def key(self) -> tuple[str, str, str]:
        return self.subject_id, self.condition, self.seq_id


@dataclass(frozen=True)
class SequenceEntry:
    path: Path
    subject_id: str
    condition: str
    angle: float
    seq_id: str
    view: int
    frame_paths: tuple[Path, ...]


@dataclass
class DatasetIndex:
    root: Path
    entries: list[SequenceEntry]
    angles: list[float]
    skipped: list[str] = field(default_factory=list)

    @property
    def num_views(self) -> int:
        return len(self.angles)

    @property
    def subjects(self) -> list[str]:
        return sorted({e.subject_id for e in self.entries})

    def by_subject(self) -> dict[str, list[SequenceEntry]]:
        out: dict[str, list[SequenceEntry]] = {}
        for e in self.entries:
            out.setdefault(e.subject_id, []).append(e)
        return out

    def view_of(self, angle: float) -> int:
        return self.angles.index(float(angle))

    def load(self, entry: SequenceEntry, size: tuple[int, int] = INPUT_SIZE) -> SilhouetteSequence | None:
        """Read and align one sequence; ``None`` when no frame has foreground."""
        frames = []
        for p in entry.frame_paths:
            aligned = preprocess(read_frame(p), *size)
            if aligned is not None:
                frames.append(aligned)
        dropped = len(entry.frame_paths) - len(frames)
        if dropped:
            log.warning("%s: dropped %d empty frame(s)", entry.path, dropped)
        if not frames:
            self.skipped.append(str(entry.path))
            return None
        return SilhouetteSequence(
            np.stack(frames), entry.subject_id, entry.view, entry.angle, entry.condition, entry.seq_id
        )

    def load_all(self, subjects=None, size: tuple[int, int] = INPUT_SIZE) -> list[SilhouetteSequence]:
        wanted = None if subjects is None else set(subjects)
        out = []
        for e in self.entries:
            if wanted is None or e.subject_id in wanted:
                seq = self.load(e, size)
                if seq is not None:
                    out.append(seq)
        return out


def read_frame(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        with Image.open(path) as img:
            return np.asarray(img.convert("L"))
    return read_pgm(path)


def _frame_files(directory: Path) -> list[Path]:
    files = [p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in FRAME_SUFFIXES]
    return sorted(files, key=lambda p: (int(p.stem) if p.stem.isdigit() else float("inf"), p.name))


def _dirs(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.is_dir())


def load_dataset(root) -> DatasetIndex:
    """Index every non-empty sequence under ``root``; angles sort into view labels."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    found: list[tuple[Path, str, str, float, str, list[Path]]] = []
    skipped: list[str] = []
    for subject in _dirs(root):
        for condition in _dirs(subject):
            for angle_dir in _dirs(condition):
                try:
                    angle = float(angle_dir.name)
                except ValueError:
                    log.warning("ignoring non-angle directory %s", angle_dir)
                    continue
                seq_dirs = _dirs(angle_dir)
                candidates = [(d, d.name) for d in seq_dirs] if seq_dirs else [(angle_dir, "01")]
                for seq_dir, seq_id in candidates:
                    frames = _frame_files(seq_dir)
                    if not frames:
                        log.warning("skipping empty sequence %s", seq_dir)
                        skipped.append(str(seq_dir))
                        continue
                    found.append((seq_dir, subject.name, condition.name, angle, seq_id, frames))
    angles = sorted({f[3] for f in found})
    view = {a: i for i, a in enumerate(angles)}
    entries = [
        SequenceEntry(path, subj, cond, angle, seq_id, view[angle], tuple(frames))
        for path, subj, cond, angle, seq_id, frames in found
    ]
    if not entries:
        log.warning("no sequences found under %s", root)
    return DatasetIndex(root, entries, angles, skipped)


def _resample(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize that maps first/last rows and columns onto each other."""
    h, w = mask.shape
    rows = np.rint(np.arange(out_h) * ((h - 1) / max(out_h - 1, 1))).astype(int)
    cols = np.rint(np.arange(out_w) * ((w - 1) / max(out_w - 1, 1))).astype(int)
    return mask[np.ix_(rows, cols)]


def preprocess(frame: np.ndarray, height: int = 64, width: int = 44, threshold: int = 128) -> np.ndarray | None:
    """Align a raw silhouette: binarize, crop to its vertical extent, scale to
    ``height`` rows keeping the aspect ratio, centre the column mean, then
    pad or crop to ``width``.  Returns ``None`` for an all-background frame.
    """
    fg = np.asarray(frame) >= threshold
    rows = np.flatnonzero(fg.any(axis=1))
    if rows.size == 0:
        return None
    crop = fg[rows[0] : rows[-1] + 1]
    h, w = crop.shape
    if h != height:
        crop = _resample(crop, height, max(1, int(round(w * height / h))))
    _, xs = np.nonzero(crop)
    shift = int(round((width - 1) / 2 - xs.mean()))
    out = np.zeros((height, width), dtype=bool)
    lo, hi = max(0, -shift), min(crop.shape[1], width - shift)
    if hi > lo:
        out[:, lo + shift : hi + shift] = crop[:, lo:hi]
    if not out.any():
        return None
    return out.astype(np.uint8) * 255
