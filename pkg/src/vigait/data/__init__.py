from .dataset import (
    DatasetIndex,
    SequenceEntry,
    SilhouetteSequence,
    load_dataset,
    preprocess,
    read_frame,
)
from .pgm import PgmFormatError, read_pgm, write_pgm
from .sampler import Batch, sample_batch, sample_frames
from .synth import WalkerParams, generate, render, sample_subject

__all__ = [
    "Batch",
    "DatasetIndex",
    "PgmFormatError",
    "SequenceEntry",
    "SilhouetteSequence",
    "WalkerParams",
    "generate",
    "load_dataset",
    "preprocess",
    "read_frame",
    "read_pgm",
    "render",
    "sample_batch",
    "sample_frames",
    "sample_subject",
    "write_pgm",
]
