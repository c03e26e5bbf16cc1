"""Per-view projection bank.

The bank holds one group of strip matrices per discrete view.  A sequence's
strip features are multiplied by the matrices of the view it was routed to
(normally the predicted view).  Each matrix is its own parameter tensor, so a
view that no sequence in a batch selects never enters the tape and receives
no gradient at all.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor

PLACEMENTS = ("replace-separate-fc", "after-separate-fc")
INIT_SCHEMES = ("identity-perturbed", "identity", "xavier")


@dataclass
class FinalFeature:
    rows: Tensor
    source_view: int | np.ndarray


class ProjectionBank:
    def __init__(
        self,
        matrices: list[list[Tensor]],
        placement: str = "after-separate-fc",
        shared: bool = False,
        n: int | None = None,
    ):
        if placement not in PLACEMENTS:
            raise ValueError(f"placement must be one of {PLACEMENTS}, got {placement!r}")
        if not matrices or not matrices[0]:
            raise ValueError("empty projection bank")
        width = len(matrices[0])
        if any(len(g) != width for g in matrices):
            raise ValueError("every view needs the same number of strip matrices")
        if shared and width != 1:
            raise ValueError("a shared bank holds exactly one matrix per view")
        shape = matrices[0][0].shape
        if any(m.shape != shape or m.ndim != 2 for g in matrices for m in g):
            raise DimensionError("all bank matrices must be 2-D with one common shape")
        self.matrices = matrices
        self.placement = placement
        self.shared = shared
        self.n = width if n is None else int(n)
        if not shared and self.n != width:
            raise ValueError(f"bank has {width} strip matrices per view, expected {self.n}")

    @classmethod
    def init(
        cls,
        num_views: int,
        n: int,
        dim: int,
        scheme: str = "identity-perturbed",
        eps: float = 0.01,
        rng=None,
        placement: str = "after-separate-fc",
        shared: bool = False,
        in_dim: int | None = None,
    ) -> "ProjectionBank":
        """Build an ``M x n`` (``M x 1`` when shared) grid of ``dim x in_dim`` matrices."""
        if min(num_views, n, dim) < 1:
            raise ValueError("num_views, n and dim must be >= 1")
        if scheme not in INIT_SCHEMES:
            raise ValueError(f"unknown init scheme {scheme!r}")
        in_dim = dim if in_dim is None else in_dim
        rng = rng if rng is not None else np.random.default_rng(0)
        width = 1 if shared else n
        groups = []
        for v in range(num_views):
            group = []
            for i in range(width):
                if scheme == "xavier":
                    w = rng.normal(0.0, np.sqrt(2.0 / (dim + in_dim)), (dim, in_dim))
                else:
                    w = np.eye(dim, in_dim)
                    if scheme == "identity-perturbed" and eps:
                        w = w + eps * rng.normal(size=(dim, in_dim))
                group.append(Tensor(w, requires_grad=True, name=f"bank.v{v}.s{i}"))
            groups.append(group)
        return cls(groups, placement=placement, shared=shared, n=n)

    @property
    def num_views(self) -> int:
        return len(self.matrices)

    @property
    def dim(self) -> int:
        return self.matrices[0][0].shape[0]

    @property
    def in_dim(self) -> int:
        return self.matrices[0][0].shape[1]

    def parameters(self) -> dict[str, Tensor]:
        return {m.name: m for g in self.matrices for m in g}

    def select(self, view: int) -> list[Tensor]:
        """The strip matrices of ``view`` (the parameter objects themselves)."""
        if not 0 <= view < self.num_views:
            raise IndexError(f"view {view} out of range for a bank of {self.num_views} views")
        group = self.matrices[view]
        return [group[0]] * self.n if self.shared else list(group)

    def matrix(self, view: int, strip: int) -> np.ndarray:
        if not 0 <= strip < self.n:
            raise IndexError(f"strip {strip} out of range for {self.n} strips")
        return self.select(view)[strip].data


def relative_difference(za: np.ndarray, zb: np.ndarray) -> float:
    """``||za - zb||_F / ||za||_F``."""
    return float(np.linalg.norm(za - zb) / np.linalg.norm(za))


def difference_summary(bank: ProjectionBank) -> list[tuple[int, int, int, float]]:
    """``(strip, a, b, relative difference)`` for every strip and view pair ``a < b``."""
    out = []
    for i in range(bank.n):
        for a in range(bank.num_views):
            for b in range(a + 1, bank.num_views):
                out.append((i, a, b, relative_difference(bank.matrix(a, i), bank.matrix(b, i))))
    return out


def project(hpm: Tensor, group: Sequence[Tensor], source_view: int = -1) -> FinalFeature:
    """``rows[i] = group[i] @ hpm[i]`` for one ``(n, D)`` feature."""
    if len(group) != hpm.shape[0]:
        raise DimensionError(f"{len(group)} matrices for {hpm.shape[0]} strips")
    if hpm.ndim != 2 or group[0].shape[1] != hpm.shape[1]:
        raise DimensionError(f"matrices {group[0].shape} do not accept features {hpm.shape}")
    n, d_in = hpm.shape
    mats = ad.stack(list(group))
    out = ad.matmul(mats, ad.reshape(hpm, (n, d_in, 1)))
    return FinalFeature(ad.reshape(out, (n, mats.shape[1])), source_view)


def project_batch(hpm: Tensor, bank: ProjectionBank, views) -> FinalFeature:
    """Project a ``(B, n, D)`` batch, sequence ``b`` through ``bank.select(views[b])``."""
    views = np.asarray(views, dtype=int).reshape(-1)
    b, n, d_in = hpm.shape
    if len(views) != b:
        raise DimensionError(f"{len(views)} views for a batch of {b}")
    if n != bank.n or d_in != bank.in_dim:
        raise DimensionError(f"bank expects ({bank.n}, {bank.in_dim}) features, got ({n}, {d_in})")
    mats = [m for v in views for m in bank.select(int(v))]
    stacked = ad.reshape(ad.stack(mats), (b, n, bank.dim, d_in))
    out = ad.matmul(stacked, ad.reshape(hpm, (b, n, d_in, 1)))
    return FinalFeature(ad.reshape(out, (b, n, bank.dim)), views)
