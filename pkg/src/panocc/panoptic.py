"""Merge a semantic baseline grid with rasterized instances by local majority voting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from panocc.grid import EMPTY, ClassTable, PanopticGrid, SemanticGrid
from panocc.objects import InstanceMap

DEFAULT_RADIUS = 9


@dataclass(frozen=True)
class PanopticConfig:
    radius: int = DEFAULT_RADIUS

    def __post_init__(self):
        if int(self.radius) != self.radius or self.radius < 0:
            raise ValueError(f"radius must be a non-negative integer, got {self.radius}")


def manhattan_ball(radius: int, max_extent=None) -> np.ndarray:
    """Integer offsets with L1 norm <= radius, x then y then z ascending, shape (S, 3)."""
    r = int(radius)
    ext = [r, r, r] if max_extent is None else [min(r, int(e)) for e in max_extent]
    ax = [np.arange(-e, e + 1) for e in ext]
    grid = np.stack(np.meshgrid(*ax, indexing="ij"), -1).reshape(-1, 3)
    return grid[np.abs(grid).sum(axis=1) <= r]


def vote(ids: np.ndarray, dists: np.ndarray) -> int:
    """Most frequent id (>= 0); ties go to the closer id, then the smaller id. -1 if none."""
    valid = ids >= 0
    if not valid.any():
        return -1
    ids, dists = ids[valid], dists[valid]
    uniq, inverse, counts = np.unique(ids, return_inverse=True, return_counts=True)
    nearest = np.full(len(uniq), np.iinfo(np.int64).max)
    np.minimum.at(nearest, inverse, dists)
    # lexsort: last key is primary
    order = np.lexsort((uniq, nearest, -counts))
    return int(uniq[order[0]])


def merge_panoptic(baseline: SemanticGrid, instances: InstanceMap, cfg: PanopticConfig,
                   classes: ClassTable) -> PanopticGrid:
    """Assign instance ids to the baseline's thing voxels.

    Each thing voxel takes the most voted id among instance-map voxels within
    Manhattan distance ``cfg.radius``; without any id in range it becomes empty.
    Stuff and empty voxels are copied unchanged. The baseline class is kept.
    """
    if baseline.spec != instances.spec:
        raise ValueError("baseline and instance map grids differ")
    spec = baseline.spec
    labels = np.array(baseline.labels)
    ids_out = np.full(spec.dims, -1, dtype=np.int64)
    thing = classes.thing_mask()[labels]
    targets = np.argwhere(thing)
    if len(targets):
        dims = np.asarray(spec.dims)
        ball = manhattan_ball(cfg.radius, dims - 1)
        dists = np.abs(ball).sum(axis=1)
        src = instances.ids
        for t in targets:
            nb = t + ball
            ok = np.all((nb >= 0) & (nb < dims), axis=1)
            nbv = nb[ok]
            winner = vote(src[nbv[:, 0], nbv[:, 1], nbv[:, 2]], dists[ok])
            if winner < 0:
                labels[tuple(t)] = EMPTY
            else:
                ids_out[tuple(t)] = winner
    return PanopticGrid(spec, labels, ids_out, classes, check=False)
