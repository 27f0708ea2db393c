"""Voxel grid data model: specs, label containers, voxelization and visibility."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

Index3 = tuple[int, int, int]

EMPTY = 0


@dataclass(frozen=True)
class ClassTable:
    """Ordered class names; index 0 is always the empty class."""

    names: tuple[str, ...]
    is_thing: tuple[bool, ...]

    def __post_init__(self):
        if len(self.names) != len(self.is_thing):
            raise ValueError("names and is_thing must have equal length")
        if len(self.names) < 3:
            raise ValueError("class table needs empty + at least one thing and one stuff class")
        if self.is_thing[EMPTY]:
            raise ValueError("class 0 is the empty class and cannot be a thing")
        if not any(self.is_thing[1:]) or all(self.is_thing[1:]):
            raise ValueError("class table needs at least one thing and one stuff class")

    def __len__(self) -> int:
        return len(self.names)

    @property
    def thing_ids(self) -> list[int]:
        return [c for c, t in enumerate(self.is_thing) if t]

    @property
    def stuff_ids(self) -> list[int]:
        return [c for c, t in enumerate(self.is_thing) if c != EMPTY and not t]

    def thing_mask(self) -> np.ndarray:
        return np.asarray(self.is_thing, dtype=bool)

    def to_json(self) -> dict:
        return {"names": list(self.names), "is_thing": list(self.is_thing)}

    @classmethod
    def from_json(cls, d: dict) -> "ClassTable":
        return cls(tuple(d["names"]), tuple(bool(t) for t in d["is_thing"]))


DEFAULT_CLASSES = ClassTable(
    names=("empty", "car", "pedestrian", "bicycle", "driveable_surface", "vegetation"),
    is_thing=(False, True, True, True, False, False),
)


@dataclass(frozen=True)
class GridSpec:
    origin: tuple[float, float, float] = (-10.0, -10.0, -1.6)
    voxel_size: tuple[float, float, float] = (0.4, 0.4, 0.4)
    dims: tuple[int, int, int] = (50, 50, 8)

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "voxel_size", tuple(float(v) for v in self.voxel_size))
        object.__setattr__(self, "dims", tuple(int(v) for v in self.dims))
        if len(self.origin) != 3 or len(self.voxel_size) != 3 or len(self.dims) != 3:
            raise ValueError("origin, voxel_size and dims must be 3-vectors")
        if any(s <= 0 for s in self.voxel_size):
            raise ValueError(f"voxel_size must be positive, got {self.voxel_size}")
        if any(d < 1 for d in self.dims):
            raise ValueError(f"dims must be >= 1, got {self.dims}")

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    @property
    def upper(self) -> np.ndarray:
        """World coordinate of the grid's maximum corner."""
        return np.asarray(self.origin) + np.asarray(self.voxel_size) * np.asarray(self.dims)

    def contains(self, p: Sequence[float]) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p >= np.asarray(self.origin)) and np.all(p < self.upper))

    def to_json(self) -> dict:
        return {"origin": list(self.origin), "voxel_size": list(self.voxel_size), "dims": list(self.dims)}

    @classmethod
    def from_json(cls, d: dict) -> "GridSpec":
        return cls(tuple(d["origin"]), tuple(d["voxel_size"]), tuple(d["dims"]))


def world_to_voxel(spec: GridSpec, p: Sequence[float]) -> Optional[Index3]:
    """Index of the voxel containing ``p``, or None when outside the grid.

    Points on a shared face resolve to the lower voxel's upper neighbour by
    floor semantics, so the maximum face of the grid is excluded.
    """
    idx, ok = world_to_voxel_many(spec, np.asarray(p, dtype=float).reshape(1, 3))
    if not ok[0]:
        return None
    return tuple(int(v) for v in idx[0])


def world_to_voxel_many(spec: GridSpec, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized world_to_voxel: returns (N, 3) int indices and an in-range mask."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    idx = np.floor((points - np.asarray(spec.origin)) / np.asarray(spec.voxel_size)).astype(np.int64)
    ok = np.all((idx >= 0) & (idx < np.asarray(spec.dims)), axis=1)
    return idx, ok


def voxel_center(spec: GridSpec, idx: Sequence[int]) -> np.ndarray:
    idx = tuple(int(i) for i in idx)
    if any(i < 0 or i >= d for i, d in zip(idx, spec.dims)):
        raise IndexError(f"voxel index {idx} outside grid dims {spec.dims}")
    return voxel_centers(spec, np.asarray([idx]))[0]


def voxel_centers(spec: GridSpec, idx: np.ndarray) -> np.ndarray:
    """Vectorized voxel_center with no range check."""
    idx = np.asarray(idx, dtype=float).reshape(-1, 3)
    return np.asarray(spec.origin) + (idx + 0.5) * np.asarray(spec.voxel_size)


@dataclass(frozen=True)
class Voxelization:
    indices: frozenset
    dropped: int


def voxelize_points(spec: GridSpec, points: Iterable[Sequence[float]]) -> Voxelization:
    pts = np.asarray(list(points), dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        return Voxelization(frozenset(), 0)
    idx, ok = world_to_voxel_many(spec, pts)
    kept = frozenset(tuple(int(v) for v in row) for row in idx[ok])
    return Voxelization(kept, int((~ok).sum()))


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class SemanticGrid:
    spec: GridSpec
    labels: np.ndarray
    n_classes: int = len(DEFAULT_CLASSES)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.shape != self.spec.dims:
            raise ValueError(f"labels shape {labels.shape} != dims {self.spec.dims}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        object.__setattr__(self, "labels", _frozen(labels.astype(np.int64)))

    def occupied(self) -> np.ndarray:
        return self.labels != EMPTY


@dataclass(frozen=True, eq=False)
class PanopticGrid:
    """Semantic labels plus instance ids; -1 marks voxels without an instance."""

    spec: GridSpec
    labels: np.ndarray
    instance_ids: np.ndarray
    classes: ClassTable = DEFAULT_CLASSES
    check: bool = field(default=True, repr=False)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        ids = np.asarray(self.instance_ids)
        if labels.shape != self.spec.dims or ids.shape != self.spec.dims:
            raise ValueError("labels and instance_ids must match spec.dims")
        object.__setattr__(self, "labels", _frozen(labels.astype(np.int64)))
        object.__setattr__(self, "instance_ids", _frozen(ids.astype(np.int64)))
        if self.check:
            problems = self.violations()
            if problems:
                raise ValueError("; ".join(problems))

    def violations(self) -> list[str]:
        out = []
        has_id = self.instance_ids >= 0
        if np.any(self.instance_ids < -1):
            out.append("instance ids must be >= 0 or -1 for none")
        thing = self.classes.thing_mask()[self.labels]
        if np.any(has_id & ~thing):
            out.append(f"{int((has_id & ~thing).sum())} voxels carry an id on a non-thing class")
        ids, labels = self.instance_ids[has_id], self.labels[has_id]
        for i in np.unique(ids):
            cls = np.unique(labels[ids == i])
            if len(cls) > 1:
                out.append(f"instance {int(i)} spans classes {cls.tolist()}")
        return out

    def semantic(self) -> SemanticGrid:
        return SemanticGrid(self.spec, self.labels, len(self.classes))


@dataclass(frozen=True, eq=False)
class VisibilityMask:
    spec: GridSpec
    visible: np.ndarray

    def __post_init__(self):
        vis = np.asarray(self.visible, dtype=bool)
        if vis.shape != self.spec.dims:
            raise ValueError(f"mask shape {vis.shape} != dims {self.spec.dims}")
        object.__setattr__(self, "visible", _frozen(vis))


def compute_visibility(grid: SemanticGrid, ego: Sequence[float]) -> VisibilityMask:
    """Ray-cast visibility from a single ego point to every voxel center.

    A voxel is visible iff no voxel strictly before it on the ray (3D DDA
    traversal) is occupied. The voxel holding the ego point never occludes.
    All rays are traversed in lockstep.
    """
    spec = grid.spec
    if not spec.contains(ego):
        raise ValueError(f"ego {tuple(ego)} lies outside the grid")
    dims = np.asarray(spec.dims)
    start = (np.asarray(ego, dtype=float) - np.asarray(spec.origin)) / np.asarray(spec.voxel_size)
    ego_cell = np.floor(start).astype(np.int64)

    targets = np.stack(np.meshgrid(*[np.arange(d) for d in spec.dims], indexing="ij"), -1).reshape(-1, 3)
    d = targets + 0.5 - start
    step = np.sign(d).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(d != 0, 1.0 / np.abs(d), np.inf)
        boundary = ego_cell + (step > 0)
        t_max = np.where(d != 0, (boundary - start) / d, np.inf)
    t_delta = inv

    occ = grid.occupied()
    n = len(targets)
    cell = np.broadcast_to(ego_cell, (n, 3)).copy()
    visible = np.ones(n, dtype=bool)
    active = np.any(cell != targets, axis=1)
    rows = np.arange(n)
    for _ in range(int(dims.sum()) + 3):
        if not active.any():
            break
        a = rows[active]
        axis = np.argmin(t_max[a], axis=1)
        cell[a, axis] += step[a, axis]
        t_max[a, axis] += t_delta[a, axis]
        c = cell[a]
        inside = np.all((c >= 0) & (c < dims), axis=1)
        done = np.all(c == targets[a], axis=1) | ~inside
        blocking = inside & ~done
        cb = c[blocking]
        hit = np.zeros(len(a), dtype=bool)
        hit[blocking] = occ[cb[:, 0], cb[:, 1], cb[:, 2]]
        visible[a[hit]] = False
        active[a[done | hit]] = False
    else:
        raise RuntimeError("ray traversal did not terminate")
    return VisibilityMask(spec, visible.reshape(spec.dims))
