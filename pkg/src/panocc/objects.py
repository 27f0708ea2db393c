"""Per-object predictions, ground truth objects, and instance rasterization."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from panocc.grid import EMPTY, GridSpec, VisibilityMask, voxel_centers, world_to_voxel_many

SCORE_THRESHOLD = 0.5


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass(eq=False)
class ObjectPrediction:
    """One query's decoded output.

    ``class_logits`` covers every class id; class 0 doubles as the
    no-object/background label.
    """

    class_logits: np.ndarray
    center: np.ndarray
    offsets: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        self.class_logits = np.asarray(self.class_logits, dtype=float)
        self.center = np.asarray(self.center, dtype=float).reshape(3)
        self.offsets = np.asarray(self.offsets, dtype=float).reshape(-1, 3)
        self.scores = np.asarray(self.scores, dtype=float).reshape(-1)
        if len(self.scores) != len(self.offsets):
            raise ValueError("one score per offset required")
        if np.any((self.scores < 0) | (self.scores > 1)):
            raise ValueError("scores must lie in [0, 1]")

    @property
    def k(self) -> int:
        return len(self.offsets)

    @property
    def class_probs(self) -> np.ndarray:
        return softmax(self.class_logits)

    def to_json(self) -> dict:
        return {
            "class_logits": self.class_logits.tolist(),
            "center": self.center.tolist(),
            "offsets": self.offsets.tolist(),
            "scores": self.scores.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "ObjectPrediction":
        return cls(d["class_logits"], d["center"], d["offsets"], d["scores"])


@dataclass(eq=False)
class GroundTruthObject:
    class_id: int
    voxels: np.ndarray
    voxel_centers: np.ndarray
    instance_id: int
    visible_voxel_count: int = 0

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.int64).reshape(-1, 3)
        self.voxel_centers = np.asarray(self.voxel_centers, dtype=float).reshape(-1, 3)
        if len(self.voxels) == 0:
            raise ValueError("ground-truth object needs at least one voxel")
        if len(self.voxels) != len(self.voxel_centers):
            raise ValueError("voxels and voxel_centers must align")

    @property
    def center(self) -> np.ndarray:
        """Centroid of the occupied voxel centers."""
        return self.voxel_centers.mean(axis=0)

    @classmethod
    def from_voxels(cls, spec: GridSpec, class_id: int, voxels, instance_id: int,
                    visibility: VisibilityMask | None = None) -> "GroundTruthObject":
        voxels = np.asarray(sorted(tuple(int(c) for c in v) for v in voxels), dtype=np.int64).reshape(-1, 3)
        visible = 0
        if visibility is not None:
            visible = int(visibility.visible[voxels[:, 0], voxels[:, 1], voxels[:, 2]].sum())
        return cls(class_id, voxels, voxel_centers(spec, voxels), instance_id, visible)

    def to_json(self) -> dict:
        return {
            "class_id": int(self.class_id),
            "instance_id": int(self.instance_id),
            "center": self.center.tolist(),
            "voxels": self.voxels.tolist(),
            "visible_voxel_count": int(self.visible_voxel_count),
        }

    @classmethod
    def from_json(cls, d: dict, spec: GridSpec) -> "GroundTruthObject":
        voxels = np.asarray(d["voxels"], dtype=np.int64).reshape(-1, 3)
        return cls(d["class_id"], voxels, voxel_centers(spec, voxels), d["instance_id"],
                   d.get("visible_voxel_count", 0))


def materialize_point_cloud(pred: ObjectPrediction, anchor: Sequence[float]) -> np.ndarray:
    """Points ``anchor + offset_k`` for every offset with score >= 0.5, shape (K', 3)."""
    keep = pred.scores >= SCORE_THRESHOLD
    return np.asarray(anchor, dtype=float).reshape(1, 3) + pred.offsets[keep]


@dataclass(frozen=True, eq=False)
class InstanceMap:
    """Dense instance ids (-1 = none) plus the class each id was predicted as."""

    spec: GridSpec
    ids: np.ndarray
    id_classes: dict

    def present_ids(self) -> set[int]:
        return {int(i) for i in np.unique(self.ids) if i >= 0}


def rasterize_instances(preds: Sequence[ObjectPrediction], spec: GridSpec, thing_mask: np.ndarray,
                        class_threshold: float = 0.5) -> InstanceMap:
    """Voxelize kept predictions at their predicted centers.

    Prediction ``i`` receives instance id ``i + 1``. Predictions whose argmax
    class is background (or any stuff class) or whose best thing probability
    is below ``class_threshold`` are dropped. On voxel collisions the point
    with the higher offset score wins, then the lower instance id.
    """
    ids = np.full(spec.dims, -1, dtype=np.int64)
    best = np.full(spec.dims, -np.inf)
    id_classes = {}
    thing_mask = np.asarray(thing_mask, dtype=bool)
    for i, pred in enumerate(preds):
        probs = pred.class_probs
        label = int(np.argmax(probs))
        if label == EMPTY or not thing_mask[label] or probs[label] < class_threshold:
            continue
        keep = pred.scores >= SCORE_THRESHOLD
        points = pred.center + pred.offsets[keep]
        scores = pred.scores[keep]
        idx, ok = world_to_voxel_many(spec, points)
        iid = i + 1
        for (x, y, z), s in zip(idx[ok], scores[ok]):
            # strict > keeps the earlier (lower) id on equal scores
            if s > best[x, y, z]:
                best[x, y, z] = s
                ids[x, y, z] = iid
        if np.any(ids == iid):
            id_classes[iid] = label
    return InstanceMap(spec, ids, id_classes)


def filter_trainable(objects: Sequence[GroundTruthObject]) -> list[GroundTruthObject]:
    """Keep objects with at least one voxel visible from the ego."""
    return [o for o in objects if o.visible_voxel_count >= 1]
