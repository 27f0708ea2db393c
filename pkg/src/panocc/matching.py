"""Bipartite assignment at the object level and at the voxel level.

The Hungarian solver is a shortest-augmenting-path implementation with dual
potentials that handles rectangular problems (rows <= cols). Brute-force
solvers live here too so tests and acceptance checks can share them.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from panocc.objects import GroundTruthObject, ObjectPrediction

BACKGROUND = -1


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.5
    lambda2: float = 0.02
    lambda3: float = 0.125
    lambda4: float = 0.0125

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda4"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass(frozen=True)
class Assignment:
    cols: np.ndarray  # cols[i] = column assigned to row i
    total_cost: float


@dataclass
class MatchResult:
    sigma_det: np.ndarray  # prediction index -> gt index or BACKGROUND
    sigma_occ: dict = field(default_factory=dict)  # prediction index -> (K,) voxel row or BACKGROUND
    total_cost: float = 0.0


def _check_costs(costs) -> np.ndarray:
    c = np.asarray(costs, dtype=float)
    if c.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {c.shape}")
    if c.shape[0] > c.shape[1]:
        raise ValueError(f"cost matrix needs rows <= cols, got {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix contains non-finite entries")
    return c


def _row_sum(c: np.ndarray, cols: Sequence[int]) -> float:
    return float(sum(c[i, j] for i, j in enumerate(cols)))


def hungarian_solve(costs) -> Assignment:
    """Minimum-cost assignment of every row to a distinct column."""
    c = _check_costs(costs)
    n, m = c.shape
    if n == 0:
        return Assignment(np.zeros(0, dtype=np.int64), 0.0)
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)  # owner[j] = 1-based row holding column j, 0 = free
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            reduced = c[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            candidates = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(candidates)) + 1
            delta = candidates[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    cols = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if owner[j]:
            cols[owner[j] - 1] = j - 1
    return Assignment(cols, _row_sum(c, cols))


def brute_force_assignment(costs) -> Assignment:
    """Exhaustive minimum over all injective row->column maps (small inputs only)."""
    c = _check_costs(costs)
    n, m = c.shape
    best_cols, best = None, np.inf
    for perm in itertools.permutations(range(m), n):
        total = _row_sum(c, perm)
        if total < best:
            best_cols, best = perm, total
    if best_cols is None:
        return Assignment(np.zeros(0, dtype=np.int64), 0.0)
    return Assignment(np.asarray(best_cols, dtype=np.int64), best)


# -- object level -------------------------------------------------------------

def object_match_cost(pred: ObjectPrediction, gt: Optional[GroundTruthObject],
                      weights: LossWeights = LossWeights()) -> float:
    if gt is None:
        return 0.0
    prob = pred.class_probs[gt.class_id]
    return weights.lambda1 * -prob + weights.lambda2 * float(np.linalg.norm(pred.center - gt.center))


def object_cost_matrix(class_probs: np.ndarray, centers: np.ndarray, gt_classes: np.ndarray,
                       gt_centers: np.ndarray, weights: LossWeights) -> np.ndarray:
    """(Q, Q) costs; columns beyond the real targets are zero-cost no-object padding."""
    q = len(centers)
    g = len(gt_classes)
    costs = np.zeros((q, q))
    if g:
        dist = np.linalg.norm(centers[:, None, :] - gt_centers[None, :, :], axis=-1)
        costs[:, :g] = weights.lambda1 * -class_probs[:, gt_classes] + weights.lambda2 * dist
    return costs


def match_objects_arrays(class_probs: np.ndarray, centers: np.ndarray, gt_classes: np.ndarray,
                         gt_centers: np.ndarray, weights: LossWeights) -> tuple[np.ndarray, float]:
    q, g = len(centers), len(gt_classes)
    if q < g:
        raise ValueError(f"need at least as many predictions as targets, got {q} < {g}")
    assignment = hungarian_solve(object_cost_matrix(class_probs, centers, gt_classes, gt_centers, weights))
    sigma = np.where(assignment.cols < g, assignment.cols, BACKGROUND)
    return sigma, assignment.total_cost


def match_objects(preds: Sequence[ObjectPrediction], gts: Sequence[GroundTruthObject],
                  weights: LossWeights = LossWeights()) -> np.ndarray:
    """sigma_det: for each prediction, the matched GT index or BACKGROUND."""
    if len(preds) < len(gts):
        raise ValueError(f"need at least as many predictions as targets, got {len(preds)} < {len(gts)}")
    probs = np.stack([p.class_probs for p in preds]) if preds else np.zeros((0, 1))
    centers = np.stack([p.center for p in preds]) if preds else np.zeros((0, 3))
    gt_classes = np.asarray([g.class_id for g in gts], dtype=np.int64)
    gt_centers = np.stack([g.center for g in gts]) if gts else np.zeros((0, 3))
    sigma, _ = match_objects_arrays(probs, centers, gt_classes, gt_centers, weights)
    return sigma


# -- voxel level --------------------------------------------------------------

def voxel_match_cost(vhat: Sequence[float], score: float, target: Optional[Sequence[float]]) -> float:
    """Cost of pairing one candidate point with a GT voxel center (or padding)."""
    if target is None:
        return 0.0
    return -float(score) + float(np.linalg.norm(np.asarray(vhat, float) - np.asarray(target, float)))


def voxel_cost_matrix(points: np.ndarray, scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """(n_targets, K) costs between real GT voxel centers and candidate points."""
    dist = np.linalg.norm(targets[:, None, :] - points[None, :, :], axis=-1)
    return dist - scores[None, :]


def match_voxels_arrays(offsets: np.ndarray, scores: np.ndarray, anchor: np.ndarray,
                        targets: np.ndarray) -> tuple[np.ndarray, float]:
    k, n = len(offsets), len(targets)
    if k < n:
        raise ValueError(f"K={k} offsets cannot cover {n} ground-truth voxels")
    sigma = np.full(k, BACKGROUND, dtype=np.int64)
    if n == 0:
        return sigma, 0.0
    points = np.asarray(anchor, float).reshape(1, 3) + offsets
    # Padding columns cost 0, so the K x K padded problem reduces to n x K.
    assignment = hungarian_solve(voxel_cost_matrix(points, scores, targets))
    sigma[assignment.cols] = np.arange(n)
    return sigma, assignment.total_cost


def match_voxels(pred: ObjectPrediction, gt: GroundTruthObject, anchor: Sequence[float]) -> np.ndarray:
    """sigma_occ: for each of the K offsets, the matched GT voxel row or BACKGROUND.

    All K candidates take part regardless of score.
    """
    sigma, _ = match_voxels_arrays(pred.offsets, pred.scores, np.asarray(anchor, float), gt.voxel_centers)
    return sigma


def padded_voxel_cost(points: np.ndarray, scores: np.ndarray, targets: np.ndarray, sigma: np.ndarray) -> float:
    return float(sum(voxel_match_cost(points[k], scores[k], None if j < 0 else targets[j])
                     for k, j in enumerate(sigma)))


def brute_force_voxel_match(offsets: np.ndarray, scores: np.ndarray, anchor: np.ndarray,
                            targets: np.ndarray) -> tuple[np.ndarray, float]:
    """Exhaustive minimum over all bijections between K offsets and the padded target list."""
    k, n = len(offsets), len(targets)
    if k < n:
        raise ValueError(f"K={k} offsets cannot cover {n} ground-truth voxels")
    points = np.asarray(anchor, float).reshape(1, 3) + offsets
    padded = list(range(n)) + [BACKGROUND] * (k - n)
    best_sigma, best = None, np.inf
    for perm in set(itertools.permutations(padded)):
        total = padded_voxel_cost(points, scores, targets, perm)
        if total < best:
            best_sigma, best = perm, total
    return np.asarray(best_sigma, dtype=np.int64), best
