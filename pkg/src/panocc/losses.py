"""Differentiable losses for set prediction of offset-based object shapes.

All tensors are float64 torch tensors; autograd provides the backward pass.
Matching runs on detached values and is treated as a constant.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from panocc.matching import (
    BACKGROUND,
    LossWeights,
    MatchResult,
    match_objects_arrays,
    match_voxels_arrays,
)
from panocc.objects import GroundTruthObject, ObjectPrediction

EPS = 1e-7
FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0

DECOUPLED = "decoupled"
COUPLED = "coupled"
ANCHOR_MODES = (DECOUPLED, COUPLED)

LOSS_COLUMNS = ("l_cls", "l_dist_center", "l_focal_occ", "l_dist_offsets", "l_objects")


def _tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=float), dtype=torch.float64)


def focal_loss(p, target, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> torch.Tensor:
    """Elementwise binary focal loss on probabilities; ``target`` is 0/1."""
    p = _tensor(p).clamp(EPS, 1.0 - EPS)
    y = (_tensor(target) > 0.5).to(p.dtype)
    p_t = y * p + (1.0 - y) * (1.0 - p)
    alpha_t = y * alpha + (1.0 - y) * (1.0 - alpha)
    return -alpha_t * (1.0 - p_t) ** gamma * torch.log(p_t)


def safe_norm(x: torch.Tensor) -> torch.Tensor:
    """Euclidean norm over the last axis with a zero (sub)gradient at the origin."""
    sq = (x * x).sum(-1)
    pos = sq > 0
    root = torch.sqrt(torch.where(pos, sq, torch.ones_like(sq)))
    return torch.where(pos, root, torch.zeros_like(sq))


@dataclass
class PredictionBatch:
    """Q predictions as tensors: logits (Q, C), centers (Q, 3), offsets (Q, K, 3), scores (Q, K)."""

    class_logits: torch.Tensor
    centers: torch.Tensor
    offsets: torch.Tensor
    scores: torch.Tensor

    @property
    def q(self) -> int:
        return self.centers.shape[0]

    @property
    def k(self) -> int:
        return self.offsets.shape[1]

    def class_probs(self) -> torch.Tensor:
        return torch.softmax(self.class_logits, dim=-1)

    def to_objects(self) -> list[ObjectPrediction]:
        logits = self.class_logits.detach().numpy()
        centers = self.centers.detach().numpy()
        offsets = self.offsets.detach().numpy()
        scores = self.scores.detach().numpy()
        return [ObjectPrediction(logits[i], centers[i], offsets[i], scores[i]) for i in range(self.q)]

    @classmethod
    def from_objects(cls, preds: Sequence[ObjectPrediction]) -> "PredictionBatch":
        return cls(
            _tensor(np.stack([p.class_logits for p in preds])),
            _tensor(np.stack([p.center for p in preds])),
            _tensor(np.stack([p.offsets for p in preds])),
            _tensor(np.stack([p.scores for p in preds])),
        )


@dataclass
class TargetSet:
    """Ground-truth objects packed for loss evaluation."""

    classes: np.ndarray
    centers: np.ndarray
    voxel_centers: list

    @classmethod
    def from_objects(cls, gts: Sequence[GroundTruthObject]) -> "TargetSet":
        classes = np.asarray([g.class_id for g in gts], dtype=np.int64)
        centers = np.stack([g.center for g in gts]) if gts else np.zeros((0, 3))
        return cls(classes, centers, [g.voxel_centers for g in gts])

    def __len__(self) -> int:
        return len(self.classes)


@dataclass
class LossBreakdown:
    l_cls: torch.Tensor
    l_dist_center: torch.Tensor
    l_focal_occ: torch.Tensor
    l_dist_offsets: torch.Tensor
    l_det: torch.Tensor
    l_occ: torch.Tensor
    l_objects: torch.Tensor
    match: Optional[MatchResult] = None

    def as_floats(self) -> dict:
        names = ("l_cls", "l_dist_center", "l_focal_occ", "l_dist_offsets", "l_det", "l_occ", "l_objects")
        return {n: float(getattr(self, n).detach()) for n in names}


def _targets(gts) -> TargetSet:
    return gts if isinstance(gts, TargetSet) else TargetSet.from_objects(gts)


def classification_loss(batch: PredictionBatch, gts, sigma_det: np.ndarray) -> torch.Tensor:
    """Mean over queries of the class-wise focal sum against one-hot targets."""
    gts = _targets(gts)
    probs = batch.class_probs()
    target_cls = np.zeros(batch.q, dtype=np.int64)
    matched = sigma_det >= 0
    target_cls[matched] = gts.classes[sigma_det[matched]]
    onehot = torch.nn.functional.one_hot(torch.as_tensor(target_cls), probs.shape[1]).to(torch.float64)
    return focal_loss(probs, onehot).sum(-1).mean()


def center_distance_loss(batch: PredictionBatch, gts, sigma_det: np.ndarray) -> torch.Tensor:
    gts = _targets(gts)
    rows = np.flatnonzero(sigma_det >= 0)
    if len(rows) == 0:
        return batch.centers.sum() * 0.0
    target = _tensor(gts.centers[sigma_det[rows]])
    return safe_norm(batch.centers[rows] - target).mean()


def detection_loss(batch: PredictionBatch, gts, sigma_det: np.ndarray,
                   weights: LossWeights = LossWeights()) -> torch.Tensor:
    return (weights.lambda1 * classification_loss(batch, gts, sigma_det)
            + weights.lambda2 * center_distance_loss(batch, gts, sigma_det))


def _anchor(batch: PredictionBatch, gts: TargetSet, i: int, j: int, anchor_mode: str) -> torch.Tensor:
    if anchor_mode == DECOUPLED:
        return _tensor(gts.centers[j])
    if anchor_mode == COUPLED:
        return batch.centers[i]
    raise ValueError(f"unknown anchor mode {anchor_mode!r}")


def occupancy_terms(batch: PredictionBatch, i: int, voxel_centers: np.ndarray, anchor: torch.Tensor,
                    sigma_occ: np.ndarray, form: str = "focal") -> tuple[torch.Tensor, torch.Tensor]:
    """(score term, distance term) for one matched pair, each averaged."""
    scores = batch.scores[i]
    hit = sigma_occ >= 0
    if form == "focal":
        score_term = focal_loss(scores, hit.astype(float)).mean()
    elif form == "literal":
        score_term = -torch.log(scores.clamp(EPS, 1.0 - EPS)).mean()
    else:
        raise ValueError(f"unknown occupancy form {form!r}")
    rows = np.flatnonzero(hit)
    if len(rows) == 0:
        return score_term, scores.sum() * 0.0
    points = anchor + batch.offsets[i, rows]
    dist = safe_norm(points - _tensor(voxel_centers[sigma_occ[rows]])).mean()
    return score_term, dist


def occupancy_loss(batch: PredictionBatch, i: int, gt: GroundTruthObject, sigma_occ: np.ndarray,
                   anchor_mode: str = DECOUPLED, weights: LossWeights = LossWeights(),
                   form: str = "focal") -> torch.Tensor:
    """Weighted occupancy loss for prediction ``i`` against its matched object."""
    if anchor_mode == DECOUPLED:
        anchor = _tensor(gt.center)
    elif anchor_mode == COUPLED:
        anchor = batch.centers[i]
    else:
        raise ValueError(f"unknown anchor mode {anchor_mode!r}")
    score_term, dist = occupancy_terms(batch, i, gt.voxel_centers, anchor, sigma_occ, form)
    return weights.lambda3 * score_term + weights.lambda4 * dist


def compute_matching(batch: PredictionBatch, gts, weights: LossWeights = LossWeights(),
                     anchor_mode: str = DECOUPLED) -> MatchResult:
    gts = _targets(gts)
    probs = batch.class_probs().detach().numpy()
    centers = batch.centers.detach().numpy()
    sigma_det, total = match_objects_arrays(probs, centers, gts.classes, gts.centers, weights)
    offsets = batch.offsets.detach().numpy()
    scores = batch.scores.detach().numpy()
    sigma_occ = {}
    for i in np.flatnonzero(sigma_det >= 0):
        j = sigma_det[i]
        anchor = gts.centers[j] if anchor_mode == DECOUPLED else centers[i]
        sigma_occ[int(i)], cost = match_voxels_arrays(offsets[i], scores[i], anchor, gts.voxel_centers[j])
        total += cost
    return MatchResult(sigma_det, sigma_occ, total)


def objects_loss(batch: PredictionBatch, gts, weights: LossWeights = LossWeights(),
                 anchor_mode: str = DECOUPLED, form: str = "focal",
                 match: Optional[MatchResult] = None) -> LossBreakdown:
    """Detection plus occupancy loss. Pass ``match`` to hold the assignment fixed."""
    if anchor_mode not in ANCHOR_MODES:
        raise ValueError(f"unknown anchor mode {anchor_mode!r}")
    gts = _targets(gts)
    if match is None:
        match = compute_matching(batch, gts, weights, anchor_mode)
    sigma_det = match.sigma_det
    l_cls = classification_loss(batch, gts, sigma_det)
    l_dist_center = center_distance_loss(batch, gts, sigma_det)
    score_terms, dist_terms = [], []
    for i in sorted(match.sigma_occ):
        j = int(sigma_det[i])
        anchor = _anchor(batch, gts, i, j, anchor_mode)
        s, d = occupancy_terms(batch, i, gts.voxel_centers[j], anchor, match.sigma_occ[i], form)
        score_terms.append(s)
        dist_terms.append(d)
    if score_terms:
        l_focal_occ = torch.stack(score_terms).mean()
        l_dist_offsets = torch.stack(dist_terms).mean()
    else:
        l_focal_occ = batch.scores.sum() * 0.0
        l_dist_offsets = batch.offsets.sum() * 0.0
    l_det = weights.lambda1 * l_cls + weights.lambda2 * l_dist_center
    l_occ = weights.lambda3 * l_focal_occ + weights.lambda4 * l_dist_offsets
    return LossBreakdown(l_cls, l_dist_center, l_focal_occ, l_dist_offsets, l_det, l_occ, l_det + l_occ, match)
