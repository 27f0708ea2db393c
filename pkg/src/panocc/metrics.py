"""Occupancy IoU, semantic mIoU and panoptic quality on voxel grids."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from panocc.grid import EMPTY, ClassTable, PanopticGrid, VisibilityMask

CSV_COLUMNS = ("masked", "iou", "miou", "pq", "rq", "sq", "pq_things", "rq_things", "sq_things",
               "pq_stuff", "rq_stuff", "sq_stuff")

TP_IOU = 0.5


def _labels(grid) -> np.ndarray:
    return np.asarray(grid.labels)


def _check_specs(pred, gt, mask=None):
    if pred.spec != gt.spec:
        raise ValueError("prediction and ground truth grids differ")
    if mask is not None and mask.spec != gt.spec:
        raise ValueError("visibility mask grid differs from ground truth")


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def binary_iou(pred, gt, mask: Optional[VisibilityMask] = None) -> float:
    """Occupied-vs-empty IoU over voxels passing the mask; 1.0 when both are empty."""
    _check_specs(pred, gt, mask)
    keep = np.ones(gt.spec.dims, dtype=bool) if mask is None else mask.visible
    return _iou((_labels(pred) != EMPTY) & keep, (_labels(gt) != EMPTY) & keep)


def mean_iou(pred, gt, mask: Optional[VisibilityMask] = None, n_classes: Optional[int] = None,
             absent_as_zero: bool = False) -> tuple[dict, float]:
    """Per-class IoU over non-empty classes and their mean.

    Classes absent from both grids (under the mask) are left out of the mean
    unless ``absent_as_zero`` is set.
    """
    _check_specs(pred, gt, mask)
    p, g = _labels(pred), _labels(gt)
    if mask is not None:
        p, g = p[mask.visible], g[mask.visible]
    if n_classes is None:
        n_classes = int(max(p.max(initial=0), g.max(initial=0))) + 1
    per_class = {}
    for c in range(1, n_classes):
        pc, gc = p == c, g == c
        if not pc.any() and not gc.any():
            if absent_as_zero:
                per_class[c] = 0.0
            continue
        per_class[c] = _iou(pc, gc)
    miou = float(np.mean(list(per_class.values()))) if per_class else 1.0
    return per_class, miou


@dataclass
class ClassPQ:
    pq: float
    sq: float
    rq: float
    tp: int
    fp: int
    fn: int


def _segments(labels: np.ndarray, ids: np.ndarray, c: int, thing: bool) -> np.ndarray:
    """Segment key per voxel for class ``c``: -1 outside; the id for things, 0 for the stuff region."""
    key = np.full(labels.shape, -1, dtype=np.int64)
    in_class = labels == c
    if thing:
        sel = in_class & (ids >= 0)
        key[sel] = ids[sel]
    else:
        key[in_class] = 0
    return key


def class_pq(pred_key: np.ndarray, gt_key: np.ndarray) -> ClassPQ:
    p_ids, p_sizes = np.unique(pred_key[pred_key >= 0], return_counts=True)
    g_ids, g_sizes = np.unique(gt_key[gt_key >= 0], return_counts=True)
    both = (pred_key >= 0) & (gt_key >= 0)
    pairs, inter = np.unique(np.stack([pred_key[both], gt_key[both]], 1), axis=0, return_counts=True)
    p_size = dict(zip(p_ids.tolist(), p_sizes.tolist()))
    g_size = dict(zip(g_ids.tolist(), g_sizes.tolist()))
    matched_p, matched_g, ious = set(), set(), []
    for (pi, gi), n in zip(pairs.tolist(), inter.tolist()):
        iou = n / (p_size[pi] + g_size[gi] - n)
        if iou > TP_IOU:
            if pi in matched_p or gi in matched_g:
                raise AssertionError("IoU > 0.5 matching is not unique")
            matched_p.add(pi)
            matched_g.add(gi)
            ious.append(iou)
    tp = len(ious)
    fp = len(p_size) - tp
    fn = len(g_size) - tp
    denom = tp + 0.5 * fp + 0.5 * fn
    iou_sum = float(sum(ious))
    pq = iou_sum / denom if denom else 0.0
    rq = tp / denom if denom else 0.0
    sq = iou_sum / tp if tp else 0.0
    if abs(pq - sq * rq) > 1e-9:
        raise AssertionError(f"PQ {pq} != SQ*RQ {sq * rq}")
    return ClassPQ(pq, sq, rq, tp, fp, fn)


@dataclass
class PQResult:
    per_class: dict
    pq: float
    rq: float
    sq: float
    pq_things: float
    rq_things: float
    sq_things: float
    pq_stuff: float
    rq_stuff: float
    sq_stuff: float
    violations: list = field(default_factory=list)


def _mean(values) -> float:
    values = list(values)
    return float(np.mean(values)) if values else 0.0


def panoptic_quality(pred: PanopticGrid, gt: PanopticGrid, classes: ClassTable) -> PQResult:
    """PQ/SQ/RQ per class, averaged over classes present in either grid.

    Thing segments are (class, instance id) groups; each stuff class forms one
    segment. Voxels of a thing class without an id belong to no segment.
    """
    _check_specs(pred, gt)
    violations = [f"pred: {v}" for v in pred.violations()] + [f"gt: {v}" for v in gt.violations()]
    pl, pi = _labels(pred), np.asarray(pred.instance_ids)
    gl, gi = _labels(gt), np.asarray(gt.instance_ids)
    per_class = {}
    for c in range(1, len(classes)):
        thing = classes.is_thing[c]
        pk = _segments(pl, pi, c, thing)
        gk = _segments(gl, gi, c, thing)
        if (pk < 0).all() and (gk < 0).all():
            continue
        per_class[c] = class_pq(pk, gk)
    things = [v for c, v in per_class.items() if classes.is_thing[c]]
    stuff = [v for c, v in per_class.items() if not classes.is_thing[c]]
    allc = list(per_class.values())
    return PQResult(
        per_class,
        _mean(v.pq for v in allc), _mean(v.rq for v in allc), _mean(v.sq for v in allc),
        _mean(v.pq for v in things), _mean(v.rq for v in things), _mean(v.sq for v in things),
        _mean(v.pq for v in stuff), _mean(v.rq for v in stuff), _mean(v.sq for v in stuff),
        violations,
    )


@dataclass
class EvalReport:
    iou: float
    miou: float
    per_class_iou: dict
    pq: float
    rq: float
    sq: float
    pq_things: float
    rq_things: float
    sq_things: float
    pq_stuff: float
    rq_stuff: float
    sq_stuff: float
    masked: bool
    per_class_pq: dict = field(default_factory=dict)
    violations: list = field(default_factory=list)

    def to_json(self) -> dict:
        out = {k: getattr(self, k) for k in CSV_COLUMNS}
        out["per_class_iou"] = {str(c): v for c, v in self.per_class_iou.items()}
        out["per_class_pq"] = {str(c): {"pq": v.pq, "sq": v.sq, "rq": v.rq, "tp": v.tp, "fp": v.fp, "fn": v.fn}
                               for c, v in self.per_class_pq.items()}
        out["violations"] = list(self.violations)
        return out

    def csv_row(self) -> list:
        return [int(self.masked) if k == "masked" else repr(float(getattr(self, k))) for k in CSV_COLUMNS]


def evaluate(pred: PanopticGrid, gt: PanopticGrid, classes: ClassTable,
             mask: Optional[VisibilityMask] = None) -> EvalReport:
    """IoU/mIoU under the optional mask; PQ always over the full grid."""
    per_class, miou = mean_iou(pred, gt, mask, len(classes))
    pq = panoptic_quality(pred, gt, classes)
    return EvalReport(
        binary_iou(pred, gt, mask), miou, per_class,
        pq.pq, pq.rq, pq.sq, pq.pq_things, pq.rq_things, pq.sq_things,
        pq.pq_stuff, pq.rq_stuff, pq.sq_stuff,
        masked=mask is not None, per_class_pq=pq.per_class, violations=pq.violations,
    )
