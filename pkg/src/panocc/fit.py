"""Fitting predictors to a scene: parameter init, two predictors, AdamW and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import torch

from panocc.grid import GridSpec
from panocc.losses import (
    ANCHOR_MODES,
    DECOUPLED,
    LossBreakdown,
    PredictionBatch,
    TargetSet,
    objects_loss,
)
from panocc.matching import LossWeights
from panocc.objects import ObjectPrediction, filter_trainable
from panocc.scenegen import Scene, rng_for

log = logging.getLogger(__name__)

FREE = "free"
SAMPLING = "sampling"
PREDICTORS = (FREE, SAMPLING)

_INIT_STREAM = 11
_JITTER_STREAM = 12


@dataclass(frozen=True)
class FitConfig:
    q_queries: int = 16
    k_offsets: int = 125
    refine_steps: int = 2
    feature_dim: int = 32
    embed_dim: int = 8
    lr: float = 0.05
    lr_decay: float = 0.95
    epochs: int = 30
    steps_per_epoch: int = 10
    seed: int = 0
    anchor_mode: str = DECOUPLED
    predictor: str = FREE
    occupancy_form: str = "focal"
    weights: LossWeights = LossWeights()
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    offset_extent: float = 2.0  # initial offset lattice half-width, in voxels
    offset_jitter: float = 0.1  # in voxels
    center_jitter: float = 0.0  # std (meters) of per-step noise on predicted centers during training

    def __post_init__(self):
        if self.q_queries < 1 or self.k_offsets < 1:
            raise ValueError("q_queries and k_offsets must be positive")
        if self.anchor_mode not in ANCHOR_MODES:
            raise ValueError(f"anchor_mode must be one of {ANCHOR_MODES}")
        if self.predictor not in PREDICTORS:
            raise ValueError(f"predictor must be one of {PREDICTORS}")
        if self.epochs < 0 or self.steps_per_epoch < 1:
            raise ValueError("epochs must be >= 0 and steps_per_epoch >= 1")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    def to_json(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "FitConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown fit config keys: {sorted(unknown)}")
        if "weights" in d:
            d["weights"] = LossWeights(**d["weights"])
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


# -- initialization -----------------------------------------------------------

def offset_lattice(k: int, voxel_size, extent: float, jitter: float, rng: np.random.Generator) -> np.ndarray:
    """K offsets on a jittered cubic lattice spanning [-extent, extent] voxels, shape (K, 3)."""
    n = max(2, math.ceil(round(k ** (1.0 / 3.0), 9)))
    axis = np.linspace(-extent, extent, n)
    pts = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), -1).reshape(-1, 3)
    order = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0], np.abs(pts).sum(axis=1)))
    pts = pts[order[:k]]
    pts = pts + rng.uniform(-jitter, jitter, size=pts.shape)
    return pts * np.asarray(voxel_size)


def init_centers(spec: GridSpec, q: int, rng: np.random.Generator) -> np.ndarray:
    lo = np.asarray(spec.origin)
    return lo + rng.random((q, 3)) * (spec.upper - lo)


def init_free_params(cfg: FitConfig, spec: GridSpec, n_classes: int) -> dict:
    rng = rng_for(cfg.seed, _INIT_STREAM)
    centers = init_centers(spec, cfg.q_queries, rng)
    offsets = np.stack([offset_lattice(cfg.k_offsets, spec.voxel_size, cfg.offset_extent, cfg.offset_jitter, rng)
                        for _ in range(cfg.q_queries)])
    return {
        "class_logits": np.zeros((cfg.q_queries, n_classes)),
        "centers": centers,
        "offsets": offsets,
        "score_logits": np.zeros((cfg.q_queries, cfg.k_offsets)),
    }


def init_sampling_params(cfg: FitConfig, spec: GridSpec, n_classes: int) -> dict:
    rng = rng_for(cfg.seed, _INIT_STREAM)
    f = cfg.feature_dim + cfg.embed_dim
    k = cfg.k_offsets
    scale = 0.01
    return {
        "init_centers": init_centers(spec, cfg.q_queries, rng),
        "query_embed": rng.standard_normal((cfg.q_queries, cfg.embed_dim)),
        "w_center": scale * rng.standard_normal((f, 3)),
        "b_center": np.zeros(3),
        "w_cls": scale * rng.standard_normal((f, n_classes)),
        "b_cls": np.zeros(n_classes),
        "w_off": scale * rng.standard_normal((f, 3 * k)),
        "b_off": offset_lattice(k, spec.voxel_size, cfg.offset_extent, cfg.offset_jitter, rng).reshape(-1),
        "w_score": scale * rng.standard_normal((f, k)),
        "b_score": np.zeros(k),
    }


def init_params(cfg: FitConfig, spec: GridSpec, n_classes: int) -> dict:
    if cfg.predictor == FREE:
        return init_free_params(cfg, spec, n_classes)
    return init_sampling_params(cfg, spec, n_classes)


def oracle_params(scene: Scene, cfg: FitConfig, center_offset: Optional[np.ndarray] = None,
                  confidence: float = 20.0) -> dict:
    """Free-predictor parameters that reproduce the scene's objects exactly.

    ``center_offset`` (n_objects, 3) perturbs the predicted centers while the
    offsets stay relative to the true centers.
    """
    objs = scene.objects
    n_classes = len(scene.classes)
    if len(objs) > cfg.q_queries:
        raise ValueError(f"{len(objs)} objects exceed {cfg.q_queries} queries")
    logits = np.zeros((cfg.q_queries, n_classes))
    logits[:, 0] = confidence
    centers = np.tile(np.asarray(scene.spec.origin) + 0.5 * (scene.spec.upper - np.asarray(scene.spec.origin)),
                      (cfg.q_queries, 1))
    offsets = np.zeros((cfg.q_queries, cfg.k_offsets, 3))
    score_logits = np.full((cfg.q_queries, cfg.k_offsets), -confidence)
    for i, obj in enumerate(objs):
        n = len(obj.voxels)
        if n > cfg.k_offsets:
            raise ValueError(f"object {obj.instance_id} has {n} voxels > K={cfg.k_offsets}")
        logits[i] = 0.0
        logits[i, obj.class_id] = confidence
        centers[i] = obj.center
        if center_offset is not None:
            centers[i] = centers[i] + center_offset[i]
        offsets[i, :n] = obj.voxel_centers - obj.center
        score_logits[i, :n] = confidence
    return {"class_logits": logits, "centers": centers, "offsets": offsets, "score_logits": score_logits}


# -- predictors ---------------------------------------------------------------

def _as_tensors(params: dict, requires_grad: bool = False) -> dict:
    return {k: torch.tensor(np.asarray(v, dtype=float), dtype=torch.float64, requires_grad=requires_grad)
            for k, v in params.items()}


def free_forward(t: dict) -> PredictionBatch:
    return PredictionBatch(t["class_logits"], t["centers"], t["offsets"], torch.sigmoid(t["score_logits"]))


def trilinear_sample(features: torch.Tensor, spec: GridSpec, points: torch.Tensor) -> torch.Tensor:
    """Interpolate per-voxel-center features at world points (Q, 3) -> (Q, D).

    Points are clamped to the lattice of voxel centers first.
    """
    dims = torch.as_tensor(spec.dims, dtype=torch.float64)
    u = (points - torch.as_tensor(spec.origin, dtype=torch.float64)) / torch.as_tensor(spec.voxel_size, dtype=torch.float64) - 0.5
    u = torch.maximum(torch.minimum(u, dims - 1), torch.zeros_like(u))
    i0 = torch.floor(u).detach()
    i0 = torch.minimum(i0, torch.clamp(dims - 2, min=0)).long()
    w = u - i0
    i1 = torch.minimum(i0 + 1, (dims - 1).long())
    out = 0.0
    for cx in (0, 1):
        ix = i1[:, 0] if cx else i0[:, 0]
        wx = w[:, 0] if cx else 1 - w[:, 0]
        for cy in (0, 1):
            iy = i1[:, 1] if cy else i0[:, 1]
            wy = w[:, 1] if cy else 1 - w[:, 1]
            for cz in (0, 1):
                iz = i1[:, 2] if cz else i0[:, 2]
                wz = w[:, 2] if cz else 1 - w[:, 2]
                out = out + (wx * wy * wz)[:, None] * features[ix, iy, iz]
    return out


def clamp_to_grid(points: torch.Tensor, spec: GridSpec) -> torch.Tensor:
    lo = torch.as_tensor(spec.origin, dtype=torch.float64)
    hi = torch.as_tensor(spec.upper, dtype=torch.float64)
    return torch.maximum(torch.minimum(points, hi), lo)


def sampling_forward(t: dict, features: torch.Tensor, spec: GridSpec, refine_steps: int) -> PredictionBatch:
    """Iterated feature sampling with shared linear heads."""
    if tuple(features.shape[:3]) != spec.dims:
        raise ValueError(f"feature grid {tuple(features.shape[:3])} does not match dims {spec.dims}")
    q = t["init_centers"].shape[0]
    k = t["b_score"].shape[0]
    centers = t["init_centers"]
    h = None
    for _ in range(max(1, refine_steps)):
        sampled = trilinear_sample(features, spec, clamp_to_grid(centers, spec))
        h = torch.cat([sampled, t["query_embed"]], dim=1)
        centers = centers + h @ t["w_center"] + t["b_center"]
    logits = h @ t["w_cls"] + t["b_cls"]
    offsets = (h @ t["w_off"] + t["b_off"]).reshape(q, k, 3)
    scores = torch.sigmoid(h @ t["w_score"] + t["b_score"])
    return PredictionBatch(logits, centers, offsets, scores)


def forward(t: dict, cfg: FitConfig, spec: GridSpec, features=None) -> PredictionBatch:
    if cfg.predictor == FREE:
        return free_forward(t)
    if features is None:
        raise ValueError("the sampling predictor needs a feature grid")
    if not isinstance(features, torch.Tensor):
        features = torch.as_tensor(features, dtype=torch.float64)
    return sampling_forward(t, features, spec, cfg.refine_steps)


def predict_free(params: dict, cfg: Optional[FitConfig] = None) -> list[ObjectPrediction]:
    with torch.no_grad():
        return free_forward(_as_tensors(params)).to_objects()


def predict_sampling(params: dict, features: np.ndarray, cfg: FitConfig, spec: GridSpec) -> list[ObjectPrediction]:
    with torch.no_grad():
        return sampling_forward(_as_tensors(params), torch.as_tensor(features, dtype=torch.float64),
                                spec, cfg.refine_steps).to_objects()


def predict(params: dict, cfg: FitConfig, scene: Scene) -> list[ObjectPrediction]:
    if cfg.predictor == FREE:
        return predict_free(params, cfg)
    return predict_sampling(params, scene.features, cfg, scene.spec)


# -- optimizer ----------------------------------------------------------------

@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(params: dict, grads: dict, state: AdamWState, lr: float,
                   betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                   weight_decay: float = 0.01) -> dict:
    """One AdamW update with decoupled weight decay; returns new parameter arrays."""
    for name, g in grads.items():
        g = np.asarray(g)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    b1, b2 = betas
    state.step += 1
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    out = {}
    for name, p in params.items():
        p = np.asarray(p, dtype=float)
        g = np.asarray(grads.get(name, np.zeros_like(p)), dtype=float)
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p = p * (1.0 - lr * weight_decay)
        out[name] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return out


# -- training loop ------------------------------------------------------------

@dataclass
class FitResult:
    params: dict
    history: list  # one dict of loss floats per step
    config: FitConfig

    @property
    def initial_loss(self) -> float:
        return self.history[0]["l_objects"]

    @property
    def final_loss(self) -> float:
        return self.history[-1]["l_objects"]


def loss_and_grads(params: dict, cfg: FitConfig, scene: Scene, targets: TargetSet,
                   features: Optional[torch.Tensor] = None,
                   jitter: Optional[np.ndarray] = None) -> tuple[LossBreakdown, dict]:
    t = _as_tensors(params, requires_grad=True)
    batch = forward(t, cfg, scene.spec, features)
    if jitter is not None:
        batch.centers = batch.centers + torch.as_tensor(jitter, dtype=torch.float64)
    if batch.q < len(targets):
        raise ValueError(f"Q={batch.q} queries cannot cover {len(targets)} objects")
    breakdown = objects_loss(batch, targets, cfg.weights, cfg.anchor_mode, cfg.occupancy_form)
    value = float(breakdown.l_objects.detach())
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite loss {breakdown.as_floats()}")
    breakdown.l_objects.backward()
    grads = {k: (v.grad.numpy().copy() if v.grad is not None else np.zeros(v.shape)) for k, v in t.items()}
    return breakdown, grads


def fit_scene(scene: Scene, cfg: FitConfig, params: Optional[dict] = None,
              callback: Optional[Callable[[int, dict], None]] = None) -> FitResult:
    """Fit predictor parameters to one scene's visible objects."""
    targets_list = filter_trainable(scene.objects)
    if targets_list and max(len(o.voxels) for o in targets_list) > cfg.k_offsets:
        raise ValueError("K is smaller than the largest object's voxel count")
    targets = TargetSet.from_objects(targets_list)
    if params is None:
        params = init_params(cfg, scene.spec, len(scene.classes))
    params = {k: np.asarray(v, dtype=float) for k, v in params.items()}
    features = None
    if cfg.predictor == SAMPLING:
        features = torch.as_tensor(scene.features, dtype=torch.float64)
    state = AdamWState()
    history = []
    lr = cfg.lr
    jitter_rng = rng_for(cfg.seed, _JITTER_STREAM)
    for epoch in range(cfg.epochs):
        for _ in range(cfg.steps_per_epoch):
            jitter = None
            if cfg.center_jitter > 0:
                jitter = cfg.center_jitter * jitter_rng.standard_normal((cfg.q_queries, 3))
            breakdown, grads = loss_and_grads(params, cfg, scene, targets, features, jitter)
            row = breakdown.as_floats()
            row["lr"] = lr
            history.append(row)
            if callback is not None:
                callback(len(history) - 1, row)
            params = optimizer_step(params, grads, state, lr, cfg.betas, cfg.eps, cfg.weight_decay)
        lr *= cfg.lr_decay
        log.debug("epoch %d l_objects=%.6g", epoch, history[-1]["l_objects"])
    return FitResult(params, history, cfg)


def params_to_json(params: dict, cfg: FitConfig) -> dict:
    return {"config": cfg.to_json(), "params": {k: np.asarray(v).tolist() for k, v in sorted(params.items())}}


def params_from_json(d: dict) -> tuple[dict, FitConfig]:
    cfg = FitConfig.from_json(d["config"])
    return {k: np.asarray(v, dtype=float) for k, v in d["params"].items()}, cfg


def with_anchor_mode(cfg: FitConfig, mode: str) -> FitConfig:
    return replace(cfg, anchor_mode=mode)
