"""Deterministic synthetic scenes: ground layer, placed thing shapes, features, corruption."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from panocc.grid import (
    DEFAULT_CLASSES,
    EMPTY,
    ClassTable,
    GridSpec,
    PanopticGrid,
    SemanticGrid,
    VisibilityMask,
    compute_visibility,
)
from panocc.objects import GroundTruthObject

SHAPE_KINDS = ("box", "L-shape", "cylinder")

# independent random streams derived from the scene seed
_PLACEMENT, _FEATURES, _CORRUPTION, _CENTER_NOISE = range(4)


def rng_for(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), stream]))


@dataclass(frozen=True)
class Corruption:
    label_flip_rate: float = 0.0
    center_noise_sigma: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.label_flip_rate <= 1.0:
            raise ValueError("label_flip_rate must be a probability")
        if self.center_noise_sigma < 0:
            raise ValueError("center_noise_sigma must be non-negative")


@dataclass(frozen=True)
class SceneConfig:
    seed: int = 0
    grid: GridSpec = GridSpec()
    classes: ClassTable = DEFAULT_CLASSES
    n_objects: tuple[int, int] = (1, 4)
    shape_kinds: tuple[str, ...] = SHAPE_KINDS
    stuff_layers: int = 1
    corruption: Corruption = Corruption()
    feature_dim: int = 32
    feature_noise: float = 0.1
    ego: Optional[tuple[float, float, float]] = None
    # placement window in voxel units (x0, x1, y0, y1), half-open; None = whole grid
    placement: Optional[tuple[int, int, int, int]] = None
    gap: int = 1
    max_voxels: int = 125
    max_retries: int = 200

    def __post_init__(self):
        lo, hi = self.n_objects
        if lo < 0 or hi < lo:
            raise ValueError(f"invalid n_objects range {self.n_objects}")
        bad = set(self.shape_kinds) - set(SHAPE_KINDS)
        if bad or not self.shape_kinds:
            raise ValueError(f"unknown shape kinds {sorted(bad)}")
        if not 0 <= self.stuff_layers < self.grid.dims[2]:
            raise ValueError("stuff_layers must leave room above the ground")
        if self.feature_dim < len(self.classes):
            raise ValueError("feature_dim must be at least the class count")

    def resolved_ego(self) -> np.ndarray:
        if self.ego is not None:
            return np.asarray(self.ego, dtype=float)
        spec = self.grid
        o, s, d = np.asarray(spec.origin), np.asarray(spec.voxel_size), np.asarray(spec.dims)
        return np.array([o[0] + s[0] * (d[0] // 2 + 0.5),
                         o[1] + s[1] * (d[1] // 2 + 0.5),
                         o[2] + s[2] * (self.stuff_layers + 0.5)])

    def to_json(self) -> dict:
        return {
            "seed": int(self.seed),
            "grid": self.grid.to_json(),
            "classes": self.classes.to_json(),
            "n_objects": list(self.n_objects),
            "shape_kinds": list(self.shape_kinds),
            "stuff_layers": self.stuff_layers,
            "corruption": {"label_flip_rate": self.corruption.label_flip_rate,
                           "center_noise_sigma": self.corruption.center_noise_sigma},
            "feature_dim": self.feature_dim,
            "feature_noise": self.feature_noise,
            "ego": None if self.ego is None else list(self.ego),
            "placement": None if self.placement is None else list(self.placement),
            "gap": self.gap,
            "max_voxels": self.max_voxels,
            "max_retries": self.max_retries,
        }

    @classmethod
    def from_json(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        kw = {}
        if "grid" in d:
            kw["grid"] = GridSpec.from_json(d.pop("grid"))
        if "classes" in d:
            kw["classes"] = ClassTable.from_json(d.pop("classes"))
        if "corruption" in d:
            kw["corruption"] = Corruption(**d.pop("corruption"))
        for key in ("n_objects", "shape_kinds", "ego", "placement"):
            if d.get(key) is not None:
                kw[key] = tuple(d.pop(key))
            else:
                d.pop(key, None)
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown scene config keys: {sorted(unknown)}")
        return cls(**kw, **d)


@dataclass(eq=False)
class Scene:
    config: SceneConfig
    semantic: SemanticGrid
    panoptic: PanopticGrid
    objects: list
    visibility: VisibilityMask
    ego: np.ndarray
    features: np.ndarray = field(repr=False, default=None)

    @property
    def spec(self) -> GridSpec:
        return self.semantic.spec

    @property
    def classes(self) -> ClassTable:
        return self.config.classes


def shape_voxels(kind: str, rng: np.random.Generator) -> np.ndarray:
    """Relative (N, 3) voxel offsets of a 6-connected solid with min corner at 0."""
    if kind == "box":
        sx, sy = rng.integers(2, 5, size=2)
        sz = rng.integers(1, 4)
        cells = np.argwhere(np.ones((sx, sy, sz), dtype=bool))
    elif kind == "L-shape":
        sx, sy = rng.integers(3, 5, size=2)
        sz = rng.integers(1, 4)
        solid = np.ones((sx, sy, sz), dtype=bool)
        solid[(sx + 1) // 2:, (sy + 1) // 2:, :] = False
        cells = np.argwhere(solid)
    elif kind == "cylinder":
        radius = rng.choice([1.0, 1.5, 2.0])
        height = rng.integers(1, 4)
        r = int(np.ceil(radius))
        gx, gy = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
        disk = gx**2 + gy**2 <= radius**2
        solid = np.repeat(disk[:, :, None], height, axis=2)
        cells = np.argwhere(solid)
    else:
        raise ValueError(f"unknown shape kind {kind!r}")
    cells = cells - cells.min(axis=0)
    return cells.astype(np.int64)


def _ground(cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    labels = np.zeros(cfg.grid.dims, dtype=np.int64)
    stuff = cfg.classes.stuff_ids
    if cfg.stuff_layers == 0:
        return labels
    labels[:, :, :cfg.stuff_layers] = stuff[0]
    if len(stuff) > 1:
        lx, ly, _ = cfg.grid.dims
        x0, x1 = sorted(rng.integers(0, lx + 1, size=2))
        y0, y1 = sorted(rng.integers(0, ly + 1, size=2))
        labels[x0:x1, y0:y1, :cfg.stuff_layers] = stuff[1]
    return labels


def _dilate_xy(mask: np.ndarray, gap: int) -> np.ndarray:
    out = mask.copy()
    for dx in range(-gap, gap + 1):
        for dy in range(-gap, gap + 1):
            shifted = np.zeros_like(mask)
            xs = slice(max(dx, 0), mask.shape[0] + min(dx, 0))
            xd = slice(max(-dx, 0), mask.shape[0] + min(-dx, 0))
            ys = slice(max(dy, 0), mask.shape[1] + min(dy, 0))
            yd = slice(max(-dy, 0), mask.shape[1] + min(-dy, 0))
            shifted[xs, ys] = mask[xd, yd]
            out |= shifted
    return out


def generate_scene(cfg: SceneConfig) -> Scene:
    spec = cfg.grid
    rng = rng_for(cfg.seed, _PLACEMENT)
    labels = _ground(cfg, rng)
    instance_ids = np.full(spec.dims, -1, dtype=np.int64)
    ego = cfg.resolved_ego()
    if not spec.contains(ego):
        raise ValueError(f"ego {ego.tolist()} lies outside the grid")
    ego_cell = np.floor((ego - np.asarray(spec.origin)) / np.asarray(spec.voxel_size)).astype(int)

    lx, ly, lz = spec.dims
    x0, x1, y0, y1 = cfg.placement if cfg.placement is not None else (0, lx, 0, ly)
    blocked = np.zeros((lx, ly), dtype=bool)
    blocked[max(ego_cell[0] - 1, 0):ego_cell[0] + 2, max(ego_cell[1] - 1, 0):ego_cell[1] + 2] = True
    thing_ids = cfg.classes.thing_ids

    n = int(rng.integers(cfg.n_objects[0], cfg.n_objects[1] + 1))
    placed = []
    for iid in range(1, n + 1):
        for _ in range(cfg.max_retries):
            kind = cfg.shape_kinds[int(rng.integers(len(cfg.shape_kinds)))]
            cells = shape_voxels(kind, rng)
            if len(cells) > cfg.max_voxels:
                continue
            ext = cells.max(axis=0) + 1
            if ext[0] > x1 - x0 or ext[1] > y1 - y0 or cfg.stuff_layers + ext[2] > lz:
                continue
            px = int(rng.integers(x0, x1 - ext[0] + 1))
            py = int(rng.integers(y0, y1 - ext[1] + 1))
            vox = cells + np.array([px, py, cfg.stuff_layers])
            if blocked[vox[:, 0], vox[:, 1]].any():
                continue
            break
        else:
            raise RuntimeError(f"could not place object {iid} without overlap after {cfg.max_retries} tries")
        cls = thing_ids[int(rng.integers(len(thing_ids)))]
        labels[vox[:, 0], vox[:, 1], vox[:, 2]] = cls
        instance_ids[vox[:, 0], vox[:, 1], vox[:, 2]] = iid
        footprint = np.zeros((lx, ly), dtype=bool)
        footprint[vox[:, 0], vox[:, 1]] = True
        blocked |= _dilate_xy(footprint, cfg.gap)
        placed.append((cls, vox, iid))

    semantic = SemanticGrid(spec, labels, len(cfg.classes))
    panoptic = PanopticGrid(spec, labels, instance_ids, cfg.classes)
    visibility = compute_visibility(semantic, ego)
    objects = [GroundTruthObject.from_voxels(spec, cls, vox, iid, visibility) for cls, vox, iid in placed]
    features = build_features(semantic, cfg.feature_dim, cfg.seed, cfg.feature_noise)
    return Scene(cfg, semantic, panoptic, objects, visibility, ego, features)


def build_features(semantic: SemanticGrid, dim: int, seed: int, noise: float) -> np.ndarray:
    """Per-voxel features: one-hot class followed by seeded Gaussian noise, shape dims + (dim,)."""
    n_classes = semantic.n_classes
    rng = rng_for(seed, _FEATURES)
    onehot = np.eye(n_classes)[semantic.labels]
    extra = noise * rng.standard_normal(semantic.spec.dims + (dim - n_classes,))
    return np.concatenate([onehot, extra], axis=-1)


def corrupt_baseline(scene: Scene, cfg: Optional[SceneConfig] = None) -> SemanticGrid:
    """Flip each occupied voxel to a uniformly random other non-empty class."""
    cfg = cfg or scene.config
    rate = cfg.corruption.label_flip_rate
    labels = np.array(scene.semantic.labels)
    if rate == 0.0:
        return SemanticGrid(scene.spec, labels, scene.semantic.n_classes)
    rng = rng_for(cfg.seed, _CORRUPTION)
    n_classes = scene.semantic.n_classes
    occupied = np.flatnonzero(labels.reshape(-1) != EMPTY)
    flip = rng.random(len(occupied)) < rate
    draws = rng.integers(1, n_classes - 1, size=len(occupied))
    flat = labels.reshape(-1)
    current = flat[occupied]
    # draw from the n_classes - 2 non-empty classes other than the current one
    new = np.where(draws >= current, draws + 1, draws)
    flat[occupied[flip]] = new[flip]
    return SemanticGrid(scene.spec, flat.reshape(scene.spec.dims), n_classes)


def center_noise(cfg: SceneConfig, n: int, sigma: Optional[float] = None) -> np.ndarray:
    """Seeded (n, 3) Gaussian center perturbations in meters."""
    sigma = cfg.corruption.center_noise_sigma if sigma is None else sigma
    return sigma * rng_for(cfg.seed, _CENTER_NOISE).standard_normal((n, 3))


def with_seed(cfg: SceneConfig, seed: int) -> SceneConfig:
    return replace(cfg, seed=seed)
