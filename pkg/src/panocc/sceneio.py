"""Scene JSON files with run-length encoded label grids (x-fastest order)."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from panocc.grid import GridSpec, PanopticGrid, SemanticGrid, compute_visibility
from panocc.objects import GroundTruthObject
from panocc.scenegen import Scene, SceneConfig, build_features


def rle_encode(grid: np.ndarray) -> list[list[int]]:
    """[[value, count], ...] over the grid flattened with x varying fastest."""
    flat = np.asarray(grid).reshape(-1, order="F")
    if flat.size == 0:
        return []
    starts = np.flatnonzero(np.r_[True, flat[1:] != flat[:-1]])
    counts = np.diff(np.r_[starts, flat.size])
    return [[int(flat[s]), int(c)] for s, c in zip(starts, counts)]


def rle_decode(pairs, dims) -> np.ndarray:
    values = [v for v, _ in pairs]
    counts = [c for _, c in pairs]
    if any(c <= 0 for c in counts):
        raise ValueError("run lengths must be positive")
    flat = np.repeat(np.asarray(values, dtype=np.int64), counts)
    if flat.size != int(np.prod(dims)):
        raise ValueError(f"run lengths cover {flat.size} voxels, grid has {int(np.prod(dims))}")
    return flat.reshape(tuple(dims), order="F")


def scene_to_json(scene: Scene) -> dict:
    return {
        "spec": scene.spec.to_json(),
        "labels_rle": rle_encode(scene.semantic.labels),
        "instances_rle": rle_encode(scene.panoptic.instance_ids),
        "ego": [float(v) for v in scene.ego],
        "objects": [o.to_json() for o in scene.objects],
        "config": scene.config.to_json(),
    }


def scene_from_json(d: dict) -> Scene:
    spec = GridSpec.from_json(d["spec"])
    cfg = SceneConfig.from_json(d["config"]) if "config" in d else SceneConfig(grid=spec)
    if cfg.grid != spec:
        raise ValueError("scene config grid does not match scene spec")
    labels = rle_decode(d["labels_rle"], spec.dims)
    ids = rle_decode(d["instances_rle"], spec.dims)
    semantic = SemanticGrid(spec, labels, len(cfg.classes))
    panoptic = PanopticGrid(spec, labels, ids, cfg.classes)
    ego = np.asarray(d["ego"], dtype=float)
    visibility = compute_visibility(semantic, ego)
    objects = [GroundTruthObject.from_json(o, spec) for o in d["objects"]]
    features = build_features(semantic, cfg.feature_dim, cfg.seed, cfg.feature_noise)
    return Scene(cfg, semantic, panoptic, objects, visibility, ego, features)


def dumps_scene(scene: Scene) -> str:
    return json.dumps(scene_to_json(scene), sort_keys=True, separators=(",", ":"))


def save_scene(scene: Scene, path) -> Path:
    path = Path(path)
    path.write_text(dumps_scene(scene), encoding="utf-8")
    return path


def load_scene(path) -> Scene:
    return scene_from_json(json.loads(Path(path).read_text(encoding="utf-8")))
