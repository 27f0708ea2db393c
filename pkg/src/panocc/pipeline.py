"""End-to-end evaluation: predictions -> instance map -> panoptic merge -> metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from panocc.fit import FitConfig, oracle_params, predict
from panocc.grid import SemanticGrid
from panocc.metrics import EvalReport, evaluate, panoptic_quality
from panocc.objects import rasterize_instances
from panocc.panoptic import PanopticConfig, merge_panoptic
from panocc.scenegen import Scene, center_noise, corrupt_baseline

BASELINES = ("clean", "corrupt")


def baseline_grid(scene: Scene, mode: str = "corrupt") -> SemanticGrid:
    if mode == "clean":
        return scene.semantic
    if mode == "corrupt":
        return corrupt_baseline(scene)
    raise ValueError(f"baseline must be one of {BASELINES}")


@dataclass
class EvalOutcome:
    masked: EvalReport
    unmasked: EvalReport


def panoptic_prediction(scene: Scene, params: dict, cfg: FitConfig, radius: int,
                        baseline: Optional[SemanticGrid] = None, class_threshold: float = 0.5):
    preds = predict(params, cfg, scene)
    instances = rasterize_instances(preds, scene.spec, scene.classes.thing_mask(), class_threshold)
    base = scene.semantic if baseline is None else baseline
    return merge_panoptic(base, instances, PanopticConfig(radius), scene.classes)


def evaluate_params(scene: Scene, params: dict, cfg: FitConfig, radius: int,
                    baseline: Optional[SemanticGrid] = None) -> EvalOutcome:
    pan = panoptic_prediction(scene, params, cfg, radius, baseline)
    return EvalOutcome(
        masked=evaluate(pan, scene.panoptic, scene.classes, scene.visibility),
        unmasked=evaluate(pan, scene.panoptic, scene.classes, None),
    )


def noisy_oracle(scene: Scene, cfg: FitConfig, sigma: float) -> dict:
    """Oracle parameters with seeded Gaussian center noise of std ``sigma`` meters."""
    noise = center_noise(scene.config, len(scene.objects), sigma)
    return oracle_params(scene, cfg, noise)


def radius_sweep(scene: Scene, params: dict, cfg: FitConfig, radii, baseline: Optional[SemanticGrid] = None) -> list[dict]:
    """PQ/RQ/SQ (overall and things) for each radius on one scene."""
    preds = predict(params, cfg, scene)
    instances = rasterize_instances(preds, scene.spec, scene.classes.thing_mask())
    base = scene.semantic if baseline is None else baseline
    rows = []
    for r in radii:
        pan = merge_panoptic(base, instances, PanopticConfig(int(r)), scene.classes)
        pq = panoptic_quality(pan, scene.panoptic, scene.classes)
        rows.append({"radius": int(r), "pq": pq.pq, "rq": pq.rq, "sq": pq.sq,
                     "pq_things": pq.pq_things, "rq_things": pq.rq_things, "sq_things": pq.sq_things})
    return rows


def aggregate_sweeps(per_scene: list[list[dict]]) -> list[dict]:
    keys = ("pq", "rq", "sq", "pq_things", "rq_things", "sq_things")
    out = []
    for rows in zip(*per_scene):
        agg = {"radius": rows[0]["radius"]}
        for k in keys:
            agg[k] = float(np.mean([r[k] for r in rows]))
        out.append(agg)
    return out
