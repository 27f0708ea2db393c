"""Command-line entry point: gen, oracle, fit, eval, ablate-radius, replay.

Every command writes its artifacts plus one ``manifest.json`` into ``--out``.
``replay`` re-executes a manifest and checks the artifact checksums match.
Set ``PANOCC_LOG_LEVEL`` (e.g. DEBUG) for verbose logging.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable

from panocc import __version__
from panocc.fit import FitConfig, fit_scene, params_from_json, params_to_json
from panocc.losses import ANCHOR_MODES, LOSS_COLUMNS
from panocc.metrics import CSV_COLUMNS
from panocc.panoptic import DEFAULT_RADIUS
from panocc.pipeline import (
    BASELINES,
    aggregate_sweeps,
    baseline_grid,
    evaluate_params,
    noisy_oracle,
    radius_sweep,
)
from panocc.plot import write_line_chart
from panocc.sceneio import load_scene, save_scene
from panocc.scenegen import SceneConfig, generate_scene, with_seed

log = logging.getLogger("panocc")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

MANIFEST = "manifest.json"


class UsageError(Exception):
    """Bad input files or configuration; maps to exit code 2."""


def sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _read_json(path, what: str) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"{what} not found: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what} is not valid JSON: {path}: {exc}") from exc


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return path


def _load_scene(path):
    if not Path(path).is_file():
        raise UsageError(f"scene file not found: {path}")
    try:
        return load_scene(path)
    except (KeyError, ValueError) as exc:
        raise UsageError(f"invalid scene file {path}: {exc}") from exc


def _fit_config(path, overrides: dict) -> FitConfig:
    base = _read_json(path, "fit config") if path else {}
    base.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return FitConfig.from_json(base)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid fit config: {exc}") from exc


# -- commands -------------------------------------------------------------------
# Each returns (outputs, resolved config, extra manifest fields).

def cmd_gen(args, out: Path):
    raw = _read_json(args.config, "scene config") if args.config else {}
    try:
        cfg = SceneConfig.from_json(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid scene config: {exc}") from exc
    if args.seed is not None:
        cfg = with_seed(cfg, args.seed)
    if args.n < 0:
        raise UsageError("--n must be non-negative")
    outputs = []
    for i in range(args.n):
        scene = generate_scene(with_seed(cfg, cfg.seed + i))
        outputs.append(save_scene(scene, out / f"scene_{i:03d}.json"))
    return outputs, cfg.to_json(), {"seed": cfg.seed}


def cmd_oracle(args, out: Path):
    scene = _load_scene(args.scene)
    cfg = _fit_config(args.config, {})
    try:
        params = noisy_oracle(scene, cfg, args.center_noise)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    path = _write_json(out / "params.json", params_to_json(params, cfg))
    return [path], cfg.to_json(), {"seed": scene.config.seed, "center_noise": args.center_noise}


def cmd_fit(args, out: Path):
    scene = _load_scene(args.scene)
    cfg = _fit_config(args.config, {"anchor_mode": args.anchor_mode, "seed": args.seed})
    result = fit_scene(scene, cfg)
    params_path = _write_json(out / "params.json", params_to_json(result.params, cfg))
    loss_path = out / "loss.csv"
    with loss_path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("step",) + LOSS_COLUMNS)
        for step, row in enumerate(result.history):
            w.writerow([step] + [repr(row[c]) for c in LOSS_COLUMNS])
    extra = {"seed": cfg.seed}
    if result.history:
        ratio = result.final_loss / result.initial_loss if result.initial_loss else 0.0
        extra.update(initial_l_objects=result.initial_loss, final_l_objects=result.final_loss,
                     loss_ratio=ratio, threshold=args.threshold, below_threshold=ratio < args.threshold)
    return [params_path, loss_path], cfg.to_json(), extra


def _load_params(path):
    try:
        return params_from_json(_read_json(path, "params file"))
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"invalid params file {path}: {exc}") from exc


def cmd_eval(args, out: Path):
    scene = _load_scene(args.scene)
    params, cfg = _load_params(args.params)
    outcome = evaluate_params(scene, params, cfg, args.radius, baseline_grid(scene, args.baseline))
    for rep in (outcome.masked, outcome.unmasked):
        if rep.violations:
            raise AssertionError(f"panoptic invariants violated: {rep.violations}")
    primary = outcome.masked if args.mask else outcome.unmasked
    report = {"primary": "masked" if args.mask else "unmasked", "radius": args.radius,
              "masked": outcome.masked.to_json(), "unmasked": outcome.unmasked.to_json(),
              "pq": primary.pq, "miou": primary.miou, "iou": primary.iou}
    json_path = _write_json(out / "report.json", report)
    csv_path = out / "report.csv"
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        w.writerow(outcome.masked.csv_row())
        w.writerow(outcome.unmasked.csv_row())
    return [json_path, csv_path], cfg.to_json(), {"seed": scene.config.seed}


SWEEP_COLUMNS = ("scene", "radius", "pq", "rq", "sq", "pq_things", "rq_things", "sq_things")


def _scene_paths(items) -> list[Path]:
    paths = []
    for item in items:
        p = Path(item)
        if p.is_dir():
            paths.extend(sorted(p.glob("scene_*.json")))
        else:
            paths.append(p)
    return paths


def cmd_ablate_radius(args, out: Path):
    radii = [int(r) for r in args.radii.split(",") if r.strip()]
    if not radii:
        raise UsageError("--radii must list at least one radius")
    scenes = _scene_paths(args.scenes)
    if not scenes:
        raise UsageError("no scene files given")
    if args.params and len(args.params) != len(scenes):
        raise UsageError("--params must list one params file per scene")
    cfg = _fit_config(args.config, {})

    def run(i):
        scene = _load_scene(scenes[i])
        if args.params:
            params, pcfg = _load_params(args.params[i])
        else:
            params, pcfg = noisy_oracle(scene, cfg, args.center_noise), cfg
        return radius_sweep(scene, params, pcfg, radii, baseline_grid(scene, args.baseline))

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        per_scene = list(pool.map(run, range(len(scenes))))
    agg = aggregate_sweeps(per_scene)
    csv_path = out / "radius_sweep.csv"
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for path, rows in zip(scenes, per_scene):
            for row in rows:
                w.writerow([path.name] + [row["radius"]] + [repr(row[k]) for k in SWEEP_COLUMNS[2:]])
        for row in agg:
            w.writerow(["ALL", row["radius"]] + [repr(row[k]) for k in SWEEP_COLUMNS[2:]])
    outputs = [csv_path]
    if args.svg:
        outputs.append(write_line_chart(out / "radius_sweep.svg", radii,
                                        {k: [a[k] for a in agg] for k in ("pq", "rq", "sq", "pq_things")},
                                        title="panoptic metrics vs voting radius"))
    return outputs, cfg.to_json(), {"center_noise": args.center_noise}


# -- manifest handling --------------------------------------------------------

COMMANDS: dict[str, Callable] = {
    "gen": cmd_gen,
    "oracle": cmd_oracle,
    "fit": cmd_fit,
    "eval": cmd_eval,
    "ablate-radius": cmd_ablate_radius,
}

_PATH_ARGS = ("config", "scene", "params", "scenes")


def _absolute(value):
    if value is None:
        return None
    if isinstance(value, list):
        return [str(Path(v).resolve()) for v in value]
    return str(Path(value).resolve())


def run_command(name: str, args: dict, out: Path) -> dict:
    """Run a command into ``out`` and write its manifest; returns the manifest."""
    out.mkdir(parents=True, exist_ok=True)
    args = dict(args)
    for key in _PATH_ARGS:
        if key in args:
            args[key] = _absolute(args[key])
    ns = argparse.Namespace(**args)
    start = time.perf_counter()
    outputs, config, extra = COMMANDS[name](ns, out)
    duration = time.perf_counter() - start
    inputs = {}
    for key in _PATH_ARGS:
        vals = args.get(key)
        for v in vals if isinstance(vals, list) else [vals]:
            if v and Path(v).is_file():
                inputs[v] = sha256(Path(v))
    manifest = {
        "command": name,
        "version": __version__,
        "args": args,
        "config": config,
        "inputs": inputs,
        "outputs": {p.name: sha256(p) for p in outputs},
        "duration_s": duration,
        **extra,
    }
    _write_json(out / MANIFEST, manifest)
    return manifest


def replay(manifest_path, out=None) -> tuple[bool, dict]:
    manifest = _read_json(manifest_path, "manifest")
    if manifest.get("command") not in COMMANDS:
        raise UsageError(f"manifest names unknown command {manifest.get('command')!r}")
    target = Path(out) if out else Path(tempfile.mkdtemp(prefix="panocc-replay-"))
    fresh = run_command(manifest["command"], manifest["args"], target)
    return fresh["outputs"] == manifest["outputs"], fresh


# -- argument parsing -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="panocc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate synthetic scenes")
    p.add_argument("--config", help="scene config JSON (defaults used when omitted)")
    p.add_argument("--n", type=int, default=1, help="number of scenes")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", required=True)

    p = sub.add_parser("oracle", help="parameters reconstructing the scene's objects, with optional center noise")
    p.add_argument("--scene", required=True)
    p.add_argument("--config", help="fit config JSON (sizes Q and K)")
    p.add_argument("--center-noise", type=float, default=0.0, help="center noise std in meters")
    p.add_argument("--out", required=True)

    p = sub.add_parser("fit", help="fit a predictor to one scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--config", help="fit config JSON")
    p.add_argument("--anchor-mode", choices=ANCHOR_MODES)
    p.add_argument("--seed", type=int)
    p.add_argument("--threshold", type=float, default=0.05, help="final/initial loss ratio recorded as pass")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="merge predictions with a baseline grid and compute metrics")
    p.add_argument("--scene", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--radius", type=int, default=DEFAULT_RADIUS)
    p.add_argument("--mask", action=argparse.BooleanOptionalAction, default=True,
                   help="report the visibility-masked metrics as primary")
    p.add_argument("--baseline", choices=BASELINES, default="corrupt")
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate-radius", help="sweep the voting radius")
    p.add_argument("--scenes", nargs="+", required=True, help="scene files or directories")
    p.add_argument("--params", nargs="*", help="one params file per scene (default: noisy oracle)")
    p.add_argument("--config", help="fit config JSON for oracle params")
    p.add_argument("--radii", default=",".join(str(r) for r in range(13)))
    p.add_argument("--center-noise", type=float, default=0.6)
    p.add_argument("--baseline", choices=BASELINES, default="clean")
    p.add_argument("--svg", action="store_true", help="also write an SVG line chart")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)

    p = sub.add_parser("replay", help="re-run a manifest and compare artifact checksums")
    p.add_argument("manifest")
    p.add_argument("--out")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("PANOCC_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "replay":
            same, fresh = replay(args.manifest, args.out)
            print(json.dumps({"identical": same, "outputs": fresh["outputs"]}, sort_keys=True))
            return EXIT_OK if same else EXIT_FAILURE
        params = vars(args).copy()
        out = Path(params.pop("out"))
        name = params.pop("command")
        manifest = run_command(name, params, out)
        print(json.dumps({"command": name, "outputs": manifest["outputs"]}, sort_keys=True))
        return EXIT_OK
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (AssertionError, FloatingPointError, RuntimeError, ValueError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
