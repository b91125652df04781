"""Command-line entry point: ``bevinst {gen,init-params,run,eval,bench}``.

Exit codes: 0 success, 1 other package errors, 2 invalid configuration,
3 missing or unreadable input files, 4 dimension mismatches. Set
``BEVINST_LOG`` (``DEBUG``, ``INFO``, ``WARNING``...) for log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .config import RunConfig, load_config
from .errors import BevInstError, DimensionMismatch, InvalidConfig, ParseError
from .metrics import evaluate
from .params import ParamRegistry, init_params
from .pipeline import (
    STAGE_KEYS,
    STAGES,
    detections_from_dict,
    dumps_detections,
    oracle_registry,
    run_pipeline,
)
from .scene import (
    generate_scene,
    ground_truth_boxes,
    load_scene,
    read_scene_dir,
    write_scene_dir,
)

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_MISSING, EXIT_DIMENSION = 0, 1, 2, 3, 4
LOG_ENV = "BEVINST_LOG"

log = logging.getLogger("bevinst")


class ConfigFailure(Exception):
    """Wraps config-file problems so they map to exit code 2."""


def _config(path) -> RunConfig:
    try:
        return load_config(path)
    except FileNotFoundError:
        raise
    except (InvalidConfig, ParseError) as exc:
        raise ConfigFailure(str(exc)) from None


def _require(path, what):
    if not os.path.exists(path):
        raise FileNotFoundError(f"{what} not found: {path}")


def cmd_gen(args) -> int:
    config = _config(args.config)
    scene = generate_scene(config.scene, args.seed)
    write_scene_dir(scene, args.out)
    log.info("wrote scene seed=%d with %d objects to %s", args.seed, len(scene.tracks), args.out)
    return EXIT_OK


def cmd_init_params(args) -> int:
    config = _config(args.config)
    reg = oracle_registry(config) if args.oracle else init_params(config, seed=args.seed)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    reg.save(args.out)
    log.info("wrote %d parameter blocks to %s", len(reg), args.out)
    return EXIT_OK


def _load_inputs(args):
    config = _config(args.config)
    _require(os.path.join(args.scene, "scene.json"), "scene")
    _require(args.params, "parameter file")
    scene, features = read_scene_dir(args.scene)
    reg = ParamRegistry.load(args.params)
    if scene.channels != config.channels:
        raise DimensionMismatch(
            f"scene features have {scene.channels} channels, config expects {config.channels}"
        )
    reg.audit(config)
    return config, scene, features, reg


def cmd_run(args) -> int:
    config, scene, features, reg = _load_inputs(args)
    result = run_pipeline(scene, features, reg, config, stage=args.stage)
    text = dumps_detections(result, {"scene_seed": scene.seed})
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(text)
    log.info("%s stage: %d detections -> %s", args.stage, len(result), args.out)
    return EXIT_OK


def cmd_eval(args) -> int:
    _require(args.det, "detection file")
    scene_json = os.path.join(args.scene, "scene.json") if os.path.isdir(args.scene) else args.scene
    _require(scene_json, "scene")
    with open(args.det, "r", encoding="utf-8") as fh:
        try:
            det = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(exc.msg, line=exc.lineno) from None
    boxes, scores, _ = detections_from_dict(det)
    report = evaluate(boxes, scores, ground_truth_boxes(load_scene(scene_json)))
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"mAP={report.map:.4f}, NDS={report.nds:.4f}")
    return EXIT_OK


def bench_stats(samples: dict) -> dict:
    return {
        key: {"mean": float(np.mean(v)), "min": float(np.min(v)), "max": float(np.max(v)), "n": len(v)}
        for key, v in samples.items()
    }


def cmd_bench(args) -> int:
    config, scene, features, reg = _load_inputs(args)
    if args.repeat < 1:
        raise ConfigFailure("repeat: must be at least 1")
    samples = {key: [] for key in STAGE_KEYS}
    points = 0
    for _ in range(args.repeat):
        result = run_pipeline(scene, features, reg, config, stage="full")
        points = result.frustum_points
        for key in STAGE_KEYS:
            samples[key].append(result.timings.get(key, 0.0))
    stats = bench_stats(samples)
    print(f"{'stage':<10}{'mean ms':>12}{'min ms':>12}{'max ms':>12}  (repeat={args.repeat}, frustum points={points})")
    for key in STAGE_KEYS:
        s = stats[key]
        print(f"{key:<10}{1e3 * s['mean']:>12.3f}{1e3 * s['min']:>12.3f}{1e3 * s['max']:>12.3f}")
    payload = {"repeat": args.repeat, "frustum_points": points, "stages": stats}
    line = json.dumps(payload, sort_keys=True)
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            fh.write(line + "\n")
    else:
        print(line)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bevinst", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic scene directory")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("init-params", help="write a parameter registry")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--oracle", action="store_true", help="hand-set oracle parameters instead of random ones")
    p.set_defaults(func=cmd_init_params)

    p = sub.add_parser("run", help="run the detector on a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--stage", choices=STAGES, default="full")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="score detections against scene ground truth")
    p.add_argument("--det", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="per-stage wall-time statistics")
    p.add_argument("--scene", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--config")
    p.add_argument("--repeat", type=int, default=1)
    p.add_argument("--json", help="write the machine-readable table here instead of stdout")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get(LOG_ENV, "WARNING").upper(), format="%(levelname)s %(name)s: %(message)s"
    )
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigFailure as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (DimensionMismatch, KeyError) as exc:
        print(f"error: dimension mismatch: {exc}", file=sys.stderr)
        return EXIT_DIMENSION
    except BevInstError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
