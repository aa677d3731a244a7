"""Command line entry point.

    bevbench gen      --seed S --n N --out DIR          scenes -> JSON
    bevbench render   --scene F --out DIR               scene -> sensor files
    bevbench degrade  --in DIR --out DIR [...]          sensor files -> degraded sensor files
    bevbench detect   --in DIR --scene F --out F        sensor files -> detections JSON
    bevbench eval     --dets F --scene F                detections + scene -> metrics
    bevbench sweep    --config F --out DIR              full occlusion sweep -> reports

Exit status is 0 on success, 1 for usage or configuration errors and 2 for
failures while running.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .bevpipe import SENSOR_MODES, run_pipeline
from .degrade import CameraDegradeSpec
from .detect import detect, load_detections, save_detections
from .harness import ConfigError, ExperimentConfig, degrade_cameras, degrade_lidar, run_sweep, sweep_cells
from .metrics import evaluate
from .report import FORMATS, emit_report
from .scene import generate_scene, load_scene, save_scene
from .seeding import derive_seed, scene_seed
from .sensors import read_sensor_dir, render_cameras, render_lidar, write_sensor_dir


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master / scene seed (u64)")
    p.add_argument("--config", default=argparse.SUPPRESS, help="experiment config JSON")
    p.add_argument("--out", default=argparse.SUPPRESS, help="output file or directory")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="bevbench", description="BEV fusion detection under sensor occlusion",
                     parents=[common])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("gen", parents=[common], help="generate scenes")
    p.add_argument("--n", type=int, default=1, help="number of scenes")

    p = sub.add_parser("render", parents=[common], help="render sensors for one scene")
    p.add_argument("--scene", required=True)

    p = sub.add_parser("degrade", parents=[common], help="occlude rendered sensor data")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--camera-sigma", type=float, default=None)
    p.add_argument("--camera-coverage", type=float, default=0.0)
    p.add_argument("--blob-count", type=int, default=3)
    p.add_argument("--mask", default=None, help="mask image overriding the procedural mask")
    p.add_argument("--lidar-drop", type=float, default=0.0)

    p = sub.add_parser("detect", parents=[common], help="run pipeline and detector")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--scene", required=True, help="scene JSON providing the camera rig")
    p.add_argument("--mode", choices=SENSOR_MODES, default="C+L")

    p = sub.add_parser("eval", parents=[common], help="score detections against a scene")
    p.add_argument("--dets", action="append", required=True)
    p.add_argument("--scene", action="append", required=True)
    p.add_argument("--dump-pr", action="store_true")

    p = sub.add_parser("sweep", parents=[common], help="run the occlusion sweep")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--n-scenes", type=int, default=None)
    p.add_argument("--formats", default=",".join(FORMATS))
    p.add_argument("--dump-pr", action="store_true")
    return parser


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if getattr(args, "config", None) else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, master_seed=args.seed)
    return cfg


def _out(args, default: str) -> Path:
    return Path(getattr(args, "out", None) or default)


def cmd_gen(args) -> int:
    cfg = _config(args)
    out = _out(args, "scenes")
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.n):
        scene = generate_scene(cfg.gen_config, scene_seed(cfg.master_seed, i), scene_id=f"scene-{i:04d}")
        save_scene(scene, out / f"{scene.scene_id}.json")
    print(f"wrote {args.n} scene(s) to {out}")
    return 0


def cmd_render(args) -> int:
    scene = load_scene(args.scene)
    seed = getattr(args, "seed", scene.seed)
    out = _out(args, "sensors")
    write_sensor_dir(out, render_cameras(scene), render_lidar(scene, derive_seed(seed, "lidar")))
    print(f"rendered {scene.scene_id} to {out}")
    return 0


def cmd_degrade(args) -> int:
    images, cloud = read_sensor_dir(args.in_dir)
    seed = getattr(args, "seed", 0)
    if args.mask or args.camera_coverage > 0:
        sigma = args.camera_sigma if args.camera_sigma is not None else 9.0 * images[0].shape[1] / 1600.0
        spec = CameraDegradeSpec(sigma=sigma, coverage=args.camera_coverage, blob_count=args.blob_count,
                                 seed=seed, mask_path=args.mask)
        images = degrade_cameras(images, spec, args.camera_coverage, seed)
    cloud = degrade_lidar(cloud, args.lidar_drop, seed)
    out = _out(args, "degraded")
    write_sensor_dir(out, images, cloud)
    print(f"wrote degraded sensors to {out} ({len(cloud)} points)")
    return 0


def cmd_detect(args) -> int:
    cfg = _config(args)
    scene = load_scene(args.scene)
    images, cloud = read_sensor_dir(args.in_dir)
    bev = run_pipeline(images, cloud, scene.cameras, cfg.pipeline_config, args.mode)
    dets = detect(bev, cfg.detector_params)
    out = _out(args, "detections.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_detections(dets, out, scene.scene_id)
    print(f"{len(dets)} detection(s) written to {out}")
    return 0


def cmd_eval(args) -> int:
    if len(args.dets) != len(args.scene):
        raise UsageError("--dets and --scene must be given the same number of times")
    cfg = _config(args)
    dets, gts = {}, {}
    for dpath, spath in zip(args.dets, args.scene):
        scene = load_scene(spath)
        dets[scene.scene_id] = load_detections(dpath)
        gts[scene.scene_id] = list(scene.objects)
    res = evaluate(dets, gts, replace(cfg.eval_config, dump_pr=args.dump_pr))
    print(f"mAP={res.mAP:.4f} NDS={res.nds:.4f}")
    if getattr(args, "out", None):
        Path(args.out).write_text(res.to_json() + "\n")
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    if args.n_scenes is not None:
        cfg = replace(cfg, n_scenes=args.n_scenes)
    if args.dump_pr:
        cfg = replace(cfg, eval_config=replace(cfg.eval_config, dump_pr=True))
    formats = [f for f in args.formats.split(",") if f]
    if set(formats) - set(FORMATS):
        raise ConfigError(f"unknown formats {sorted(set(formats) - set(FORMATS))}; choose from {FORMATS}")
    out = _out(args, cfg.output_dir)
    n_cells = len(sweep_cells(cfg))

    def progress(done, total):
        print(f"\r{done}/{total} scenes", end="", file=sys.stderr, flush=True)

    rows = run_sweep(cfg, workers=args.workers, progress=progress)
    print(file=sys.stderr)
    emit_report(rows, out, formats, cfg)
    for r in rows:
        print(f"{r.label:<20} {str(r.severity):>6}  mAP={r.mAP:.4f} NDS={r.NDS:.4f}")
    print(f"{n_cells} cells x {cfg.n_scenes} scenes; reports in {out}")
    return 0


COMMANDS = {"gen": cmd_gen, "render": cmd_render, "degrade": cmd_degrade, "detect": cmd_detect,
            "eval": cmd_eval, "sweep": cmd_sweep}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except ConfigError as e:
        print(f"bevbench: config error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"bevbench: {e}", file=sys.stderr)
        return 1
    except (json.JSONDecodeError, ValueError) as e:
        print(f"bevbench: invalid input: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"bevbench: error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
