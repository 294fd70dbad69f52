# ============================================
# cli.py
# ============================================
"""
Batch entry point: ``python -m fisheye_splat <subcommand> [flags]``.

Every run writes ``manifest.json`` next to its artifacts. Exit codes: 0 on
success, 2 for invalid configuration or input files, 1 for any other failure.
"""
import argparse
import os
import sys

import numpy as np
import scipy

from fisheye_splat import __version__
from fisheye_splat.core.camera_models import CameraKind, convert_mei_to_kb, fit_residual, load_cameras, save_cameras
from fisheye_splat.core.config import apply_overrides, config_hash, config_to_dict, load_config
from fisheye_splat.core.errors import ConfigError, FisheyeSplatError, SchemaError
from fisheye_splat.core.evaluation import (
    default_zones,
    run_error_analysis,
    write_report_csv,
    write_report_json,
    zone_metrics,
)
from fisheye_splat.core.gaussian_core import GaussianSet
from fisheye_splat.core.lidar_sim import load_scan_pattern, simulate_scan, write_scan
from fisheye_splat.core.log_utils import get_logger
from fisheye_splat.core.ply_io import read_gaussian_ply
from fisheye_splat.core.rasterizer import RenderOptions, render
from fisheye_splat.core.scene_graph import (
    SceneModel,
    apply_appearance,
    assemble_frame,
    load_dataset,
    load_scene,
    save_scene,
)
from fisheye_splat.core.training import evaluate_frames, init_scene, train
from fisheye_splat.core.utils import load_json, save_json, write_image_rgb, write_plane
from fisheye_splat.visualization.depth_colormap import save_depth_preview
from fisheye_splat.visualization.report_plot import plot_error_analysis

logger = get_logger(__name__)

SUBCOMMANDS = ("render", "train", "convert-camera", "error-analysis", "lidar-sim", "eval")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fisheye_splat", description="Fisheye-aware Gaussian splatting on CPU.")
    parser.add_argument("--version", action="version", version=f"fisheye_splat {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="TOML or JSON run configuration")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, help="worker threads for tile rasterization")
        p.add_argument("--stretch", choices=("on", "off"), help="polar/tangential stretching of warped Gaussians")
        p.add_argument("--order", type=int, choices=(1, 2), help="expansion order of the polar stretch")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
        return p

    p = common(sub.add_parser("render", help="render a scene through every camera"))
    p.add_argument("--scene", required=True, help="scene directory (scene.json) or Gaussian PLY")
    p.add_argument("--cameras", required=True)
    p.add_argument("--timestamp", type=float, default=0.0)
    p.add_argument("--lane-shift", type=float, default=0.0, help="lateral camera offset in meters")

    p = common(sub.add_parser("train", help="optimize a scene on a dataset"))
    p.add_argument("--dataset", required=True)
    p.add_argument("--scene", help="start from this scene instead of initializing from points.ply")

    p = common(sub.add_parser("convert-camera", help="fit Kannala-Brandt models to MEI cameras"))
    p.add_argument("--cameras", required=True)

    p = common(sub.add_parser("error-analysis", help="warp configurations vs. redistorted pinhole renders"))
    p.add_argument("--scene", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--timestamp", type=float, default=0.0)

    p = common(sub.add_parser("lidar-sim", help="simulate a LiDAR scan from the scene"))
    p.add_argument("--scene", required=True)
    p.add_argument("--pattern", required=True)
    p.add_argument("--timestamp", type=float, default=0.0)

    p = common(sub.add_parser("eval", help="PSNR/SSIM of a scene on a dataset"))
    p.add_argument("--scene", required=True)
    p.add_argument("--dataset", required=True)
    return parser


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def resolve_config(args):
    config = load_config(args.config)
    overrides = list(args.overrides)
    overrides.append(f"train.seed={args.seed}")
    if args.threads is not None:
        overrides.append(f"render.threads={args.threads}")
    if args.stretch is not None:
        flag = "true" if args.stretch == "on" else "false"
        overrides += [f"render.stretch_tangential={flag}", f"render.stretch_polar={flag}"]
    if args.order is not None:
        overrides.append(f"render.order={args.order}")
    return apply_overrides(config, overrides)


def load_scene_arg(path) -> SceneModel:
    path = str(path)
    if path.lower().endswith(".ply"):
        gaussians = read_gaussian_ply(path)
        return SceneModel(gaussians, GaussianSet.empty(0, gaussians.num_classes), [], {}, [])
    if not os.path.isdir(path):
        raise SchemaError(f"{path}: scene must be a directory with scene.json or a .ply file")
    return load_scene(path)


def write_manifest(out_dir, subcommand: str, config, args) -> None:
    """Run metadata; contains no timestamps so repeated runs are byte-identical."""
    inputs = {k: v for k, v in sorted(vars(args).items())
              if k not in ("subcommand", "out", "threads", "overrides", "config") and v is not None}
    save_json({
        "subcommand": subcommand,
        "config_hash": config_hash(config),
        "config": config_to_dict(config),
        "seed": config.train.seed,
        "inputs": inputs,
        "versions": {"fisheye_splat": __version__, "numpy": np.__version__, "scipy": scipy.__version__},
    }, os.path.join(out_dir, "manifest.json"))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_render(args, config):
    scene = load_scene_arg(args.scene)
    options = RenderOptions.from_config(config.render, config.train.sh_degree)
    gaussians = assemble_frame(scene, args.timestamp).gaussians
    for model, pose in load_cameras(args.cameras):
        if args.lane_shift:
            pose = pose.lane_shifted(args.lane_shift)
        out = render(gaussians, pose, model, options)
        color = apply_appearance(out.color, model.camera_id, scene.appearance) \
            if model.camera_id in scene.appearance else out.color
        cam_dir = os.path.join(args.out, model.camera_id)
        write_image_rgb(os.path.join(cam_dir, "color.png"), color)
        write_plane(os.path.join(cam_dir, "depth.f32"), out.depth, ["depth"])
        write_plane(os.path.join(cam_dir, "alpha.f32"), out.alpha, ["alpha"])
        write_plane(os.path.join(cam_dir, "normal.f32"), out.normal, ["nx", "ny", "nz"])
        write_plane(os.path.join(cam_dir, "intensity.f32"), out.intensity, ["intensity"])
        if out.semantic.shape[2]:
            names = scene.class_names if len(scene.class_names) == out.semantic.shape[2] \
                else [f"class_{i}" for i in range(out.semantic.shape[2])]
            write_plane(os.path.join(cam_dir, "semantic.f32"), out.semantic, names)
        save_depth_preview(os.path.join(cam_dir, "depth_preview.png"), out.depth, out.alpha)
        logger.info(f"✅ Rendered {model.camera_id} ({model.kind.value}, {model.width}x{model.height})")


def cmd_train(args, config):
    dataset = load_dataset(args.dataset)
    scene = load_scene_arg(args.scene) if args.scene else init_scene(dataset, config.train)
    result = train(dataset, scene, config, metrics_path=os.path.join(args.out, "metrics.jsonl"), progress=True)
    save_scene(result.scene, os.path.join(args.out, "scene"))


def cmd_convert_camera(args, config):
    converted, report = [], []
    for model, pose in load_cameras(args.cameras):
        if model.kind is not CameraKind.MEI:
            converted.append((model, pose))
            continue
        kb = convert_mei_to_kb(model)
        residual = fit_residual(model, kb)
        converted.append((kb, pose))
        report.append({"camera_id": model.camera_id, "xi": model.xi, "k": list(kb.k),
                       "max_residual_rad": residual})
        logger.info(f"{model.camera_id}: max theta_d residual {residual:.2e} rad")
    if not report:
        logger.warning("⚠️ no MEI cameras found, cameras copied unchanged")
    os.makedirs(args.out, exist_ok=True)
    save_cameras(os.path.join(args.out, "cameras.json"), converted)
    save_json({"conversions": report}, os.path.join(args.out, "conversion.json"))


def cmd_error_analysis(args, config):
    scene = load_scene_arg(args.scene)
    gaussians = assemble_frame(scene, args.timestamp).gaussians
    options = RenderOptions.from_config(config.render, config.train.sh_degree)
    ev = config.evaluation
    by_camera = {}
    for model, pose in load_cameras(args.cameras):
        if model.is_fisheye:
            by_camera.setdefault(model.camera_id, (model, []))[1].append(pose)
    if not by_camera:
        raise SchemaError(f"{args.cameras}: no fisheye camera to analyse")
    for camera_id, (model, poses) in sorted(by_camera.items()):
        report = run_error_analysis(gaussians, poses, model, options=options,
                                    reference_max_deg=ev.reference_max_deg, fill=ev.fill_value,
                                    record_wall_time=config.train.record_wall_time)
        prefix = "report" if len(by_camera) == 1 else f"report_{camera_id}"
        write_report_csv(report, os.path.join(args.out, f"{prefix}.csv"))
        write_report_json(report, os.path.join(args.out, f"{prefix}.json"))
        plot_error_analysis(report, os.path.join(args.out, f"{prefix}.png"))


def cmd_lidar_sim(args, config):
    scene = load_scene_arg(args.scene)
    pattern = load_scan_pattern(args.pattern)
    sensor = load_json(args.pattern)
    origin = np.asarray(sensor.get("origin", [0.0, 0.0, 0.0]), dtype=np.float64)
    R = np.asarray(sensor.get("rotation", np.eye(3).reshape(-1).tolist()), dtype=np.float64).reshape(3, 3)
    options = RenderOptions.from_config(config.render, config.train.sh_degree)
    scan = simulate_scan(scene, pattern, origin, R, args.timestamp, config.lidar, options)
    write_scan(args.out, scan)


def cmd_eval(args, config):
    scene = load_scene_arg(args.scene)
    dataset = load_dataset(args.dataset)
    options = RenderOptions.from_config(config.render, config.train.sh_degree)
    result = evaluate_frames(scene, dataset, options=options)

    ev = config.evaluation
    zones = {}
    for frame in dataset.frames:
        model = dataset.cameras[frame.camera_id][0]
        if not model.is_fisheye:
            continue
        out = render(assemble_frame(scene, frame.timestamp).gaussians, frame.pose, model, options)
        color = apply_appearance(out.color, frame.camera_id, scene.appearance) \
            if frame.camera_id in scene.appearance else out.color
        masks = {k: m for k, m in default_zones(model, ev.zone_band, ev.zone_c_low).items() if np.any(m)}
        zones[frame.name] = zone_metrics(color, frame.image, masks)
    result["zones"] = zones
    save_json(result, os.path.join(args.out, "metrics.json"))
    for kind, row in sorted(result["summary"].items()):
        logger.info(f"{kind}: PSNR {row['psnr']:.2f} dB, SSIM {row['ssim']:.4f} over {row['frames']} frames")


COMMANDS = {
    "render": cmd_render,
    "train": cmd_train,
    "convert-camera": cmd_convert_camera,
    "error-analysis": cmd_error_analysis,
    "lidar-sim": cmd_lidar_sim,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"fisheye_splat: error: {e}", file=sys.stderr)
        return 2
    except SystemExit as e:
        # --help / --version
        return int(e.code or 0)

    try:
        if args.seed < 0:
            raise ConfigError("--seed: must be a non-negative integer")
        config = resolve_config(args)
    except ConfigError as e:
        logger.error(f"❌ {e}")
        return 2

    try:
        os.makedirs(args.out, exist_ok=True)
        COMMANDS[args.subcommand](args, config)
        write_manifest(args.out, args.subcommand, config, args)
    except (ConfigError, SchemaError) as e:
        logger.error(f"❌ {e}")
        return 2
    except FisheyeSplatError as e:
        logger.error(f"❌ {args.subcommand} failed: {e}", exc_info=True)
        return 1
    except Exception as e:
        logger.error(f"❌ {args.subcommand} failed unexpectedly: {e}", exc_info=True)
        return 1
    logger.info(f"✅ {args.subcommand} finished, artifacts in {args.out}")
    return 0
