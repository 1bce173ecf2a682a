"""Command-line interface: train / mesh / render / eval / ablate.

Every subcommand is deterministic given its seed; failures exit non-zero with
a one-line machine-readable JSON error on stderr (2 bad input, 3 numeric
failure, 4 empty result). GSDF_THREADS caps the torch worker count.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig
from .dataset import analytic_from_manifest, load_dataset, psnr
from .errors import EmptyResultError, GsdfError, InvalidInputError
from .losses import ssim
from .mesher import (chamfer_distance, extract_mesh, read_ply_mesh,
                     sample_mesh_surface, write_ply)
from .rasterizer import RenderSettings, render
from .scene import Camera, load_scene_checkpoint
from .sdf_field import SdfField
from .trainer import train

ABLATION_REGISTRY = {
    "sdf2o": ("gaussian", "bell"),
    "norm": ("sigmoid", "contraction"),
    "multires": ("on", "off"),
    "geo": ("on", "off"),
    "prune": ("sdf", "opacity"),
}


def _error_json(e: Exception) -> str:
    return json.dumps({"error": type(e).__name__, "message": str(e)})


def _load_config(args) -> TrainConfig:
    cfg = TrainConfig()
    if getattr(args, "config", None):
        cfg = TrainConfig.from_file(args.config)
    if getattr(args, "iters", None) is not None and args.iters != cfg.iterations:
        cfg = cfg.scaled_to(args.iters)
    overrides = dict(kv.split("=", 1) for kv in getattr(args, "set", None) or [])
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return cfg.validate()


def _parse_holdout(text) -> tuple:
    if not text:
        return ()
    try:
        return tuple(int(x) for x in text.split(",") if x.strip() != "")
    except ValueError as e:
        raise InvalidInputError(f"bad holdout list '{text}': {e}") from e


def cmd_train(args) -> int:
    cfg = _load_config(args)
    image_set, cameras, points, colors, _ = load_dataset(args.data)
    result = train(image_set, cameras, init_points=points, cfg=cfg,
                   seed=args.seed, out_dir=args.out,
                   holdout=_parse_holdout(args.holdout), init_colors=colors)
    summary = {"iterations": cfg.iterations, "gaussians": len(result.cloud),
               "truncation": result.truncation,
               "final_loss": result.log[-1]["total"] if result.log else None,
               "out": str(args.out)}
    print(json.dumps(summary))
    return 0


def _load_checkpoint_dir(path):
    p = Path(path)
    scene_path = p / "scene.jsonl" if p.is_dir() else p
    field_path = scene_path.parent / "field.bin"
    cloud, bounds, iteration = load_scene_checkpoint(scene_path)
    field = SdfField.load(field_path) if field_path.exists() else None
    return cloud, bounds, iteration, field


def cmd_mesh(args) -> int:
    cloud, _, _, field = _load_checkpoint_dir(args.checkpoint)
    if field is None:
        raise InvalidInputError("mesh extraction needs field.bin next to the scene checkpoint")
    radius_sigma = float("inf") if args.radius_sigma in ("inf", "Inf") \
        else float(args.radius_sigma)
    with torch.no_grad():
        means = cloud.means.double().numpy()
        scales = cloud.scales.double().numpy()
    mesh, stats = extract_mesh(means, scales, field, resolution=args.resolution,
                               radius_sigma=radius_sigma)
    write_ply(args.out, mesh)
    report = {"vertices": stats.vertex_count, "triangles": stats.triangle_count,
              "active_fraction": stats.active_fraction,
              "active_cells": stats.active_cells, "total_cells": stats.total_cells,
              "wall_time_s": stats.wall_time_s, "out": str(args.out)}
    Path(str(args.out) + ".stats.json").write_text(json.dumps(report, indent=2))
    print(json.dumps(report))
    return 0


def _camera_from_json(path) -> Camera:
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise InvalidInputError(f"cannot read camera JSON: {e}") from e
    try:
        return Camera.from_world_to_cam(d["fx"], d["fy"], d["cx"], d["cy"],
                                        d["width"], d["height"], d["near"], d["far"],
                                        d["world_to_cam"], id=str(d.get("id", "cam")))
    except KeyError as e:
        raise InvalidInputError(f"camera JSON missing field {e}") from e


def cmd_render(args) -> int:
    import imageio.v3 as iio
    cloud, _, _, _ = _load_checkpoint_dir(args.checkpoint)
    camera = _camera_from_json(args.camera)
    with torch.no_grad():
        maps = render(cloud, camera, background=(0, 0, 0),
                      settings=RenderSettings())
        color = maps.color.numpy()
        depth = maps.depth.numpy()
        normal = maps.normal.numpy()
    prefix = str(args.out)
    iio.imwrite(prefix + "_color.png",
                (np.clip(color, 0, 1) * 255).round().astype(np.uint8))
    dmax = float(depth.max())
    scale = (dmax / 65535.0) if dmax > 0 else 1.0
    iio.imwrite(prefix + "_depth.png",
                np.clip(depth / scale, 0, 65535).round().astype(np.uint16))
    Path(prefix + "_depth.json").write_text(json.dumps(
        {"scale": scale, "units": "world", "max_depth": dmax}))
    iio.imwrite(prefix + "_normal.png",
                (np.clip(normal * 0.5 + 0.5, 0, 1) * 255).round().astype(np.uint8))
    print(json.dumps({"color": prefix + "_color.png", "depth": prefix + "_depth.png",
                      "normal": prefix + "_normal.png"}))
    return 0


def _holdout_metrics(cloud, image_set, cameras, holdout):
    values = []
    for idx in holdout:
        if idx < 0 or idx >= len(image_set.views):
            raise InvalidInputError(f"holdout index {idx} out of range")
        view = image_set.views[idx]
        cam = cameras[view.camera_id]
        with torch.no_grad():
            maps = render(cloud, cam)
            img = maps.color.double().numpy()
        values.append((psnr(img, view.image),
                       float(ssim(torch.as_tensor(img), torch.as_tensor(view.image)))))
    return values


def cmd_eval(args) -> int:
    cloud, _, _, _ = _load_checkpoint_dir(args.checkpoint)
    image_set, cameras, _, _, manifest = load_dataset(args.data)
    analytic = analytic_from_manifest(manifest)
    report: dict = {"checkpoint": str(args.checkpoint)}

    if args.mesh:
        mesh = read_ply_mesh(args.mesh)
        if analytic is None:
            report["chamfer"] = None
            report["notice"] = "no analytic descriptor in dataset: chamfer omitted"
        else:
            rng = np.random.default_rng(args.seed)
            ours = sample_mesh_surface(mesh, args.samples, rng)
            gt = analytic.surface_samples(args.samples, rng)
            report["chamfer"] = chamfer_distance(ours, gt)
        stats_path = Path(str(args.mesh) + ".stats.json")
        if stats_path.exists():
            st = json.loads(stats_path.read_text())
            report["active_fraction"] = st.get("active_fraction")
            report["meshing_wall_time_s"] = st.get("wall_time_s")

    holdout = _parse_holdout(args.holdout)
    if holdout:
        vals = _holdout_metrics(cloud, image_set, cameras, holdout)
        report["psnr"] = float(np.mean([v[0] for v in vals]))
        report["ssim"] = float(np.mean([v[1] for v in vals]))
        report["per_view"] = [{"view": i, "psnr": v[0], "ssim": v[1]}
                              for i, v in zip(holdout, vals)]

    log_path = Path(args.checkpoint) / "losses.jsonl" if Path(args.checkpoint).is_dir() else None
    if log_path is not None and log_path.exists():
        counts = [json.loads(l)["gaussian_count"] for l in log_path.read_text().splitlines()
                  if l.strip()]
        if counts:
            report["gaussian_count"] = {"initial": counts[0], "final": counts[-1],
                                        "max": max(counts)}
    out = json.dumps(report, indent=2)
    print(out)
    if args.out:
        Path(args.out).write_text(out)
    return 0


def parse_variant(text: str) -> dict:
    """'ours' or 'key=value,key=value' against the closed ablation registry."""
    if text.strip() in ("ours", ""):
        return {}
    out = {}
    for part in text.split(","):
        if "=" not in part:
            raise InvalidInputError(
                f"bad variant '{part}'; registry: {json.dumps(ABLATION_REGISTRY)}")
        k, v = (x.strip() for x in part.split("=", 1))
        if k not in ABLATION_REGISTRY or v not in ABLATION_REGISTRY[k]:
            raise InvalidInputError(
                f"unknown variant '{part}'; registry: {json.dumps(ABLATION_REGISTRY)}")
        out[k] = v
    return out


def apply_variant(cfg: TrainConfig, variant: dict) -> TrainConfig:
    import dataclasses
    patch = {}
    if "sdf2o" in variant:
        patch["sdf2o"] = variant["sdf2o"]
    if "norm" in variant:
        patch["normalization"] = variant["norm"]
    if "multires" in variant:
        patch["multires"] = variant["multires"] == "on"
    if "geo" in variant:
        patch["geo"] = variant["geo"] == "on"
    if "prune" in variant:
        patch["prune_mode"] = variant["prune"]
    return dataclasses.replace(cfg, **patch).validate()


def run_variant(name: str, variant: dict, data, cfg: TrainConfig, seed: int,
                out_dir: Path, holdout: tuple, mesh_resolution: int = 64) -> dict:
    image_set, cameras, points, colors, manifest = load_dataset(data)
    vcfg = apply_variant(cfg, variant)
    vdir = out_dir / name
    result = train(image_set, cameras, init_points=points, cfg=vcfg, seed=seed,
                   out_dir=vdir, holdout=holdout, init_colors=colors)
    row = {"variant": name, "gaussians": len(result.cloud),
           "final_loss": result.log[-1]["total"] if result.log else None}
    surface_ops = [l["surface_opacity"] for l in result.log if "surface_opacity" in l]
    row["surface_opacity"] = surface_ops[-1] if surface_ops else None
    # population at the full-resolution mark and at the end
    marks = [p["count"] for p in result.population if p["iter"] >= vcfg.full_res_from]
    row["count_at_fullres_mark"] = marks[0] if marks else len(result.cloud)

    analytic = analytic_from_manifest(manifest)
    if analytic is not None and vcfg.iterations > vcfg.sdf_from:
        try:
            with torch.no_grad():
                means = result.cloud.means.double().numpy()
                scales = result.cloud.scales.double().numpy()
            mesh, stats = extract_mesh(means, scales, result.field,
                                       resolution=mesh_resolution)
            write_ply(vdir / "mesh.ply", mesh)
            rng = np.random.default_rng(seed)
            row["chamfer"] = chamfer_distance(
                sample_mesh_surface(mesh, 20000, rng),
                analytic.surface_samples(20000, rng))
            row["active_fraction"] = stats.active_fraction
            row["meshing_wall_time_s"] = stats.wall_time_s
        except (EmptyResultError, GsdfError) as e:
            row["chamfer"] = None
            row["mesh_error"] = str(e)
    if holdout:
        vals = _holdout_metrics(result.cloud, image_set, cameras, holdout)
        row["psnr"] = float(np.mean([v[0] for v in vals]))
    return row


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    holdout = _parse_holdout(args.holdout)
    rows = []
    for spec_text in args.variants.split(";"):
        spec_text = spec_text.strip()
        variant = parse_variant(spec_text)
        name = spec_text.replace("=", "_").replace(",", "__") or "ours"
        rows.append(run_variant(name, variant, args.data, cfg, args.seed, out_dir,
                                holdout, mesh_resolution=args.resolution))
    table_path = out_dir / "ablation.json"
    table_path.write_text(json.dumps(rows, indent=2))
    cols = ["variant", "gaussians", "count_at_fullres_mark", "surface_opacity",
            "chamfer", "psnr", "final_loss"]
    lines = ["  ".join(f"{c:>22}" for c in cols)]
    for r in rows:
        lines.append("  ".join(
            f"{r.get(c) if r.get(c) is not None else '-':>22.6g}"
            if isinstance(r.get(c), float) else f"{str(r.get(c, '-')):>22}"
            for c in cols))
    text = "\n".join(lines)
    (out_dir / "ablation.txt").write_text(text + "\n")
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gsdf",
                                description="Joint Gaussian-splat / SDF optimization, "
                                            "meshing, rendering, and evaluation.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train primitives and SDF on a dataset")
    t.add_argument("--data", required=True, help="dataset directory or manifest path")
    t.add_argument("--config", help="JSON (or TOML on py>=3.11) config file")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--iters", type=int, help="iteration count; rescales the schedule")
    t.add_argument("--holdout", default="", help="comma-separated view indices to hold out")
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any TrainConfig field (repeatable)")
    t.set_defaults(fn=cmd_train)

    m = sub.add_parser("mesh", help="extract the zero level set near the primitives")
    m.add_argument("--checkpoint", required=True, help="train output dir (scene.jsonl + field.bin)")
    m.add_argument("--resolution", type=int, default=64)
    m.add_argument("--radius-sigma", default="3.0", dest="radius_sigma",
                   help="cell selection radius in units of max scale axis; 'inf' for dense")
    m.add_argument("--out", required=True, help="output PLY path")
    m.set_defaults(fn=cmd_mesh)

    r = sub.add_parser("render", help="render a checkpoint from a camera JSON")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--camera", required=True, help="camera JSON file")
    r.add_argument("--out", required=True, help="output path prefix")
    r.set_defaults(fn=cmd_render)

    e = sub.add_parser("eval", help="chamfer vs analytic surface + holdout PSNR/SSIM")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--mesh", help="mesh PLY to score")
    e.add_argument("--holdout", default="", help="comma-separated view indices")
    e.add_argument("--samples", type=int, default=100000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", help="also write the report JSON here")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="run registry variants on one dataset and seed")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--variants", required=True,
                   help="semicolon-separated variant specs, e.g. 'ours;sdf2o=bell'")
    a.add_argument("--config", help="JSON config file")
    a.add_argument("--iters", type=int)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--holdout", default="")
    a.add_argument("--resolution", type=int, default=64)
    a.add_argument("--set", action="append", metavar="KEY=VALUE")
    a.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None) -> int:
    threads = os.environ.get("GSDF_THREADS")
    if threads:
        try:
            torch.set_num_threads(max(1, int(threads)))
        except ValueError:
            print(_error_json(InvalidInputError(f"bad GSDF_THREADS value '{threads}'")),
                  file=sys.stderr)
            return 2
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except GsdfError as e:
        print(_error_json(e), file=sys.stderr)
        return e.exit_code
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(_error_json(e), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
