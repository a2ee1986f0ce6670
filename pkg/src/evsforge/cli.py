"""Command-line entry points wiring the pipeline end to end.

Subcommands: render-conditions, make-evs, init, distill, eval, export-images.
Every command is deterministic given its inputs and --seed. Exit codes:
0 success, 2 usage error, 3 data-format error, 4 runtime abort.

EVSFORGE_THREADS caps per-camera parallelism (default 1, fully serial).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import camera as cam
from .condition import load_boxes, render_conditions
from .diffusion import AffineParticleDenoiser, RemoteDenoiser, ToyDenoiser
from .errors import CountMismatch, DataFormatError, EvsForgeError
from .fmap import load_fmap, save_fmap
from .gsplat import compose_scene, load_cloud, rasterize, save_cloud
from .grid import default_palette, load_grid, load_palette
from .losses import ssim
from .trainer import EvsView, TrainView, init_cloud, load_config, train_stage1, train_stage2

PSNR_CAP = 99.0


def _thread_count() -> int:
    return max(int(os.environ.get("EVSFORGE_THREADS", "1")), 1)


def _map_over_cameras(fn, items):
    workers = _thread_count()
    if workers == 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _write_png(path, array01):
    a = np.clip(np.asarray(array01), 0.0, 1.0)
    img = (a * 255.0 + 0.5).astype(np.uint8)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    Image.fromarray(img).save(path)


def _load_image01(path: Path) -> np.ndarray:
    if path.suffix == ".fmap":
        return load_fmap(path).astype(np.float64)
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return arr


def _palette_from_args(args):
    return load_palette(args.palette) if args.palette else default_palette()


# ---------------------------------------------------------------------------
# subcommands

def cmd_render_conditions(args) -> int:
    grid = load_grid(args.grid)
    palette = _palette_from_args(args)
    boxes = load_boxes(args.boxes) if args.boxes else []
    cameras = cam.load_cameras(args.cameras)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    far = args.far if args.far else None

    def render_one(item):
        i, (intr, pose) = item
        maps = render_conditions(grid, palette, boxes, args.frame, intr, pose, far)
        save_fmap(out / f"cam_{i:05d}.fmap", maps.C)
        _write_png(out / f"cam_{i:05d}_S.png", maps.S)
        _write_png(out / f"cam_{i:05d}_D.png", maps.D)
        return i

    _map_over_cameras(render_one, list(enumerate(cameras)))
    return 0


def cmd_make_evs(args) -> int:
    cameras = cam.load_cameras(args.cameras)
    spec = cam.EvsSpec.for_level(args.family, args.level,
                                 lr_angle_deg=args.angle, d_lift_m=args.lift)
    poses = cam.make_evs([p for _, p in cameras], spec)
    cam.save_cameras(args.out, [(intr, pose) for (intr, _), pose in zip(cameras, poses)])
    return 0


def cmd_init(args) -> int:
    grid = load_grid(args.grid)
    palette = _palette_from_args(args)
    boxes = load_boxes(args.boxes) if args.boxes else []
    points = np.load(args.points) if args.points else None
    cloud = init_cloud(grid, boxes, palette, points=points)
    save_cloud(cloud, args.out, step=0)
    return 0


def _load_views(views_dir: Path, cameras) -> list:
    views = []
    for i, (intr, pose) in enumerate(cameras):
        img_path = None
        for ext in (".fmap", ".png"):
            p = views_dir / f"img_{i:05d}{ext}"
            if p.exists():
                img_path = p
                break
        if img_path is None:
            raise CountMismatch(f"no image for camera {i} in {views_dir}")
        normal_path = views_dir / f"normal_{i:05d}.fmap"
        normal = load_fmap(normal_path).astype(np.float64) if normal_path.exists() else None
        views.append(TrainView(intr=intr, pose=pose, image=_load_image01(img_path),
                               normal=normal))
    return views


def _make_denoiser(spec: str, schedule):
    if spec == "toy":
        return ToyDenoiser(schedule)
    return RemoteDenoiser(spec)


def cmd_distill(args) -> int:
    setup = load_config(args.config)
    grid = load_grid(args.grid)
    palette = _palette_from_args(args)
    boxes = load_boxes(args.boxes) if args.boxes else []
    cameras = cam.load_cameras(args.cameras)
    views = _load_views(Path(args.views), cameras)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    telemetry = out / "telemetry.jsonl"
    if telemetry.exists():
        telemetry.unlink()

    if args.stage2_only:
        if not args.checkpoint or not (Path(args.checkpoint) / "manifest.json").exists():
            from .errors import MissingStage1Checkpoint
            raise MissingStage1Checkpoint("--stage2-only needs --checkpoint of stage 1")
        cloud, _ = load_cloud(args.checkpoint, boxes)
    else:
        cloud = init_cloud(grid, boxes, palette)
        train_stage1(cloud, views, setup.stage1, weights=setup.weights,
                     seed=args.seed, out_dir=out / "stage1",
                     telemetry_path=telemetry)

    if args.evs_cameras:
        evs_cams = cam.load_cameras(args.evs_cameras)
    else:
        evs_cams = []
        for family in cam.FAMILIES:
            for level in cam.LEVELS:
                spec = cam.EvsSpec.for_level(family, level)
                poses = cam.make_evs([p for _, p in cameras], spec)
                evs_cams.extend((intr, pose)
                                for (intr, _), pose in zip(cameras, poses))
    evs_views = []
    for i, (intr, pose) in enumerate(evs_cams):
        cond = render_conditions(grid, palette, boxes, None, intr, pose)
        evs_views.append(EvsView(intr=intr, pose=pose, cond=cond,
                                 tag=f"evs_{i:05d}", far=grid.diagonal))

    eps_p = _make_denoiser(args.denoiser, setup.schedule)
    eps_phi = AffineParticleDenoiser()
    train_stage2(cloud, views, evs_views, (eps_p, eps_phi), setup.stage2,
                 schedule=setup.schedule, weights=setup.weights, seed=args.seed,
                 stage1_done=True, out_dir=out / "stage2",
                 telemetry_path=telemetry)
    return 0


@dataclass
class EvalReport:
    views: list
    mean_psnr: float
    mean_ssim: float

    def to_json(self) -> str:
        return json.dumps({"views": self.views, "mean_psnr": self.mean_psnr,
                           "mean_ssim": self.mean_ssim}, indent=1)


def psnr(a, b) -> float:
    mse = float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * float(np.log10(1.0 / mse)), PSNR_CAP)


def evaluate_dirs(renders_dir, gt_dir) -> EvalReport:
    renders = sorted(p for p in Path(renders_dir).iterdir()
                     if p.suffix in (".png", ".fmap"))
    gts = sorted(p for p in Path(gt_dir).iterdir() if p.suffix in (".png", ".fmap"))
    if len(renders) != len(gts):
        raise CountMismatch(f"{len(renders)} renders vs {len(gts)} ground-truth images")
    rows = []
    for rp, gp in zip(renders, gts):
        a = _load_image01(rp)
        b = _load_image01(gp)
        rows.append({"render": rp.name, "gt": gp.name,
                     "psnr": psnr(a, b), "ssim": ssim(a, b),
                     "pixels": int(a.shape[0] * a.shape[1])})
    return EvalReport(views=rows,
                      mean_psnr=float(np.mean([r["psnr"] for r in rows])),
                      mean_ssim=float(np.mean([r["ssim"] for r in rows])))


def cmd_eval(args) -> int:
    report = evaluate_dirs(args.renders, args.gt)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    return 0


def cmd_export_images(args) -> int:
    boxes = load_boxes(args.boxes) if args.boxes else []
    cloud, _ = load_cloud(args.checkpoint, boxes)
    cameras = cam.load_cameras(args.cameras)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params, _ = compose_scene(cloud, args.frame)

    def render_one(item):
        i, (intr, pose) = item
        outputs = rasterize(params, intr, pose)
        save_fmap(out / f"view_{i:05d}.fmap", outputs.color)
        _write_png(out / f"view_{i:05d}.png", outputs.color)

    _map_over_cameras(render_one, list(enumerate(cameras)))
    return 0


# ---------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evsforge",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render-conditions",
                       help="render 13-channel control maps per camera")
    p.add_argument("--grid", required=True)
    p.add_argument("--boxes")
    p.add_argument("--cameras", required=True)
    p.add_argument("--palette")
    p.add_argument("--frame", type=int, default=None)
    p.add_argument("--far", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_render_conditions)

    p = sub.add_parser("make-evs", help="derive extrapolated camera sets")
    p.add_argument("--cameras", required=True)
    p.add_argument("--family", required=True, choices=list(cam.FAMILIES))
    p.add_argument("--level", required=True, choices=list(cam.LEVELS))
    p.add_argument("--angle", type=float, default=None,
                   help="override the level's yaw angle (degrees)")
    p.add_argument("--lift", type=float, default=None,
                   help="override the level's upward translation (meters)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_make_evs)

    p = sub.add_parser("init", help="seed a Gaussian cloud from a grid")
    p.add_argument("--grid", required=True)
    p.add_argument("--boxes")
    p.add_argument("--points", help=".npy point file overriding voxel seeding")
    p.add_argument("--palette")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_init)

    p = sub.add_parser("distill", help="two-stage optimization with distillation")
    p.add_argument("--config", default=None, help="TOML training config")
    p.add_argument("--grid", required=True)
    p.add_argument("--boxes")
    p.add_argument("--cameras", required=True)
    p.add_argument("--views", required=True, help="directory of img_NNNNN images")
    p.add_argument("--evs-cameras", help="camera file for stage-2 EVS sampling")
    p.add_argument("--palette")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--denoiser", default="toy",
                   help="toy | tcp:<host>:<port> | stdio:<command>")
    p.add_argument("--stage2-only", action="store_true")
    p.add_argument("--checkpoint", help="stage-1 checkpoint dir for --stage2-only")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_distill)

    p = sub.add_parser("eval", help="PSNR/SSIM between two image directories")
    p.add_argument("--renders", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("export-images", help="rasterize a checkpoint per camera")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--boxes")
    p.add_argument("--cameras", required=True)
    p.add_argument("--frame", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_export_images)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except DataFormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except EvsForgeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
