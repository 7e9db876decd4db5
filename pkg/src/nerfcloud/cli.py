"""Command-line pipeline: synth -> normalize -> train -> extract -> eval.

Every stage reads and writes documented files only. Exit codes: 0 success,
1 domain or I/O error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import dataio, extract, geometry, synth, train
from .field import RadianceField
from .render import RenderConfig, render_image

log = logging.getLogger("nerfcloud")


class UsageError(Exception):
    pass


def _positive(kind):
    def conv(s):
        v = kind(s)
        if not v > 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {s}")
        return v
    return conv


def _non_negative(s):
    v = float(s)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {s}")
    return v


# -- synth --------------------------------------------------------------------


def cmd_synth(args) -> int:
    n_elev = len(args.elevations)
    if args.images % n_elev:
        raise UsageError(f"--images {args.images} is not a multiple of {n_elev} elevations")
    spec = synth.TrajectorySpec(args.images // n_elev, tuple(args.elevations), args.radius)
    intr = synth.default_intrinsics(args.res, args.fov)
    poses = synth.generate_trajectory(spec)
    if args.perturb_rot or args.perturb_trans:
        # images come from the exact poses; only the pose files carry the noise
        noisy = synth.perturb_poses(poses, args.perturb_rot, args.perturb_trans, args.seed)
    else:
        noisy = None
    files = synth.make_dataset(synth.default_scene(), spec, intr, args.out, step=args.step, poses=poses)
    if noisy is not None:
        names = [str(p.relative_to(files.root)) for p in files.images]
        dataio.write_pose_manifest(poses, intr, names, files.root / "transforms_exact.json")
        _rewrite_pose_files(files, noisy, intr, names)
    ref = synth.visible_surface_samples(synth.default_scene(), args.surface_samples, poses, intr, seed=args.seed)
    dataio.write_ply(extract.PointCloud(ref, np.zeros((len(ref), 3), dtype=np.uint8)), files.root / "surface.ply")
    print(f"wrote {len(files.images)} images and pose files to {files.root}")
    return 0


def _rewrite_pose_files(files, poses, intr, names):
    device = synth.to_device_frame(poses)
    entries = [dataio.TrajectoryEntry(i * 0.5, p.matrix, n) for i, (p, n) in enumerate(zip(device, names))]
    dataio.write_trajectory_log(dataio.TrajectoryLog(entries), files.trajectory_log)
    dataio.write_pose_manifest(poses, intr, names, files.manifest)
    dataio.write_sfm_export(files.sfm_dir, poses, intr, [Path(n).name for n in names])


# -- normalize ----------------------------------------------------------------


def _rel(path: Path, start: Path) -> str:
    return os.path.relpath(path, start)


def cmd_normalize(args) -> int:
    src = Path(args.input)
    out = Path(args.out)
    if args.source == "device":
        logf = src if src.is_file() else src / "trajectory.txt"
        tlog = dataio.parse_trajectory_log(logf)
        calib = Path(args.calibration) if args.calibration else logf.parent / "calibration.json"
        intr = synth.read_calibration(calib)
        poses = tlog.poses(geometry.Convention.DEVICE_RAW)
        images = [logf.parent / e.image_path for e in tlog.entries]
        alpha = args.alpha
    else:
        sfm_dir = src if src.is_dir() else src.parent
        export = dataio.parse_sfm_export(sfm_dir / "cameras.txt", sfm_dir / "images.txt")
        cams = {im.camera_id for im in export.images}
        if len(cams) != 1:
            raise dataio.DataError("SfM export must use a single shared camera", sfm_dir)
        intr = export.cameras[cams.pop()].intrinsics
        poses = dataio.sfm_to_camera_poses(export)
        img_dir = Path(args.images) if args.images else sfm_dir.parent / "images"
        images = [img_dir / im.name for im in export.images]
        alpha = 0.0
    for p in images:
        if not p.is_file():
            raise dataio.DataError("referenced image not found", p)

    normed, report = geometry.normalize_pipeline(poses, alpha=alpha, apply_rotation=alpha != 0.0,
                                                 target=args.scale_target)
    if args.source == "device" and alpha == 0.0:
        # rotation skipped on request: relabel so the poses are usable downstream
        normed = [geometry.CameraPose(p.matrix, geometry.Convention.OPENGL) for p in normed]
    out.parent.mkdir(parents=True, exist_ok=True)
    rep = report.to_dict()
    rep["source"] = args.source
    dataio.write_pose_manifest(normed, intr, [_rel(p, out.parent) for p in images], out,
                               extra={"normalization": rep})
    rep_path = Path(args.report) if args.report else out.with_name(out.stem + "_report.json")
    rep_path.write_text(json.dumps(rep, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(rep))
    return 0


# -- train --------------------------------------------------------------------


def cmd_train(args) -> int:
    ds = train.Dataset.from_manifest(args.manifest)
    cfg = train.TrainConfig(
        steps=args.steps, rays_per_batch=args.rays, samples_per_ray=args.samples,
        lr_field=args.lr_field, lr_field_final=args.lr_field_final, lr_pose=args.lr_pose,
        lr_pose_final=args.lr_pose_final, pose_warmup=args.pose_warmup, refine_poses=args.refine_poses, seed=args.seed,
        bound=args.bound, eval_pixels=args.eval_pixels, log_every=args.log_every,
    )

    def progress(step, loss, p):
        print(f"step {step:6d}  loss {loss:.6f}  psnr {p:6.2f} dB", flush=True)

    res = train.run_training(ds, cfg, args.out, progress=progress)
    print(f"final psnr {res.final_psnr:.3f} dB over {len(ds)} images ({res.seconds:.0f} s)")
    return 0


# -- extract ------------------------------------------------------------------


def cmd_extract(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise dataio.DataError("checkpoint not found", ckpt)
    fld = RadianceField.load(ckpt)
    if args.bbox:
        lo, hi = np.array(args.bbox[:3]), np.array(args.bbox[3:])
    else:
        b = fld.config.bound
        lo, hi = np.full(3, -b), np.full(3, b)
    grid = extract.sample_density_grid(fld, (lo, hi), args.res)
    cloud = extract.threshold_filter(grid, args.delta_t)
    if args.color == "fixed":
        strategy = extract.FixedDirection(tuple(args.direction))
    else:
        strategy = extract.DirectionAverage(args.k)
    cloud = extract.colorize(fld, cloud, strategy)
    if args.report:
        rep = json.loads(Path(args.report).read_text(encoding="utf-8"))
        rep = rep.get("normalization", rep)
        pos = cloud.positions / rep["scale"] + np.asarray(rep["center"])
        cloud = extract.PointCloud(pos, cloud.colors, cloud.density)
    dataio.write_ply(cloud, args.out, ascii=args.ascii)
    print(f"kept {len(cloud)} of {grid.values.size} nodes (delta_t={args.delta_t}); wrote {args.out}")
    return 0


# -- eval ---------------------------------------------------------------------


def cmd_eval(args) -> int:
    cloud = dataio.read_ply(args.cloud)
    ref = dataio.read_ply(args.reference)
    stats = extract.cloud_stats(cloud, ref, args.radius)
    d = stats.to_dict()
    for k, v in d.items():
        print(f"{k}: {v}")
    if args.csv:
        path = Path(args.csv)
        new = not path.exists()
        with open(path, "a", encoding="utf-8") as fh:
            if new:
                fh.write(",".join(["cloud", "reference"] + list(d)) + "\n")
            fh.write(",".join([str(args.cloud), str(args.reference)] + [repr(v) for v in d.values()]) + "\n")
    return 0


# -- render -------------------------------------------------------------------


def cmd_render(args) -> int:
    fld = RadianceField.load(args.checkpoint)
    man = dataio.parse_pose_manifest(args.manifest)
    if not 0 <= args.index < len(man.poses):
        raise UsageError(f"--index {args.index} outside 0..{len(man.poses) - 1}")
    cfg = RenderConfig(n_samples=args.samples, bound=fld.config.bound)
    img, _, _ = render_image(fld, man.poses[args.index], man.intrinsics, cfg)
    dataio.write_image(img, args.out)
    print(f"wrote {args.out}")
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nerfcloud", description=__doc__.splitlines()[0])
    ap.add_argument("--threads", type=_positive(int), default=None, help="cap on worker threads")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render the synthetic capture dataset")
    p.add_argument("--out", required=True, help="dataset directory to create")
    p.add_argument("--images", type=_positive(int), default=64, help="total image count (default 64)")
    p.add_argument("--res", type=_positive(int), default=128, help="square image size in pixels (default 128)")
    p.add_argument("--fov", type=_positive(float), default=synth.DEFAULT_FOV_DEG, help="horizontal field of view, degrees")
    p.add_argument("--radius", type=_positive(float), default=2.0, help="camera distance from the target")
    p.add_argument("--elevations", type=float, nargs="+", default=[30.0, 55.0], help="ring elevations, degrees")
    p.add_argument("--step", type=_positive(float), default=0.005, help="oracle ray-march step")
    p.add_argument("--perturb-rot", type=_non_negative, default=0.0, help="pose-file rotation noise sigma, degrees")
    p.add_argument("--perturb-trans", type=_non_negative, default=0.0, help="pose-file translation noise sigma, scene units")
    p.add_argument("--surface-samples", type=_positive(int), default=10000, help="reference surface points written to surface.ply")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("normalize", help="convert device or SfM poses into a normalized manifest")
    p.add_argument("--input", required=True, help="trajectory log (device) or SfM directory (sfm)")
    p.add_argument("--source", choices=["device", "sfm"], default="device")
    p.add_argument("--out", required=True, help="manifest JSON to write")
    p.add_argument("--alpha", type=float, default=90.0, help="x-axis rotation for device poses, degrees (0 skips)")
    p.add_argument("--calibration", help="intrinsics JSON for device poses (default: next to the log)")
    p.add_argument("--images", help="image directory for SfM names (default: ../images)")
    p.add_argument("--scale-target", type=_positive(float), default=geometry.DEFAULT_SCALE_TARGET,
                   help="mean camera distance after scaling")
    p.add_argument("--report", help="where to write the normalization report JSON")
    p.set_defaults(func=cmd_normalize)

    d = train.TrainConfig()
    p = sub.add_parser("train", help="fit the radiance field")
    p.add_argument("--manifest", required=True, help="normalized pose manifest")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--steps", type=_positive(int), default=d.steps, help=f"optimization steps (default {d.steps})")
    p.add_argument("--rays", type=_positive(int), default=d.rays_per_batch, help="rays per batch")
    p.add_argument("--samples", type=_positive(int), default=d.samples_per_ray, help="samples per ray")
    p.add_argument("--lr-field", type=_positive(float), default=d.lr_field)
    p.add_argument("--lr-field-final", type=_positive(float), default=d.lr_field_final)
    p.add_argument("--lr-pose", type=_positive(float), default=d.lr_pose)
    p.add_argument("--lr-pose-final", type=_positive(float), default=None,
                   help="pose learning rate at the last step (default: constant --lr-pose)")
    p.add_argument("--pose-warmup", type=int, default=d.pose_warmup, help="steps before pose updates start")
    p.add_argument("--refine-poses", action="store_true", help="also optimize per-camera pose corrections")
    p.add_argument("--bound", type=_positive(float), default=d.bound, help="scene cube half-size")
    p.add_argument("--eval-pixels", type=int, default=d.eval_pixels, help="pixels per image for the final eval (0 = all)")
    p.add_argument("--log-every", type=int, default=d.log_every)
    p.add_argument("--seed", type=int, default=d.seed)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", help="threshold the density field into a colored point cloud")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="PLY file to write")
    p.add_argument("--delta-t", type=_non_negative, default=extract.DEFAULT_DELTA_T, help="density threshold (default 15)")
    p.add_argument("--res", type=int, nargs="+", default=[256], help="grid nodes per axis (1 or 3 values)")
    p.add_argument("--bbox", type=float, nargs=6, metavar=("XMIN", "YMIN", "ZMIN", "XMAX", "YMAX", "ZMAX"),
                   help="sampling box (default: the field's scene cube)")
    p.add_argument("--color", choices=["fixed", "average"], default="fixed")
    p.add_argument("--direction", type=float, nargs=3, default=[0.0, 0.0, -1.0], help="view direction for --color fixed")
    p.add_argument("--k", type=_positive(int), default=6, help="direction count for --color average")
    p.add_argument("--report", help="normalization report; maps points back to the capture frame")
    p.add_argument("--ascii", action="store_true", help="write ASCII PLY")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("eval", help="compare a point cloud against a reference cloud")
    p.add_argument("--cloud", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--radius", type=_positive(float), default=0.05, help="match radius, scene units")
    p.add_argument("--csv", help="append the stats as a CSV row")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="render one manifest view from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--samples", type=_positive(int), default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "extract" and len(args.res) not in (1, 3):
        ap.error("--res takes 1 or 3 values")
    if args.command == "extract":
        args.res = args.res[0] if len(args.res) == 1 else tuple(args.res)
    limiter = None
    if args.threads:
        import numba
        from threadpoolctl import threadpool_limits

        numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
        limiter = threadpool_limits(args.threads)
    try:
        return args.func(args)
    except UsageError as exc:
        ap.print_usage(sys.stderr)
        print(f"nerfcloud: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"nerfcloud: error: {exc}", file=sys.stderr)
        return 1
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
