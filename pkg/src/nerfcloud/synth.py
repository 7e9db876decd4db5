"""Synthetic ground truth: analytic scenes, hemispherical capture, oracle renders.

The oracle renderer below is written independently of ``render`` (own ray
setup, own marching loop) so the two can be cross-checked.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import dataio
from .geometry import (
    CameraIntrinsics,
    CameraPose,
    Convention,
    GeometryError,
    look_at,
    rot_x,
    so3_exp,
)

DEVICE_ALPHA = 90.0


@dataclass
class Primitive:
    shape: str  # "sphere" or "box"
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 0.5
    lo: tuple = (0.0, 0.0, 0.0)
    hi: tuple = (1.0, 1.0, 1.0)
    density: float = 200.0
    albedo: tuple = (0.8, 0.8, 0.8)
    checker_albedo: Optional[tuple] = None
    checker_size: float = 0.25

    def __post_init__(self):
        if self.shape not in ("sphere", "box"):
            raise ValueError(f"unknown primitive shape {self.shape!r}")
        if not self.density > 0:
            raise ValueError("primitive density must be positive")

    @staticmethod
    def sphere(center, radius, **kw) -> "Primitive":
        return Primitive("sphere", center=tuple(center), radius=float(radius), **kw)

    @staticmethod
    def box(lo, hi, **kw) -> "Primitive":
        return Primitive("box", lo=tuple(lo), hi=tuple(hi), **kw)

    def contains(self, x: np.ndarray) -> np.ndarray:
        if self.shape == "sphere":
            return np.sum((x - np.asarray(self.center)) ** 2, axis=-1) < self.radius**2
        return np.all((x > np.asarray(self.lo)) & (x < np.asarray(self.hi)), axis=-1)

    def color(self, x: np.ndarray) -> np.ndarray:
        base = np.broadcast_to(np.asarray(self.albedo, dtype=np.float64), x.shape)
        if self.checker_albedo is None:
            return base.copy()
        parity = np.floor(x / self.checker_size).astype(np.int64).sum(axis=-1) % 2 == 1
        return np.where(parity[..., None], np.asarray(self.checker_albedo), base)

    def bounds(self):
        if self.shape == "sphere":
            c = np.asarray(self.center, dtype=np.float64)
            return c - self.radius, c + self.radius
        return np.asarray(self.lo, dtype=np.float64), np.asarray(self.hi, dtype=np.float64)


@dataclass
class AnalyticScene:
    primitives: list
    background: tuple = (0.0, 0.0, 0.0)
    allow_empty: bool = False  # only for renderer tests

    def __post_init__(self):
        if not self.primitives and not self.allow_empty:
            raise ValueError("scene needs at least one primitive")

    def density(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        out = np.zeros(x.shape[:-1])
        for p in self.primitives:
            out += np.where(p.contains(x), p.density, 0.0)
        return out

    def sample(self, x: np.ndarray):
        """Density and density-weighted emitted color at ``x``."""
        x = np.asarray(x, dtype=np.float64)
        sig = np.zeros(x.shape[:-1])
        col = np.zeros(x.shape)
        for p in self.primitives:
            s = np.where(p.contains(x), p.density, 0.0)
            sig += s
            col += s[..., None] * p.color(x)
        col = np.where(sig[..., None] > 0, col / np.where(sig > 0, sig, 1.0)[..., None], 0.0)
        return sig, col

    def bounds(self):
        if not self.primitives:
            return np.zeros(3), np.zeros(3)
        lo = np.min([p.bounds()[0] for p in self.primitives], axis=0)
        hi = np.max([p.bounds()[1] for p in self.primitives], axis=0)
        return lo, hi


def default_scene(density: float = 200.0) -> AnalyticScene:
    """Checkered sphere resting on a matte slab."""
    sphere = Primitive.sphere(
        (0.0, 0.0, 0.0), 0.5, density=density,
        albedo=(0.9, 0.35, 0.2), checker_albedo=(0.95, 0.85, 0.3), checker_size=0.25,
    )
    slab = Primitive.box((-0.7, -0.7, -0.6), (0.7, 0.7, -0.48), density=density, albedo=(0.35, 0.45, 0.7))
    return AnalyticScene([sphere, slab])


def sphere_scene(radius: float = 0.5, density: float = 30.0, albedo=(0.8, 0.3, 0.2)) -> AnalyticScene:
    return AnalyticScene([Primitive.sphere((0.0, 0.0, 0.0), radius, density=density, albedo=albedo)])


class AnalyticField:
    """Adapter exposing an analytic scene through the radiance-field query API."""

    def __init__(self, scene: AnalyticScene, view_color=None):
        self.scene = scene
        self.view_color = view_color

    def forward(self, x, d):
        x = np.asarray(x, dtype=np.float64)
        sig, col = self.scene.sample(x)
        if self.view_color is not None:
            dd = np.asarray(d, dtype=np.float64)
            if x.ndim == 3:
                dd = np.broadcast_to(dd[:, None, :], x.shape)
            col = self.view_color(x, dd)
        return sig, col, None

    def density(self, x):
        return self.scene.density(np.asarray(x, dtype=np.float64))

    def query(self, x, d):
        sig, col, _ = self.forward(np.asarray(x).reshape(-1, 3), np.asarray(d).reshape(-1, 3))
        return sig, col


# -- capture trajectory -------------------------------------------------------


@dataclass
class TrajectorySpec:
    azimuth_count: int = 32
    elevation_angles: tuple = (30.0, 55.0)
    radius: float = 2.0
    target: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.azimuth_count < 3:
            raise ValueError("azimuth_count must be >= 3")
        if not self.radius > 0:
            raise ValueError("radius must be positive")


def trajectory_pose(spec: TrajectorySpec, elevation: float, azimuth_index: float) -> CameraPose:
    az = 2.0 * np.pi * azimuth_index / spec.azimuth_count
    el = np.radians(elevation)
    tgt = np.asarray(spec.target, dtype=np.float64)
    eye = tgt + spec.radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
    return CameraPose(look_at(eye, tgt), Convention.OPENGL)


def generate_trajectory(spec: TrajectorySpec) -> list[CameraPose]:
    """Hemispherical ring capture: all azimuths at each elevation, elevation-major."""
    return [trajectory_pose(spec, el, i) for el in spec.elevation_angles for i in range(spec.azimuth_count)]


# -- oracle renderer ----------------------------------------------------------


def _pixel_rays(pose: CameraPose, intr: CameraIntrinsics):
    j, i = np.meshgrid(np.arange(intr.height), np.arange(intr.width), indexing="ij")
    x = (i + 0.5 - intr.cx) / intr.fx
    y = (intr.cy - (j + 0.5)) / intr.fy
    cam = np.stack([x, y, -np.ones_like(x)], axis=-1).reshape(-1, 3)
    cam /= np.linalg.norm(cam, axis=1)[:, None]
    r = pose.matrix[:3, :3]
    world = np.einsum("ij,nj->ni", r, cam)
    return pose.matrix[:3, 3], world


def oracle_render(scene: AnalyticScene, pose: CameraPose, intr: CameraIntrinsics, step: float,
                  chunk: int = 2048) -> np.ndarray:
    """Fixed-step emission-absorption ray march of the analytic scene."""
    if not step > 0:
        raise ValueError("step must be positive")
    origin, dirs = _pixel_rays(pose, intr)
    lo, hi = scene.bounds()
    lo, hi = lo - step, hi + step
    bg = np.asarray(scene.background, dtype=np.float64)
    img = np.empty((len(dirs), 3))
    for s in range(0, len(dirs), chunk):
        d = dirs[s:s + chunk]
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - origin) / d
            t2 = (hi - origin) / d
        t_in = np.nanmax(np.minimum(t1, t2), axis=1).clip(min=0.0)
        t_out = np.nanmin(np.maximum(t1, t2), axis=1)
        n_steps = np.where(t_out > t_in, np.ceil((t_out - t_in) / step), 0).astype(int)
        k_max = int(n_steps.max()) if len(n_steps) else 0
        color = np.zeros((len(d), 3))
        trans = np.ones(len(d))
        for k in range(k_max):
            live = (k < n_steps) & (trans > 1e-7)
            if not live.any():
                break
            t = t_in[live] + (k + 0.5) * step
            pts = origin + t[:, None] * d[live]
            sig, col = scene.sample(pts)
            alpha = 1.0 - np.exp(-sig * step)
            color[live] += (trans[live] * alpha)[:, None] * col
            trans[live] *= 1.0 - alpha
        img[s:s + chunk] = color + trans[:, None] * bg
    return img.reshape(intr.height, intr.width, 3)


# -- pose perturbation --------------------------------------------------------


def random_rotations(n: int, sigma_deg: float, rng) -> np.ndarray:
    """Axis-angle vectors with half-normal angles and uniformly random axes."""
    axes = rng.normal(size=(n, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    angles = np.abs(rng.normal(0.0, np.radians(sigma_deg), size=n))
    return axes * angles[:, None]


def perturb_poses(poses: Sequence[CameraPose], rot_sigma: float, trans_sigma: float, seed: int = 0):
    """Left-compose each rotation with a random rotation and jitter its position."""
    if rot_sigma < 0 or trans_sigma < 0:
        raise ValueError("perturbation sigmas must be non-negative")
    rng = np.random.default_rng(seed)
    rv = random_rotations(len(poses), rot_sigma, rng)
    tv = rng.normal(0.0, 1.0, size=(len(poses), 3)) * trans_sigma
    out = []
    for p, r, t in zip(poses, rv, tv):
        m = p.matrix.copy()
        if rot_sigma > 0:
            m[:3, :3] = so3_exp(r) @ m[:3, :3]
        m[:3, 3] += t
        out.append(CameraPose(m, p.convention))
    return out


# -- dataset ------------------------------------------------------------------

DEFAULT_FOV_DEG = 60.0


def default_intrinsics(res: int = 128, fov_deg: float = DEFAULT_FOV_DEG) -> CameraIntrinsics:
    return CameraIntrinsics.from_fov(res, res, fov_deg)


@dataclass
class DatasetFiles:
    root: Path
    images: list = field(default_factory=list)
    trajectory_log: Optional[Path] = None
    manifest: Optional[Path] = None
    calibration: Optional[Path] = None
    sfm_dir: Optional[Path] = None


def to_device_frame(poses: Sequence[CameraPose], alpha: float = DEVICE_ALPHA) -> list[CameraPose]:
    """Undo the device-to-scene rotation, giving poses as a y-up device would log them."""
    t = rot_x(-alpha)
    return [CameraPose(t @ p.matrix, Convention.DEVICE_RAW) for p in poses]


def write_calibration(intr: CameraIntrinsics, path) -> None:
    doc = {"width": intr.width, "height": intr.height, "fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def read_calibration(path) -> CameraIntrinsics:
    path = Path(path)
    if not path.is_file():
        raise dataio.DataError("calibration file not found", path)
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
        return CameraIntrinsics(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                                int(d["width"]), int(d["height"]))
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise dataio.DataError(f"bad calibration ({exc})", path) from None


def make_dataset(scene: AnalyticScene, spec: TrajectorySpec, intr: CameraIntrinsics, out_dir,
                 step: float = 0.005, image_ext: str = "png", poses=None) -> DatasetFiles:
    """Render every trajectory pose and write images plus both pose flavours.

    * ``trajectory.txt``: device-style log (y-up world, raw convention)
    * ``transforms.json``: external-style manifest (z-up world, OpenGL cameras)
    * ``sfm/``: the external poses as an SfM text export
    * ``calibration.json``: intrinsics for the device log
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    if poses is None:
        poses = generate_trajectory(spec)
    files = DatasetFiles(out)
    names = []
    for i, p in enumerate(poses):
        name = f"images/r_{i:03d}.{image_ext}"
        dataio.write_image(oracle_render(scene, p, intr, step), out / name)
        names.append(name)
    files.images = [out / n for n in names]

    device = to_device_frame(poses)
    log = dataio.TrajectoryLog([
        dataio.TrajectoryEntry(float(i) * 0.5, p.matrix, n) for i, (p, n) in enumerate(zip(device, names))
    ])
    files.trajectory_log = out / "trajectory.txt"
    dataio.write_trajectory_log(log, files.trajectory_log)
    files.manifest = out / "transforms.json"
    dataio.write_pose_manifest(poses, intr, names, files.manifest)
    files.calibration = out / "calibration.json"
    write_calibration(intr, files.calibration)
    files.sfm_dir = out / "sfm"
    dataio.write_sfm_export(files.sfm_dir, poses, intr, [Path(n).name for n in names])
    return files


# -- reference surfaces -------------------------------------------------------


def _segment_hits(prim: Primitive, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Whether the open segment a->b passes through the primitive's interior."""
    d = b - a
    if prim.shape == "sphere":
        c = np.asarray(prim.center)
        oc = a - c
        qa = np.sum(d * d, axis=1)
        qb = 2 * np.sum(oc * d, axis=1)
        qc = np.sum(oc * oc, axis=1) - prim.radius**2
        disc = qb * qb - 4 * qa * qc
        ok = disc > 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t0 = (-qb - sq) / (2 * qa)
        t1 = (-qb + sq) / (2 * qa)
        return ok & (t1 > 0) & (t0 < 1)
    lo, hi = np.asarray(prim.lo), np.asarray(prim.hi)
    with np.errstate(divide="ignore", invalid="ignore"):
        ta = (lo - a) / d
        tb = (hi - a) / d
    ta = np.where(np.isnan(ta), -np.inf, ta)
    tb = np.where(np.isnan(tb), np.inf, tb)
    t0 = np.max(np.minimum(ta, tb), axis=1)
    t1 = np.min(np.maximum(ta, tb), axis=1)
    return (t1 > t0) & (t1 > 0) & (t0 < 1)


def _sample_surface(prim: Primitive, n: int, rng) -> np.ndarray:
    if prim.shape == "sphere":
        v = rng.normal(size=(n, 3))
        return np.asarray(prim.center) + prim.radius * v / np.linalg.norm(v, axis=1, keepdims=True)
    lo, hi = np.asarray(prim.lo), np.asarray(prim.hi)
    ext = hi - lo
    areas = np.array([ext[1] * ext[2], ext[0] * ext[2], ext[0] * ext[1]]).repeat(2)
    face = rng.choice(6, size=n, p=areas / areas.sum())
    pts = lo + rng.random((n, 3)) * ext
    axis = face // 2
    side = face % 2
    pts[np.arange(n), axis] = np.where(side == 1, hi[axis], lo[axis])
    return pts


def _surface_area(prim: Primitive) -> float:
    if prim.shape == "sphere":
        return 4 * np.pi * prim.radius**2
    e = np.asarray(prim.hi) - np.asarray(prim.lo)
    return 2 * (e[0] * e[1] + e[1] * e[2] + e[0] * e[2])


def visible_surface_samples(scene: AnalyticScene, n: int, poses: Sequence[CameraPose],
                            intr: CameraIntrinsics, seed: int = 0, eps: float = 1e-4) -> np.ndarray:
    """``n`` points on the scene's outer surface that at least one camera sees."""
    rng = np.random.default_rng(seed)
    areas = np.array([_surface_area(p) for p in scene.primitives])
    cams = [(p.position, p.rotation) for p in poses]
    kept = []
    total = 0
    while total < n:
        batch = max(4 * n, 1000)
        which = rng.choice(len(areas), size=batch, p=areas / areas.sum())
        pts = np.empty((batch, 3))
        for k, prim in enumerate(scene.primitives):
            sel = which == k
            pts[sel] = _sample_surface(prim, int(sel.sum()), rng)
        # drop points buried inside another primitive
        outer = np.ones(batch, dtype=bool)
        for k, prim in enumerate(scene.primitives):
            outer &= ~((which != k) & prim.contains(pts))
        pts = pts[outer]
        seen = np.zeros(len(pts), dtype=bool)
        for eye, rot in cams:
            todo = ~seen
            if not todo.any():
                break
            p = pts[todo]
            cam = (p - eye) @ rot
            z = -cam[:, 2]
            with np.errstate(divide="ignore", invalid="ignore"):
                u = intr.cx + intr.fx * cam[:, 0] / z
                v = intr.cy - intr.fy * cam[:, 1] / z
            in_view = (z > 0) & (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)
            a = np.broadcast_to(eye, p.shape)
            b = p + eps * (eye - p) / np.linalg.norm(eye - p, axis=1, keepdims=True)
            blocked = np.zeros(len(p), dtype=bool)
            for prim in scene.primitives:
                blocked |= _segment_hits(prim, a, b)
            idx = np.flatnonzero(todo)
            seen[idx] = in_view & ~blocked
        kept.append(pts[seen])
        total += int(seen.sum())
        if total == 0 and len(kept) > 10:
            raise GeometryError("no visible surface found")
    return np.concatenate(kept)[:n]
