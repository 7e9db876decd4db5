"""Optimization loop: random ray batches, Adam, optional per-camera pose refinement.

One "step" is one mini-batch update. Pose corrections are axis-angle plus
translation offsets applied on top of the base (normalized) poses:
``R = exp([r]x) R_base``, ``t = t_base + v``.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import dataio
from .field import FieldConfig, HashGridConfig, RadianceField
from .geometry import CameraIntrinsics, CameraPose, Convention, rotation_angle, so3_exp, so3_left_jacobian
from .render import RenderConfig, camera_directions, mse, psnr, render_rays, render_rays_backward

log = logging.getLogger(__name__)


class TrainError(RuntimeError):
    pass


class TrainingHalted(TrainError):
    """Raised on a non-finite loss; ``snapshot`` points at the diagnostic dump."""

    def __init__(self, msg: str, snapshot: Optional[Path] = None):
        super().__init__(msg)
        self.snapshot = snapshot


@dataclass
class TrainConfig:
    steps: int = 20000
    rays_per_batch: int = 1024
    samples_per_ray: int = 32
    lr_field: float = 1e-2
    lr_field_final: float = 1e-3
    lr_pose: float = 1e-3
    lr_pose_final: Optional[float] = None  # None = constant pose learning rate
    pose_warmup: int = 1000
    refine_poses: bool = False
    seed: int = 0
    bound: float = 4.0
    eval_pixels: int = 0  # 0 = every pixel of every image
    eval_samples: int = 0  # 0 = samples_per_ray
    log_every: int = 500

    def __post_init__(self):
        if self.steps < 1:
            raise TrainError(f"steps must be >= 1, got {self.steps}")
        if self.rays_per_batch < 1 or self.samples_per_ray < 1:
            raise TrainError("rays_per_batch and samples_per_ray must be >= 1")
        if self.lr_pose_final is None:
            self.lr_pose_final = self.lr_pose
        for name in ("lr_field", "lr_field_final", "lr_pose", "lr_pose_final"):
            if not getattr(self, name) > 0:
                raise TrainError(f"{name} must be positive")
        if self.pose_warmup < 0:
            raise TrainError("pose_warmup must be non-negative")
        if not self.bound > 0:
            raise TrainError("bound must be positive")

    def field_lr(self, step: int) -> float:
        frac = min(step / max(self.steps - 1, 1), 1.0)
        return self.lr_field * (self.lr_field_final / self.lr_field) ** frac

    def pose_lr(self, step: int) -> float:
        # geometric decay over the steps after the warmup
        frac = min(max(step - self.pose_warmup, 0) / max(self.steps - 1 - self.pose_warmup, 1), 1.0)
        return self.lr_pose * (self.lr_pose_final / self.lr_pose) ** frac


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, 3) float32 in [0, 1]
    poses: list
    intrinsics: CameraIntrinsics
    names: list = field(default_factory=list)
    root: Optional[Path] = None  # directory the names are relative to

    def __post_init__(self):
        if len(self.poses) == 0:
            raise TrainError("dataset is empty")
        if len(self.images) != len(self.poses):
            raise TrainError(f"{len(self.images)} images but {len(self.poses)} poses")
        h, w = self.images.shape[1:3]
        if (w, h) != (self.intrinsics.width, self.intrinsics.height):
            raise TrainError(f"images are {w}x{h} but intrinsics say {self.intrinsics.width}x{self.intrinsics.height}")
        for p in self.poses:
            if p.convention is not Convention.OPENGL:
                raise TrainError("training poses must be normalized (OpenGLStyle)")
        if not self.names:
            self.names = [f"{i:03d}" for i in range(len(self.poses))]

    def __len__(self) -> int:
        return len(self.poses)

    @classmethod
    def from_manifest(cls, path) -> "Dataset":
        path = Path(path)
        man = dataio.parse_pose_manifest(path)
        imgs = []
        for fp in man.file_paths:
            img = dataio.read_image(path.parent / fp)
            imgs.append(img[..., :3])
        return cls(np.stack(imgs).astype(np.float32), man.poses, man.intrinsics, list(man.file_paths), path.parent)


@dataclass
class PoseCorrection:
    r: np.ndarray  # (N, 3) axis-angle, radians
    v: np.ndarray  # (N, 3) translation offsets

    @classmethod
    def zeros(cls, n: int) -> "PoseCorrection":
        return cls(np.zeros((n, 3)), np.zeros((n, 3)))


def apply_pose_correction(base: CameraPose, r, v) -> CameraPose:
    m = base.matrix.copy()
    m[:3, :3] = so3_exp(r) @ base.matrix[:3, :3]
    m[:3, 3] = base.matrix[:3, 3] + np.asarray(v, dtype=np.float64)
    return CameraPose(m, base.convention)


def corrected_poses(base: Sequence[CameraPose], corr: PoseCorrection) -> list[CameraPose]:
    return [apply_pose_correction(p, r, v) for p, r, v in zip(base, corr.r, corr.v)]


class Adam:
    def __init__(self, params: dict, betas=(0.9, 0.99), eps: float = 1e-15):
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            params[k] -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainState:
    step: int
    field_opt: Adam
    pose_opt: Adam
    correction: PoseCorrection
    rng: np.random.Generator
    history: list = field(default_factory=list)  # (step, loss, psnr)


def init_state(fld: RadianceField, n_cameras: int, seed: int) -> TrainState:
    corr = PoseCorrection.zeros(n_cameras)
    return TrainState(
        step=0,
        field_opt=Adam(fld.params),
        pose_opt=Adam({"r": corr.r, "v": corr.v}),
        correction=corr,
        rng=np.random.default_rng(seed),
    )


def make_field(cfg: TrainConfig, field_config: FieldConfig | None = None) -> RadianceField:
    fc = field_config or FieldConfig(grid=HashGridConfig(), bound=cfg.bound)
    if fc.bound != cfg.bound:
        raise TrainError(f"field bound {fc.bound} differs from training bound {cfg.bound}")
    return RadianceField(fc, seed=cfg.seed)


def _batch_rays(ds: Dataset, corr: PoseCorrection, img_idx, cam_dirs, use_corr: bool):
    rot = np.stack([p.matrix[:3, :3] for p in ds.poses])
    pos = np.stack([p.matrix[:3, 3] for p in ds.poses])
    if use_corr:
        rot = np.stack([so3_exp(r) for r in corr.r]) @ rot
        pos = pos + corr.v
    d = np.einsum("nij,nj->ni", rot[img_idx], cam_dirs)
    return pos[img_idx].copy(), d


def train_step(state: TrainState, fld: RadianceField, ds: Dataset, cfg: TrainConfig, snapshot_dir=None):
    """One mini-batch update; returns ``(loss, batch_psnr)``."""
    rng = state.rng
    H, W = ds.images.shape[1:3]
    R = cfg.rays_per_batch
    img_idx = rng.integers(0, len(ds), R)
    pix = rng.integers(0, H * W, R)
    vv, uu = np.divmod(pix, W)
    cam_dirs = camera_directions(uu, vv, ds.intrinsics)
    o, d = _batch_rays(ds, state.correction, img_idx, cam_dirs, cfg.refine_poses)
    target = ds.images[img_idx, vv, uu].astype(np.float64)

    rcfg = RenderConfig(n_samples=cfg.samples_per_ray, bound=cfg.bound, stratified=True)
    out = render_rays(fld, o, d, rcfg, rng, keep_cache=True)
    err = out.color.astype(np.float64) - target
    loss = float(np.mean(err * err))
    if not np.isfinite(loss):
        snap = _dump_snapshot(snapshot_dir, state, fld, cfg, loss)
        raise TrainingHalted(f"non-finite loss at step {state.step}", snap)
    dcolor = (2.0 / err.size) * err

    pose_live = cfg.refine_poses and state.step >= cfg.pose_warmup
    grads, do, dd = render_rays_backward(fld, out.cache, dcolor.astype(fld.dtype), input_grads=pose_live)
    state.field_opt.step(fld.params, grads, cfg.field_lr(state.step))
    if cfg.refine_poses:
        gr = np.zeros_like(state.correction.r)
        gv = np.zeros_like(state.correction.v)
        if pose_live:
            gr, gv = pose_gradients(state.correction, img_idx, d, do, dd)
        state.pose_opt.step({"r": state.correction.r, "v": state.correction.v}, {"r": gr, "v": gv}, cfg.pose_lr(state.step))
    state.step += 1
    p = psnr(loss)
    state.history.append((state.step, loss, p))
    return loss, p


def pose_gradients(corr: PoseCorrection, img_idx, d, do, dd):
    """Chain ray-origin/direction gradients into per-camera ``(dL/dr, dL/dv)``."""
    gr = np.zeros_like(corr.r)
    gv = np.zeros_like(corr.v)
    # d = exp([r]x) R0 c; a left perturbation phi moves d by phi x d
    np.add.at(gr, img_idx, np.cross(d, dd))
    np.add.at(gv, img_idx, do)
    for i in np.unique(img_idx):
        gr[i] = so3_left_jacobian(corr.r[i]).T @ gr[i]
    return gr, gv


def _dump_snapshot(snapshot_dir, state: TrainState, fld: RadianceField, cfg: TrainConfig, loss: float):
    if snapshot_dir is None:
        return None
    d = Path(snapshot_dir)
    d.mkdir(parents=True, exist_ok=True)
    fld.save(d / "halt_checkpoint.bin")
    info = {
        "step": state.step,
        "loss": repr(loss),
        "config": asdict(cfg),
        "nonfinite_params": {k: int(np.count_nonzero(~np.isfinite(v))) for k, v in fld.params.items()},
        "recent": state.history[-20:],
    }
    (d / "halt_snapshot.json").write_text(json.dumps(info, indent=2) + "\n", encoding="utf-8")
    return d / "halt_snapshot.json"


def eval_pixel_subset(ds: Dataset, n_pixels: int, seed: int = 12345):
    """Fixed per-image pixel indices used for evaluation (all pixels when ``n_pixels`` is 0)."""
    H, W = ds.images.shape[1:3]
    if n_pixels <= 0 or n_pixels >= H * W:
        return np.arange(H * W)
    return np.sort(np.random.default_rng(seed).choice(H * W, n_pixels, replace=False))


def evaluate(fld: RadianceField, ds: Dataset, poses: Sequence[CameraPose], cfg: TrainConfig,
             chunk: int = 4096) -> np.ndarray:
    """Per-image PSNR of midpoint-sampled renders against the dataset images."""
    H, W = ds.images.shape[1:3]
    pix = eval_pixel_subset(ds, cfg.eval_pixels)
    vv, uu = np.divmod(pix, W)
    cam = camera_directions(uu, vv, ds.intrinsics)
    rcfg = RenderConfig(n_samples=cfg.eval_samples or cfg.samples_per_ray, bound=cfg.bound)
    out = np.empty(len(ds))
    for i, p in enumerate(poses):
        d = cam @ p.rotation.T
        o = np.broadcast_to(p.position, d.shape)
        col = np.empty((len(d), 3))
        for s in range(0, len(d), chunk):
            col[s:s + chunk] = render_rays(fld, o[s:s + chunk], d[s:s + chunk], rcfg).color
        out[i] = psnr(mse(col, ds.images[i, vv, uu]))
    return out


def mean_psnr(per_image: np.ndarray) -> float:
    """PSNR of the pooled MSE across images."""
    return psnr(float(np.mean(10.0 ** (-np.asarray(per_image) / 10.0))))


@dataclass
class TrainResult:
    field: RadianceField
    state: TrainState
    poses: list
    eval_psnr: np.ndarray
    final_psnr: float
    seconds: float
    checkpoint: Optional[Path] = None
    metrics: Optional[Path] = None
    refined_manifest: Optional[Path] = None


def rotation_errors(a: Sequence[CameraPose], b: Sequence[CameraPose]) -> np.ndarray:
    """Geodesic rotation distance in degrees between paired poses."""
    return np.degrees([rotation_angle(p.rotation, q.rotation) for p, q in zip(a, b)])


def run_training(ds: Dataset, cfg: TrainConfig, out_dir=None, fld: RadianceField | None = None,
                 progress=None) -> TrainResult:
    """Train for ``cfg.steps`` steps, then evaluate with the (possibly refined) poses.

    Writes ``checkpoint.bin``, ``metrics.csv`` (one row per step), ``eval.csv``
    and, when refining, ``refined_poses.json`` into ``out_dir``.
    """
    fld = fld or make_field(cfg)
    state = init_state(fld, len(ds), cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    metrics = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics = out / "metrics.csv"
        if metrics.exists():
            metrics.unlink()
    t0 = time.perf_counter()
    rows = []
    try:
        for _ in range(cfg.steps):
            loss, p = train_step(state, fld, ds, cfg, snapshot_dir=out)
            rows.append((state.step, loss, p))
            if cfg.log_every and state.step % cfg.log_every == 0:
                log.info("step %d loss %.6f psnr %.2f", state.step, loss, p)
                if progress:
                    progress(state.step, loss, p)
                _flush_metrics(metrics, rows)
    finally:
        _flush_metrics(metrics, rows)
        if out is not None:
            fld.save(out / "checkpoint.bin")
    seconds = time.perf_counter() - t0

    poses = corrected_poses(ds.poses, state.correction) if cfg.refine_poses else list(ds.poses)
    per_image = evaluate(fld, ds, poses, cfg)
    result = TrainResult(fld, state, poses, per_image, mean_psnr(per_image), seconds)
    if out is not None:
        result.checkpoint = out / "checkpoint.bin"
        fld.save(result.checkpoint)
        result.metrics = metrics
        with open(out / "eval.csv", "w", encoding="utf-8") as fh:
            fh.write("image,psnr_db\n")
            for name, v in zip(ds.names, per_image):
                fh.write(f"{name},{float(v)!r}\n")
            fh.write(f"mean,{result.final_psnr!r}\n")
        if cfg.refine_poses:
            result.refined_manifest = out / "refined_poses.json"
            names = ds.names
            if ds.root is not None:
                names = [os.path.relpath(Path(ds.root) / n, out) for n in names]
            dataio.write_pose_manifest(poses, ds.intrinsics, names, result.refined_manifest,
                                       extra={"refined": True})
    return result


def _flush_metrics(path, rows: list) -> None:
    if path is None:
        rows.clear()
        return
    for step, loss, p in rows:
        dataio.append_metric_row(path, step, loss, p)
    rows.clear()
