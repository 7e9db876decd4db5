"""Differentiable emission-absorption volume rendering.

Rays are clipped to the scene cube ``[-bound, bound]^3``; the clipped segment
is split into equal bins with one sample per bin. The backward pass
differentiates through the sample positions and through the cube
intersection itself, so gradients with respect to ray origins and directions
are exact (this is what pose refinement relies on).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import CameraIntrinsics, CameraPose, Convention

PSNR_CEILING = 100.0
MSE_FLOOR = 1e-10


class RenderError(ValueError):
    pass


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float


@dataclass
class RenderedPixel:
    color: np.ndarray
    opacity: float
    depth: float


@dataclass
class RenderConfig:
    n_samples: int = 64
    bound: float = 4.0
    stratified: bool = False
    background: tuple = (0.0, 0.0, 0.0)
    near_min: float = 0.0
    chunk: int = 4096


@dataclass
class RayBatchOutput:
    color: np.ndarray
    opacity: np.ndarray
    depth: np.ndarray
    cache: Optional[dict] = field(default=None, repr=False)


def camera_directions(u, v, intr: CameraIntrinsics) -> np.ndarray:
    """Unit camera-space directions through pixel centers ``(u, v)``."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d = np.stack(
        [(u + 0.5 - intr.cx) / intr.fx, -(v + 0.5 - intr.cy) / intr.fy, -np.ones_like(u)], axis=-1
    )
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def _require_opengl(pose: CameraPose) -> None:
    if pose.convention is not Convention.OPENGL:
        raise RenderError(f"pose has convention {pose.convention.value}; normalize it before rendering")


def generate_rays(u, v, intr: CameraIntrinsics, pose: CameraPose):
    _require_opengl(pose)
    d = camera_directions(u, v, intr) @ pose.rotation.T
    o = np.broadcast_to(pose.position, d.shape).copy()
    return o, d


def generate_ray(u: float, v: float, intr: CameraIntrinsics, pose: CameraPose, bound: float = 4.0) -> Ray:
    if not (0 <= u < intr.width and 0 <= v < intr.height):
        raise RenderError(f"pixel ({u}, {v}) outside {intr.width}x{intr.height} image")
    o, d = generate_rays(np.array([u]), np.array([v]), intr, pose)
    t0, t1, _ = intersect_box(o, d, bound)
    return Ray(o[0], d[0], float(t0[0]), float(t1[0]))


def intersect_box(o: np.ndarray, d: np.ndarray, bound: float, near_min: float = 0.0):
    """Slab test against ``[-bound, bound]^3``.

    Returns ``t_near, t_far`` and a dict with the active slab axes that the
    backward pass needs. Rays that miss get ``t_near == t_far``.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        safe = np.where(np.abs(d) < 1e-12, np.where(d < 0, -1e-12, 1e-12), d)
        ta = (-bound - o) / safe
        tb = (bound - o) / safe
    lo = np.minimum(ta, tb)
    hi = np.maximum(ta, tb)
    ax_near = np.argmax(lo, axis=-1)
    ax_far = np.argmin(hi, axis=-1)
    rows = np.arange(len(o))
    t_near = lo[rows, ax_near]
    t_far = hi[rows, ax_far]
    clamped = t_near < near_min
    t_near = np.where(clamped, near_min, t_near)
    hit = t_far > t_near
    t_far = np.where(hit, t_far, t_near)
    info = dict(ax_near=ax_near, ax_far=ax_far, clamped=clamped, hit=hit, safe=safe)
    return t_near, t_far, info


def sample_along_ray(ray: Ray, n_samples: int, stratified: bool = False, rng=None):
    """Return ``(t, positions)`` with one sample per equal-width bin."""
    if n_samples < 1:
        raise RenderError("n_samples must be >= 1")
    frac = _bin_fractions(1, n_samples, stratified, rng)[0]
    t = ray.t_near + frac * (ray.t_far - ray.t_near)
    return t, ray.origin[None, :] + t[:, None] * ray.direction[None, :]


def _bin_fractions(n_rays: int, n_samples: int, stratified: bool, rng) -> np.ndarray:
    offs = rng.random((n_rays, n_samples)) if stratified else np.full((n_rays, n_samples), 0.5)
    return (np.arange(n_samples)[None, :] + offs) / n_samples


def composite(sigma, rgb, delta, t=None, background=(0.0, 0.0, 0.0)):
    """Composite samples along rays.

    ``sigma``/``delta`` are ``(R, S)``, ``rgb`` is ``(R, S, 3)``. Returns
    ``(color, opacity, depth, cache)``.
    """
    sigma = np.asarray(sigma)
    rgb = np.asarray(rgb)
    delta = np.asarray(delta)
    bg = np.asarray(background, dtype=rgb.dtype)
    a = sigma * delta
    csum = np.cumsum(a, axis=-1)
    trans_next = np.exp(-csum)
    excl = np.concatenate([np.zeros_like(csum[:, :1]), csum[:, :-1]], axis=1)
    trans = np.exp(-excl)
    alpha = -np.expm1(-a)
    w = trans * alpha
    opacity = w.sum(axis=-1)
    fg = np.einsum("rs,rsc->rc", w, rgb)
    color = fg + (1.0 - opacity)[:, None] * bg
    if t is None:
        depth = None
    else:
        t = np.asarray(t)
        safe = np.where(opacity > 1e-8, opacity, 1.0)
        depth = np.where(opacity > 1e-8, (w * t).sum(axis=-1) / safe, t[:, -1] if t.ndim == 2 else t)
    cache = dict(sigma=sigma, rgb=rgb, delta=delta, w=w, trans_next=trans_next, bg=bg)
    return color, opacity, depth, cache


def composite_backward(cache: dict, dcolor: np.ndarray):
    """Return ``(dsigma, drgb, ddelta)`` given ``dL/dcolor`` of shape ``(R, 3)``."""
    w = cache["w"]
    rgb = cache["rgb"]
    trans_next = cache["trans_next"]
    wc = w[..., None] * rgb
    # contribution of samples strictly behind each sample, plus the background
    behind = np.cumsum(wc[:, ::-1], axis=1)[:, ::-1] - wc
    behind = behind + trans_next[:, -1][:, None, None] * cache["bg"]
    dca = trans_next[..., None] * rgb - behind
    da = np.einsum("rsc,rc->rs", dca, dcolor)
    drgb = w[..., None] * dcolor[:, None, :]
    return da * cache["delta"], drgb, da * cache["sigma"]


def composite_pixel(samples, background=(0.0, 0.0, 0.0), t=None) -> RenderedPixel:
    """Composite a single ray given ``(density, color, delta)`` triples."""
    sig = np.array([[s[0] for s in samples]], dtype=np.float64)
    rgb = np.array([[s[1] for s in samples]], dtype=np.float64)
    dl = np.array([[s[2] for s in samples]], dtype=np.float64)
    tt = None if t is None else np.asarray(t, dtype=np.float64)[None, :]
    with np.errstate(invalid="ignore", over="ignore"):
        c, op, dep, _ = composite(sig, rgb, dl, tt, background)
    return RenderedPixel(c[0], float(op[0]), None if dep is None else float(dep[0]))


def render_rays(fld, o, d, cfg: RenderConfig, rng=None, keep_cache: bool = False) -> RayBatchOutput:
    n_rays = len(o)
    S = cfg.n_samples
    t_near, t_far, box = intersect_box(o, d, cfg.bound, cfg.near_min)
    frac = _bin_fractions(n_rays, S, cfg.stratified, rng)
    span = t_far - t_near
    t = t_near[:, None] + frac * span[:, None]
    delta = np.broadcast_to((span / S)[:, None], t.shape)
    x = o[:, None, :] + t[..., None] * d[:, None, :]
    sigma, rgb, fcache = fld.forward(x, d)
    dt = np.result_type(sigma.dtype, np.float32)
    color, opacity, depth, ccache = composite(
        sigma, rgb, delta.astype(dt), t.astype(dt), np.asarray(cfg.background, dtype=dt)
    )
    cache = None
    if keep_cache:
        cache = dict(o=o, d=d, t=t, frac=frac, t_near=t_near, t_far=t_far, box=box, fcache=fcache, ccache=ccache)
    return RayBatchOutput(color, opacity, depth, cache)


def render_rays_backward(fld, cache: dict, dcolor: np.ndarray, input_grads: bool = False):
    """Backpropagate ``dL/dcolor`` to field parameters and, optionally, ray origins/directions."""
    dsigma, drgb, ddelta = composite_backward(cache["ccache"], dcolor)
    grads, dx, dd_field = fld.backward(cache["fcache"], dsigma, drgb, input_grads=input_grads)
    if not input_grads:
        return grads, None, None

    o, d, t, frac = cache["o"], cache["d"], cache["t"], cache["frac"]
    S = t.shape[1]
    dx = dx.astype(np.float64)
    dt = np.einsum("rsk,rk->rs", dx, d)
    dspan_delta = ddelta.sum(axis=1) / S
    g_near = (dt * (1.0 - frac)).sum(axis=1) - dspan_delta
    g_far = (dt * frac).sum(axis=1) + dspan_delta
    do = dx.sum(axis=1)
    dd = np.einsum("rs,rsk->rk", t, dx) + dd_field

    box = cache["box"]
    rows = np.arange(len(o))
    safe = box["safe"]
    live = box["hit"]
    for g, ax, tv, active in (
        (g_near, box["ax_near"], cache["t_near"], live & ~box["clamped"]),
        (g_far, box["ax_far"], cache["t_far"], live),
    ):
        # t = (plane - o_k) / d_k  =>  dt/do_k = -1/d_k, dt/dd_k = -t/d_k
        inv = 1.0 / safe[rows, ax]
        coef = np.where(active, g, 0.0)
        do[rows, ax] -= coef * inv
        dd[rows, ax] -= coef * tv * inv
    return grads, do, dd


def render_image(fld, pose: CameraPose, intr: CameraIntrinsics, cfg: RenderConfig | None = None, rng=None):
    """Render a full ``(H, W, 3)`` image; also returns opacity and depth maps."""
    cfg = cfg or RenderConfig()
    vv, uu = np.mgrid[0:intr.height, 0:intr.width]
    o, d = generate_rays(uu.ravel(), vv.ravel(), intr, pose)
    color = np.empty((len(o), 3))
    opac = np.empty(len(o))
    depth = np.empty(len(o))
    for s in range(0, len(o), cfg.chunk):
        out = render_rays(fld, o[s:s + cfg.chunk], d[s:s + cfg.chunk], cfg, rng)
        color[s:s + cfg.chunk] = out.color
        opac[s:s + cfg.chunk] = out.opacity
        depth[s:s + cfg.chunk] = out.depth
    shape = (intr.height, intr.width)
    return color.reshape(shape + (3,)), opac.reshape(shape), depth.reshape(shape)


def mse(a, b) -> float:
    return float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))


def psnr(mse_value: float) -> float:
    """PSNR in dB for an MSE over [0, 1] RGB, clamped to 100 dB."""
    if not mse_value >= 0:
        raise RenderError(f"mse must be non-negative, got {mse_value}")
    if mse_value < MSE_FLOOR:
        return PSNR_CEILING
    return float(-10.0 * np.log10(mse_value))
