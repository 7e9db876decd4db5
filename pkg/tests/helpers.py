"""Shared builders and independent oracles for the test suite."""

from __future__ import annotations

import numpy as np

from nerfcloud import geometry
from nerfcloud.geometry import CameraPose, Convention


def random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_trajectory(rng, n_min: int = 2, n_max: int = 24, convention=Convention.OPENGL) -> list[CameraPose]:
    """Cameras scattered around a random target, each looking roughly at it."""
    n = int(rng.integers(n_min, n_max + 1))
    target = rng.normal(scale=5.0, size=3)
    eye = target + rng.normal(size=(n, 3)) * rng.uniform(0.5, 10.0, (n, 1))
    fwd = target + rng.normal(scale=0.3, size=(n, 3)) - eye
    fwd /= np.linalg.norm(fwd, axis=1, keepdims=True)
    # build frames with -z = fwd and a random roll
    x = np.cross(fwd, rng.normal(size=(n, 3)))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    y = np.cross(-fwd, x)
    m = np.tile(np.eye(4), (n, 1, 1))
    m[:, :3, 0], m[:, :3, 1], m[:, :3, 2], m[:, :3, 3] = x, y, -fwd, eye
    return [CameraPose(mi, convention) for mi in m]


def pairwise_distances(pts: np.ndarray) -> np.ndarray:
    return np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)


def max_orthonormality_error(poses) -> float:
    errs = []
    for p in poses:
        r = p.rotation
        errs.append(np.abs(r.T @ r - np.eye(3)).max())
        errs.append(abs(np.linalg.det(r) - 1.0))
    return float(max(errs))


def check_trajectory_properties(poses, rng) -> dict:
    """Evaluate the pose-normalization properties on one trajectory.

    Returns the worst error of each property so callers can compare against
    their tolerance.
    """
    out = {}
    alpha = float(rng.uniform(-180, 180))
    rot = geometry.rotate_about_x(poses, alpha)
    normed, _ = geometry.normalize_pipeline(poses, alpha=alpha)
    out["orthonormality"] = max(max_orthonormality_error(rot), max_orthonormality_error(normed))

    # rotation keeps distances and viewing angles
    p0, p1 = geometry.positions(poses), geometry.positions(rot)
    d0 = np.array([p.view_dir for p in poses])
    d1 = np.array([p.view_dir for p in rot])
    out["distance"] = max(
        float(np.abs(pairwise_distances(p0) - pairwise_distances(p1)).max()),
        float(np.abs(d0 @ d0.T - d1 @ d1.T).max()),
    )

    # running the pipeline again with no rotation leaves it in place
    again, _ = geometry.normalize_pipeline(normed, alpha=0.0, apply_rotation=False)
    out["idempotence"] = float(max(np.abs(a.matrix - b.matrix).max() for a, b in zip(normed, again)))

    c = geometry.center_of_attention(poses)
    v = rng.normal(scale=3.0, size=3)
    shift = np.eye(4)
    shift[:3, 3] = v
    moved = [CameraPose(shift @ p.matrix) for p in poses]
    q = np.eye(4)
    q[:3, :3] = random_rotation(rng)
    turned = [CameraPose(q @ p.matrix) for p in poses]
    scale = max(1.0, float(np.abs(c).max()))
    out["equivariance"] = max(
        float(np.abs(geometry.center_of_attention(moved) - (c + v)).max()) / scale,
        float(np.abs(geometry.center_of_attention(turned) - q[:3, :3] @ c).max()) / scale,
    )
    return out


def brute_nearest(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """O(n*m) nearest-neighbour distances, chunked to bound memory."""
    out = np.empty(len(src))
    for s in range(0, len(src), 256):
        d = np.linalg.norm(src[s:s + 256, None, :] - dst[None, :, :], axis=-1)
        out[s:s + 256] = d.min(axis=1)
    return out


def central_difference(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Numerical gradient of scalar ``f`` at ``x`` (same shape as ``x``)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def relative_error(a, b, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def acceptance_line(cid: str, ok: bool, detail: str) -> str:
    line = f"{cid} {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
    return line
