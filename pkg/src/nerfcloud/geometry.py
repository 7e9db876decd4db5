"""Camera poses and the normalization applied before training.

Poses are camera-to-world 4x4 matrices. Device trajectories live in a y-up
world and are brought into the z-up radiance-field frame by a fixed rotation
about the x axis; every trajectory is then recentered on the point the cameras
look at and scaled so the mean camera distance is a fixed constant.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

ORTHO_TOL = 1e-6
PARALLEL_TOL = 1e-9
DISTANCE_TOL = 1e-12
DEFAULT_SCALE_TARGET = 4.0


class GeometryError(ValueError):
    """Raised for invalid poses or degenerate camera configurations."""


class Convention(str, enum.Enum):
    DEVICE_RAW = "DeviceRaw"
    OPENGL = "OpenGLStyle"


@dataclass
class CameraPose:
    matrix: np.ndarray
    convention: Convention = Convention.OPENGL

    def __post_init__(self):
        self.matrix = np.array(self.matrix, dtype=np.float64).reshape(4, 4)
        self.convention = Convention(self.convention)

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def position(self) -> np.ndarray:
        return self.matrix[:3, 3]

    @property
    def view_dir(self) -> np.ndarray:
        # cameras look down their local -z axis
        return -self.matrix[:3, 2]

    def copy(self) -> "CameraPose":
        return CameraPose(self.matrix.copy(), self.convention)

    def validate(self, tol: float = ORTHO_TOL) -> None:
        validate_matrix(self.matrix, tol)


@dataclass
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        self.fx, self.fy, self.cx, self.cy = (float(v) for v in (self.fx, self.fy, self.cx, self.cy))
        self.width, self.height = int(self.width), int(self.height)
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise GeometryError(
                f"principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}"
            )

    @classmethod
    def from_fov(cls, width: int, height: int, fov_x_deg: float) -> "CameraIntrinsics":
        fx = 0.5 * width / np.tan(0.5 * np.radians(fov_x_deg))
        return cls(fx, fx, width / 2.0, height / 2.0, width, height)

    @property
    def camera_angle_x(self) -> float:
        return float(2.0 * np.arctan(self.width / (2.0 * self.fx)))

    def scaled(self, factor: float) -> "CameraIntrinsics":
        return CameraIntrinsics(
            self.fx * factor,
            self.fy * factor,
            self.cx * factor,
            self.cy * factor,
            int(round(self.width * factor)),
            int(round(self.height * factor)),
        )


@dataclass
class NormalizationReport:
    center: np.ndarray
    scale: float
    rotation_applied: float
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        if not self.scale > 0:
            raise GeometryError(f"scale must be positive, got {self.scale}")

    def to_dict(self) -> dict:
        return {
            "center": [float(v) for v in self.center],
            "scale": float(self.scale),
            "rotation_applied_deg": float(self.rotation_applied),
        }


def validate_matrix(m: np.ndarray, tol: float = ORTHO_TOL) -> None:
    m = np.asarray(m)
    if m.shape != (4, 4):
        raise GeometryError(f"pose matrix must be 4x4, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise GeometryError("pose matrix has non-finite entries")
    if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
        raise GeometryError(f"pose bottom row must be (0, 0, 0, 1), got {m[3].tolist()}")
    r = m[:3, :3]
    if np.abs(r.T @ r - np.eye(3)).max() >= tol:
        raise GeometryError("pose rotation block is not orthonormal")
    if abs(np.linalg.det(r) - 1.0) >= tol:
        raise GeometryError("pose rotation block is not right-handed (det != +1)")


def _check_poses(poses: Sequence[CameraPose]) -> None:
    if not poses:
        return
    # batched fast path; the per-pose loop below only runs to name the culprit
    m = np.stack([p.matrix for p in poses])
    r = m[:, :3, :3]
    if (np.all(np.isfinite(m)) and np.all(m[:, 3] == [0.0, 0.0, 0.0, 1.0])
            and np.abs(r.transpose(0, 2, 1) @ r - np.eye(3)).max() < ORTHO_TOL
            and np.abs(np.linalg.det(r) - 1.0).max() < ORTHO_TOL):
        return
    for i, p in enumerate(poses):
        try:
            p.validate()
        except GeometryError as exc:
            raise GeometryError(f"pose {i}: {exc}") from None


def positions(poses: Sequence[CameraPose]) -> np.ndarray:
    return np.array([p.position for p in poses], dtype=np.float64).reshape(-1, 3)


def rot_x(alpha_deg: float) -> np.ndarray:
    """Homogeneous rotation about the x axis by ``alpha_deg`` degrees."""
    a = np.radians(alpha_deg)
    c, s = np.cos(a), np.sin(a)
    # exact entries for the quarter turns so that 90 degrees yields integer rows
    if float(alpha_deg) % 90.0 == 0.0:
        c, s = float(np.round(c)), float(np.round(s))
    t = np.eye(4)
    t[1, 1], t[1, 2] = c, -s
    t[2, 1], t[2, 2] = s, c
    return t


def rotate_about_x(poses: Sequence[CameraPose], alpha: float) -> list[CameraPose]:
    if not np.isfinite(alpha):
        raise GeometryError(f"rotation angle must be finite, got {alpha}")
    _check_poses(poses)
    t = rot_x(alpha)
    out = []
    for p in poses:
        conv = p.convention
        if conv is Convention.DEVICE_RAW and float(alpha) % 360.0 == 90.0:
            conv = Convention.OPENGL
        out.append(CameraPose(t @ p.matrix, conv))
    return out


def center_of_attention(poses: Sequence[CameraPose]) -> np.ndarray:
    """Weighted mean of the closest-approach midpoints of all optical-axis pairs.

    Each unordered pair contributes the midpoint of the common perpendicular of
    its two viewing rays, weighted by ``1 - cos^2`` of the angle between them.
    """
    if len(poses) < 2:
        raise GeometryError("center of attention needs at least two cameras")
    o = positions(poses)
    d = np.array([p.view_dir for p in poses])
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    i, j = np.triu_indices(len(poses), k=1)
    b = np.einsum("ij,ij->i", d[i], d[j])
    w0 = o[i] - o[j]
    dd = np.einsum("ij,ij->i", d[i], w0)
    e = np.einsum("ij,ij->i", d[j], w0)
    weight = 1.0 - b * b
    keep = weight > PARALLEL_TOL
    if not np.any(keep):
        raise GeometryError("all optical axes are parallel; center of attention undefined")
    i, j, b, dd, e, w0, weight = i[keep], j[keep], b[keep], dd[keep], e[keep], w0[keep], weight[keep]
    s = (b * e - dd) / weight
    t = (e - b * dd) / weight
    mid = 0.5 * ((o[i] + s[:, None] * d[i]) + (o[j] + t[:, None] * d[j]))
    return (weight[:, None] * mid).sum(axis=0) / weight.sum()


def recenter(poses: Sequence[CameraPose], center) -> list[CameraPose]:
    _check_poses(poses)
    center = np.asarray(center, dtype=np.float64).reshape(3)
    out = []
    for p in poses:
        m = p.matrix.copy()
        m[:3, 3] -= center
        out.append(CameraPose(m, p.convention))
    return out


def scale_factor(poses: Sequence[CameraPose], target: float = DEFAULT_SCALE_TARGET) -> float:
    if len(poses) == 0:
        raise GeometryError("scale factor needs at least one camera")
    mean_dist = float(np.linalg.norm(positions(poses), axis=1).mean())
    if mean_dist < DISTANCE_TOL:
        raise GeometryError(f"mean camera distance {mean_dist:g} is degenerate")
    return target / mean_dist


def apply_scale(poses: Sequence[CameraPose], s: float) -> list[CameraPose]:
    if not s > 0:
        raise GeometryError(f"scale must be positive, got {s}")
    _check_poses(poses)
    out = []
    for p in poses:
        m = p.matrix.copy()
        m[:3, 3] *= s
        out.append(CameraPose(m, p.convention))
    return out


def normalize_pipeline(
    poses: Sequence[CameraPose],
    alpha: float = 90.0,
    apply_rotation: bool = True,
    target: float = DEFAULT_SCALE_TARGET,
) -> tuple[list[CameraPose], NormalizationReport]:
    """Rotate (device poses only), recenter on the center of attention, rescale."""
    _check_poses(poses)
    applied = float(alpha) if apply_rotation else 0.0
    out = rotate_about_x(poses, applied) if applied != 0.0 else [p.copy() for p in poses]
    center = center_of_attention(out)
    out = recenter(out, center)
    s = scale_factor(out, target)
    out = apply_scale(out, s)
    return out, NormalizationReport(center=center, scale=s, rotation_applied=applied)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world matrix for a camera at ``eye`` looking at ``target`` (-z forward, +y up)."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - eye
    n = np.linalg.norm(fwd)
    if n < DISTANCE_TOL:
        raise GeometryError("camera coincides with its look-at target")
    fwd /= n
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-12:
        raise GeometryError("viewing direction is parallel to the up vector")
    right /= np.linalg.norm(right)
    true_up = np.cross(right, fwd)
    m = np.eye(4)
    m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = right, true_up, -fwd, eye
    return m


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(r) -> np.ndarray:
    """Rodrigues' formula: axis-angle vector to rotation matrix."""
    r = np.asarray(r, dtype=np.float64)
    theta = np.linalg.norm(r)
    k = skew(r)
    if theta < 1e-8:
        return np.eye(3) + k + 0.5 * k @ k
    return np.eye(3) + np.sin(theta) / theta * k + (1 - np.cos(theta)) / theta**2 * k @ k


def so3_left_jacobian(r) -> np.ndarray:
    """Left Jacobian J with exp([r + dr]x) ~= exp([J dr]x) exp([r]x)."""
    r = np.asarray(r, dtype=np.float64)
    theta = np.linalg.norm(r)
    k = skew(r)
    if theta < 1e-6:
        return np.eye(3) + 0.5 * k + k @ k / 6.0
    return (
        np.eye(3)
        + (1 - np.cos(theta)) / theta**2 * k
        + (theta - np.sin(theta)) / theta**3 * k @ k
    )


def rotation_angle(ra: np.ndarray, rb: np.ndarray) -> float:
    """Geodesic angle in radians between two rotation matrices."""
    c = (np.trace(ra.T @ rb) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))
