"""Readers and writers for every file the pipeline exchanges.

Formats
-------
Trajectory log (text, one camera per line, ``#`` starts a comment)::

    timestamp m00 m01 m02 m03 m10 ... m33 image_path

  The 16 values are the camera-to-world matrix in row-major order. Values are
  written with ``repr`` so a write/parse round trip is bit-exact.

SfM text export: a ``cameras.txt`` with ``ID MODEL W H PARAMS...`` lines and
an ``images.txt`` with ``ID QW QX QY QZ TX TY TZ CAM_ID NAME`` lines, each
followed by a (possibly empty) line of 2D observations. Image poses are
world-to-camera with x right, y down, z forward.

Pose manifest (JSON)::

    {"camera_angle_x": ..., "width": ..., "height": ...,
     "fx": ..., "fy": ..., "cx": ..., "cy": ..., "convention": "OpenGLStyle",
     "frames": [{"file_path": ..., "transform_matrix": [[...] x4]}, ...]}

PLY: ``x y z`` as float32 and ``red green blue`` as uint8, binary
little-endian (ASCII on request).

Metrics CSV: header ``step,loss,psnr_db``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .extract import PointCloud
from .geometry import CameraIntrinsics, CameraPose, Convention, GeometryError

QUAT_TOL = 1e-6
METRIC_HEADER = ("step", "loss", "psnr_db")


class DataError(ValueError):
    """Malformed or inconsistent input file; message carries the location."""

    def __init__(self, msg: str, path=None, line: int | None = None):
        loc = ""
        if path is not None:
            loc = f"{path}"
            if line is not None:
                loc += f":{line}"
            loc += ": "
        super().__init__(loc + msg)
        self.path = path
        self.line = line


# -- trajectory log --------------------------------------------------------


@dataclass
class TrajectoryEntry:
    timestamp: float
    matrix: np.ndarray
    image_path: str


@dataclass
class TrajectoryLog:
    entries: list[TrajectoryEntry] = field(default_factory=list)

    def poses(self, convention: Convention = Convention.DEVICE_RAW) -> list[CameraPose]:
        return [CameraPose(e.matrix, convention) for e in self.entries]


def write_trajectory_log(log: TrajectoryLog, path) -> None:
    lines = ["# timestamp m00 m01 m02 m03 m10 m11 m12 m13 m20 m21 m22 m23 m30 m31 m32 m33 image_path"]
    for e in log.entries:
        vals = " ".join(repr(float(v)) for v in np.asarray(e.matrix, dtype=np.float64).ravel())
        lines.append(f"{float(e.timestamp)!r} {vals} {e.image_path}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def parse_trajectory_log(path, check_images: bool = True) -> TrajectoryLog:
    path = Path(path)
    if not path.is_file():
        raise DataError("trajectory log not found", path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise DataError(f"not UTF-8 text ({exc.reason})", path) from None
    entries: list[TrajectoryEntry] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(maxsplit=17)
        if len(parts) != 18:
            raise DataError(f"expected timestamp, 16 matrix values and an image path; got {len(parts)} fields",
                            path, lineno)
        try:
            nums = [float(p) for p in parts[:17]]
        except ValueError as exc:
            raise DataError(f"non-numeric field ({exc})", path, lineno) from None
        if not all(math.isfinite(v) for v in nums):
            raise DataError("non-finite value", path, lineno)
        ts = nums[0]
        m = np.array(nums[1:], dtype=np.float64).reshape(4, 4)
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise DataError(f"matrix bottom row must be 0 0 0 1, got {m[3].tolist()}", path, lineno)
        if entries and not ts > entries[-1].timestamp:
            raise DataError(f"timestamp {ts!r} does not increase (previous {entries[-1].timestamp!r})",
                            path, lineno)
        img = parts[17]
        if check_images and not (path.parent / img).exists():
            raise DataError(f"referenced image {img!r} does not exist", path, lineno)
        entries.append(TrajectoryEntry(ts, m, img))
    if not entries:
        raise DataError("trajectory log is empty", path)
    return TrajectoryLog(entries)


# -- SfM text export ---------------------------------------------------------


@dataclass
class SfmCamera:
    camera_id: int
    model: str
    intrinsics: CameraIntrinsics


@dataclass
class SfmImage:
    image_id: int
    qvec: np.ndarray
    tvec: np.ndarray
    camera_id: int
    name: str


@dataclass
class SfmExport:
    cameras: dict[int, SfmCamera] = field(default_factory=dict)
    images: list[SfmImage] = field(default_factory=list)


def qvec_to_rotmat(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64)
    return np.array([
        [1 - 2 * y * y - 2 * z * z, 2 * x * y - 2 * z * w, 2 * x * z + 2 * y * w],
        [2 * x * y + 2 * z * w, 1 - 2 * x * x - 2 * z * z, 2 * y * z - 2 * x * w],
        [2 * x * z - 2 * y * w, 2 * y * z + 2 * x * w, 1 - 2 * x * x - 2 * y * y],
    ])


def rotmat_to_qvec(r: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) with w >= 0 for a rotation matrix."""
    r = np.asarray(r, dtype=np.float64)
    tr = np.trace(r)
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = 2.0 * math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
        q = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
    elif r[1, 1] > r[2, 2]:
        s = 2.0 * math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2])
        q = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1])
        q = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def _sfm_lines(path: Path):
    if not path.is_file():
        raise DataError("file not found", path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise DataError(f"not UTF-8 text ({exc.reason})", path) from None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        yield lineno, raw.strip()


def _all_numeric(tokens) -> bool:
    try:
        [float(t) for t in tokens]
    except ValueError:
        return False
    return True


def parse_sfm_export(cameras_path, images_path) -> SfmExport:
    cameras_path, images_path = Path(cameras_path), Path(images_path)
    out = SfmExport()
    for lineno, line in _sfm_lines(cameras_path):
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        try:
            cam_id, model, w, h = int(tok[0]), tok[1], int(tok[2]), int(tok[3])
            params = [float(v) for v in tok[4:]]
        except (ValueError, IndexError) as exc:
            raise DataError(f"malformed camera line ({exc})", cameras_path, lineno) from None
        if model == "PINHOLE" and len(params) == 4:
            fx, fy, cx, cy = params
        elif model == "SIMPLE_PINHOLE" and len(params) == 3:
            fx, cx, cy = params
            fy = fx
        else:
            raise DataError(f"unsupported camera model {model!r} with {len(params)} parameters",
                            cameras_path, lineno)
        try:
            intr = CameraIntrinsics(fx, fy, cx, cy, w, h)
        except GeometryError as exc:
            raise DataError(str(exc), cameras_path, lineno) from None
        out.cameras[cam_id] = SfmCamera(cam_id, model, intr)

    expect_points = False
    for lineno, line in _sfm_lines(images_path):
        if line.startswith("#"):
            continue
        tok = line.split()
        if expect_points:
            expect_points = False
            if not tok or _all_numeric(tok):
                continue
        if not tok:
            continue
        if len(tok) < 10:
            raise DataError(f"image line needs 10 fields, got {len(tok)}", images_path, lineno)
        try:
            image_id = int(tok[0])
            q = np.array([float(v) for v in tok[1:5]])
            t = np.array([float(v) for v in tok[5:8]])
            cam_id = int(tok[8])
        except ValueError as exc:
            raise DataError(f"malformed image line ({exc})", images_path, lineno) from None
        n = float(np.linalg.norm(q))
        if not np.all(np.isfinite(q)) or n < 1e-12:
            raise DataError(f"malformed quaternion {q.tolist()}", images_path, lineno)
        if not np.all(np.isfinite(t)):
            raise DataError("non-finite translation", images_path, lineno)
        if cam_id not in out.cameras:
            raise DataError(f"image references unknown camera id {cam_id}", images_path, lineno)
        out.images.append(SfmImage(image_id, q / n, t, cam_id, " ".join(tok[9:])))
        expect_points = True
    return out


def sfm_to_camera_poses(export: SfmExport) -> list[CameraPose]:
    """World-to-camera vision poses to camera-to-world OpenGL-style poses."""
    flip = np.diag([1.0, -1.0, -1.0])
    poses = []
    for im in export.images:
        r = qvec_to_rotmat(im.qvec)
        m = np.eye(4)
        m[:3, :3] = r.T @ flip
        m[:3, 3] = -r.T @ im.tvec
        poses.append(CameraPose(m, Convention.OPENGL))
    return poses


def camera_poses_to_sfm(poses: Sequence[CameraPose]) -> list[tuple[np.ndarray, np.ndarray]]:
    """Inverse of :func:`sfm_to_camera_poses`: ``(qvec, tvec)`` per pose."""
    flip = np.diag([1.0, -1.0, -1.0])
    out = []
    for p in poses:
        r = (p.rotation @ flip).T
        out.append((rotmat_to_qvec(r), -r @ p.position))
    return out


def write_sfm_export(out_dir, poses: Sequence[CameraPose], intr: CameraIntrinsics, names: Sequence[str]) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "cameras.txt").write_text(
        "# CAMERA_ID MODEL WIDTH HEIGHT PARAMS[]\n"
        f"1 PINHOLE {intr.width} {intr.height} {float(intr.fx)!r} {float(intr.fy)!r} {float(intr.cx)!r} {float(intr.cy)!r}\n",
        encoding="utf-8",
    )
    lines = ["# IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME", "# POINTS2D[] as (X, Y, POINT3D_ID)"]
    for i, ((q, t), name) in enumerate(zip(camera_poses_to_sfm(poses), names), start=1):
        vals = " ".join(repr(float(v)) for v in (*q, *t))
        lines.append(f"{i} {vals} 1 {name}")
        lines.append("")
    (out_dir / "images.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- pose manifest ---------------------------------------------------------


@dataclass
class PoseManifest:
    intrinsics: CameraIntrinsics
    poses: list[CameraPose]
    file_paths: list[str]
    extra: dict = field(default_factory=dict)

    @property
    def camera_angle_x(self) -> float:
        return self.intrinsics.camera_angle_x


def write_pose_manifest(poses, intrinsics: CameraIntrinsics, image_paths, out_path, extra: dict | None = None):
    if len(poses) != len(image_paths):
        raise DataError(f"{len(poses)} poses but {len(image_paths)} image paths")
    conventions = {p.convention for p in poses}
    if len(conventions) > 1:
        raise DataError("poses mix conventions")
    doc = {
        "camera_angle_x": intrinsics.camera_angle_x,
        "width": int(intrinsics.width),
        "height": int(intrinsics.height),
        "fx": float(intrinsics.fx),
        "fy": float(intrinsics.fy),
        "cx": float(intrinsics.cx),
        "cy": float(intrinsics.cy),
        "convention": (conventions.pop() if conventions else Convention.OPENGL).value,
    }
    if extra:
        doc.update(extra)
    doc["frames"] = [
        {"file_path": str(pth), "transform_matrix": [[float(v) for v in row] for row in p.matrix]}
        for p, pth in zip(poses, image_paths)
    ]
    Path(out_path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def _field(doc: dict, key: str, kind, where: str = ""):
    if key not in doc:
        raise DataError(f"missing field '{where}{key}'")
    val = doc[key]
    if kind is float and isinstance(val, (int, float)) and not isinstance(val, bool):
        return float(val)
    if kind is int and isinstance(val, int) and not isinstance(val, bool):
        return val
    if kind not in (float, int) and isinstance(val, kind):
        return val
    raise DataError(f"field '{where}{key}' has wrong type {type(val).__name__}")


def parse_pose_manifest(path) -> PoseManifest:
    path = Path(path)
    if not path.is_file():
        raise DataError("manifest not found", path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"invalid JSON ({exc.msg})", path, exc.lineno) from None
    except UnicodeDecodeError as exc:
        raise DataError(f"not UTF-8 text ({exc.reason})", path) from None
    if not isinstance(doc, dict):
        raise DataError("manifest root must be an object", path)
    try:
        angle = _field(doc, "camera_angle_x", float)
        w, h = _field(doc, "width", int), _field(doc, "height", int)
        fx, fy = _field(doc, "fx", float), _field(doc, "fy", float)
        cx, cy = _field(doc, "cx", float), _field(doc, "cy", float)
        frames = _field(doc, "frames", list)
        conv = Convention(doc.get("convention", Convention.OPENGL.value))
    except ValueError as exc:
        raise DataError(str(exc), path) from None
    try:
        intr = CameraIntrinsics(fx, fy, cx, cy, w, h)
    except GeometryError as exc:
        raise DataError(str(exc), path) from None
    if abs(intr.camera_angle_x - angle) > 1e-9:
        raise DataError(f"camera_angle_x {angle} inconsistent with width/fx ({intr.camera_angle_x})", path)
    poses, paths = [], []
    for i, fr in enumerate(frames):
        where = f"frames[{i}]."
        if not isinstance(fr, dict):
            raise DataError(f"field 'frames[{i}]' must be an object", path)
        try:
            fp = _field(fr, "file_path", str, where)
            mat = np.array(_field(fr, "transform_matrix", list, where), dtype=np.float64)
        except (ValueError, TypeError) as exc:
            raise DataError(str(exc), path) from None
        if mat.shape != (4, 4):
            raise DataError(f"field '{where}transform_matrix' must be 4x4, got shape {mat.shape}", path)
        poses.append(CameraPose(mat, conv))
        paths.append(fp)
    known = {"camera_angle_x", "width", "height", "fx", "fy", "cx", "cy", "convention", "frames"}
    extra = {k: v for k, v in doc.items() if k not in known}
    return PoseManifest(intr, poses, paths, extra)


# -- images ----------------------------------------------------------------


def read_image(path) -> np.ndarray:
    """8-bit RGB PNG/PPM to float array in [0, 1] of shape (H, W, 3)."""
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_image(img: np.ndarray, path) -> None:
    from PIL import Image

    Image.fromarray(to_uint8(img)[..., :3]).save(path)


# -- PLY -------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def write_ply(cloud: PointCloud, path, ascii: bool = False) -> None:
    pos = np.asarray(cloud.positions, dtype=np.float32).reshape(-1, 3)
    if not np.all(np.isfinite(pos)):
        raise DataError("point cloud has non-finite coordinates")
    col = np.asarray(cloud.colors).reshape(-1, 3)
    if col.size and (col.min() < 0 or col.max() > 255):
        raise DataError("point colors must lie in [0, 255]")
    col = col.astype(np.uint8)
    n = len(pos)
    header = (
        "ply\n"
        f"format {'ascii' if ascii else 'binary_little_endian'} 1.0\n"
        f"element vertex {n}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    try:
        with open(path, "wb") as f:
            f.write(header.encode("ascii"))
            if ascii:
                for p, c in zip(pos, col):
                    f.write(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r} {c[0]} {c[1]} {c[2]}\n".encode("ascii"))
            else:
                rec = np.empty(n, dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                                         ("red", "u1"), ("green", "u1"), ("blue", "u1")])
                rec["x"], rec["y"], rec["z"] = pos[:, 0], pos[:, 1], pos[:, 2]
                rec["red"], rec["green"], rec["blue"] = col[:, 0], col[:, 1], col[:, 2]
                f.write(rec.tobytes())
    except OSError as exc:
        raise DataError(f"cannot write PLY ({exc.strerror})", path) from None


def read_ply(path) -> PointCloud:
    path = Path(path)
    if not path.is_file():
        raise DataError("PLY file not found", path)
    try:
        return _parse_ply(path, path.read_bytes())
    except DataError:
        raise
    except (ValueError, IndexError, UnicodeDecodeError) as exc:
        raise DataError(f"malformed PLY ({exc})", path) from None


def _parse_ply(path: Path, data: bytes) -> PointCloud:
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise DataError("not a PLY file", path)
    nl = data.find(b"\n", end)
    if nl < 0:
        raise DataError("PLY header not terminated", path)
    body_start = nl + 1
    header = data[:end].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements: list[tuple[str, int, list[tuple[str, str]]]] = []
    for lineno, line in enumerate(header, start=1):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise DataError(f"bad element line {line!r}", path, lineno)
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if len(tok) != 3 and tok[1:2] != ["list"]:
                raise DataError(f"bad property line {line!r}", path, lineno)
            if tok[1] == "list":
                raise DataError("list properties are not supported", path, lineno)
            if not elements or tok[1] not in _PLY_TYPES:
                raise DataError(f"bad property line {line!r}", path, lineno)
            elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise DataError(f"unsupported PLY format {fmt!r}", path)
    if not elements or elements[0][0] != "vertex":
        raise DataError("first PLY element must be 'vertex'", path)
    _, n, props = elements[0]
    names = [p[0] for p in props]
    for req in ("x", "y", "z"):
        if req not in names:
            raise DataError(f"vertex element lacks property {req!r}", path)
    if fmt == "binary_little_endian":
        dt = np.dtype([(nm, "<" + t) for nm, t in props])
        if len(data) - body_start < dt.itemsize * n:
            raise DataError("PLY body truncated", path)
        rec = np.frombuffer(data, dtype=dt, count=n, offset=body_start)
        cols = {nm: rec[nm] for nm in names}
    else:
        rows = data[body_start:].decode("ascii").split("\n")
        rows = [r.split() for r in rows if r.strip()][:n]
        if len(rows) < n:
            raise DataError("PLY body truncated", path)
        arr = np.array(rows, dtype=np.float64).reshape(n, len(props))
        cols = {nm: arr[:, i].astype(t) for i, (nm, t) in enumerate(props)}
    pos = np.stack([cols["x"], cols["y"], cols["z"]], axis=1).astype(np.float32)
    if all(c in cols for c in ("red", "green", "blue")):
        col = np.stack([cols["red"], cols["green"], cols["blue"]], axis=1).astype(np.uint8)
    else:
        col = np.zeros((n, 3), dtype=np.uint8)
    return PointCloud(pos, col)


# -- metrics CSV -----------------------------------------------------------


def _last_step(path: Path):
    with open(path, "rb") as f:
        f.seek(0, 2)
        size = f.tell()
        f.seek(max(0, size - 4096))
        tail = f.read().decode("utf-8", errors="replace").strip().splitlines()
    if not tail:
        return None
    last = tail[-1].split(",")[0]
    try:
        return int(last)
    except ValueError:
        return None


def append_metric_row(path, step: int, loss: float, psnr_db: float) -> None:
    path = Path(path)
    fresh = not path.exists() or path.stat().st_size == 0
    if not fresh:
        prev = _last_step(path)
        if prev is not None and step <= prev:
            raise DataError(f"step {step} does not increase past {prev}", path)
    try:
        with open(path, "a", encoding="utf-8", newline="") as f:
            if fresh:
                f.write(",".join(METRIC_HEADER) + "\n")
            f.write(f"{int(step)},{float(loss)!r},{float(psnr_db)!r}\n")
    except OSError as exc:
        raise DataError(f"cannot append metrics ({exc.strerror})", path) from None


def read_metrics(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise DataError("metrics file not found", path)
    try:
        with open(path, encoding="utf-8", newline="") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            rows = [r for r in reader if r]
    except (csv.Error, UnicodeDecodeError) as exc:
        raise DataError(f"unreadable CSV ({exc})", path) from None
    if header is None or tuple(header) != METRIC_HEADER:
        raise DataError(f"expected header {','.join(METRIC_HEADER)}", path, 1)
    try:
        steps = np.array([int(r[0]) for r in rows], dtype=np.int64)
        loss = np.array([float(r[1]) for r in rows])
        ps = np.array([float(r[2]) for r in rows])
    except (ValueError, IndexError) as exc:
        raise DataError(f"malformed metrics row ({exc})", path) from None
    return {"step": steps, "loss": loss, "psnr_db": ps}
