"""Point-cloud extraction from a density field and cloud-to-cloud statistics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numba as nb
import numpy as np

DEFAULT_DELTA_T = 15.0


class ExtractError(ValueError):
    pass


@dataclass
class PointCloud:
    positions: np.ndarray
    colors: np.ndarray
    density: Optional[np.ndarray] = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
        if len(self.colors) != len(self.positions):
            raise ExtractError("positions and colors differ in length")

    def __len__(self) -> int:
        return len(self.positions)


@dataclass
class DensityGrid:
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    resolution: tuple
    values: np.ndarray  # indexed [i, j, k] along x, y, z

    @property
    def spacing(self) -> np.ndarray:
        return (self.bbox_max - self.bbox_min) / (np.asarray(self.resolution) - 1)

    def axes(self):
        return [np.linspace(lo, hi, n) for lo, hi, n in zip(self.bbox_min, self.bbox_max, self.resolution)]

    def node_positions(self) -> np.ndarray:
        """All node positions in scan order, x varying fastest."""
        xs, ys, zs = self.axes()
        gz, gy, gx = np.meshgrid(zs, ys, xs, indexing="ij")
        return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)

    def scan_values(self) -> np.ndarray:
        return self.values.ravel(order="F")


def sample_density_grid(fld, bbox, resolution, chunk: int = 1 << 16) -> DensityGrid:
    """Evaluate the field density at every node of a regular grid (endpoints included)."""
    lo = np.asarray(bbox[0], dtype=np.float64)
    hi = np.asarray(bbox[1], dtype=np.float64)
    if np.ndim(resolution) == 0:
        resolution = (int(resolution),) * 3
    resolution = tuple(int(r) for r in resolution)
    if any(r < 2 for r in resolution):
        raise ExtractError(f"resolution must be >= 2 per axis, got {resolution}")
    if not np.all(hi > lo):
        raise ExtractError(f"degenerate bounding box {lo.tolist()} .. {hi.tolist()}")
    grid = DensityGrid(lo, hi, resolution, np.empty(0))
    pts = grid.node_positions()
    vals = np.empty(len(pts), dtype=np.float64)
    for s in range(0, len(pts), chunk):
        vals[s:s + chunk] = fld.density(pts[s:s + chunk])
    grid.values = vals.reshape(resolution, order="F")
    return grid


def threshold_filter(grid: DensityGrid, delta_t: float = DEFAULT_DELTA_T) -> PointCloud:
    """Keep nodes with density strictly above ``delta_t``."""
    if not delta_t >= 0:
        raise ExtractError(f"delta_t must be non-negative, got {delta_t}")
    vals = grid.scan_values()
    keep = np.flatnonzero(vals > delta_t)
    res = np.asarray(grid.resolution)
    i = keep % res[0]
    j = (keep // res[0]) % res[1]
    k = keep // (res[0] * res[1])
    pos = grid.bbox_min + np.stack([i, j, k], axis=1) * grid.spacing
    return PointCloud(pos, np.zeros((len(keep), 3), dtype=np.uint8), vals[keep])


def fibonacci_directions(k: int) -> np.ndarray:
    """``k`` unit vectors spread evenly over the sphere."""
    if k < 1:
        raise ExtractError(f"direction count must be >= 1, got {k}")
    i = np.arange(k)
    z = 1.0 - (2.0 * i + 1.0) / k
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = i * np.pi * (3.0 - np.sqrt(5.0))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


@dataclass
class FixedDirection:
    direction: tuple = (0.0, 0.0, -1.0)


@dataclass
class DirectionAverage:
    k: int = 6


def quantize_colors(rgb: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(rgb, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def colorize(fld, cloud: PointCloud, strategy=None) -> PointCloud:
    strategy = strategy or FixedDirection()
    pos = np.asarray(cloud.positions, dtype=np.float64)
    if isinstance(strategy, FixedDirection):
        d = np.asarray(strategy.direction, dtype=np.float64)
        dirs = [d / np.linalg.norm(d)]
    elif isinstance(strategy, DirectionAverage):
        dirs = list(fibonacci_directions(strategy.k))
    else:
        raise ExtractError(f"unknown colorization strategy {strategy!r}")
    acc = np.zeros((len(pos), 3))
    if len(pos):
        for d in dirs:
            acc += fld.query(pos, np.broadcast_to(d, pos.shape))[1]
    acc /= len(dirs)
    return PointCloud(cloud.positions, quantize_colors(acc), cloud.density)


# -- nearest neighbours ------------------------------------------------------

_BRUTE_RING = 24


class SpatialHash:
    """Uniform-cell index answering exact nearest-neighbour queries."""

    def __init__(self, points: np.ndarray, cell: float):
        if not cell > 0:
            raise ExtractError(f"cell size must be positive, got {cell}")
        self.points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) == 0:
            raise ExtractError("cannot index an empty point set")
        self.cell = float(cell)
        ijk = np.floor(self.points / self.cell).astype(np.int64)
        self.lo = ijk.min(axis=0)
        self.dims = ijk.max(axis=0) - self.lo + 1
        keys = _cell_key(ijk - self.lo, self.dims)
        order = np.argsort(keys, kind="stable")
        self.sorted_pts = self.points[order]
        self.keys, self.starts = np.unique(keys[order], return_index=True)
        self.ends = np.append(self.starts[1:], len(order))

    def nearest(self, queries: np.ndarray) -> np.ndarray:
        """Distance from each query to its nearest indexed point."""
        q = np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, 3)
        return _nn_query(q, self.sorted_pts, self.keys, self.starts, self.ends, self.lo, self.dims, self.cell)


def _cell_key(ijk, dims):
    return (ijk[..., 2] * dims[1] + ijk[..., 1]) * dims[0] + ijk[..., 0]


@nb.njit(cache=True)
def _nn_query(q, pts, keys, starts, ends, lo, dims, cell):
    out = np.empty(len(q))
    for n in range(len(q)):
        cx = np.int64(np.floor(q[n, 0] / cell)) - lo[0]
        cy = np.int64(np.floor(q[n, 1] / cell)) - lo[1]
        cz = np.int64(np.floor(q[n, 2] / cell)) - lo[2]
        best = np.inf
        # rings needed before every cell has been considered
        reach = max(abs(cx), abs(cx - dims[0] + 1), abs(cy), abs(cy - dims[1] + 1),
                    abs(cz), abs(cz - dims[2] + 1))
        ring = 0
        while True:
            # past this point a linear scan is cheaper than more rings
            if ring > _BRUTE_RING or (2 * ring + 1) ** 3 > len(pts):
                for m in range(len(pts)):
                    dx = pts[m, 0] - q[n, 0]
                    dy = pts[m, 1] - q[n, 1]
                    dz = pts[m, 2] - q[n, 2]
                    dd = dx * dx + dy * dy + dz * dz
                    if dd < best:
                        best = dd
                break
            for i in range(cx - ring, cx + ring + 1):
                if i < 0 or i >= dims[0]:
                    continue
                for j in range(cy - ring, cy + ring + 1):
                    if j < 0 or j >= dims[1]:
                        continue
                    edge_ij = abs(i - cx) == ring or abs(j - cy) == ring
                    for k in range(cz - ring, cz + ring + 1):
                        if k < 0 or k >= dims[2]:
                            continue
                        if not edge_ij and abs(k - cz) != ring:
                            continue
                        key = (k * dims[1] + j) * dims[0] + i
                        pos = np.searchsorted(keys, key)
                        if pos >= len(keys) or keys[pos] != key:
                            continue
                        for m in range(starts[pos], ends[pos]):
                            dx = pts[m, 0] - q[n, 0]
                            dy = pts[m, 1] - q[n, 1]
                            dz = pts[m, 2] - q[n, 2]
                            dd = dx * dx + dy * dy + dz * dz
                            if dd < best:
                                best = dd
            # cells in ring r+1 are at least r*cell away
            lim = ring * cell
            if best <= lim * lim or ring >= reach:
                break
            ring += 1
        out[n] = np.sqrt(best)
    return out


@dataclass
class CloudStats:
    point_count: int
    reference_count: int
    completeness: float
    chamfer: float
    artifact_fraction: float
    radius: float

    def to_dict(self) -> dict:
        return {
            "point_count": self.point_count,
            "reference_count": self.reference_count,
            "completeness": self.completeness,
            "chamfer": self.chamfer,
            "artifact_fraction": self.artifact_fraction,
            "radius": self.radius,
        }


def nearest_distances(src: np.ndarray, dst: np.ndarray, cell: float) -> np.ndarray:
    return SpatialHash(dst, cell).nearest(src)


def cloud_stats(cloud: PointCloud, reference: PointCloud, radius: float) -> CloudStats:
    if len(reference) == 0:
        raise ExtractError("reference cloud is empty")
    if len(cloud) == 0:
        raise ExtractError("cloud is empty")
    if not radius > 0:
        raise ExtractError(f"radius must be positive, got {radius}")
    a = np.asarray(cloud.positions, dtype=np.float64)
    b = np.asarray(reference.positions, dtype=np.float64)
    ref_to_cloud = nearest_distances(b, a, radius)
    cloud_to_ref = nearest_distances(a, b, radius)
    return CloudStats(
        point_count=len(a),
        reference_count=len(b),
        completeness=float(np.mean(ref_to_cloud <= radius)),
        chamfer=float(0.5 * (ref_to_cloud.mean() + cloud_to_ref.mean())),
        artifact_fraction=float(np.mean(cloud_to_ref > radius)),
        radius=float(radius),
    )
