"""Point-cloud primitives: normalization, neighbor queries, farthest point
sampling, voxelization and the voxel Jaccard metric.

Clouds are stored as ``(n, 3)`` float64 arrays. All functions are pure.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import BadArgument, DegenerateCloud, GridMismatch

Bounds = Tuple[Tuple[float, float, float], Tuple[float, float, float]]

CANONICAL_BOUNDS: Bounds = ((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5))


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    confidence: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 1 and pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise BadArgument(f"points must have shape (n, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise BadArgument("points must be finite")
        object.__setattr__(self, "points", pts)
        if self.confidence is not None:
            conf = np.asarray(self.confidence, dtype=np.float64).reshape(-1)
            if conf.shape[0] != pts.shape[0]:
                raise BadArgument("confidence length must equal the number of points")
            object.__setattr__(self, "confidence", conf)

    def __len__(self) -> int:
        return self.points.shape[0]

    def subset(self, indices) -> "PointCloud":
        idx = np.asarray(indices, dtype=np.int64)
        conf = None if self.confidence is None else self.confidence[idx]
        return PointCloud(self.points[idx], conf)


@dataclass(frozen=True)
class Transform:
    """Maps original coordinates to normalized ones: ``(p + translation) * scale``."""

    translation: np.ndarray
    scale: float

    def __post_init__(self):
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        if not self.scale > 0:
            raise BadArgument("scale must be positive")

    @classmethod
    def identity(cls) -> "Transform":
        return cls(np.zeros(3), 1.0)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) + self.translation) * self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) / self.scale - self.translation


@dataclass(frozen=True)
class VoxelGrid:
    resolution: int
    bounds: Bounds
    occupied: np.ndarray = field(repr=False)
    dropped: int = 0

    @property
    def count(self) -> int:
        return int(self.occupied.sum())

    def occupied_cells(self) -> np.ndarray:
        return np.argwhere(self.occupied)


def _as_points(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    return PointCloud(cloud).points


def _check_bounds(bounds) -> Tuple[np.ndarray, np.ndarray]:
    lo = np.asarray(bounds[0], dtype=np.float64).reshape(3)
    hi = np.asarray(bounds[1], dtype=np.float64).reshape(3)
    if not np.all(hi > lo):
        raise BadArgument(f"degenerate bounds {bounds}")
    return lo, hi


def normalize(cloud: PointCloud) -> Tuple[PointCloud, Transform]:
    """Center the cloud on its centroid and scale so the largest absolute
    coordinate is 0.5."""
    pts = _as_points(cloud)
    if pts.shape[0] == 0:
        raise BadArgument("cannot normalize an empty cloud")
    centroid = pts.mean(axis=0)
    extent = np.abs(pts - centroid).max()
    if extent == 0.0:
        raise DegenerateCloud("all points coincide")
    transform = Transform(-centroid, 0.5 / extent)
    conf = cloud.confidence if isinstance(cloud, PointCloud) else None
    return PointCloud(transform.apply(pts), conf), transform


def _sq_dist_to(pts: np.ndarray, q: np.ndarray) -> np.ndarray:
    dx = pts[:, 0] - q[0]
    dy = pts[:, 1] - q[1]
    dz = pts[:, 2] - q[2]
    return dx * dx + dy * dy + dz * dz


def farthest_point_sample(cloud, k: int, start: int = 0) -> np.ndarray:
    """Greedy max-min subset selection.

    Each step picks the point whose distance to the already chosen set is
    largest; ties go to the lowest index. Returns ``k`` distinct indices in
    visitation order.
    """
    pts = _as_points(cloud)
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise BadArgument(f"k={k} out of range for a cloud of {n} points")
    if not 0 <= start < n:
        raise BadArgument(f"start index {start} out of range")
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = start
    # contiguous columns and reused buffers; same arithmetic as _sq_dist_to
    xs, ys, zs = (np.ascontiguousarray(pts[:, j]) for j in range(3))
    d, t = np.empty(n), np.empty(n)
    mind = _sq_dist_to(pts, pts[start])
    mind[start] = -1.0
    for i in range(1, k):
        nxt = int(np.argmax(mind))
        chosen[i] = nxt
        np.subtract(xs, xs[nxt], out=d)
        np.multiply(d, d, out=d)
        np.subtract(ys, ys[nxt], out=t)
        np.multiply(t, t, out=t)
        np.add(d, t, out=d)
        np.subtract(zs, zs[nxt], out=t)
        np.multiply(t, t, out=t)
        np.add(d, t, out=d)
        np.minimum(mind, d, out=mind)
        mind[nxt] = -1.0
    return chosen


def knn(cloud, query, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest points to ``query``, nearest first, ties
    broken by lowest index."""
    pts = _as_points(cloud)
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise BadArgument(f"k={k} out of range for a cloud of {n} points")
    d = _sq_dist_to(pts, np.asarray(query, dtype=np.float64).reshape(3))
    return np.argsort(d, kind="stable")[:k]


def knn_batch(points: np.ndarray, queries: np.ndarray, k: int, exclude_self: bool = False) -> np.ndarray:
    """Row-wise :func:`knn` for many queries at once, shape ``(m, k)``.

    With ``exclude_self`` the queries are the points themselves and each row
    skips its own index.
    """
    points = np.asarray(points, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    n = points.shape[0]
    kk = k + 1 if exclude_self else k
    if not 1 <= kk <= n:
        raise BadArgument(f"k={k} out of range for a cloud of {n} points")
    diff = queries[:, None, :] - points[None, :, :]
    d = diff[..., 0] ** 2 + diff[..., 1] ** 2 + diff[..., 2] ** 2
    if exclude_self:
        d[np.arange(len(queries)), np.arange(len(queries))] = np.inf
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def voxelize(cloud, resolution: int, bounds: Bounds = CANONICAL_BOUNDS) -> VoxelGrid:
    """Occupancy grid over ``bounds``. Points on the upper faces fall in the
    last cell; points outside are dropped and counted."""
    if resolution < 1:
        raise BadArgument("resolution must be >= 1")
    lo, hi = _check_bounds(bounds)
    pts = _as_points(cloud)
    inside = np.all((pts >= lo) & (pts <= hi), axis=1)
    idx = np.floor((pts[inside] - lo) / (hi - lo) * resolution).astype(np.int64)
    np.clip(idx, 0, resolution - 1, out=idx)
    occ = np.zeros((resolution,) * 3, dtype=bool)
    occ[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    norm_bounds = (tuple(float(v) for v in lo), tuple(float(v) for v in hi))
    return VoxelGrid(resolution, norm_bounds, occ, int((~inside).sum()))


def jaccard(a: VoxelGrid, b: VoxelGrid) -> float:
    if a.resolution != b.resolution or a.bounds != b.bounds:
        raise GridMismatch("grids differ in resolution or bounds")
    union = np.logical_or(a.occupied, b.occupied).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a.occupied, b.occupied).sum() / union)


def cell_centers(resolution: int, bounds: Bounds = CANONICAL_BOUNDS) -> np.ndarray:
    """Centers of all cells of a grid, flattened in C order, shape ``(R**3, 3)``."""
    if resolution < 1:
        raise BadArgument("resolution must be >= 1")
    lo, hi = _check_bounds(bounds)
    axes = [lo[i] + (np.arange(resolution) + 0.5) * (hi[i] - lo[i]) / resolution for i in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


def nearest_distance(points: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Distance from each point to its nearest reference point (kd-tree backed)."""
    from scipy.spatial import cKDTree

    d, _ = cKDTree(np.asarray(reference, dtype=np.float64)).query(np.asarray(points, dtype=np.float64))
    return d


def concat(clouds: Sequence[PointCloud]) -> PointCloud:
    pts = np.concatenate([c.points for c in clouds], axis=0)
    if all(c.confidence is not None for c in clouds):
        return PointCloud(pts, np.concatenate([c.confidence for c in clouds]))
    return PointCloud(pts)
