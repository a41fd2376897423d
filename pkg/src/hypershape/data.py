"""Synthetic training data: procedural shapes, z-buffered partial views,
rotation protocols and labeled query batches.

Every generator is a pure function of its arguments and seed.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.transform import Rotation

from . import geometry
from .errors import BadArgument, BadSpec, DataError, EmptyView, FileError
from .geometry import PointCloud
from .ply import read_ply, write_ply

FAMILIES = ("sphere", "box", "cylinder", "capsule", "mesh-file")
SPLITS = ("train", "validation", "holdout-views", "holdout-models")
TAGS = ("surface", "perturbed", "uniform")

# size parameter names per family
_SIZE_KEYS = {
    "sphere": ("radius",),
    "box": ("x", "y", "z"),
    "cylinder": ("radius", "height"),
    "capsule": ("radius", "length"),
    "mesh-file": (),
}


@dataclass(frozen=True)
class ShapeSpec:
    family: str
    size: Dict[str, float] = field(default_factory=dict)
    rotation: Tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)  # (w, x, y, z)
    translation: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    mesh_path: Optional[str] = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise BadSpec(f"unknown family {self.family!r}")
        missing = [k for k in _SIZE_KEYS[self.family] if k not in self.size]
        if missing:
            raise BadSpec(f"{self.family} needs size keys {missing}")
        if any(not v > 0 for v in self.size.values()):
            raise BadSpec("size parameters must be positive")
        q = np.asarray(self.rotation, dtype=np.float64)
        if q.shape != (4,) or abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise BadSpec("rotation must be a unit quaternion (w, x, y, z)")
        if self.family == "mesh-file" and not self.mesh_path:
            raise BadSpec("mesh-file family needs mesh_path")

    def rotation_matrix(self) -> np.ndarray:
        w, x, y, z = self.rotation
        return Rotation.from_quat([x, y, z, w]).as_matrix()

    def rotated(self, rot: Rotation) -> "ShapeSpec":
        """Same shape with ``rot`` applied after the current rotation."""
        w, x, y, z = self.rotation
        q = (rot * Rotation.from_quat([x, y, z, w])).as_quat()
        q = q / np.linalg.norm(q)
        return ShapeSpec(self.family, dict(self.size), (q[3], q[0], q[1], q[2]), self.translation, self.mesh_path)

    def to_dict(self) -> dict:
        return {"family": self.family, "size": dict(self.size), "rotation": list(map(float, self.rotation)),
                "translation": list(map(float, self.translation)), "mesh_path": self.mesh_path}

    @classmethod
    def from_dict(cls, d: dict) -> "ShapeSpec":
        return cls(d["family"], dict(d.get("size", {})), tuple(d.get("rotation", (1, 0, 0, 0))),
                   tuple(d.get("translation", (0, 0, 0))), d.get("mesh_path"))


@dataclass(frozen=True)
class ViewSpec:
    """Orthographic camera looking along ``direction``.

    The image plane spans ``[-extent, extent]^2`` with ``width x height``
    pixels. ``depth_tol`` of None means twice the cloud's mean
    nearest-neighbor spacing.
    """

    direction: Tuple[float, float, float] = (0.0, 0.0, 1.0)
    width: int = 48
    height: int = 48
    extent: float = 0.9
    depth_tol: Optional[float] = None

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        norm = np.linalg.norm(d)
        if d.shape != (3,) or norm == 0:
            raise BadArgument("direction must be a non-zero 3-vector")
        object.__setattr__(self, "direction", tuple(float(v) for v in d / norm))
        if self.width < 1 or self.height < 1 or not self.extent > 0:
            raise BadArgument("image size and extent must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class QueryBatch:
    points: np.ndarray
    labels: np.ndarray
    provenance: np.ndarray  # per-point tag from TAGS

    def counts(self) -> Dict[str, int]:
        return {t: int((self.provenance == t).sum()) for t in TAGS}


# -- surface sampling ----------------------------------------------------------

def _unit_vectors(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sample_box(rng, n, ext):
    hx, hy, hz = (e / 2 for e in ext)
    areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * [hx, hy, hz]
    axis = face // 2
    sign = np.where(face % 2 == 0, -1.0, 1.0)
    pts[np.arange(n), axis] = sign * np.array([hx, hy, hz])[axis]
    return pts


def _sample_cylinder(rng, n, r, h):
    side, cap = 2 * np.pi * r * h, np.pi * r * r
    part = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.uniform(0, 2 * np.pi, n)
    rad = np.where(part == 0, r, r * np.sqrt(rng.uniform(0, 1, n)))
    z = np.where(part == 0, rng.uniform(-h / 2, h / 2, n), np.where(part == 1, -h / 2, h / 2))
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)


def _sample_capsule(rng, n, r, length):
    side, caps = 2 * np.pi * r * length, 4 * np.pi * r * r
    on_side = rng.uniform(size=n) < side / (side + caps)
    theta = rng.uniform(0, 2 * np.pi, n)
    pts = np.stack([r * np.cos(theta), r * np.sin(theta), rng.uniform(-length / 2, length / 2, n)], axis=1)
    sph = _unit_vectors(rng, n) * r
    sph[:, 2] += np.where(sph[:, 2] >= 0, length / 2, -length / 2)
    return np.where(on_side[:, None], pts, sph)


def load_mesh(path: Union[str, Path]) -> Tuple[np.ndarray, np.ndarray]:
    """Vertices and triangle indices from a Wavefront OBJ (polygons are fanned)."""
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise FileError(str(exc)) from exc
    verts, faces = [], []
    for line in lines:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "v":
            verts.append([float(t) for t in tok[1:4]])
        elif tok[0] == "f":
            idx = [int(t.split("/")[0]) for t in tok[1:]]
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            faces += [[idx[0], idx[j], idx[j + 1]] for j in range(1, len(idx) - 1)]
    if not verts or not faces:
        raise FileError(f"{path}: no triangles found")
    v, f = np.asarray(verts), np.asarray(faces)
    if f.min() < 0 or f.max() >= len(v):
        raise FileError(f"{path}: face index out of range")
    return v, f


def _sample_mesh(rng, n, path):
    v, f = load_mesh(path)
    a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    area = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    if area.sum() <= 0:
        raise FileError(f"{path}: mesh has zero area")
    tri = rng.choice(len(f), size=n, p=area / area.sum())
    u, w = rng.uniform(size=(2, n))
    flip = u + w > 1
    u[flip], w[flip] = 1 - u[flip], 1 - w[flip]
    return a[tri] + u[:, None] * (b[tri] - a[tri]) + w[:, None] * (c[tri] - a[tri])


def make_shape(spec: ShapeSpec, n_points: int, seed: int = 0) -> PointCloud:
    """``n_points`` area-uniform surface samples, posed and normalized."""
    if n_points < 1:
        raise BadArgument("n_points must be >= 1")
    rng = np.random.default_rng(seed)
    s = spec.size
    if spec.family == "mesh-file":
        pts = _sample_mesh(rng, n_points, spec.mesh_path)
    else:
        # primitives are centrally symmetric: mirrored pairs keep the sample
        # centroid on the true center
        m = (n_points + 1) // 2
        if spec.family == "sphere":
            half = _unit_vectors(rng, m) * s["radius"]
        elif spec.family == "box":
            half = _sample_box(rng, m, (s["x"], s["y"], s["z"]))
        elif spec.family == "cylinder":
            half = _sample_cylinder(rng, m, s["radius"], s["height"])
        else:
            half = _sample_capsule(rng, m, s["radius"], s["length"])
        pts = np.concatenate([half, -half])[:n_points]
    pts = pts @ spec.rotation_matrix().T + np.asarray(spec.translation)
    if n_points == 1:
        return PointCloud(pts)  # no extent to normalize
    return geometry.normalize(PointCloud(pts))[0]


# -- partial views -------------------------------------------------------------

def _image_basis(direction: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    helper = np.eye(3)[int(np.argmin(np.abs(direction)))]
    u = np.cross(direction, helper)
    u /= np.linalg.norm(u)
    return u, np.cross(direction, u)


def mean_spacing(points: np.ndarray, max_probe: int = 512) -> float:
    """Mean distance from a strided subset of points to their nearest other point."""
    from scipy.spatial import cKDTree

    n = len(points)
    if n < 2:
        return 0.0
    probe = points[::max(1, n // max_probe)]
    d, _ = cKDTree(points).query(probe, k=2)
    return float(d[:, 1].mean())


def visible_indices(cloud: PointCloud, view: ViewSpec) -> np.ndarray:
    pts = cloud.points
    d = np.asarray(view.direction)
    u, v = _image_basis(d)
    px = np.floor((pts @ u + view.extent) / (2 * view.extent) * view.width).astype(np.int64)
    py = np.floor((pts @ v + view.extent) / (2 * view.extent) * view.height).astype(np.int64)
    inside = (px >= 0) & (px < view.width) & (py >= 0) & (py < view.height)
    if not inside.any():
        raise EmptyView("no point projects inside the image")
    idx = np.flatnonzero(inside)
    pixel = py[idx] * view.width + px[idx]
    depth = pts[idx] @ d
    nearest = np.full(view.width * view.height, np.inf)
    np.minimum.at(nearest, pixel, depth)
    tol = view.depth_tol if view.depth_tol is not None else 2.0 * mean_spacing(pts)
    return idx[depth <= nearest[pixel] + tol]


def partial_view(cloud: PointCloud, view: ViewSpec = ViewSpec()) -> PointCloud:
    """Self-occluded subset of ``cloud`` seen by an orthographic z-buffer camera."""
    return cloud.subset(visible_indices(cloud, view))


# -- view protocols ------------------------------------------------------------

def rotation_preset(name: str, seed: int = 0) -> List[Rotation]:
    """Named rotation protocols.

    ``identity``; ``desk-N`` for N seeded random rotations; ``paper-726``
    for an 11 x 11 x 6 grid of rotations about x, y and z.
    """
    if name == "identity":
        return [Rotation.identity()]
    if name == "paper-726":
        ax = np.linspace(0, 360, 11, endpoint=False)
        az = np.linspace(0, 360, 6, endpoint=False)
        return [Rotation.from_euler("xyz", [a, b, c], degrees=True) for a in ax for b in ax for c in az]
    if name.startswith("desk-"):
        n = int(name.split("-", 1)[1])
        rots = Rotation.random(n, random_state=seed)
        return [rots[i] for i in range(n)]
    raise BadArgument(f"unknown rotation preset {name!r}")


def make_view_set(spec: ShapeSpec, rotations: Sequence[Rotation], n_points: int = 20000, seed: int = 0,
                  view: ViewSpec = ViewSpec()) -> List[Tuple[PointCloud, PointCloud]]:
    """One (partial, complete) pair per rotation of the shape.

    The complete cloud is re-normalized after rotating, and the partial view
    is a subset of it, so both live in the same frame.
    """
    if len(rotations) == 0:
        raise BadArgument("need at least one rotation")
    pairs = []
    for rot in rotations:
        complete = make_shape(spec.rotated(rot), n_points, seed)
        pairs.append((partial_view(complete, view), complete))
    return pairs


# -- query batches -------------------------------------------------------------

def make_query_batch(gt: PointCloud, n: int, noise_std: float = 0.02, label_eps: float = 0.01,
                     seed: int = 0, tree=None) -> QueryBatch:
    """Half ground-truth points (label 1), 40% Gaussian-perturbed ground-truth
    points and 10% uniform points in the canonical cube; the last two are
    positive iff within ``label_eps`` of the nearest ground-truth point.

    ``tree`` may be a prebuilt ``cKDTree`` over ``gt.points``.
    """
    if n < 10 or n % 10:
        raise BadArgument("n must be a positive multiple of 10")
    if len(gt) == 0:
        raise BadArgument("ground truth is empty")
    rng = np.random.default_rng(seed)
    n_surf, n_pert, n_uni = n // 2, 4 * n // 10, n // 10
    gtp = gt.points
    surf = gtp[rng.integers(0, len(gtp), n_surf)]
    pert = gtp[rng.integers(0, len(gtp), n_pert)] + rng.normal(0.0, noise_std, size=(n_pert, 3))
    uni = rng.uniform(-0.5, 0.5, size=(n_uni, 3))
    off = np.concatenate([pert, uni])
    dist = tree.query(off)[0] if tree is not None else geometry.nearest_distance(off, gtp)
    off_labels = (dist <= label_eps).astype(np.float64)
    return QueryBatch(
        np.concatenate([surf, off]),
        np.concatenate([np.ones(n_surf), off_labels]),
        np.array(["surface"] * n_surf + ["perturbed"] * n_pert + ["uniform"] * n_uni),
    )


# -- datasets ------------------------------------------------------------------

@dataclass
class Sample:
    partial: PointCloud
    complete: PointCloud
    meta: dict

    @property
    def split(self) -> str:
        return self.meta["split"]


@dataclass(frozen=True)
class DatasetConfig:
    families: Tuple[str, ...] = ("sphere", "box", "cylinder")
    instances: int = 20
    holdout_models: int = 0
    views: int = 8
    validation_views: int = 1
    holdout_views: int = 1
    n_points: int = 20000
    view: ViewSpec = field(default_factory=ViewSpec)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.view, dict):
            object.__setattr__(self, "view", ViewSpec(**self.view))
        object.__setattr__(self, "families", tuple(self.families))
        if self.views - self.validation_views - self.holdout_views < 1:
            raise BadArgument("need at least one training view per instance")


def random_size(family: str, rng: np.random.Generator) -> Dict[str, float]:
    if family == "sphere":
        return {"radius": float(rng.uniform(0.5, 1.5))}
    if family == "box":
        return {k: float(rng.uniform(0.4, 1.0)) for k in ("x", "y", "z")}
    if family == "cylinder":
        return {"radius": float(rng.uniform(0.2, 0.5)), "height": float(rng.uniform(0.5, 1.2))}
    if family == "capsule":
        return {"radius": float(rng.uniform(0.15, 0.35)), "length": float(rng.uniform(0.3, 0.8))}
    raise BadSpec(f"no random sizes for family {family!r}")


def _instance_samples(cfg: DatasetConfig, fi: int, family: str, inst: int) -> List[Sample]:
    seed = int(np.random.SeedSequence([cfg.seed, fi, inst]).generate_state(1)[0])
    spec = ShapeSpec(family, random_size(family, np.random.default_rng(seed)))
    rots = rotation_preset(f"desk-{cfg.views}", seed)
    is_holdout_model = inst >= cfg.instances
    out = []
    for vi, (partial, complete) in enumerate(make_view_set(spec, rots, cfg.n_points, seed, cfg.view)):
        if is_holdout_model:
            split = "holdout-models"
        elif vi >= cfg.views - cfg.holdout_views:
            split = "holdout-views"
        elif vi >= cfg.views - cfg.holdout_views - cfg.validation_views:
            split = "validation"
        else:
            split = "train"
        r = rots[vi].as_quat()
        meta = {
            "id": f"{family}-{inst:03d}-v{vi:02d}",
            "split": split,
            "shape": spec.to_dict(),
            "view_rotation": [float(r[3]), float(r[0]), float(r[1]), float(r[2])],
            "view": cfg.view.to_dict(),
            "seed": seed,
            "view_index": vi,
        }
        out.append(Sample(partial, complete, meta))
    return out


def generate_dataset(cfg: DatasetConfig = DatasetConfig()) -> List[Sample]:
    samples = []
    for fi, family in enumerate(cfg.families):
        for inst in range(cfg.instances + cfg.holdout_models):
            samples += _instance_samples(cfg, fi, family, inst)
    return samples


def save_dataset(samples: Sequence[Sample], root: Union[str, Path], binary: bool = True) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for s in samples:
        d = root / s.meta["id"]
        d.mkdir(exist_ok=True)
        write_ply(d / "partial.ply", s.partial, binary=binary)
        write_ply(d / "complete.ply", s.complete, binary=binary)
        (d / "meta.json").write_text(json.dumps(s.meta, indent=2))


def load_dataset(root: Union[str, Path], splits: Optional[Sequence[str]] = None) -> List[Sample]:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root} is not a directory")
    samples = []
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        try:
            meta = json.loads((d / "meta.json").read_text())
            if meta.get("split") not in SPLITS:
                raise DataError(f"{d}: bad split tag {meta.get('split')!r}")
            if splits is not None and meta["split"] not in splits:
                continue
            samples.append(Sample(read_ply(d / "partial.ply"), read_ply(d / "complete.ply"), meta))
        except (OSError, ValueError, KeyError, FileError) as exc:
            raise DataError(f"{d}: {exc}") from exc
    if not samples:
        raise DataError(f"{root}: no samples found")
    return samples


def by_split(samples: Sequence[Sample], split: str) -> List[Sample]:
    return [s for s in samples if s.split == split]
