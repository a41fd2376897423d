"""PLY reader/writer for point clouds (ASCII and binary little-endian).

Vertices carry ``x, y, z`` as float32, an optional ``confidence`` float and,
when confidence is present, ``red, green, blue`` bytes from a dark-to-bright
colormap so viewers show high-confidence regions brighter.
"""
from __future__ import annotations

from pathlib import Path
from typing import Union

import numpy as np

from .errors import FileError
from .geometry import PointCloud

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}

# anchor colors from dark purple through orange to pale yellow
_CMAP = np.array([
    [0, 0, 4],
    [87, 16, 110],
    [188, 55, 84],
    [249, 142, 9],
    [252, 255, 164],
], dtype=np.float64)


def confidence_colors(confidence: np.ndarray) -> np.ndarray:
    """Map confidences in [0, 1] to uint8 RGB; brighter means more confident."""
    c = np.clip(np.asarray(confidence, dtype=np.float64), 0.0, 1.0) * (len(_CMAP) - 1)
    lo = np.minimum(np.floor(c).astype(int), len(_CMAP) - 2)
    t = (c - lo)[:, None]
    rgb = _CMAP[lo] * (1 - t) + _CMAP[lo + 1] * t
    return np.round(rgb).astype(np.uint8)


def write_ply(path: Union[str, Path], cloud: PointCloud, binary: bool = True, colors: bool = True) -> None:
    n = len(cloud)
    fields = [("x", "f4"), ("y", "f4"), ("z", "f4")]
    has_conf = cloud.confidence is not None
    if has_conf:
        fields.append(("confidence", "f4"))
        if colors:
            fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    rec = np.empty(n, dtype=[(name, "<" + t) for name, t in fields])
    rec["x"], rec["y"], rec["z"] = cloud.points.T
    if has_conf:
        rec["confidence"] = cloud.confidence
        if colors:
            rgb = confidence_colors(cloud.confidence)
            rec["red"], rec["green"], rec["blue"] = rgb.T

    ply_name = {"f4": "float", "u1": "uchar"}
    header = ["ply", "format " + ("binary_little_endian" if binary else "ascii") + " 1.0", f"element vertex {n}"]
    header += [f"property {ply_name[t]} {name}" for name, t in fields]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(rec.tobytes())
        else:
            for row in rec:
                vals = []
                for (name, t), v in zip(fields, row):
                    vals.append(repr(float(v)) if t == "f4" else str(int(v)))
                fh.write((" ".join(vals) + "\n").encode("ascii"))


def read_ply(path: Union[str, Path]) -> PointCloud:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise FileError(str(exc)) from exc
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise FileError(f"{path}: not a PLY file")
    body_start = data.index(b"\n", end) + 1
    header = data[:end].decode("ascii").splitlines()

    fmt = None
    elements = []  # (name, count, [(prop, dtype)])
    for line in header:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if tok[1] == "list":
                raise FileError(f"{path}: list properties are not supported")
            if not elements or tok[1] not in _PLY_TYPES:
                raise FileError(f"{path}: bad property line {line!r}")
            elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise FileError(f"{path}: unsupported format {fmt}")
    if not elements or elements[0][0] != "vertex":
        raise FileError(f"{path}: first element must be 'vertex'")

    _, n, props = elements[0]
    names = [p for p, _ in props]
    if not {"x", "y", "z"} <= set(names):
        raise FileError(f"{path}: missing x/y/z")
    if fmt == "ascii":
        lines = data[body_start:].decode("ascii").split("\n")
        rows = [ln.split() for ln in lines if ln.strip()][:n]
        if len(rows) < n:
            raise FileError(f"{path}: truncated vertex list")
        table = np.array(rows, dtype=np.float64).reshape(n, len(props)) if n else np.zeros((0, len(props)))
        col = {name: table[:, i] for i, name in enumerate(names)}
    else:
        dtype = np.dtype([(name, "<" + t) for name, t in props])
        if len(data) - body_start < dtype.itemsize * n:
            raise FileError(f"{path}: truncated binary payload")
        rec = np.frombuffer(data, dtype=dtype, count=n, offset=body_start)
        col = {name: rec[name].astype(np.float64) for name in names}
    pts = np.stack([col["x"], col["y"], col["z"]], axis=1)
    return PointCloud(pts, col.get("confidence"))
