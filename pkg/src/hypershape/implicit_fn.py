"""The per-object occupancy MLP whose weights come from the encoder.

Each layer computes ``((W @ x) * s) + b``; hidden layers apply a leaky ReLU
and the last layer a sigmoid. Evaluation is in numpy and contracts with
``einsum`` instead of BLAS so a point's output does not depend on which
batch it was evaluated in.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from .errors import BadArgument, FileError, ShapeMismatch

MAGIC = b"HSIMPL"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class MlpArch:
    layer_dims: Tuple[int, ...] = (3, 32, 32, 1)
    leaky_slope: float = 0.2

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2 or dims[0] != 3 or dims[-1] != 1 or min(dims) < 1:
            raise BadArgument(f"invalid layer dims {dims}")
        if not 0.0 < self.leaky_slope < 1.0:
            raise BadArgument("leaky_slope must lie in (0, 1)")

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    def layer_shapes(self) -> List[Tuple[int, int]]:
        """``(out, in)`` for every layer."""
        d = self.layer_dims
        return [(d[i + 1], d[i]) for i in range(self.n_layers)]


def param_count(arch: MlpArch) -> int:
    return sum(o * i + 2 * o for o, i in arch.layer_shapes())


@dataclass(frozen=True)
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    scale: np.ndarray


@dataclass(frozen=True)
class ImplicitParams:
    layers: Tuple[Layer, ...]
    arch: MlpArch = field(default_factory=MlpArch)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        shapes = self.arch.layer_shapes()
        if len(self.layers) != len(shapes):
            raise ShapeMismatch(f"expected {len(shapes)} layers, got {len(self.layers)}")
        for l, (layer, (o, i)) in enumerate(zip(self.layers, shapes)):
            if layer.weight.shape != (o, i) or layer.bias.shape != (o,) or layer.scale.shape != (o,):
                raise ShapeMismatch(
                    f"layer {l}: W{layer.weight.shape} b{layer.bias.shape} s{layer.scale.shape}, expected W{(o, i)}"
                )
            for t in (layer.weight, layer.bias, layer.scale):
                if not np.all(np.isfinite(t)):
                    raise ShapeMismatch(f"layer {l} has non-finite entries")

    @classmethod
    def from_arrays(cls, arrays: Sequence[Tuple], arch: MlpArch = MlpArch()) -> "ImplicitParams":
        """Build from ``[(W, b, s), ...]`` (anything array-like)."""
        layers = []
        for w, b, s in arrays:
            layers.append(Layer(
                np.array(w, dtype=np.float64, ndmin=2),
                np.array(b, dtype=np.float64, ndmin=1),
                np.array(s, dtype=np.float64, ndmin=1),
            ))
        return cls(tuple(layers), arch)

    @classmethod
    def from_flat(cls, flat: np.ndarray, arch: MlpArch = MlpArch()) -> "ImplicitParams":
        """Inverse of :meth:`flatten`: layer-major, each as W (row-major), b, s."""
        flat = np.asarray(flat, dtype=np.float64).reshape(-1)
        if flat.size != param_count(arch):
            raise ShapeMismatch(f"expected {param_count(arch)} scalars, got {flat.size}")
        layers, pos = [], 0
        for o, i in arch.layer_shapes():
            w = flat[pos:pos + o * i].reshape(o, i)
            pos += o * i
            b = flat[pos:pos + o]
            pos += o
            s = flat[pos:pos + o]
            pos += o
            layers.append(Layer(w.copy(), b.copy(), s.copy()))
        return cls(tuple(layers), arch)

    def flatten(self) -> np.ndarray:
        return np.concatenate([np.concatenate([l.weight.ravel(), l.bias, l.scale]) for l in self.layers])

    def astype(self, dtype) -> "ImplicitParams":
        return ImplicitParams(
            tuple(Layer(l.weight.astype(dtype), l.bias.astype(dtype), l.scale.astype(dtype)) for l in self.layers),
            self.arch,
        )

    @classmethod
    def random(cls, arch: MlpArch = MlpArch(), seed: int = 0, std: float = 1.0) -> "ImplicitParams":
        rng = np.random.default_rng(seed)
        layers = []
        for o, i in arch.layer_shapes():
            layers.append(Layer(
                rng.normal(0.0, std / np.sqrt(i), size=(o, i)),
                rng.normal(0.0, 0.1 * std, size=o),
                rng.normal(1.0, 0.25, size=o),
            ))
        return cls(tuple(layers), arch)


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _as_batch(points) -> Tuple[np.ndarray, bool]:
    x = np.asarray(points, dtype=np.float64)
    single = x.ndim == 1
    x = x.reshape(-1, 3)
    if not np.all(np.isfinite(x)):
        raise BadArgument("points must be finite")
    return x, single


def _affine(layer: Layer, x: np.ndarray) -> np.ndarray:
    return np.einsum("ni,oi->no", x, layer.weight) * layer.scale + layer.bias


def logits(params: ImplicitParams, points) -> np.ndarray:
    """Final pre-activation for each point."""
    x, _ = _as_batch(points)
    slope = params.arch.leaky_slope
    h = x
    for layer in params.layers[:-1]:
        z = _affine(layer, h)
        h = np.where(z >= 0, z, slope * z)
    return _affine(params.layers[-1], h)[:, 0]


def _clip_open(p: np.ndarray) -> np.ndarray:
    # keep confidences strictly inside (0, 1) even when the sigmoid rounds off
    return np.clip(p, np.finfo(np.float64).tiny, np.nextafter(1.0, 0.0))


def forward(params: ImplicitParams, points) -> np.ndarray:
    """Occupancy confidence in (0, 1) for a point ``(3,)`` or batch ``(n, 3)``."""
    x, single = _as_batch(points)
    out = _clip_open(sigmoid(logits(params, x)))
    return out[0] if single else out


def input_gradient(params: ImplicitParams, points) -> Tuple[np.ndarray, np.ndarray]:
    """Confidence and the gradient of ``-log g(x)`` with respect to ``x``.

    Works on one point or a batch. The leaky-ReLU derivative at exactly zero
    is taken as 1.
    """
    x, single = _as_batch(points)
    slope = params.arch.leaky_slope
    pre = []
    h = x
    for layer in params.layers[:-1]:
        z = _affine(layer, h)
        pre.append(z)
        h = np.where(z >= 0, z, slope * z)
    z_out = _affine(params.layers[-1], h)[:, 0]
    conf = _clip_open(sigmoid(z_out))

    # d(-log sigmoid(z))/dz = sigmoid(z) - 1 = -sigmoid(-z), exact in the saturated tail
    g = (-sigmoid(-z_out))[:, None]
    last = params.layers[-1]
    g = np.einsum("no,oi->ni", g * last.scale, last.weight)
    for layer, z in zip(reversed(params.layers[:-1]), reversed(pre)):
        g = g * np.where(z >= 0, 1.0, slope)
        g = np.einsum("no,oi->ni", g * layer.scale, layer.weight)
    if single:
        return conf[0], g[0]
    return conf, g


def bce_to_one(params: ImplicitParams, points) -> np.ndarray:
    """``-log g(x)`` computed stably from the logit."""
    z = logits(params, points)
    return np.logaddexp(0.0, -z)


def dumps(params: ImplicitParams) -> bytes:
    """Binary record: magic, version, arch header, then float32 payload
    (layer-major; W row-major, then b, then s)."""
    dims = params.arch.layer_dims
    head = MAGIC + struct.pack("<HdI", FORMAT_VERSION, params.arch.leaky_slope, len(dims))
    head += struct.pack(f"<{len(dims)}I", *dims)
    return head + params.flatten().astype("<f4").tobytes()


def loads(data: bytes) -> ImplicitParams:
    if not data.startswith(MAGIC):
        raise FileError("not an implicit-function record")
    off = len(MAGIC)
    version, slope, ndims = struct.unpack_from("<HdI", data, off)
    if version != FORMAT_VERSION:
        raise FileError(f"unsupported record version {version}")
    off += struct.calcsize("<HdI")
    dims = struct.unpack_from(f"<{ndims}I", data, off)
    off += 4 * ndims
    arch = MlpArch(dims, slope)
    count = param_count(arch)
    if len(data) - off != 4 * count:
        raise FileError("payload size does not match the architecture header")
    flat = np.frombuffer(data, dtype="<f4", count=count, offset=off).astype(np.float64)
    return ImplicitParams.from_flat(flat, arch)
