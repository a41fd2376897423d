"""Hypernetwork backbone mapping a partial cloud to occupancy-MLP weights.

Pipeline: FPS picks proxy centers, an EdgeConv layer pools each center's
neighborhood into a proxy embedding, transformer blocks (the first ones
with a geometric edge layer over nearby proxies) contextualize the
proxies, max-pooling gives a global embedding, and one linear head per
(layer, W/b/s) emits the MLP parameters.

Index selection (FPS, neighbor lists) is done in numpy; everything after
the gather is a torch graph so training gets exact gradients from
autograd.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import geometry
from .errors import BadArgument, FileError, ShapeMismatch
from .geometry import PointCloud
from .implicit_fn import ImplicitParams, Layer, MlpArch

CKPT_MAGIC = b"HSCKPT"
CKPT_VERSION = 1
KINDS = ("W", "b", "s")


@dataclass(frozen=True)
class EncoderArch:
    n_proxies: int = 16
    proxy_knn: int = 8
    embed_dim: int = 64
    n_heads: int = 2
    depth: int = 2
    geo_knn: int = 4
    geo_blocks: int = 1
    ffn_mult: int = 2
    target_arch: MlpArch = field(default_factory=MlpArch)

    def __post_init__(self):
        if isinstance(self.target_arch, dict):
            object.__setattr__(self, "target_arch", MlpArch(**self.target_arch))
        if self.n_proxies < 1 or self.proxy_knn < 1 or self.depth < 0:
            raise BadArgument("n_proxies, proxy_knn must be >= 1 and depth >= 0")
        if self.embed_dim % self.n_heads:
            raise BadArgument("embed_dim must be divisible by n_heads")
        if not 0 <= self.geo_blocks <= self.depth:
            raise BadArgument("geo_blocks must lie in [0, depth]")
        # the geometric layer needs geo_knn other proxies to look at
        if self.geo_blocks > 0 and not 1 <= self.geo_knn < self.n_proxies:
            raise BadArgument("geo_knn must satisfy 1 <= geo_knn < n_proxies")

    @classmethod
    def paper_scale(cls, **kw) -> "EncoderArch":
        return cls(embed_dim=384, n_heads=6, depth=4, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["target_arch"]["layer_dims"] = list(self.target_arch.layer_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderArch":
        d = dict(d)
        ta = d.pop("target_arch", None)
        if ta is not None:
            d["target_arch"] = MlpArch(tuple(ta["layer_dims"]), ta.get("leaky_slope", 0.2))
        return cls(**d)


@dataclass(frozen=True)
class ProxyIndex:
    """Neighbor structure of one input cloud, independent of the weights."""

    centers: np.ndarray      # (K, 3)
    edges: np.ndarray        # (K, k, 6): center xyz, neighbor - center
    geo_neighbors: np.ndarray  # (K, n) indices into centers, self excluded


@dataclass
class ProxySet:
    centers: torch.Tensor     # (K, 3)
    embeddings: torch.Tensor  # (K, d)


def fps_start(points: np.ndarray) -> int:
    """Lexicographically smallest point, so FPS does not depend on input order."""
    return int(np.lexsort((points[:, 2], points[:, 1], points[:, 0]))[0])


def build_index(cloud: PointCloud, arch: EncoderArch) -> ProxyIndex:
    pts = cloud.points
    need = max(arch.n_proxies, arch.proxy_knn)
    if len(pts) < need:
        raise BadArgument(f"cloud has {len(pts)} points, encoder needs at least {need}")
    centers_idx = geometry.farthest_point_sample(pts, arch.n_proxies, fps_start(pts))
    centers = pts[centers_idx]
    nbr = geometry.knn_batch(pts, centers, arch.proxy_knn)
    offsets = pts[nbr] - centers[:, None, :]
    edges = np.concatenate([np.broadcast_to(centers[:, None, :], offsets.shape), offsets], axis=-1)
    if arch.geo_blocks > 0:
        geo = geometry.knn_batch(centers, centers, arch.geo_knn, exclude_self=True)
    else:
        geo = np.zeros((arch.n_proxies, 0), dtype=np.int64)
    return ProxyIndex(centers, edges, geo)


class GeometricLayer(nn.Module):
    """Edge embeddings ReLU(theta (F_j - F_i) + phi F_i), max-pooled over the
    nearest proxies."""

    def __init__(self, d: int):
        super().__init__()
        self.geo_theta = nn.Linear(d, d)
        self.geo_phi = nn.Linear(d, d)

    def forward(self, feats: torch.Tensor, neighbors: torch.Tensor) -> torch.Tensor:
        # feats (B, K, d), neighbors (B, K, n)
        B, K, d = feats.shape
        n = neighbors.shape[-1]
        flat = neighbors.reshape(B, K * n, 1).expand(-1, -1, d)
        fj = torch.gather(feats, 1, flat).reshape(B, K, n, d)
        fi = feats.unsqueeze(2)
        edge = F.relu(self.geo_theta(fj - fi) + self.geo_phi(fi))
        return edge.max(dim=2).values


class Block(nn.Module):
    def __init__(self, arch: EncoderArch, geometric: bool):
        super().__init__()
        d = arch.embed_dim
        self.n_heads = arch.n_heads
        self.norm1 = nn.LayerNorm(d)
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.proj = nn.Linear(d, d)
        self.geo = GeometricLayer(d) if geometric else None
        self.reduce = nn.Linear(2 * d, d) if geometric else None
        self.norm2 = nn.LayerNorm(d)
        self.ffn1 = nn.Linear(d, arch.ffn_mult * d)
        self.ffn2 = nn.Linear(arch.ffn_mult * d, d)

    def attention(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Multi-head softmax(QK^T / sqrt(d_k)) V; returns (output, weights)."""
        B, K, d = x.shape
        h, dk = self.n_heads, d // self.n_heads
        q = self.q(x).reshape(B, K, h, dk).transpose(1, 2)
        k = self.k(x).reshape(B, K, h, dk).transpose(1, 2)
        v = self.v(x).reshape(B, K, h, dk).transpose(1, 2)
        w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dk), dim=-1)
        out = (w @ v).transpose(1, 2).reshape(B, K, d)
        return self.proj(out), w

    def forward(self, x: torch.Tensor, neighbors: torch.Tensor) -> torch.Tensor:
        y = self.norm1(x)
        attn, _ = self.attention(y)
        if self.geo is not None:
            attn = self.reduce(torch.cat([attn, self.geo(y, neighbors)], dim=-1))
        x = x + attn
        return x + self.ffn2(F.gelu(self.ffn1(self.norm2(x))))


class Backbone(nn.Module):
    """All trainable parameters of the encoder."""

    def __init__(self, arch: EncoderArch = EncoderArch(), seed: int = 0):
        super().__init__()
        self.arch = arch
        d = arch.embed_dim
        gen = torch.Generator().manual_seed(seed)
        self.edge1 = nn.Linear(6, d)
        self.edge2 = nn.Linear(d, d)
        self.pos = nn.Linear(3, d)
        self.blocks = nn.ModuleList([Block(arch, i < arch.geo_blocks) for i in range(arch.depth)])
        self.norm = nn.LayerNorm(d)
        self.heads = nn.ModuleDict()
        for l, (o, i) in enumerate(arch.target_arch.layer_shapes()):
            for kind, size in zip(KINDS, (o * i, o, o)):
                self.heads[f"{l}_{kind}"] = nn.Linear(d, size)
        self._init(gen)

    def _init(self, gen: torch.Generator) -> None:
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.startswith("heads."):
                    continue
                if p.ndim == 2:
                    bound = 1.0 / math.sqrt(p.shape[1])
                    p.uniform_(-bound, bound, generator=gen)
                elif "norm" in name and name.endswith("weight"):
                    p.fill_(1.0)
                else:
                    p.zero_()
            d = self.arch.embed_dim
            for l, (o, i) in enumerate(self.arch.target_arch.layer_shapes()):
                w_std = math.sqrt(2.0 / i) * (2.0 if l == 0 else 1.0)
                head_w, head_b, head_s = (self.heads[f"{l}_{k}"] for k in KINDS)
                head_w.bias.normal_(0.0, w_std, generator=gen)
                head_w.weight.normal_(0.0, 0.5 * w_std / math.sqrt(d), generator=gen)
                head_b.bias.uniform_(-0.1, 0.1, generator=gen)
                head_b.weight.normal_(0.0, 0.05 / math.sqrt(d), generator=gen)
                head_s.bias.fill_(1.0)
                head_s.weight.normal_(0.0, 0.1 / math.sqrt(d), generator=gen)

    # -- stages ---------------------------------------------------------

    def proxies(self, edges: torch.Tensor, centers: torch.Tensor) -> torch.Tensor:
        """EdgeConv over (center, offset) pairs, max-pooled over neighbors,
        plus a linear embedding of the center position. Shapes:
        edges (B, K, k, 6), centers (B, K, 3) -> (B, K, d)."""
        h = self.edge2(F.leaky_relu(self.edge1(edges), 0.2))
        return h.max(dim=2).values + self.pos(centers)

    def contextualize(self, x: torch.Tensor, neighbors: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            x = block(x, neighbors)
        return self.norm(x)

    def embed(self, edges, centers, neighbors) -> torch.Tensor:
        return self.contextualize(self.proxies(edges, centers), neighbors).max(dim=1).values

    def weights(self, e: torch.Tensor) -> List[Tuple[torch.Tensor, torch.Tensor, torch.Tensor]]:
        """Heads applied to global embeddings ``(B, d)``: per layer
        ``(W (B, o, i), b (B, o), s (B, o))``."""
        out = []
        for l, (o, i) in enumerate(self.arch.target_arch.layer_shapes()):
            w = self.heads[f"{l}_W"](e).reshape(-1, o, i)
            b = self.heads[f"{l}_b"](e)
            s = self.heads[f"{l}_s"](e)
            out.append((w, b, s))
        return out

    def forward(self, edges, centers, neighbors):
        return self.weights(self.embed(edges, centers, neighbors))


def implicit_logits(weights, x: torch.Tensor, slope: float = 0.2) -> torch.Tensor:
    """Batched torch counterpart of the numpy MLP: x (B, Q, 3) -> logits (B, Q)."""
    h = x
    for l, (w, b, s) in enumerate(weights):
        h = torch.bmm(h, w.transpose(1, 2)) * s.unsqueeze(1) + b.unsqueeze(1)
        if l < len(weights) - 1:
            h = F.leaky_relu(h, slope)
    return h.squeeze(-1)


def stack_indices(indices: Sequence[ProxyIndex], dtype=torch.float32):
    edges = torch.as_tensor(np.stack([ix.edges for ix in indices]), dtype=dtype)
    centers = torch.as_tensor(np.stack([ix.centers for ix in indices]), dtype=dtype)
    neighbors = torch.as_tensor(np.stack([ix.geo_neighbors for ix in indices]), dtype=torch.int64)
    return edges, centers, neighbors


def _dtype(model: Backbone) -> torch.dtype:
    return next(model.parameters()).dtype


# -- public operations ------------------------------------------------------

def extract_proxies(cloud: PointCloud, model: Backbone) -> ProxySet:
    ix = build_index(cloud, model.arch)
    edges, centers, _ = stack_indices([ix], _dtype(model))
    with torch.no_grad():
        emb = model.proxies(edges, centers)[0]
    return ProxySet(centers[0], emb)


def attention_block(embeddings: torch.Tensor, centers: torch.Tensor, model: Backbone, block_index: int,
                    return_attention: bool = False):
    """Run one transformer block on ``(K, d)`` proxy embeddings."""
    arch = model.arch
    if embeddings.ndim != 2 or embeddings.shape[1] != arch.embed_dim:
        raise ShapeMismatch(f"embeddings must be (K, {arch.embed_dim}), got {tuple(embeddings.shape)}")
    if centers.shape != (embeddings.shape[0], 3):
        raise ShapeMismatch("centers must be (K, 3) matching the embeddings")
    block = model.blocks[block_index]
    if block.geo is not None:
        nb = geometry.knn_batch(centers.detach().cpu().numpy(), centers.detach().cpu().numpy(),
                                arch.geo_knn, exclude_self=True)
    else:
        nb = np.zeros((embeddings.shape[0], 0), dtype=np.int64)
    x = embeddings.unsqueeze(0)
    with torch.no_grad():
        out = block(x, torch.as_tensor(nb).unsqueeze(0))[0]
        if return_attention:
            _, w = block.attention(block.norm1(x))
            return out, w[0]
    return out


def encode(cloud: PointCloud, model: Backbone) -> torch.Tensor:
    """Global embedding ``e`` of shape ``(d,)``."""
    edges, centers, nb = stack_indices([build_index(cloud, model.arch)], _dtype(model))
    with torch.no_grad():
        return model.embed(edges, centers, nb)[0]


def generate_weights(e, model: Backbone) -> ImplicitParams:
    e = torch.as_tensor(e, dtype=_dtype(model))
    if e.shape != (model.arch.embed_dim,):
        raise ShapeMismatch(f"embedding must have shape ({model.arch.embed_dim},), got {tuple(e.shape)}")
    with torch.no_grad():
        w = model.weights(e.unsqueeze(0))
    return to_implicit(w, model.arch.target_arch)[0]


def to_implicit(weights, arch: MlpArch) -> List[ImplicitParams]:
    """Split batched head outputs into one :class:`ImplicitParams` per sample."""
    B = weights[0][0].shape[0]
    res = []
    for bi in range(B):
        layers = tuple(
            Layer(w[bi].detach().double().numpy(), b[bi].detach().double().numpy(), s[bi].detach().double().numpy())
            for w, b, s in weights
        )
        res.append(ImplicitParams(layers, arch))
    return res


def predict(clouds: Sequence[PointCloud], model: Backbone) -> List[ImplicitParams]:
    edges, centers, nb = stack_indices([build_index(c, model.arch) for c in clouds], _dtype(model))
    with torch.no_grad():
        return to_implicit(model(edges, centers, nb), model.arch.target_arch)


def batch_loss(model: Backbone, edges, centers, neighbors, queries: torch.Tensor, labels: torch.Tensor):
    """Mean binary cross-entropy of the generated MLPs on labeled queries."""
    z = implicit_logits(model(edges, centers, neighbors), queries, model.arch.target_arch.leaky_slope)
    return F.binary_cross_entropy_with_logits(z, labels)


def backward(cloud: PointCloud, query_batch, model: Backbone) -> Tuple[float, Dict[str, np.ndarray]]:
    """Loss and exact gradients for one (cloud, query batch) pair.

    Gradients are returned as a name -> array mapping with the same names
    and shapes as ``model.named_parameters()``.
    """
    dtype = _dtype(model)
    edges, centers, nb = stack_indices([build_index(cloud, model.arch)], dtype)
    q = torch.as_tensor(query_batch.points, dtype=dtype).unsqueeze(0)
    y = torch.as_tensor(query_batch.labels, dtype=dtype).unsqueeze(0)
    model.zero_grad(set_to_none=True)
    loss = batch_loss(model, edges, centers, nb, q, y)
    loss.backward()
    grads = {name: (p.grad.detach().numpy().copy() if p.grad is not None else np.zeros(tuple(p.shape)))
             for name, p in model.named_parameters()}
    model.zero_grad(set_to_none=True)
    return float(loss.detach()), grads


def parameters(model: Backbone) -> Dict[str, np.ndarray]:
    return {name: p.detach().numpy().copy() for name, p in model.named_parameters()}


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path: Union[str, Path], model: Backbone, meta: Optional[dict] = None) -> None:
    """Header (magic, version, JSON length), JSON directory with the arch and
    each tensor's name/shape/offset, then little-endian float32 payload."""
    tensors, directory, offset = [], [], 0
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().numpy().astype("<f4")
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        tensors.append(arr.ravel())
    header = json.dumps({"arch": model.arch.to_dict(), "tensors": directory, "meta": meta or {}}).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<HI", CKPT_VERSION, len(header)))
        fh.write(header)
        fh.write(np.concatenate(tensors).tobytes() if tensors else b"")


def load_checkpoint(path: Union[str, Path], dtype=torch.float32) -> Tuple[Backbone, dict]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FileError(str(exc)) from exc
    if not data.startswith(CKPT_MAGIC):
        raise FileError(f"{path}: not a checkpoint")
    off = len(CKPT_MAGIC)
    version, hlen = struct.unpack_from("<HI", data, off)
    if version != CKPT_VERSION:
        raise FileError(f"{path}: unsupported checkpoint version {version}")
    off += struct.calcsize("<HI")
    header = json.loads(data[off:off + hlen])
    off += hlen
    payload = np.frombuffer(data, dtype="<f4", offset=off)
    model = Backbone(EncoderArch.from_dict(header["arch"]))
    state = model.state_dict()
    for entry in header["tensors"]:
        if entry["name"] not in state:
            raise FileError(f"{path}: unknown tensor {entry['name']}")
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = payload[entry["offset"]:entry["offset"] + size].reshape(entry["shape"])
        if tuple(state[entry["name"]].shape) != arr.shape:
            raise FileError(f"{path}: shape mismatch for {entry['name']}")
        state[entry["name"]] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    return model.to(dtype), header.get("meta", {})
