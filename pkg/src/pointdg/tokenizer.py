"""Point cloud -> ordered token sequence: FPS centers, KNN patches, a shared
point MLP with max-pooling, and a space-filling serialization order."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, apply_primitive
from .nn import Linear, Module
from .rng import Rng

MORTON_BITS = 10


def farthest_point_sample(points: np.ndarray, L: int, start=0) -> np.ndarray:
    """Greedy max-min center selection.

    Accepts (N,3) with an int ``start`` or (B,N,3) with per-sample starts.
    Ties go to the lowest index.
    """
    single = points.ndim == 2
    pts = points[None] if single else points
    nb, n, _ = pts.shape
    if L > n:
        raise ValueError(f"cannot sample {L} centers from {n} points")
    starts = np.broadcast_to(np.asarray(start, dtype=np.int64), (nb,))
    if np.any(starts < 0) or np.any(starts >= n):
        raise ValueError(f"start index out of range [0, {n})")
    rows = np.arange(nb)
    out = np.empty((nb, L), dtype=np.int64)
    out[:, 0] = starts
    dist = ((pts - pts[rows, starts][:, None]) ** 2).sum(-1)
    for i in range(1, L):
        nxt = dist.argmax(axis=1)
        out[:, i] = nxt
        dist = np.minimum(dist, ((pts - pts[rows, nxt][:, None]) ** 2).sum(-1))
    return out[0] if single else out


def knn_group(points: np.ndarray, centers: np.ndarray, K: int) -> np.ndarray:
    """K nearest points of each center, relative to that center.

    (N,3) points with (L,) centers -> (L,K,3); batched inputs add a leading axis.
    """
    single = points.ndim == 2
    pts = points[None] if single else points
    ctr = centers[None] if single else centers
    n = pts.shape[1]
    if K > n:
        raise ValueError(f"cannot take {K} neighbours from {n} points")
    rows = np.arange(pts.shape[0])[:, None]
    cpts = pts[rows, ctr]  # (B,L,3)
    d = ((pts[:, None, :, :] - cpts[:, :, None, :]) ** 2).sum(-1)  # (B,L,N)
    if K < n:
        # partial selection, then a stable sort of the candidates for index tie-breaks
        cand = np.argpartition(d, K, axis=-1)[..., : K + 1]
        cand.sort(axis=-1)
        cd = np.take_along_axis(d, cand, -1)
        nn = np.take_along_axis(cand, np.argsort(cd, axis=-1, kind="stable")[..., :K], -1)
        # guard against ties straddling the partition boundary
        kth = np.take_along_axis(d, nn[..., -1:], -1)
        if np.any((d <= kth).sum(-1) > K):
            nn = np.argsort(d, axis=-1, kind="stable")[..., :K]
    else:
        nn = np.argsort(d, axis=-1, kind="stable")
    b = np.arange(pts.shape[0])[:, None, None]
    patches = pts[b, nn] - cpts[:, :, None, :]
    return patches[0] if single else patches


def morton_codes(centers: np.ndarray, bits: int = MORTON_BITS) -> np.ndarray:
    """Interleaved 3-axis Morton code of points in [-1,1]^3 (x in the lowest bit)."""
    scale = (1 << bits) - 1
    q = np.clip(np.floor((centers + 1.0) * 0.5 * (1 << bits)), 0, scale).astype(np.uint64)
    code = np.zeros(q.shape[:-1], dtype=np.uint64)
    for b in range(bits):
        for axis in range(3):
            bit = (q[..., axis] >> np.uint64(b)) & np.uint64(1)
            code |= bit << np.uint64(3 * b + axis)
    return code


def serialize_order(centers: np.ndarray, strategy: str = "zorder") -> np.ndarray:
    """Permutation of the L centers; stable, ties by original index."""
    if strategy == "axis-lex":
        return np.lexsort((centers[..., 2], centers[..., 1], centers[..., 0]))
    if strategy == "zorder":
        return np.argsort(morton_codes(centers), kind="stable")
    raise ValueError(f"unknown serialization strategy {strategy!r}")


@dataclass
class TokenSequence:
    """Batched tokens in canonical order; ``centers`` records each token's group center."""

    features: Tensor  # (B, L, D)
    centers: np.ndarray  # (B, L, 3)

    @property
    def order(self) -> np.ndarray:
        return np.arange(self.features.shape[1])


class GroupEmbedding(Module):
    """Shared point MLP (3 -> D/2 -> D) followed by max-pooling over each patch."""

    def __init__(self, width: int, rng: Rng):
        self.fc1 = Linear(3, width // 2, rng)
        self.fc2 = Linear(width // 2, width, rng)

    def __call__(self, patches) -> Tensor:
        h = apply_primitive("relu", self.fc1(patches))
        return apply_primitive("max", self.fc2(h), axis=-2)


def embed_groups(embedding: GroupEmbedding, patches) -> Tensor:
    return embedding(patches)


class Tokenizer(Module):
    def __init__(self, groups: int, neighbors: int, width: int, rng: Rng, strategy: str = "zorder"):
        self.groups = groups
        self.neighbors = neighbors
        self.strategy = strategy
        self.embed = GroupEmbedding(width, rng)
        # center coordinates -> width; lets the sequence carry global layout
        self.pos = Linear(3, width, rng)

    def __call__(self, points: np.ndarray, starts=0) -> TokenSequence:
        centers_idx = farthest_point_sample(points, self.groups, starts)
        rows = np.arange(points.shape[0])[:, None]
        centers = points[rows, centers_idx]
        order = np.stack([serialize_order(c, self.strategy) for c in centers])
        centers_idx = np.take_along_axis(centers_idx, order, axis=1)
        centers = points[rows, centers_idx]
        patches = knn_group(points, centers_idx, self.neighbors)
        feats = self.embed(Tensor(patches)) + self.pos(Tensor(centers))
        return TokenSequence(feats, centers)
