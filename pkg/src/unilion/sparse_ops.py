"""Pattern-preserving sparse operators and the voxel merge/expand pair."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Any

import numpy as np

from . import autodiff as ad
from .voxel import SparseFeatureSet, VoxelGrid

LN_EPS = 1e-5

# Offset k of the 3x3x3 stencil is (dx, dy, dz) = OFFSETS[k]; weights are
# indexed weights[dx + 1, dy + 1, dz + 1].
OFFSETS = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.int64)


@dataclass
class ConvKernel3:
    weights: Any  # (3, 3, 3, Cin, Cout)
    bias: Any  # (Cout,)

    def __post_init__(self):
        w = ad.value(self.weights)
        if w.ndim != 5 or w.shape[:3] != (3, 3, 3):
            raise ValueError(f"kernel weights must be 3x3x3xCinxCout, got {w.shape}")
        if ad.value(self.bias).shape != (w.shape[4],):
            raise ValueError("kernel bias must have Cout entries")

    @property
    def in_channels(self) -> int:
        return ad.value(self.weights).shape[3]

    @property
    def out_channels(self) -> int:
        return ad.value(self.weights).shape[4]

    @classmethod
    def random(cls, cin: int, cout: int, rng: np.random.Generator, dtype=np.float64) -> "ConvKernel3":
        scale = 1.0 / np.sqrt(27 * cin)
        return cls((rng.standard_normal((3, 3, 3, cin, cout)) * scale).astype(dtype),
                   (rng.standard_normal(cout) * 0.1).astype(dtype))

    @classmethod
    def identity(cls, channels: int, dtype=np.float64) -> "ConvKernel3":
        w = np.zeros((3, 3, 3, channels, channels), dtype)
        w[1, 1, 1] = np.eye(channels, dtype=dtype)
        return cls(w, np.zeros(channels, dtype))


def _linear_keys(coords: np.ndarray, dims: np.ndarray) -> np.ndarray:
    b, x, y, z = (coords[:, i] for i in range(4))
    return ((b * dims[0] + x) * dims[1] + y) * dims[2] + z


def neighbor_table(coords: np.ndarray) -> np.ndarray:
    """(L, 27) row index of each stencil neighbor, -1 where unoccupied."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 4)
    L = len(coords)
    if L == 0:
        return np.zeros((0, 27), dtype=np.int64)
    shifted = coords.copy()
    shifted[:, 1:] += 1  # keep every neighbor index non-negative
    dims = shifted[:, 1:].max(axis=0) + 2
    keys = _linear_keys(shifted, dims)
    # the padding above means a stencil shift never wraps, so it moves the
    # key by a constant
    delta = (OFFSETS[:, 0] * dims[1] + OFFSETS[:, 1]) * dims[2] + OFFSETS[:, 2]
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    probe = keys[:, None] + delta[None, :]
    pos = np.minimum(np.searchsorted(sorted_keys, probe), L - 1)
    return np.where(sorted_keys[pos] == probe, order[pos], -1)


def sparse_conv(x, weights, bias, table: np.ndarray):
    """Differentiable gather-and-matmul over a precomputed neighbor table."""
    vx, vw, vb = ad.value(x), ad.value(weights), ad.value(bias)
    L, cin = vx.shape
    w = vw.reshape(27, cin, -1)
    # (destination rows, source rows) per offset; at a fixed offset every
    # row appears at most once on each side, so plain fancy-index
    # accumulation is exact and no add.at is needed
    pairs = []
    for k in range(27):
        dst = np.flatnonzero(table[:, k] >= 0)
        pairs.append((dst, table[dst, k]))
    out = np.broadcast_to(vb, (L, w.shape[2])).copy()
    for k, (dst, src) in enumerate(pairs):
        if len(dst):
            out[dst] += vx[src] @ w[k]

    def bwd(g):
        gx = np.zeros_like(vx)
        gw = np.zeros_like(w)
        for k, (dst, src) in enumerate(pairs):
            if len(dst):
                gk = g[dst]
                gw[k] = vx[src].T @ gk
                gx[src] += gk @ w[k].T
        return gx, gw.reshape(vw.shape), g.sum(axis=0)

    return ad.record("sparse_conv", out, (x, weights, bias), bwd)


def submanifold_conv3(fs: SparseFeatureSet, k: ConvKernel3, table: np.ndarray | None = None) -> SparseFeatureSet:
    """3x3x3 convolution evaluated only at occupied sites, over occupied neighbors.

    ``table`` may pass a precomputed :func:`neighbor_table` of ``fs.coords``.
    """
    if fs.channels != k.in_channels:
        raise ValueError(f"kernel expects {k.in_channels} channels, set has {fs.channels}")
    if len(fs) == 0:
        return SparseFeatureSet.empty(fs.grid, k.out_channels, fs.values.dtype)
    out = sparse_conv(fs.features, k.weights, k.bias, neighbor_table(fs.coords) if table is None else table)
    return fs.with_features(out)


def layer_norm(fs: SparseFeatureSet, gamma, beta, eps: float = LN_EPS) -> SparseFeatureSet:
    if ad.value(gamma).shape != (fs.channels,):
        raise ValueError(f"gamma has {ad.value(gamma).shape} entries, set has {fs.channels} channels")
    return fs.with_features(ad.layer_norm(fs.features, gamma, beta, eps))


def gelu(fs: SparseFeatureSet) -> SparseFeatureSet:
    return fs.with_features(ad.gelu(fs.features))


@dataclass
class IndexMap:
    """Fine-to-coarse parent mapping produced by :func:`voxel_merge`."""

    parent_of: np.ndarray
    fine_coords: np.ndarray
    coarse_coords: np.ndarray
    fine_grid: VoxelGrid
    stride: tuple[int, int, int]

    @property
    def child_counts(self) -> np.ndarray:
        return np.bincount(self.parent_of, minlength=len(self.coarse_coords))

    def children_of(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.parent_of == j)

    def children(self) -> list[np.ndarray]:
        order = np.argsort(self.parent_of, kind="stable")
        bounds = np.cumsum(np.r_[0, self.child_counts])
        return [order[bounds[j]:bounds[j + 1]] for j in range(len(self.coarse_coords))]


def merge_coords(coords: np.ndarray, stride) -> tuple[np.ndarray, np.ndarray]:
    """Canonical unique coarse coords and the parent index of every fine row."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 4)
    coarse = coords.copy()
    coarse[:, 1:] //= np.asarray(stride, dtype=np.int64)
    if len(coarse) == 0:
        return coarse, np.zeros(0, dtype=np.int64)
    # np.unique(axis=0) sorts lexicographically by column: feed (b, z, y, x)
    bzyx = coarse[:, [0, 3, 2, 1]]
    uniq, parent = np.unique(bzyx, axis=0, return_inverse=True)
    return uniq[:, [0, 3, 2, 1]], parent.reshape(-1).astype(np.int64)


def voxel_merge(fs: SparseFeatureSet, stride) -> tuple[SparseFeatureSet, IndexMap]:
    """Down-sample by integer coordinate quotient, averaging the children."""
    stride = tuple(int(s) for s in stride)
    if len(stride) != 3 or min(stride) < 1:
        raise ValueError(f"stride must be three positive integers, got {stride}")
    coarse_coords, parent = merge_coords(fs.coords, stride)
    feats = ad.segment_mean(fs.features, parent, len(coarse_coords))
    mapping = IndexMap(parent, fs.coords, coarse_coords, fs.grid, stride)
    return SparseFeatureSet(coarse_coords, feats, fs.grid.coarsen(stride)), mapping


def voxel_expand(coarse: SparseFeatureSet, mapping: IndexMap) -> SparseFeatureSet:
    """Up-sample by copying each coarse row back to its children."""
    if len(coarse) != len(mapping.coarse_coords) or not np.array_equal(coarse.coords, mapping.coarse_coords):
        raise ValueError("coarse set does not match the index map it is expanded with")
    return SparseFeatureSet(mapping.fine_coords, ad.gather_rows(coarse.features, mapping.parent_of),
                            mapping.fine_grid)
