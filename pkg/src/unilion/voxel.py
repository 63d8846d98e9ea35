"""Sparse voxel tensors, dynamic voxelization and canonical ordering."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any

import numpy as np

from . import autodiff as ad


class DuplicateCoordinateError(ValueError):
    """Raised when a set that must have unique coordinates does not."""


@dataclass(frozen=True)
class VoxelGrid:
    origin: tuple[float, float, float]
    voxel_size: tuple[float, float, float]
    extent: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "voxel_size", tuple(float(v) for v in self.voxel_size))
        object.__setattr__(self, "extent", tuple(int(v) for v in self.extent))
        if len(self.origin) != 3 or len(self.voxel_size) != 3 or len(self.extent) != 3:
            raise ValueError("VoxelGrid fields must be 3-vectors")
        if min(self.voxel_size) <= 0:
            raise ValueError(f"voxel_size must be positive, got {self.voxel_size}")
        if min(self.extent) < 1:
            raise ValueError(f"extent must be >= 1 in every axis, got {self.extent}")

    def coarsen(self, stride) -> "VoxelGrid":
        """Grid whose cells are ``stride`` fine cells, sharing the origin."""
        stride = tuple(int(s) for s in stride)
        return VoxelGrid(self.origin,
                         tuple(v * s for v, s in zip(self.voxel_size, stride)),
                         tuple(-(-e // s) for e, s in zip(self.extent, stride)))

    def centers(self, xyz_index: np.ndarray) -> np.ndarray:
        """Metric centers of voxels given (N, 3) integer x, y, z indices."""
        return np.asarray(self.origin) + (np.asarray(xyz_index, dtype=np.float64) + 0.5) * np.asarray(self.voxel_size)

    def index_of(self, xyz: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Floor-index metric points; returns (indices, inside-extent mask)."""
        idx = np.floor((np.asarray(xyz, dtype=np.float64) - np.asarray(self.origin))
                       / np.asarray(self.voxel_size)).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < np.asarray(self.extent)), axis=1)
        return idx, inside

    def to_dict(self) -> dict:
        return {"origin": list(self.origin), "voxel_size": list(self.voxel_size), "extent": list(self.extent)}

    @classmethod
    def from_dict(cls, d: dict) -> "VoxelGrid":
        return cls(tuple(d["origin"]), tuple(d["voxel_size"]), tuple(d["extent"]))


def canonical_order(coords: np.ndarray) -> np.ndarray:
    """Stable permutation sorting (L, 4) [b, x, y, z] rows by (b, z, y, x)."""
    coords = np.asarray(coords)
    if len(coords) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.lexsort((coords[:, 1], coords[:, 2], coords[:, 3], coords[:, 0]))


def _has_adjacent_duplicates(sorted_coords: np.ndarray) -> bool:
    if len(sorted_coords) < 2:
        return False
    return bool(np.any(np.all(sorted_coords[1:] == sorted_coords[:-1], axis=1)))


@dataclass
class SparseFeatureSet:
    """Integer voxel coordinates ``[b, x, y, z]`` with one feature row each.

    ``features`` may be a numpy array or an autodiff Tensor.
    """

    coords: np.ndarray
    features: Any
    grid: VoxelGrid

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 4)
        if not isinstance(self.features, ad.Tensor):
            feats = np.asarray(self.features)
            if feats.dtype.kind != "f":
                feats = feats.astype(np.float64)
            self.features = feats
        if len(self.features) != len(self.coords):
            raise ValueError(f"{len(self.coords)} coords but {len(self.features)} feature rows")
        if ad.value(self.features).ndim != 2:
            raise ValueError("features must be an L x C matrix")

    def __len__(self):
        return len(self.coords)

    @property
    def channels(self) -> int:
        return ad.value(self.features).shape[1]

    @property
    def values(self) -> np.ndarray:
        return ad.value(self.features)

    def with_features(self, features) -> "SparseFeatureSet":
        return SparseFeatureSet(self.coords, features, self.grid)

    @classmethod
    def empty(cls, grid: VoxelGrid, channels: int, dtype=np.float64) -> "SparseFeatureSet":
        return cls(np.zeros((0, 4), dtype=np.int64), np.zeros((0, channels), dtype=dtype), grid)

    def is_canonical(self) -> bool:
        order = canonical_order(self.coords)
        if not np.array_equal(order, np.arange(len(self))):
            return False
        return not _has_adjacent_duplicates(self.coords)

    def in_extent(self) -> bool:
        c = self.coords
        return bool(np.all(c[:, 0] >= 0) and np.all(c[:, 1:] >= 0)
                    and np.all(c[:, 1:] < np.asarray(self.grid.extent)))

    def validate(self) -> None:
        if not self.in_extent():
            raise ValueError("coordinates fall outside the grid extent")
        if not self.is_canonical():
            raise ValueError("coordinates are not unique and canonically ordered")

    def to_dict(self) -> dict:
        return {"grid": self.grid.to_dict(),
                "coords": self.coords.tolist(),
                "features": ad.value(self.features).tolist(),
                "channels": self.channels}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "SparseFeatureSet":
        grid = VoxelGrid.from_dict(d["grid"])
        coords = np.asarray(d["coords"], dtype=np.int64).reshape(-1, 4)
        feats = np.asarray(d["features"], dtype=np.float64)
        if feats.ndim != 2:
            feats = feats.reshape(len(coords), int(d.get("channels", 0)))
        return cls(coords, feats, grid)

    @classmethod
    def from_json(cls, text: str) -> "SparseFeatureSet":
        return cls.from_dict(json.loads(text))


def canonicalize(fs: SparseFeatureSet) -> SparseFeatureSet:
    """Reorder rows into (batch, z, y, x) order; duplicates are an error."""
    order = canonical_order(fs.coords)
    coords = fs.coords[order]
    if _has_adjacent_duplicates(coords):
        raise DuplicateCoordinateError("duplicate voxel coordinate; merge before canonicalizing")
    if np.array_equal(order, np.arange(len(order))):
        return SparseFeatureSet(coords, fs.features, fs.grid)
    return SparseFeatureSet(coords, ad.gather_rows(fs.features, order), fs.grid)


def voxelize(points, grid: VoxelGrid, batch: int = 0) -> SparseFeatureSet:
    """Dynamic voxelization with mean pooling.

    ``points`` is (P, 3 + F): metric xyz then F raw attributes.  Each output
    row is the mean over the voxel's points of ``[attributes, xyz - center]``,
    so the channel count is F + 3.  Points outside the extent are dropped.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] < 3:
        raise ValueError("points must be a (P, 3 + F) matrix")
    n_attr = pts.shape[1] - 3
    idx, inside = grid.index_of(pts[:, :3])
    pts, idx = pts[inside], idx[inside]
    if len(pts) == 0:
        return SparseFeatureSet.empty(grid, n_attr + 3)

    # Sort by (voxel, then every point column) so the accumulation order is a
    # function of the point set alone, not of the input ordering.
    keys = [pts[:, j] for j in range(pts.shape[1] - 1, -1, -1)]
    keys += [idx[:, 0], idx[:, 1], idx[:, 2]]
    order = np.lexsort(keys)
    pts, idx = pts[order], idx[order]

    rows = np.concatenate([pts[:, 3:], pts[:, :3] - grid.centers(idx)], axis=1)
    starts = np.flatnonzero(np.r_[True, np.any(idx[1:] != idx[:-1], axis=1)])
    sums = np.add.reduceat(rows, starts, axis=0)
    counts = np.diff(np.r_[starts, len(rows)]).astype(np.float64)
    feats = sums / counts[:, None]

    vox = idx[starts]
    coords = np.column_stack([np.full(len(vox), batch, dtype=np.int64), vox])
    # the lexsort above already orders voxels by (z, y, x)
    return SparseFeatureSet(coords, feats, grid)
