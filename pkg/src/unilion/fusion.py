"""Token-level fusion: camera lifting, modality merging, temporal alignment."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .sparse_ops import merge_coords
from .voxel import SparseFeatureSet, VoxelGrid

RIGID_TOL = 1e-9


class NonRigidPoseError(ValueError):
    pass


@dataclass
class CameraModel:
    intrinsics: np.ndarray  # 3x3 pinhole
    extrinsics: np.ndarray  # 4x4 camera-to-ego
    image_size: tuple[int, int]  # (h, w)

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        self.extrinsics = np.asarray(self.extrinsics, dtype=np.float64).reshape(4, 4)
        self.image_size = tuple(int(v) for v in self.image_size)
        check_rigid(self.extrinsics)

    def inverse_intrinsics(self) -> np.ndarray:
        if abs(np.linalg.det(self.intrinsics)) < 1e-12:
            raise np.linalg.LinAlgError("camera intrinsics are singular")
        return np.linalg.inv(self.intrinsics)

    def to_dict(self) -> dict:
        return {"intrinsics": self.intrinsics.tolist(), "extrinsics": self.extrinsics.tolist(),
                "image_size": list(self.image_size)}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(np.asarray(d["intrinsics"]), np.asarray(d["extrinsics"]), tuple(d["image_size"]))


@dataclass
class DepthCandidateRaster:
    """Per-pixel features (h, w, C) and depth-bin scores (h, w, B)."""

    features: np.ndarray
    scores: np.ndarray
    bin_edges: np.ndarray  # (B + 1,) metres

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.bin_edges = np.asarray(self.bin_edges, dtype=np.float64)
        if self.features.shape[:2] != self.scores.shape[:2]:
            raise ValueError("feature and score rasters differ in size")
        if len(self.bin_edges) != self.scores.shape[2] + 1:
            raise ValueError("need B + 1 bin edges for B depth bins")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("depth scores must be finite")

    @property
    def bins(self) -> int:
        return self.scores.shape[2]

    @property
    def bin_centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])

    def to_dict(self) -> dict:
        return {"features": self.features.tolist(), "scores": self.scores.tolist(),
                "bin_edges": self.bin_edges.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "DepthCandidateRaster":
        return cls(np.asarray(d["features"]), np.asarray(d["scores"]), np.asarray(d["bin_edges"]))


def uniform_bin_edges(near: float = 1.0, far: float = 60.0, bins: int = 48) -> np.ndarray:
    return np.linspace(near, far, bins + 1)


def check_rigid(T: np.ndarray) -> np.ndarray:
    T = np.asarray(T, dtype=np.float64)
    if T.shape != (4, 4):
        raise NonRigidPoseError(f"pose must be 4x4, got {T.shape}")
    R = T[:3, :3]
    if np.linalg.norm(R.T @ R - np.eye(3)) > RIGID_TOL or not np.allclose(T[3], [0, 0, 0, 1], atol=0):
        raise NonRigidPoseError("pose is not a rigid transform")
    return T


def rigid_inverse(T: np.ndarray) -> np.ndarray:
    R, t = T[:3, :3], T[:3, 3]
    out = np.eye(4)
    out[:3, :3] = R.T
    out[:3, 3] = -R.T @ t
    return out


# ------------------------------------------------------------- camera lift


def _lift_rows(raster: DepthCandidateRaster, cam: CameraModel, grid: VoxelGrid, K: int):
    if K > raster.bins:
        raise ValueError(f"K={K} exceeds the {raster.bins} depth bins")
    if K < 1:
        raise ValueError("K must be >= 1")
    kinv = cam.inverse_intrinsics()
    h, w = raster.scores.shape[:2]
    top = np.argsort(-raster.scores, axis=-1, kind="stable")[..., :K]  # (h, w, K)
    s = np.take_along_axis(raster.scores, top, axis=-1)
    conf = np.exp(s - s.max(axis=-1, keepdims=True))
    conf /= conf.sum(axis=-1, keepdims=True)
    depth = raster.bin_centers[top]

    v, u = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    pix = np.stack([u, v, np.ones_like(u)], axis=-1)  # (h, w, 3)
    rays = pix @ kinv.T
    pts_cam = rays[:, :, None, :] * depth[..., None]  # (h, w, K, 3)
    R, t = cam.extrinsics[:3, :3], cam.extrinsics[:3, 3]
    pts = pts_cam.reshape(-1, 3) @ R.T + t
    rows = raster.features[:, :, None, :] * conf[..., None]
    rows = rows.reshape(-1, raster.features.shape[-1])
    idx, inside = grid.index_of(pts)
    return idx[inside], rows[inside]


def _sum_into_voxels(idx: np.ndarray, rows: np.ndarray, grid: VoxelGrid, channels: int) -> SparseFeatureSet:
    if len(idx) == 0:
        return SparseFeatureSet.empty(grid, channels)
    coords = np.column_stack([np.zeros(len(idx), np.int64), idx])
    uniq, parent = merge_coords(coords, (1, 1, 1))
    return SparseFeatureSet(uniq, ad.segment_sum(rows, parent, len(uniq)), grid)


def lift_camera(raster: DepthCandidateRaster, cam: CameraModel, grid: VoxelGrid, K: int = 4) -> SparseFeatureSet:
    """Unproject each pixel at its top-K depth bins and voxelize.

    Each candidate carries the pixel feature scaled by its softmax-normalized
    score among the K kept bins.  Candidates landing in the same voxel are
    summed; out-of-grid candidates are dropped.
    """
    idx, rows = _lift_rows(raster, cam, grid, K)
    return _sum_into_voxels(idx, rows, grid, raster.features.shape[-1])


def lift_cameras(views, grid: VoxelGrid, K: int = 4) -> SparseFeatureSet:
    """Lift several (camera, raster) views; cross-view collisions are summed too."""
    views = list(views)
    if not views:
        raise ValueError("no camera views to lift")
    parts = [_lift_rows(raster, cam, grid, K) for cam, raster in views]
    idx = np.concatenate([p[0] for p in parts])
    rows = np.concatenate([p[1] for p in parts])
    return _sum_into_voxels(idx, rows, grid, views[0][1].features.shape[-1])


# ----------------------------------------------------------------- merging


def merge_overlaps(sets) -> SparseFeatureSet:
    """Union of sets on one grid; rows sharing a coordinate are averaged."""
    sets = list(sets)
    grid = sets[0].grid
    channels = sets[0].channels
    for s in sets[1:]:
        if s.grid != grid:
            raise ValueError("cannot merge sets on different grids")
        if s.channels != channels:
            raise ValueError(f"channel mismatch: {channels} vs {s.channels}")
    occupied = [s for s in sets if len(s)]
    if len(occupied) == 1 and occupied[0].is_canonical():
        # nothing to merge: hand the set back untouched so that dropping a
        # modality or the history is an exact identity
        return occupied[0]
    coords = np.concatenate([s.coords for s in sets])
    if len(coords) == 0:
        return SparseFeatureSet.empty(grid, channels, sets[0].values.dtype)
    uniq, parent = merge_coords(coords, (1, 1, 1))
    feats = ad.segment_mean(ad.concat_rows([s.features for s in sets]), parent, len(uniq))
    return SparseFeatureSet(uniq, feats, grid)


def concat_modalities(vl: SparseFeatureSet, vc: SparseFeatureSet) -> SparseFeatureSet:
    """Concatenate LiDAR and camera voxels, averaging co-located pairs."""
    return merge_overlaps([vl, vc])


def align_temporal(prev: SparseFeatureSet, pose_prev, pose_cur, grid: VoxelGrid | None = None) -> SparseFeatureSet:
    """Move a past frame's voxels into the current ego frame and re-voxelize."""
    pose_prev, pose_cur = check_rigid(pose_prev), check_rigid(pose_cur)
    grid = prev.grid if grid is None else grid
    if len(prev) == 0:
        return SparseFeatureSet.empty(grid, prev.channels, prev.values.dtype)
    if np.array_equal(pose_prev, pose_cur):
        rel = np.eye(4)
    else:
        rel = rigid_inverse(pose_cur) @ pose_prev
    centers = prev.grid.centers(prev.coords[:, 1:])
    moved = centers @ rel[:3, :3].T + rel[:3, 3]
    idx, inside = grid.index_of(moved)
    keep = np.flatnonzero(inside)
    if len(keep) == 0:
        return SparseFeatureSet.empty(grid, prev.channels, prev.values.dtype)
    coords = np.column_stack([prev.coords[keep, 0], idx[keep]])
    uniq, parent = merge_coords(coords, (1, 1, 1))
    feats = ad.segment_mean(ad.gather_rows(prev.features, keep), parent, len(uniq))
    return SparseFeatureSet(uniq, feats, grid)


class MemoryBank:
    """FIFO of past frames' token sets with their ego poses."""

    def __init__(self, capacity: int = 3):
        if capacity < 0:
            raise ValueError("capacity must be non-negative")
        self.capacity = capacity
        self.frames: deque = deque(maxlen=capacity) if capacity else deque(maxlen=0)

    def __len__(self):
        return len(self.frames)

    def push(self, fs: SparseFeatureSet, pose) -> None:
        # history is streamed: stored values never carry gradient
        frozen = SparseFeatureSet(fs.coords.copy(), np.array(fs.values, copy=True), fs.grid)
        self.frames.append((frozen, check_rigid(pose).copy()))

    def clear(self) -> None:
        self.frames.clear()


def fuse_frame(cur: SparseFeatureSet, bank: MemoryBank, pose_cur) -> SparseFeatureSet:
    """Merge aligned history with the current tokens, then push the current frame."""
    parts = [align_temporal(s, p, pose_cur, cur.grid) for s, p in bank.frames]
    fused = merge_overlaps(parts + [cur])
    bank.push(cur, pose_cur)
    return fused
