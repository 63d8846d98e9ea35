"""3D sparse window partition: window serialization and equal-size grouping."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .voxel import SparseFeatureSet


@dataclass(frozen=True)
class WindowShape:
    sx: int
    sy: int
    sz: int

    def __post_init__(self):
        if min(self.sx, self.sy, self.sz) < 1:
            raise ValueError(f"window shape must be positive, got {(self.sx, self.sy, self.sz)}")

    @classmethod
    def of(cls, shape) -> "WindowShape":
        if isinstance(shape, WindowShape):
            return shape
        sx, sy, sz = (int(v) for v in shape)
        return cls(sx, sy, sz)

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.sx, self.sy, self.sz)


class AxisOrder(enum.Enum):
    XMajor = "x"
    YMajor = "y"


def sort_keys(coords: np.ndarray, ws: WindowShape, order: AxisOrder, extent) -> np.ndarray:
    """Integer serialization keys for (L, 4) ``[b, x, y, z]`` coordinates.

    Keys order voxels by batch, then window, then in-window offset.  Windows
    are linearized row-major with the major axis varying fastest; inside a
    window XMajor compares (x, y, z) offsets and YMajor (y, x, z).
    """
    ws = WindowShape.of(ws)
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 4)
    H, W, D = (int(e) for e in extent)
    sx, sy, sz = ws.as_tuple()
    nwx, nwy, nwz = -(-H // sx), -(-W // sy), -(-D // sz)
    b, x, y, z = coords[:, 0], coords[:, 1], coords[:, 2], coords[:, 3]
    wx, wy, wz = x // sx, y // sy, z // sz
    ox, oy, oz = x % sx, y % sy, z % sz
    if order is AxisOrder.XMajor:
        window = (wz * nwy + wy) * nwx + wx
        inner = (ox * sy + oy) * sz + oz
    elif order is AxisOrder.YMajor:
        window = (wz * nwx + wx) * nwy + wy
        inner = (oy * sx + ox) * sz + oz
    else:
        raise ValueError(f"unknown axis order {order!r}")
    n_windows = nwx * nwy * nwz
    return (b * n_windows + window) * (sx * sy * sz) + inner


def sort_key(coord, ws: WindowShape, order: AxisOrder, extent) -> int:
    """Key of a single ``(b, x, y, z)`` coordinate; see :func:`sort_keys`."""
    return int(sort_keys(np.asarray(coord).reshape(1, 4), ws, order, extent)[0])


@dataclass(frozen=True)
class GroupLayout:
    """Row permutation cut into consecutive groups of ``group_size``.

    The last group is padded with masked sentinel slots (index -1).
    """

    perm: np.ndarray
    group_size: int

    @property
    def length(self) -> int:
        return len(self.perm)

    @property
    def group_count(self) -> int:
        return -(-self.length // self.group_size)

    @property
    def pad_len(self) -> int:
        return self.group_count * self.group_size - self.length

    def padded_index(self) -> np.ndarray:
        """(group_count, group_size) row indices with -1 in padded slots."""
        flat = np.full(self.group_count * self.group_size, -1, dtype=np.int64)
        flat[: self.length] = self.perm
        return flat.reshape(self.group_count, self.group_size)

    def mask(self) -> np.ndarray:
        return self.padded_index() >= 0

    def slot_of_row(self) -> np.ndarray:
        """Flat padded slot holding each original row (inverse permutation)."""
        inv = np.empty(self.length, dtype=np.int64)
        inv[self.perm] = np.arange(self.length, dtype=np.int64)
        return inv

    def groups(self) -> list[np.ndarray]:
        G = self.group_size
        return [self.perm[i:i + G] for i in range(0, self.length, G)]


def partition(fs: SparseFeatureSet, ws, order: AxisOrder, group_size: int) -> GroupLayout:
    """Serialize ``fs`` along ``order`` windows and pack into groups of ``group_size``."""
    if group_size < 1:
        raise ValueError("group size must be >= 1")
    keys = sort_keys(fs.coords, WindowShape.of(ws), order, fs.grid.extent)
    perm = np.argsort(keys, kind="stable").astype(np.int64)
    return GroupLayout(perm, int(group_size))
