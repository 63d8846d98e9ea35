"""Deterministic synthetic driving scenes: boxes, ground, ego motion, camera rasters."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .fusion import CameraModel, DepthCandidateRaster, check_rigid, rigid_inverse, uniform_bin_edges
from .losses import BEVTargets
from .voxel import VoxelGrid

BOX_FACES = 5  # no bottom face


def rot_z(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def make_pose(R: np.ndarray, t) -> np.ndarray:
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = t
    return T


@dataclass(frozen=True)
class SceneSpec:
    """Generator settings; together with a seed they fix every frame."""

    num_boxes: int = 6
    box_points: int = 150
    ground_points: int = 2000
    box_size: tuple[float, float, float] = (3.6, 1.6, 1.5)
    box_area: float = 10.0  # boxes start within +-box_area metres of the ego
    ground_z: float = -1.7
    ego_speed: float = 2.0  # m/s
    ego_yaw_rate: float = 0.05  # rad/s
    object_speed: float = 1.5  # m/s, upper bound
    dt: float = 0.5  # s between frames
    point_noise: float = 0.01  # m, per-frame jitter
    cameras: int = 1
    image_size: tuple[int, int] = (12, 16)
    feature_channels: int = 16
    depth_bins: int = 48
    depth_range: tuple[float, float] = (1.0, 60.0)

    def __post_init__(self):
        if self.num_boxes < 0 or self.box_points < 0 or self.ground_points < 0:
            raise ValueError("point and box counts must be non-negative")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.point_noise < 0:
            raise ValueError("point noise must be non-negative")
        if self.cameras < 0 or self.cameras > 4:
            raise ValueError("camera count must lie in 0..4")
        if min(self.image_size) < 1 or self.feature_channels < 1 or self.depth_bins < 1:
            raise ValueError("camera raster dimensions must be positive")
        if not 0 < self.depth_range[0] < self.depth_range[1]:
            raise ValueError("depth range must satisfy 0 < near < far")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scene spec keys {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)


@dataclass
class Box:
    """Box state in some frame: center, (length, width, height), yaw, velocity."""

    center: np.ndarray
    size: np.ndarray
    yaw: float
    velocity: np.ndarray

    def to_dict(self) -> dict:
        return {"center": np.asarray(self.center).tolist(), "size": np.asarray(self.size).tolist(),
                "yaw": float(self.yaw), "velocity": np.asarray(self.velocity).tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Box":
        return cls(np.asarray(d["center"], float), np.asarray(d["size"], float), float(d["yaw"]),
                   np.asarray(d["velocity"], float))


@dataclass
class SceneFrame:
    """One sweep: ego-frame points ``(P, 4)`` = xyz + intensity, rasters, pose."""

    points: np.ndarray
    cameras: list[tuple[CameraModel, DepthCandidateRaster]]
    pose: np.ndarray
    timestamp: float
    point_labels: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    boxes: list[Box] = field(default_factory=list)
    plan: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)
        self.pose = check_rigid(np.asarray(self.pose, dtype=np.float64))
        self.point_labels = np.asarray(self.point_labels, dtype=np.int64).reshape(-1)
        if len(self.point_labels) == 0 and len(self.points):
            self.point_labels = np.zeros(len(self.points), np.int64)
        self.plan = np.asarray(self.plan, dtype=np.float64).reshape(2)

    def to_dict(self) -> dict:
        return {"points": self.points.tolist(),
                "cameras": [{"model": c.to_dict(), "raster": r.to_dict()} for c, r in self.cameras],
                "pose": self.pose.tolist(),
                "timestamp": float(self.timestamp),
                "point_labels": self.point_labels.tolist(),
                "boxes": [b.to_dict() for b in self.boxes],
                "plan": self.plan.tolist()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "SceneFrame":
        cams = [(CameraModel.from_dict(c["model"]), DepthCandidateRaster.from_dict(c["raster"]))
                for c in d.get("cameras", [])]
        return cls(np.asarray(d["points"], dtype=np.float64).reshape(-1, 4), cams,
                   np.asarray(d["pose"]), float(d["timestamp"]),
                   np.asarray(d.get("point_labels", []), dtype=np.int64),
                   [Box.from_dict(b) for b in d.get("boxes", [])],
                   np.asarray(d.get("plan", [0.0, 0.0])))

    @classmethod
    def from_json(cls, text: str) -> "SceneFrame":
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------- world


def ego_pose(spec: SceneSpec, t: float) -> np.ndarray:
    """Constant speed and yaw rate from the origin; frame-to-world."""
    w, v = spec.ego_yaw_rate, spec.ego_speed
    yaw = w * t
    if abs(w) < 1e-12:
        pos = np.array([v * t, 0.0, 0.0])
    else:
        pos = np.array([v / w * np.sin(yaw), v / w * (1.0 - np.cos(yaw)), 0.0])
    return make_pose(rot_z(yaw), pos)


def _surface_samples(size: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform points on the top and four side faces of a box centred at 0."""
    l, w, h = size
    areas = np.array([l * w, l * h, l * h, w * h, w * h])
    face = rng.choice(BOX_FACES, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=(n, 3)) * size
    pts = u.copy()
    pts[face == 0, 2] = h / 2
    pts[face == 1, 1] = w / 2
    pts[face == 2, 1] = -w / 2
    pts[face == 3, 0] = l / 2
    pts[face == 4, 0] = -l / 2
    return pts


@dataclass
class _World:
    boxes: list[Box]  # at t = 0, world frame
    box_local: list[np.ndarray]
    box_intensity: list[np.ndarray]
    ground: np.ndarray  # world xyz
    ground_intensity: np.ndarray
    embeddings: np.ndarray  # (num_boxes + 2, C): ground, sky, boxes


def _build_world(spec: SceneSpec, seed: int) -> _World:
    rng = np.random.default_rng(seed)
    size = np.asarray(spec.box_size, dtype=np.float64)
    boxes, local, inten = [], [], []
    for _ in range(spec.num_boxes):
        while True:
            xy = rng.uniform(-spec.box_area, spec.box_area, size=2)
            if np.hypot(*xy) > 4.0:
                break
        yaw = rng.uniform(-np.pi, np.pi)
        speed = rng.uniform(0.0, spec.object_speed)
        vel = np.array([np.cos(yaw), np.sin(yaw), 0.0]) * speed
        center = np.array([xy[0], xy[1], spec.ground_z + size[2] / 2])
        boxes.append(Box(center, size.copy(), yaw, vel))
        local.append(_surface_samples(size, spec.box_points, rng))
        inten.append(rng.uniform(0.5, 1.0, size=spec.box_points))
    travel = spec.ego_speed * spec.dt * 8 + 2 * spec.box_area
    ground = np.column_stack([rng.uniform(-spec.box_area - 6, travel, spec.ground_points),
                              rng.uniform(-spec.box_area - 6, spec.box_area + 6, spec.ground_points),
                              np.full(spec.ground_points, spec.ground_z)])
    ground_int = rng.uniform(0.0, 0.3, spec.ground_points)
    emb = rng.standard_normal((spec.num_boxes + 2, spec.feature_channels))
    return _World(boxes, local, inten, ground, ground_int, emb)


def box_at(box: Box, t: float) -> Box:
    return Box(box.center + box.velocity * t, box.size, box.yaw, box.velocity)


def box_in_frame(box: Box, pose: np.ndarray) -> Box:
    """Express a world-frame box in the frame whose frame-to-world is ``pose``."""
    R, p = pose[:3, :3], pose[:3, 3]
    frame_yaw = np.arctan2(R[1, 0], R[0, 0])
    return Box(R.T @ (box.center - p), box.size, box.yaw - frame_yaw, R.T @ box.velocity)


def box_world_points(world: _World, i: int, t: float) -> np.ndarray:
    b = box_at(world.boxes[i], t)
    return world.box_local[i] @ rot_z(b.yaw).T + b.center


# --------------------------------------------------------------- cameras


def camera_rig(spec: SceneSpec) -> list[CameraModel]:
    h, w = spec.image_size
    f = w / 2.0  # 90 degree horizontal field of view
    K = np.array([[f, 0.0, w / 2.0], [0.0, f, h / 2.0], [0.0, 0.0, 1.0]])
    # optical axis along ego +x, image x to ego -y, image y to ego -z
    base = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
    return [CameraModel(K, make_pose(rot_z(k * np.pi / 2) @ base, np.zeros(3)), (h, w))
            for k in range(spec.cameras)]


def _ray_box_depth(o: np.ndarray, d: np.ndarray, box: Box) -> np.ndarray:
    """Ray parameter of first entry into ``box`` (inf on miss) for (N, 3) rays."""
    R = rot_z(box.yaw)
    lo = (o - box.center) @ R
    ld = d @ R
    half = box.size / 2
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - lo) / ld
        t2 = (half - lo) / ld
    tmin = np.nanmax(np.minimum(t1, t2), axis=1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=1)
    hit = (tmax >= tmin) & (tmax > 0)
    return np.where(hit, np.where(tmin > 0, tmin, 0.0), np.inf)


def render_raster(spec: SceneSpec, cam: CameraModel, boxes_ego: list[Box], embeddings: np.ndarray,
                  rng: np.random.Generator) -> DepthCandidateRaster:
    """Ray-cast ground and boxes; scores peak at the bin holding the true depth."""
    h, w = cam.image_size
    v, u = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    pix = np.stack([u, v, np.ones_like(u)], axis=-1).reshape(-1, 3)
    rays_cam = pix @ cam.inverse_intrinsics().T  # unit optical-axis component
    R, o = cam.extrinsics[:3, :3], cam.extrinsics[:3, 3]
    d = rays_cam @ R.T
    origin = np.broadcast_to(o, d.shape)

    near, far = spec.depth_range
    hit_id = np.full(len(d), 1)  # sky
    depth = np.full(len(d), far)
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = np.where(d[:, 2] < 0, (spec.ground_z - o[2]) / d[:, 2], np.inf)
    closer = tg < depth
    depth[closer], hit_id[closer] = tg[closer], 0
    for i, box in enumerate(boxes_ego):
        tb = _ray_box_depth(origin, d, box)
        closer = tb < depth
        depth[closer], hit_id[closer] = tb[closer], i + 2
    depth = np.clip(depth, near, far)

    edges = uniform_bin_edges(near, far, spec.depth_bins)
    centers = 0.5 * (edges[:-1] + edges[1:])
    width = edges[1] - edges[0]
    scores = -0.5 * ((centers[None, :] - depth[:, None]) / width) ** 2
    scores += 0.1 * rng.standard_normal(scores.shape)
    feats = embeddings[hit_id] + 0.05 * rng.standard_normal((len(d), embeddings.shape[1]))
    return DepthCandidateRaster(feats.reshape(h, w, -1), scores.reshape(h, w, -1), edges)


# ---------------------------------------------------------------- frames


def generate_scene(spec: SceneSpec, seed: int, frames: int) -> list[SceneFrame]:
    """``frames`` consecutive sweeps; identical (spec, seed) give identical frames."""
    if frames < 0:
        raise ValueError("frame count must be non-negative")
    world = _build_world(spec, seed)
    rig = camera_rig(spec)
    out = []
    for k in range(frames):
        t = k * spec.dt
        frng = np.random.default_rng([seed, k])
        pose = ego_pose(spec, t)
        inv = rigid_inverse(pose)

        parts, labels, inten = [], [], []
        for i in range(spec.num_boxes):
            parts.append(box_world_points(world, i, t))
            labels.append(np.full(spec.box_points, i + 1))
            inten.append(world.box_intensity[i])
        parts.append(world.ground)
        labels.append(np.zeros(spec.ground_points, np.int64))
        inten.append(world.ground_intensity)
        xyz_world = np.concatenate(parts) if parts else np.zeros((0, 3))
        xyz = xyz_world @ inv[:3, :3].T + inv[:3, 3]
        xyz = xyz + spec.point_noise * frng.standard_normal(xyz.shape)
        points = np.column_stack([xyz, np.concatenate(inten)])

        boxes = [box_in_frame(box_at(b, t), pose) for b in world.boxes]
        cams = [(cam, render_raster(spec, cam, boxes, world.embeddings, frng)) for cam in rig]
        nxt = ego_pose(spec, t + spec.dt)
        plan = (pose[:3, :3].T @ (nxt[:3, 3] - pose[:3, 3]))[:2]
        out.append(SceneFrame(points, cams, pose, t, np.concatenate(labels), boxes, plan))
    return out


def spec_dict(spec: SceneSpec) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(spec).items()}


# --------------------------------------------------------------- targets


def _inside_footprint(xy: np.ndarray, box: Box) -> np.ndarray:
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    rel = xy - box.center[:2]
    lx = rel[:, 0] * c + rel[:, 1] * s
    ly = -rel[:, 0] * s + rel[:, 1] * c
    return (np.abs(lx) <= box.size[0] / 2) & (np.abs(ly) <= box.size[1] / 2)


def toy_targets(frame: SceneFrame, grid: VoxelGrid, dt: float = 0.5, sigma: float = 1.0,
                road_half_width: float = 3.5, sidewalk: float = 1.5) -> BEVTargets:
    """BEV labels on the grid's (x, y) cells from the frame's boxes and ego plan."""
    H, W, _ = grid.extent
    ix, iy = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    cx = grid.origin[0] + (ix + 0.5) * grid.voxel_size[0]
    cy = grid.origin[1] + (iy + 0.5) * grid.voxel_size[1]
    xy = np.column_stack([cx.ravel(), cy.ravel()])

    heat = np.zeros((H, W))
    occ = np.zeros(H * W)
    cells, motion = [], []
    for box in frame.boxes:
        occ = np.maximum(occ, _inside_footprint(xy, box))
        bx = int(np.floor((box.center[0] - grid.origin[0]) / grid.voxel_size[0]))
        by = int(np.floor((box.center[1] - grid.origin[1]) / grid.voxel_size[1]))
        if 0 <= bx < H and 0 <= by < W:
            heat = np.maximum(heat, np.exp(-((ix - bx) ** 2 + (iy - by) ** 2) / (2 * sigma ** 2)))
            cells.append((bx, by))
            motion.append(box.velocity[:2] * dt)
    lateral = np.abs(cy)
    labels = np.where(lateral < road_half_width, 1, np.where(lateral < road_half_width + sidewalk, 2, 0))
    return BEVTargets(heat, occ.reshape(H, W), labels.astype(np.int64),
                      np.asarray(cells, dtype=np.int64).reshape(-1, 2),
                      np.asarray(motion, dtype=np.float64).reshape(-1, 2),
                      frame.plan.copy())
