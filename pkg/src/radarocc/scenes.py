"""Parametric desk scenes: moving boxes over a ground plane.

A scenario is described in world coordinates; each frame yields a radar
:class:`SceneSpec` (point scatterers in the sensor frame) and a simulated
LiDAR sweep with box annotations. Radar and LiDAR share the ego/sensor frame
(x forward, y left, z up).

Scene file schema (JSON)::

    {
      "dt": 0.1,                         # seconds between frames
      "ego_velocity": [vx, vy, vz],      # world frame, m/s
      "ground_z": -1.7,                  # ground height in the sensor frame, or null
      "objects": [{"track_id": 1, "center": [x, y, z], "size": [l, w, h],
                   "yaw": 0.0, "velocity": [vx, vy, vz], "amplitude": 1.0}],
      "scatterers": [{"position": [x, y, z], "amplitude": 1.0, "radial_velocity": 0.0}],
      "clutter_spacing": 2.0,            # ground clutter grid spacing (m)
      "clutter_amplitude": 0.1,
      "lidar_range": 20.0
    }

``objects`` centers are given for frame 0 in the world frame, which coincides
with the sensor frame at frame 0. ``scatterers`` are static world points.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import GridSpec
from .radar_signal import RadarConfig, SceneSpec
from .tensor_core import read_checkpoint, write_checkpoint


def pose_matrix(translation, yaw: float = 0.0) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    T = np.eye(4)
    T[:3, :3] = [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
    T[:3, 3] = translation
    return T


def transform(T: np.ndarray, pts: np.ndarray) -> np.ndarray:
    return pts @ T[:3, :3].T + T[:3, 3]


def invert_pose(T: np.ndarray) -> np.ndarray:
    Ti = np.eye(4)
    Ti[:3, :3] = T[:3, :3].T
    Ti[:3, 3] = -T[:3, :3].T @ T[:3, 3]
    return Ti


@dataclass
class Box:
    track_id: int
    center: np.ndarray
    size: np.ndarray
    yaw: float = 0.0
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    amplitude: float = 1.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.size = np.asarray(self.size, dtype=np.float64)
        self.velocity = np.asarray(self.velocity, dtype=np.float64)

    def pose(self) -> np.ndarray:
        return pose_matrix(self.center, self.yaw)

    def at(self, t: float) -> "Box":
        return Box(self.track_id, self.center + self.velocity * t, self.size, self.yaw,
                   self.velocity, self.amplitude)


def contains(box_pose: np.ndarray, size, pts: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    local = transform(invert_pose(box_pose), pts)
    return np.all(np.abs(local) <= np.asarray(size) / 2 + eps, axis=1)


def box_surface(size, spacing: float) -> np.ndarray:
    """Points on all six faces of an origin-centred box, in box coordinates.

    Samples sit at cell centers of a ``spacing`` lattice on each face so they
    never land on voxel boundaries of a grid aligned to the same spacing.
    """
    size = np.asarray(size, dtype=np.float64)
    faces = []
    for ax in range(3):
        u, v = [a for a in range(3) if a != ax]
        nu = max(1, int(round(size[u] / spacing)))
        nv = max(1, int(round(size[v] / spacing)))
        gu = (np.arange(nu) + 0.5) / nu * size[u] - size[u] / 2
        gv = (np.arange(nv) + 0.5) / nv * size[v] - size[v] / 2
        U, V = np.meshgrid(gu, gv, indexing="ij")
        for sign in (-1.0, 1.0):
            f = np.zeros((U.size, 3))
            f[:, u] = U.ravel()
            f[:, v] = V.ravel()
            f[:, ax] = sign * size[ax] / 2
            faces.append(f)
    return np.concatenate(faces, axis=0)


@dataclass
class SweepFrame:
    frame_id: int
    points: np.ndarray                 # (n, 3) sensor frame
    ego_pose: np.ndarray | None        # sensor -> world
    box_poses: np.ndarray              # (k, 4, 4) in the sensor frame
    box_sizes: np.ndarray              # (k, 3)
    track_ids: np.ndarray              # (k,)


@dataclass
class LabeledSweepSequence:
    frames: list[SweepFrame]

    def __len__(self) -> int:
        return len(self.frames)

    def frame(self, frame_id: int) -> SweepFrame:
        for f in self.frames:
            if f.frame_id == frame_id:
                return f
        raise KeyError(f"frame {frame_id} not in sequence")

    def save(self, path) -> None:
        arrays = {}
        for i, f in enumerate(self.frames):
            arrays[f"f{i}_id"] = np.array([f.frame_id])
            arrays[f"f{i}_points"] = f.points
            arrays[f"f{i}_pose"] = np.full((4, 4), np.nan) if f.ego_pose is None else f.ego_pose
            arrays[f"f{i}_box_poses"] = f.box_poses.reshape(-1, 4, 4)
            arrays[f"f{i}_box_sizes"] = f.box_sizes.reshape(-1, 3)
            arrays[f"f{i}_track_ids"] = f.track_ids
        write_checkpoint(path, arrays)

    @classmethod
    def load(cls, path) -> "LabeledSweepSequence":
        a = read_checkpoint(path)
        frames = []
        i = 0
        while f"f{i}_id" in a:
            pose = a[f"f{i}_pose"]
            frames.append(SweepFrame(int(a[f"f{i}_id"][0]), a[f"f{i}_points"],
                                     None if np.isnan(pose).any() else pose,
                                     a[f"f{i}_box_poses"], a[f"f{i}_box_sizes"],
                                     a[f"f{i}_track_ids"].astype(np.int64)))
            i += 1
        return cls(frames)


@dataclass
class Scenario:
    objects: list[Box] = field(default_factory=list)
    ground_z: float | None = -1.7
    ego_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    dt: float = 0.1
    scatterers: list[dict] = field(default_factory=list)
    clutter_spacing: float = 2.0
    clutter_amplitude: float = 0.1
    lidar_range: float = 20.0
    lidar_spacing: float = 0.1
    radar_spacing: float = 0.5

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        known = {"dt", "ego_velocity", "ground_z", "objects", "scatterers", "clutter_spacing",
                 "clutter_amplitude", "lidar_range", "lidar_spacing", "radar_spacing"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scene keys: {sorted(unknown)}")
        objs = []
        for o in d.get("objects", []):
            missing = {"track_id", "center", "size"} - set(o)
            if missing:
                raise ValueError(f"object is missing {sorted(missing)}")
            objs.append(Box(int(o["track_id"]), o["center"], o["size"], float(o.get("yaw", 0.0)),
                            o.get("velocity", [0.0, 0.0, 0.0]), float(o.get("amplitude", 1.0))))
        ids = [b.track_id for b in objs]
        if len(set(ids)) != len(ids):
            raise ValueError("track ids must be unique")
        kw = {k: d[k] for k in ("dt", "ground_z", "clutter_spacing", "clutter_amplitude",
                                "lidar_range", "lidar_spacing", "radar_spacing") if k in d}
        return cls(objects=objs, ego_velocity=np.asarray(d.get("ego_velocity", [0, 0, 0]), float),
                   scatterers=list(d.get("scatterers", [])), **kw)

    def to_dict(self) -> dict:
        return {
            "dt": self.dt, "ego_velocity": self.ego_velocity.tolist(), "ground_z": self.ground_z,
            "objects": [{"track_id": b.track_id, "center": b.center.tolist(), "size": b.size.tolist(),
                         "yaw": b.yaw, "velocity": b.velocity.tolist(), "amplitude": b.amplitude}
                        for b in self.objects],
            "scatterers": self.scatterers, "clutter_spacing": self.clutter_spacing,
            "clutter_amplitude": self.clutter_amplitude, "lidar_range": self.lidar_range,
            "lidar_spacing": self.lidar_spacing, "radar_spacing": self.radar_spacing,
        }

    @classmethod
    def load(cls, path) -> "Scenario":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    # -------------------------------------------------------------- per frame

    def ego_pose(self, k: int) -> np.ndarray:
        return pose_matrix(self.ego_velocity * k * self.dt)

    def boxes_sensor(self, k: int) -> list[tuple[Box, np.ndarray]]:
        """Boxes at frame ``k`` paired with their pose in that frame's sensor coordinates."""
        to_sensor = invert_pose(self.ego_pose(k))
        return [(b.at(k * self.dt), to_sensor @ b.at(k * self.dt).pose()) for b in self.objects]

    def _ground_points(self, k: int, spacing: float, extent: float) -> np.ndarray:
        g = np.arange(spacing / 2, extent, spacing)
        X, Y = np.meshgrid(g, np.concatenate([-g[::-1], g]), indexing="ij")
        pts = np.stack([X.ravel(), Y.ravel(), np.full(X.size, self.ground_z)], axis=1)
        keep = np.linalg.norm(pts, axis=1) <= extent
        pts = pts[keep]
        for box, pose in self.boxes_sensor(k):
            # nothing visible under a box
            b_local = transform(invert_pose(pose), pts)
            under = np.all(np.abs(b_local[:, :2]) <= box.size[:2] / 2, axis=1)
            pts = pts[~under]
        return pts

    def lidar_sweep(self, k: int) -> SweepFrame:
        parts = []
        if self.ground_z is not None:
            parts.append(self._ground_points(k, 2 * self.lidar_spacing, self.lidar_range))
        poses, sizes, ids = [], [], []
        for box, pose in self.boxes_sensor(k):
            parts.append(transform(pose, box_surface(box.size, self.lidar_spacing)))
            poses.append(pose)
            sizes.append(box.size)
            ids.append(box.track_id)
        pts = np.concatenate(parts) if parts else np.zeros((0, 3))
        pts = pts[np.linalg.norm(pts, axis=1) <= self.lidar_range]
        return SweepFrame(k, pts, self.ego_pose(k), np.array(poses).reshape(-1, 4, 4),
                          np.array(sizes).reshape(-1, 3), np.array(ids, dtype=np.int64))

    def radar_scene(self, k: int, cfg: RadarConfig) -> SceneSpec:
        """Point scatterers seen by the radar at frame ``k``."""
        pos, amp, vel = [], [], []
        ego_v = self.ego_velocity
        to_sensor = invert_pose(self.ego_pose(k))
        for box, pose in self.boxes_sensor(k):
            local = box_surface(box.size, self.radar_spacing)
            normals = np.sign(local) * (np.abs(local) >= box.size / 2 - 1e-9)
            p = transform(pose, local)
            n_world = normals @ pose[:3, :3].T
            facing = np.einsum("ij,ij->i", n_world, -p) > 0
            p = p[facing]
            rel_v = to_sensor[:3, :3] @ (box.velocity - ego_v)
            pos.append(p)
            amp.append(np.full(len(p), box.amplitude))
            vel.append(p @ rel_v / np.linalg.norm(p, axis=1))
        if self.ground_z is not None and self.clutter_spacing > 0:
            p = self._ground_points(k, self.clutter_spacing, cfg.max_range * 0.5)
            rel_v = to_sensor[:3, :3] @ (-ego_v)
            pos.append(p)
            amp.append(np.full(len(p), self.clutter_amplitude))
            vel.append(p @ rel_v / np.linalg.norm(p, axis=1))
        for s in self.scatterers:
            p = transform(to_sensor, np.asarray(s["position"], float)[None])
            pos.append(p)
            amp.append([float(s.get("amplitude", 1.0))])
            vel.append([float(s.get("radial_velocity", 0.0))])
        if not pos:
            return SceneSpec.empty(k)
        p = np.concatenate(pos)
        a = np.concatenate(amp)
        v = np.concatenate(vel)
        r = np.linalg.norm(p, axis=1)
        ok = (r > 0.5) & (r < cfg.max_range)
        return SceneSpec(p[ok], a[ok], v[ok], frame_id=k, ego_pose=self.ego_pose(k))

    def sequence(self, n_frames: int) -> LabeledSweepSequence:
        return LabeledSweepSequence([self.lidar_sweep(k) for k in range(n_frames)])


def random_scenario(rng: np.random.Generator, grid: GridSpec, ground_z: float = -1.7,
                    max_objects: int = 3, max_speed: float = 2.5) -> Scenario:
    """Random cars on the ground inside the RoI."""
    n = int(rng.integers(1, max_objects + 1))
    objs = []
    x0, x1 = grid.x_range
    y0, y1 = grid.y_range
    for i in range(n):
        size = np.array([rng.uniform(3.5, 4.5), rng.uniform(1.6, 2.0), rng.uniform(1.4, 1.8)])
        center = np.array([rng.uniform(x0 + 3.0, x1 - 1.5), rng.uniform(y0 + 1.5, y1 - 1.5),
                           ground_z + size[2] / 2])
        yaw = rng.uniform(-np.pi, np.pi)
        speed = rng.uniform(0, max_speed)
        vel = np.array([np.cos(yaw) * speed, np.sin(yaw) * speed, 0.0])
        objs.append(Box(i + 1, center, size, yaw, vel, 1.0))
    return Scenario(objects=objs, ground_z=ground_z)
