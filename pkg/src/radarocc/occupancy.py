"""Occupancy grids and ground-truth generation from labelled sweep sequences."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import GridSpec
from .scenes import LabeledSweepSequence, contains, invert_pose, transform

FREE, BACKGROUND, FOREGROUND = 0, 1, 2
CLASS_NAMES = ("free", "background", "foreground")


@dataclass
class OccupancyGrid:
    labels: np.ndarray   # (H, W, L) uint8
    grid: GridSpec

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.shape != self.grid.shape:
            raise ValueError(f"labels {self.labels.shape} do not match grid {self.grid.shape}")
        if self.labels.max(initial=0) > FOREGROUND:
            raise ValueError("labels must be in {0, 1, 2}")

    @classmethod
    def empty(cls, grid: GridSpec) -> "OccupancyGrid":
        return cls(np.zeros(grid.shape, dtype=np.uint8), grid)

    def flat(self) -> np.ndarray:
        return self.labels.reshape(-1)


def voxelize_votes(bg: np.ndarray, fg: np.ndarray, grid: GridSpec) -> OccupancyGrid:
    """Label voxels by majority vote of background vs foreground points; ties go to foreground."""
    n = grid.n_voxels
    H, W, L = grid.shape

    def counts(pts):
        ijk, inside = grid.voxel_index(pts)
        ijk = ijk[inside]
        flat = (ijk[:, 0] * W + ijk[:, 1]) * L + ijk[:, 2]
        return np.bincount(flat, minlength=n)

    nb, nf = counts(bg), counts(fg)
    labels = np.zeros(n, dtype=np.uint8)
    labels[nb > 0] = BACKGROUND
    labels[(nf > 0) & (nf >= nb)] = FOREGROUND
    return OccupancyGrid(labels.reshape(H, W, L), grid)


def build_gt(seq: LabeledSweepSequence, target_frame: int, grid: GridSpec) -> OccupancyGrid:
    """Aggregate a sweep sequence into an occupancy grid for ``target_frame``.

    Background points are accumulated through the world frame; foreground
    points are accumulated in their object's box frame and re-posed at the
    object's target-frame pose. Only the forward half (x > 0) of each sweep
    is used.
    """
    for f in seq.frames:
        if f.ego_pose is None:
            raise ValueError(f"frame {f.frame_id} has no ego pose")
    target = seq.frame(target_frame)
    to_target = invert_pose(target.ego_pose)
    target_boxes = {int(t): (P, S) for t, P, S in zip(target.track_ids, target.box_poses, target.box_sizes)}

    bg_parts = []
    fg_parts = []
    for f in seq.frames:
        pts = f.points[f.points[:, 0] > 0]
        is_fg = np.zeros(len(pts), dtype=bool)
        for tid, P, S in zip(f.track_ids, f.box_poses, f.box_sizes):
            inside = contains(P, S, pts) & ~is_fg
            is_fg |= inside
            if int(tid) in target_boxes and inside.any():
                local = transform(invert_pose(P), pts[inside])
                fg_parts.append(transform(target_boxes[int(tid)][0], local))
        bg = pts[~is_fg]
        bg_parts.append(transform(to_target @ f.ego_pose, bg))
    bg = np.concatenate(bg_parts) if bg_parts else np.zeros((0, 3))
    fg = np.concatenate(fg_parts) if fg_parts else np.zeros((0, 3))
    return voxelize_votes(bg, fg, grid)


@dataclass(frozen=True)
class ClassWeights:
    free: float
    background: float
    foreground: float

    def __post_init__(self):
        w = self.as_array()
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise ValueError(f"class weights must be finite and positive: {w}")

    def as_array(self) -> np.ndarray:
        return np.array([self.free, self.background, self.foreground])

    @classmethod
    def uniform(cls) -> "ClassWeights":
        return cls(1.0, 1.0, 1.0)

    @classmethod
    def from_frequencies(cls, freq) -> "ClassWeights":
        freq = np.asarray(freq, dtype=np.float64)
        if np.any(freq <= 0):
            raise ValueError(f"class frequency is zero for {[CLASS_NAMES[i] for i in np.flatnonzero(freq <= 0)]}")
        return cls(*(1.0 / freq))


def class_frequencies(grids) -> np.ndarray:
    counts = np.zeros(3)
    for g in grids:
        counts += np.bincount(g.flat(), minlength=3)[:3]
    if counts[1:].sum() == 0:
        raise ValueError("no occupied voxel in the provided grids")
    return counts / counts.sum()


def class_weights_from_frequency(grids) -> ClassWeights:
    return ClassWeights.from_frequencies(class_frequencies(grids))


# ---------------------------------------------------------------- file format

GRID_MAGIC = b"ROCCGRID"


def save_grid(path, g: OccupancyGrid) -> None:
    with open(path, "wb") as f:
        f.write(GRID_MAGIC)
        f.write(struct.pack("<3Q", *g.labels.shape))
        f.write(struct.pack("<7d", *g.grid.as_array()))
        f.write(np.ascontiguousarray(g.labels, dtype=np.uint8).tobytes())


def load_grid(path) -> OccupancyGrid:
    raw = Path(path).read_bytes()
    if raw[:8] != GRID_MAGIC:
        raise ValueError(f"{path}: not an occupancy grid file")
    shape = struct.unpack_from("<3Q", raw, 8)
    spec = GridSpec.from_array(struct.unpack_from("<7d", raw, 32))
    labels = np.frombuffer(raw, dtype=np.uint8, offset=88, count=int(np.prod(shape))).reshape(shape)
    return OccupancyGrid(labels.copy(), spec)
