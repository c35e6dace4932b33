"""Doppler bins descriptors and per-range (sidelobe-aware) sparsification."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .radar_signal import RadarTensor4D

# descriptor channel layout
TOP1, TOP2, TOP3, IDX1, IDX2, IDX3, MEAN, STD = range(8)
N_CHANNELS = 8


def doppler_descriptor(bins) -> np.ndarray:
    """8-channel summary of one Doppler vector.

    Top-3 ties resolve to the lower bin index; the standard deviation is the
    population one.
    """
    bins = np.asarray(bins, dtype=np.float64)
    if bins.ndim != 1 or bins.size < 3:
        raise ValueError(f"need a 1-D vector of at least 3 Doppler bins, got shape {bins.shape}")
    return encode_descriptors_array(bins[None, :])[0]


def encode_descriptors_array(power: np.ndarray) -> np.ndarray:
    """Descriptor over the last axis of any (..., D) array."""
    D = power.shape[-1]
    if D < 3:
        raise ValueError(f"need at least 3 Doppler bins, got {D}")
    # stable sort on the negated values keeps ascending index order among ties
    order = np.argsort(-power, axis=-1, kind="stable")[..., :3]
    top = np.take_along_axis(power, order, axis=-1)
    out = np.empty(power.shape[:-1] + (N_CHANNELS,))
    out[..., TOP1:TOP3 + 1] = top
    out[..., IDX1:IDX3 + 1] = order
    out[..., MEAN] = power.mean(axis=-1)
    out[..., STD] = power.std(axis=-1)
    return out


def encode_descriptors(rt: RadarTensor4D) -> np.ndarray:
    """(R, A, E, D) power → (R, A, E, 8) descriptor volume."""
    return encode_descriptors_array(rt.power)


def average_pool_descriptors(rt: RadarTensor4D) -> np.ndarray:
    """Baseline without descriptors: only the Doppler mean survives, other channels are zero."""
    out = np.zeros(rt.power.shape[:3] + (N_CHANNELS,))
    out[..., MEAN] = rt.power.mean(axis=-1)
    return out


@dataclass
class SparseRT:
    """Selected cells of a descriptor volume.

    ``coords`` holds (range, azimuth, elevation) indices; ``features`` the
    descriptors. Entries are grouped by range in ascending order and, within
    a range, sorted by descending mean power then (az, el).
    """

    coords: np.ndarray           # (N, 3) int64
    features: np.ndarray         # (N, 8)
    shape: tuple[int, int, int]  # (R, A, E) of the source volume
    n_r: int | None = None       # per-range budget when fixed

    def __len__(self) -> int:
        return len(self.coords)

    def per_range_counts(self) -> np.ndarray:
        return np.bincount(self.coords[:, 0], minlength=self.shape[0])

    def range_slice(self, r: int) -> tuple[np.ndarray, np.ndarray]:
        m = self.coords[:, 0] == r
        return self.coords[m], self.features[m]

    def as_records(self) -> np.ndarray:
        """Flat (N, 10) rows: 8 descriptor channels then azimuth and elevation index."""
        return np.concatenate([self.features, self.coords[:, 1:].astype(np.float64)], axis=1)


def _per_range_order(mean: np.ndarray) -> np.ndarray:
    """Flat cell order within each range: descending mean, ties by (az, el)."""
    R = mean.shape[0]
    flat = mean.reshape(R, -1)
    return np.argsort(-flat, axis=1, kind="stable")


def sidelobe_sparsify(vol: np.ndarray, n_r: int) -> SparseRT:
    """Keep the top ``n_r`` cells of every range by Doppler-mean power."""
    if n_r < 1:
        raise ValueError(f"n_r must be >= 1, got {n_r}")
    R, A, E, _ = vol.shape
    keep = min(n_r, A * E)
    order = _per_range_order(vol[..., MEAN])[:, :keep]
    r = np.repeat(np.arange(R), keep)
    a, e = np.unravel_index(order.ravel(), (A, E))
    coords = np.stack([r, a, e], axis=1).astype(np.int64)
    return SparseRT(coords, vol[r, a, e], (R, A, E), n_r)


def percentile_sparsify(vol: np.ndarray, keep_fraction: float) -> SparseRT:
    """Keep the globally strongest ``keep_fraction`` of cells by Doppler-mean power.

    The cut sits at the (1 - keep_fraction) quantile; cells tied at the cut are
    admitted in (range, az, el) order so exactly round(keep_fraction * N) survive.
    """
    if not 0 < keep_fraction <= 1:
        raise ValueError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    R, A, E, _ = vol.shape
    mean = vol[..., MEAN].ravel()
    k = max(1, int(round(keep_fraction * mean.size)))
    chosen = np.argsort(-mean, kind="stable")[:k]
    sel = np.zeros(mean.size, dtype=bool)
    sel[chosen] = True
    order = _per_range_order(vol[..., MEAN])
    ranked_sel = np.take_along_axis(sel.reshape(R, -1), order, axis=1)
    r, pos = np.nonzero(ranked_sel)
    a, e = np.unravel_index(order[r, pos], (A, E))
    coords = np.stack([r, a, e], axis=1).astype(np.int64)
    return SparseRT(coords, vol[r, a, e], (R, A, E), None)


def range_coverage(s: SparseRT) -> tuple[np.ndarray, float]:
    """Per-range retention histogram and its entropy normalised to [0, 1]."""
    counts = s.per_range_counts()
    total = counts.sum()
    if total == 0 or len(counts) < 2:
        return counts, 0.0
    p = counts[counts > 0] / total
    return counts, float(-(p * np.log(p)).sum() / np.log(len(counts)))


def reduce_tensor(rt: RadarTensor4D, mode: str = "sidelobe", n_r: int = 32,
                  keep_fraction: float | None = None, descriptor: bool = True) -> SparseRT:
    """4DRT → SparseRT. Percentile mode keeps, by default, the same total budget R·n_r."""
    vol = encode_descriptors(rt) if descriptor else average_pool_descriptors(rt)
    if mode == "sidelobe":
        return sidelobe_sparsify(vol, n_r)
    if mode == "percentile":
        if keep_fraction is None:
            R, A, E = rt.power.shape[:3]
            keep_fraction = min(1.0, n_r / (A * E))
        return percentile_sparsify(vol, keep_fraction)
    raise ValueError(f"unknown sparsify mode {mode!r}")


# ---------------------------------------------------------------- file format

SPRT_MAGIC = b"ROCCSPRT"
_REC = np.dtype([("az", "<u4"), ("el", "<u4"), ("feat", "<f4", (8,))])


def save_sparse_rt(path, s: SparseRT) -> None:
    """Fixed-budget layout: u64 R, u64 N_r, then R·N_r records of (u32 az, u32 el, 8 f32).

    Ranges holding fewer than N_r entries (percentile mode) are padded with
    records whose az/el are 0xFFFFFFFF.
    """
    R = s.shape[0]
    counts = s.per_range_counts()
    n_r = int(counts.max()) if s.n_r is None and len(s) else int(min(s.n_r or 0, s.shape[1] * s.shape[2]))
    recs = np.zeros((R, n_r), dtype=_REC)
    recs["az"] = recs["el"] = 0xFFFFFFFF
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    slot = np.arange(len(s)) - starts[s.coords[:, 0]]
    recs["az"][s.coords[:, 0], slot] = s.coords[:, 1]
    recs["el"][s.coords[:, 0], slot] = s.coords[:, 2]
    recs["feat"][s.coords[:, 0], slot] = s.features
    with open(path, "wb") as f:
        f.write(SPRT_MAGIC)
        f.write(struct.pack("<QQ", R, n_r))
        f.write(struct.pack("<QQ", s.shape[1], s.shape[2]))
        f.write(recs.tobytes())


def load_sparse_rt(path) -> SparseRT:
    raw = Path(path).read_bytes()
    if raw[:8] != SPRT_MAGIC:
        raise ValueError(f"{path}: not a sparse radar tensor file")
    R, n_r, A, E = struct.unpack_from("<4Q", raw, 8)
    recs = np.frombuffer(raw, dtype=_REC, offset=40, count=R * n_r).reshape(R, n_r)
    valid = recs["az"] != 0xFFFFFFFF
    r, slot = np.nonzero(valid)
    coords = np.stack([r, recs["az"][r, slot], recs["el"][r, slot]], axis=1).astype(np.int64)
    feats = recs["feat"][r, slot].astype(np.float64)
    fixed = bool(valid.all())
    return SparseRT(coords, feats, (int(R), int(A), int(E)), int(n_r) if fixed else None)
