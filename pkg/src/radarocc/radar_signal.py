"""FMCW simulation, FFT chain to 4D radar tensors, and CA-CFAR point clouds."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import SphericalSpec, cart_to_sph, sph_to_cart


@dataclass(frozen=True)
class RadarConfig:
    n_fast: int = 64          # samples per chirp == range bins
    n_chirps: int = 16        # chirps per frame == Doppler bins
    n_az_ant: int = 16
    n_el_ant: int = 8
    n_az_bins: int = 32
    n_el_bins: int = 16
    az_span_deg: float = 120.0
    el_span_deg: float = 40.0
    range_res: float = 0.8
    doppler_res: float = 0.5
    wavelength: float = 3.9e-3
    noise_power: float = 1e-2
    window: str = "hann"

    def __post_init__(self):
        for name in ("n_fast", "n_chirps", "n_az_ant", "n_el_ant", "n_az_bins", "n_el_bins"):
            if getattr(self, name) < 2:
                raise ValueError(f"{name} must be >= 2")
        if self.range_res <= 0 or self.doppler_res <= 0 or self.wavelength <= 0:
            raise ValueError("resolutions and wavelength must be positive")
        if self.noise_power < 0:
            raise ValueError("noise_power must be >= 0")
        if self.window not in ("none", "hann"):
            raise ValueError(f"unknown window {self.window!r}")

    @classmethod
    def desk(cls, **kw) -> "RadarConfig":
        return cls(**kw)

    @classmethod
    def paper(cls, **kw) -> "RadarConfig":
        base = dict(n_fast=256, n_chirps=64, n_az_ant=12, n_el_ant=4, n_az_bins=107, n_el_bins=37,
                    az_span_deg=107.0, el_span_deg=37.0, range_res=0.46)
        base.update(kw)
        return cls(**base)

    @property
    def tensor_shape(self) -> tuple[int, int, int, int]:
        return (self.n_fast, self.n_az_bins, self.n_el_bins, self.n_chirps)

    @property
    def max_range(self) -> float:
        return self.n_fast * self.range_res

    @property
    def max_speed(self) -> float:
        return self.n_chirps / 2 * self.doppler_res

    def spherical_spec(self) -> SphericalSpec:
        return SphericalSpec.for_radar(self.n_fast, self.n_az_bins, self.n_el_bins, self.range_res,
                                       np.deg2rad(self.az_span_deg), np.deg2rad(self.el_span_deg))

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class SceneSpec:
    positions: np.ndarray                  # (n, 3) meters, sensor frame
    amplitudes: np.ndarray                 # (n,)
    radial_velocities: np.ndarray          # (n,) m/s, positive = receding
    frame_id: int = 0
    ego_pose: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.amplitudes = np.asarray(self.amplitudes, dtype=np.float64).reshape(-1)
        self.radial_velocities = np.asarray(self.radial_velocities, dtype=np.float64).reshape(-1)
        n = len(self.positions)
        if len(self.amplitudes) != n or len(self.radial_velocities) != n:
            raise ValueError("scatterer arrays have inconsistent lengths")
        if np.any(self.amplitudes < 0):
            raise ValueError("scatterer amplitudes must be non-negative")

    @classmethod
    def empty(cls, frame_id: int = 0) -> "SceneSpec":
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros(0), frame_id)

    def __len__(self) -> int:
        return len(self.positions)


@dataclass
class RadarTensor4D:
    """Power over (range, azimuth, elevation, Doppler) bins."""

    power: np.ndarray
    range_spacing: float
    range_origin: float
    az_spacing: float
    el_spacing: float
    doppler_spacing: float
    doppler_origin: float

    @property
    def shape(self) -> tuple:
        return self.power.shape

    @property
    def az_origin(self) -> float:
        return -(self.power.shape[1] - 1) * self.az_spacing / 2

    @property
    def el_origin(self) -> float:
        return -(self.power.shape[2] - 1) * self.el_spacing / 2

    def spherical_spec(self) -> SphericalSpec:
        R, A, E, _ = self.power.shape
        return SphericalSpec((R, A, E), (self.range_spacing, self.az_spacing, self.el_spacing),
                             (self.range_origin, self.az_origin, self.el_origin))

    def metadata(self) -> tuple[float, ...]:
        return (self.range_spacing, self.range_origin, self.az_spacing, self.el_spacing,
                self.doppler_spacing, self.doppler_origin)

    @classmethod
    def zeros(cls, cfg: RadarConfig) -> "RadarTensor4D":
        return _empty_tensor(np.zeros(cfg.tensor_shape), cfg)


@dataclass
class RadarPointCloud:
    xyz: np.ndarray        # (n, 3)
    doppler: np.ndarray    # (n,)
    power: np.ndarray      # (n,)
    cells: np.ndarray      # (n, 4) source tensor cell (r, a, e, d)

    def __len__(self) -> int:
        return len(self.xyz)


def _empty_tensor(power: np.ndarray, cfg: RadarConfig) -> RadarTensor4D:
    return RadarTensor4D(power, cfg.range_res, 0.0, np.deg2rad(cfg.az_span_deg) / cfg.n_az_bins,
                         np.deg2rad(cfg.el_span_deg) / cfg.n_el_bins, cfg.doppler_res,
                         -cfg.n_chirps / 2 * cfg.doppler_res)


# ---------------------------------------------------------------- synthesis

def synth_adc(scene: SceneSpec, cfg: RadarConfig, seed: int = 0) -> np.ndarray:
    """Complex ADC cube indexed (fast time, slow time, az channel, el channel)."""
    shape = (cfg.n_fast, cfg.n_chirps, cfg.n_az_ant, cfg.n_el_ant)
    cube = np.zeros(shape, dtype=np.complex128)
    if len(scene):
        sph = cart_to_sph(scene.positions)
        for i, (r, v) in enumerate(zip(sph[:, 0], scene.radial_velocities)):
            if r >= cfg.max_range:
                raise ValueError(f"scatterer {i} at {r:.2f} m is beyond the {cfg.max_range:.2f} m range")
            if abs(v) >= cfg.max_speed:
                raise ValueError(f"scatterer {i} at {v:.2f} m/s exceeds the +-{cfg.max_speed:.2f} m/s Doppler span")
        n = np.arange(cfg.n_fast)
        c = np.arange(cfg.n_chirps)
        ia = np.arange(cfg.n_az_ant)
        ie = np.arange(cfg.n_el_ant)
        for (r, az, el), a, v in zip(sph, scene.amplitudes, scene.radial_velocities):
            carrier = np.exp(1j * 4 * np.pi * r / cfg.wavelength)
            fast = np.exp(2j * np.pi * (r / cfg.range_res) * n / cfg.n_fast)
            slow = np.exp(2j * np.pi * (v / cfg.doppler_res) * c / cfg.n_chirps)
            arr_a = np.exp(1j * np.pi * ia * np.sin(az) * np.cos(el))
            arr_e = np.exp(1j * np.pi * ie * np.sin(el))
            cube += (a * carrier) * np.einsum("n,c,i,j->ncij", fast, slow, arr_a, arr_e)
    if cfg.noise_power > 0:
        rng = np.random.default_rng(seed)
        sigma = np.sqrt(cfg.noise_power / 2)
        cube += sigma * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
    return cube


# ---------------------------------------------------------------- FFT chain

def _window(n: int, kind: str) -> np.ndarray:
    return np.hanning(n) if kind == "hann" else np.ones(n)


def windowed_fast_time(adc: np.ndarray, cfg: RadarConfig) -> np.ndarray:
    return adc * _window(adc.shape[0], cfg.window)[:, None, None, None]


def range_fft(adc: np.ndarray, cfg: RadarConfig) -> np.ndarray:
    """Unitary FFT over fast time (axis 0)."""
    return np.fft.fft(windowed_fast_time(adc, cfg), axis=0, norm="ortho")


def doppler_fft(x: np.ndarray, cfg: RadarConfig) -> np.ndarray:
    """Unitary FFT over slow time (axis 1), zero velocity moved to bin D/2."""
    x = x * _window(x.shape[1], cfg.window)[None, :, None, None]
    return np.fft.fftshift(np.fft.fft(x, axis=1, norm="ortho"), axes=1)


def steering_matrix(cfg: RadarConfig) -> np.ndarray:
    """(A·E, n_az·n_el) array responses evaluated at the azimuth/elevation bin centers."""
    spec = cfg.spherical_spec()
    az = spec.origin[1] + np.arange(cfg.n_az_bins) * spec.spacing[1]
    el = spec.origin[2] + np.arange(cfg.n_el_bins) * spec.spacing[2]
    ia = np.arange(cfg.n_az_ant)
    ie = np.arange(cfg.n_el_ant)
    ph_a = np.sin(az)[:, None, None, None] * np.cos(el)[None, :, None, None] * ia[None, None, :, None]
    ph_e = np.sin(el)[None, :, None, None] * ie[None, None, None, :]
    s = np.exp(1j * np.pi * (ph_a + ph_e))
    return s.reshape(cfg.n_az_bins * cfg.n_el_bins, cfg.n_az_ant * cfg.n_el_ant)


def angle_transform(x: np.ndarray, cfg: RadarConfig) -> np.ndarray:
    """Array DFT evaluated on the uniform angle grid (R, D, n_az, n_el) → (R, D, A, E).

    Equivalent to sampling a zero-padded 2-D angle FFT at the bin angles.
    """
    taper = np.outer(_window(cfg.n_az_ant, cfg.window), _window(cfg.n_el_ant, cfg.window)).ravel()
    R, D = x.shape[:2]
    flat = x.reshape(R * D, -1) * taper
    s = steering_matrix(cfg)
    y = flat @ s.conj().T / np.sqrt(s.shape[1])
    return y.reshape(R, D, cfg.n_az_bins, cfg.n_el_bins)


def build_4drt(adc: np.ndarray, cfg: RadarConfig) -> RadarTensor4D:
    expected = (cfg.n_fast, cfg.n_chirps, cfg.n_az_ant, cfg.n_el_ant)
    if adc.shape != expected:
        raise ValueError(f"ADC cube shape {adc.shape} does not match config {expected}")
    x = doppler_fft(range_fft(adc, cfg), cfg)
    y = angle_transform(x, cfg)
    power = np.abs(y) ** 2
    return _empty_tensor(np.ascontiguousarray(power.transpose(0, 2, 3, 1)), cfg)


# ---------------------------------------------------------------- CFAR

def _pair(v) -> tuple[int, int]:
    return (int(v), int(v)) if np.isscalar(v) else (int(v[0]), int(v[1]))


def cfar_alpha(n_train: int, pfa: float) -> float:
    return n_train * (pfa ** (-1.0 / n_train) - 1.0)


def ca_cfar(map2d, guard=1, train=4, pfa: float = 1e-3) -> np.ndarray:
    """Cell-averaging CFAR on a 2-D power map.

    ``guard`` and ``train`` are half-widths (scalar or per-axis). The training
    band is the rectangle ring between the guard box and the outer box. Cells
    whose outer box leaves the map are never detections.
    """
    if not 0 < pfa < 1:
        raise ValueError(f"pfa must be in (0, 1), got {pfa}")
    m = np.asarray(map2d, dtype=np.float64)
    g0, g1 = _pair(guard)
    t0, t1 = _pair(train)
    o0, o1 = g0 + t0, g1 + t1
    n_train = (2 * o0 + 1) * (2 * o1 + 1) - (2 * g0 + 1) * (2 * g1 + 1)
    if n_train <= 0:
        raise ValueError("CFAR window has no training cells")
    H, W = m.shape
    det = np.zeros((H, W), dtype=bool)
    if H < 2 * o0 + 1 or W < 2 * o1 + 1:
        return det
    sat = np.zeros((H + 1, W + 1))
    sat[1:, 1:] = m.cumsum(0).cumsum(1)

    def box(h, w):
        # sums over (2h+1)x(2w+1) boxes centered on every interior cell
        i = np.arange(o0, H - o0)[:, None]
        j = np.arange(o1, W - o1)[None, :]
        return sat[i + h + 1, j + w + 1] - sat[i - h, j + w + 1] - sat[i + h + 1, j - w] + sat[i - h, j - w]

    noise = (box(o0, o1) - box(g0, g1)) / n_train
    alpha = cfar_alpha(n_train, pfa)
    det[o0:H - o0, o1:W - o1] = m[o0:H - o0, o1:W - o1] > alpha * noise
    return det


@dataclass(frozen=True)
class CfarParams:
    guard: tuple[int, int] = (2, 1)
    train: tuple[int, int] = (4, 2)
    pfa: float = 1e-3
    peak_grouping: bool = True


def extract_point_cloud(rt: RadarTensor4D, params: CfarParams = CfarParams()) -> RadarPointCloud:
    rd = rt.power.sum(axis=(1, 2))
    det = ca_cfar(rd, params.guard, params.train, params.pfa)
    if params.peak_grouping and det.any():
        pad = np.pad(rd, 1, constant_values=-np.inf)
        H, W = rd.shape
        neigh = np.max([pad[1 + di:1 + di + H, 1 + dj:1 + dj + W]
                        for di in (-1, 0, 1) for dj in (-1, 0, 1) if (di, dj) != (0, 0)], axis=0)
        det &= rd > neigh
    rs, ds = np.nonzero(det)
    if len(rs) == 0:
        z = np.zeros((0, 3))
        return RadarPointCloud(z, np.zeros(0), np.zeros(0), np.zeros((0, 4), dtype=np.int64))
    A, E = rt.power.shape[1:3]
    ang = rt.power[rs, :, :, ds].reshape(len(rs), -1).argmax(axis=1)
    a_idx, e_idx = np.unravel_index(ang, (A, E))
    spec = rt.spherical_spec()
    sph = spec.centers(np.stack([rs, a_idx, e_idx], axis=1))
    xyz = sph_to_cart(sph)
    dop = rt.doppler_origin + ds * rt.doppler_spacing
    pw = rt.power[rs, a_idx, e_idx, ds]
    cells = np.stack([rs, a_idx, e_idx, ds], axis=1)
    return RadarPointCloud(xyz, dop, pw, cells)


# ---------------------------------------------------------------- file format

RT_MAGIC = b"ROCC4DRT"


def save_4drt(path, rt: RadarTensor4D) -> None:
    with open(path, "wb") as f:
        f.write(RT_MAGIC)
        f.write(struct.pack("<4Q", *rt.power.shape))
        f.write(struct.pack("<6d", *rt.metadata()))
        f.write(np.ascontiguousarray(rt.power, dtype="<f4").tobytes())


def load_4drt(path) -> RadarTensor4D:
    raw = Path(path).read_bytes()
    if raw[:8] != RT_MAGIC:
        raise ValueError(f"{path}: not a 4D radar tensor file")
    shape = struct.unpack_from("<4Q", raw, 8)
    meta = struct.unpack_from("<6d", raw, 40)
    power = np.frombuffer(raw, dtype="<f4", offset=88, count=int(np.prod(shape))).reshape(shape)
    return RadarTensor4D(power.astype(np.float64), *meta)


def simulate_frame(scene: SceneSpec, cfg: RadarConfig, seed: int = 0) -> RadarTensor4D:
    return build_4drt(synth_adc(scene, cfg, seed), cfg)


def with_window(cfg: RadarConfig, window: str) -> RadarConfig:
    return replace(cfg, window=window)
