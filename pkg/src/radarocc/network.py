"""The occupancy network: range-wise self-attention, spherical sparse encoder,
deformable self/cross attention and the multi-scale occupancy decoder."""
from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor_core as tc
from .geometry import CartesianSpec, GridSpec, SphericalSpec, sph_to_cart, voxel_centers
from .radar_signal import RadarConfig, RadarTensor4D
from .tensor_core import ParamStore, Tensor
from .volume_reduction import IDX1, IDX3, MEAN, SparseRT, reduce_tensor

N_CLASSES = 3
PLAN_CACHE = 256     # encoder plans kept per model (one per distinct input coordinate set)
KERNEL = np.array([[i, j, k] for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)], dtype=np.int64)


# ---------------------------------------------------------------- config

@dataclass
class ModelConfig:
    profile: str = "desk"
    radar: RadarConfig = field(default_factory=RadarConfig.desk)
    grid: GridSpec = field(default_factory=GridSpec.desk)
    n_r: int = 32
    embed: int = 16
    rwa_heads: int = 2
    rwa_layers: int = 2
    dropout: float = 0.1
    enc_channels: tuple[int, ...] = (16, 16, 16, 16)
    feat_dim: int = 16
    deform_heads: int = 2
    deform_points: int = 4
    deform_layers: int = 2
    n_scales: int = 2
    mlp_hidden: tuple[int, ...] = (64, 64)
    # ablation toggles
    rwa: bool = True
    dbd: bool = True
    sss: str = "sidelobe"
    sfe: str = "spherical"

    def __post_init__(self):
        if self.embed % self.rwa_heads:
            raise ValueError(f"embed {self.embed} not divisible by {self.rwa_heads} heads")
        if self.feat_dim % self.deform_heads:
            raise ValueError(f"feat_dim {self.feat_dim} not divisible by {self.deform_heads} heads")
        if len(self.enc_channels) != 4:
            raise ValueError("enc_channels lists the widths of the first four encoder layers")
        if self.sss not in ("sidelobe", "percentile"):
            raise ValueError(f"sss must be sidelobe|percentile, got {self.sss!r}")
        if self.sfe not in ("spherical", "cartesian"):
            raise ValueError(f"sfe must be spherical|cartesian, got {self.sfe!r}")
        if self.n_scales < 1:
            raise ValueError(f"n_scales must be >= 1, got {self.n_scales}")

    @classmethod
    def desk(cls, **kw) -> "ModelConfig":
        return cls(**kw)

    @classmethod
    def paper(cls, **kw) -> "ModelConfig":
        base = dict(profile="paper", radar=RadarConfig.paper(), grid=GridSpec(), n_r=250, embed=32,
                    rwa_heads=4, enc_channels=(32, 64, 128, 160), feat_dim=192, deform_heads=8,
                    deform_points=8, n_scales=4)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["radar"] = self.radar.to_dict()
        d["grid"] = self.grid.as_array().tolist()
        d["enc_channels"] = list(self.enc_channels)
        d["mlp_hidden"] = list(self.mlp_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        profile = d.pop("profile", "desk")
        base = cls.paper() if profile == "paper" else cls.desk()
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        if "radar" in d:
            d["radar"] = replace(base.radar, **d["radar"])
        if "grid" in d:
            g = d["grid"]
            d["grid"] = GridSpec.from_array(g) if isinstance(g, (list, tuple)) else GridSpec(**g)
        for k in ("enc_channels", "mlp_hidden"):
            if k in d:
                d[k] = tuple(d[k])
        return replace(base, **d)

    @classmethod
    def load(cls, path) -> "ModelConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @property
    def radar_bins(self) -> tuple[int, int, int]:
        return self.radar.tensor_shape[:3]

    def encoder_shape(self) -> tuple[int, int, int]:
        return self.feature_spec().bins

    def feature_spec(self):
        if self.sfe == "spherical":
            return self.radar.spherical_spec().strided(4)
        return CartesianSpec(self.grid).strided(4)


# ---------------------------------------------------------------- sparse convolution

@dataclass
class SparseFeatureMap:
    coords: np.ndarray         # (N, 3) int64, unique, in-bounds
    feats: Tensor              # (N, C)
    shape: tuple[int, int, int]

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        if len(self.coords) != self.feats.shape[0]:
            raise ValueError("coordinate and feature row counts differ")
        if len(self.coords) and (np.any(self.coords < 0) or np.any(self.coords >= np.array(self.shape))):
            raise ValueError("coordinates out of bounds")

    def __len__(self) -> int:
        return len(self.coords)


def _keys(coords: np.ndarray, shape) -> np.ndarray:
    return (coords[:, 0] * shape[1] + coords[:, 1]) * shape[2] + coords[:, 2]


def _lookup(coords: np.ndarray, shape) -> np.ndarray:
    """Dense grid → row index (or -1) for a unique coordinate list."""
    table = np.full(int(np.prod(shape)), -1, dtype=np.int64)
    table[_keys(coords, shape)] = np.arange(len(coords))
    return table


def _gather_table(out_coords: np.ndarray, in_coords: np.ndarray, in_shape, stride: int) -> np.ndarray:
    """(N_out, 27) rows of ``in_coords`` under each 3x3x3 tap of every output site."""
    lut = _lookup(in_coords, in_shape)
    src = out_coords[:, None, :] * stride + KERNEL[None, :, :]
    ok = np.all((src >= 0) & (src < np.asarray(in_shape)), axis=-1)
    src = np.where(ok[..., None], src, 0)
    flat = (src[..., 0] * in_shape[1] + src[..., 1]) * in_shape[2] + src[..., 2]
    return np.where(ok, lut[flat], -1)


def submanifold_table(coords: np.ndarray, shape) -> np.ndarray:
    return _gather_table(coords, coords, shape, 1)


def strided_out_coords(coords: np.ndarray, shape, stride: int) -> tuple[np.ndarray, tuple]:
    """Active output sites of a padded 3x3x3 convolution: any input inside the receptive field."""
    out_shape = tuple((n + stride - 1) // stride for n in shape)
    if len(coords) == 0:
        return np.zeros((0, 3), dtype=np.int64), out_shape
    cand = coords[:, None, :] - KERNEL[None, :, :]
    cand = cand.reshape(-1, 3)
    ok = np.all(cand % stride == 0, axis=1)
    cand = cand[ok] // stride
    ok = np.all((cand >= 0) & (cand < np.asarray(out_shape)), axis=1)
    keys = np.unique(_keys(cand[ok], out_shape))
    out = np.stack(np.unravel_index(keys, out_shape), axis=1).astype(np.int64)
    return out, out_shape


def submanifold_conv(x: SparseFeatureMap, w, b=None) -> SparseFeatureMap:
    """3x3x3 convolution evaluated only at active sites; the coordinate set is unchanged."""
    nbr = submanifold_table(x.coords, x.shape)
    return SparseFeatureMap(x.coords, tc.neighbor_conv(x.feats, nbr, w, b), x.shape)


def strided_sparse_conv(x: SparseFeatureMap, w, b=None, stride: int = 2) -> SparseFeatureMap:
    """Regular sparse 3x3x3 convolution (padding 1); the active set dilates."""
    out, out_shape = strided_out_coords(x.coords, x.shape, stride)
    nbr = _gather_table(out, x.coords, x.shape, stride)
    cout = tc.as_tensor(w).shape[2]
    if len(out) == 0:
        return SparseFeatureMap(out, Tensor(np.zeros((0, cout))), out_shape)
    return SparseFeatureMap(out, tc.neighbor_conv(x.feats, nbr, w, b), out_shape)


def densify(x: SparseFeatureMap) -> Tensor:
    n = int(np.prod(x.shape))
    c = x.feats.shape[1]
    if len(x) == 0:
        return Tensor(np.zeros((*x.shape, c)))
    rows = tc.scatter_rows(x.feats, _keys(x.coords, x.shape), n)
    return tc.reshape(rows, (*x.shape, c))


def dense_conv_table(shape, stride: int = 1) -> tuple[np.ndarray, tuple]:
    """Neighbour table of a fully active grid (row-major site order)."""
    coords = np.stack(np.unravel_index(np.arange(int(np.prod(shape))), shape), axis=1)
    out, out_shape = strided_out_coords(coords, shape, stride)
    return _gather_table(out, coords, shape, stride), out_shape


# ---------------------------------------------------------------- deformable attention

def deform_attn_params(ps: ParamStore, prefix: str, dim: int, heads: int, points: int) -> None:
    ps.weight(f"{prefix}/w_off", (dim, heads * points * 3))
    ps.zeros(f"{prefix}/b_off", (heads * points * 3,))
    ps.weight(f"{prefix}/w_att", (dim, heads * points))
    ps.zeros(f"{prefix}/b_att", (heads * points,))
    ps.weight(f"{prefix}/w_val", (dim, dim))
    ps.weight(f"{prefix}/w_out", (dim, dim))


def deform_attn(z, ref: np.ndarray, vol, params: dict, heads: int, points: int) -> Tensor:
    """Deformable attention of queries ``z`` (N, C) around fractional indices ``ref`` (N, 3).

    Per head m: ``W_m [sum_k A_mk W'_m X(ref + dp_mk)]``, summed over heads.
    ``W'`` is ``w_val`` split into per-head column blocks and ``W`` is ``w_out``
    split into per-head row blocks. Offsets are in fractional bins.
    """
    z, vol = tc.as_tensor(z), tc.as_tensor(vol)
    N, C = z.shape
    X, Y, Z, Cx = vol.shape
    if Cx != C or ref.shape != (N, 3):
        raise tc.ShapeError(f"deform_attn: queries {z.shape}, refs {ref.shape}, volume {vol.shape}")
    M, K = heads, points
    cv = params["w_val"].shape[1] // M
    off = tc.reshape(tc.linear(z, params["w_off"], params["b_off"]), (N, M, K, 3))
    att = tc.softmax(tc.reshape(tc.linear(z, params["w_att"], params["b_att"]), (N, M, K)), axis=-1)
    val = tc.reshape(tc.linear(vol, params["w_val"]), (X, Y, Z, M, cv))
    loc = tc.add(off, ref[:, None, None, :])
    samples = tc.sample_heads(val, loc)                            # (N, M, K, cv)
    agg = tc.sum_axis(tc.mul(samples, tc.reshape(att, (N, M, K, 1))), axis=2)
    return tc.linear(tc.reshape(agg, (N, M * cv)), params["w_out"])


# ---------------------------------------------------------------- stages

def normalize_descriptors(feats: np.ndarray, n_doppler: int, dbd: bool = True) -> np.ndarray:
    """Fixed input scaling: log power channels, Doppler indices mapped to [-0.5, 0.5)."""
    out = np.log1p(np.maximum(feats, 0.0))
    out[:, IDX1:IDX3 + 1] = feats[:, IDX1:IDX3 + 1] / n_doppler - 0.5
    if not dbd:
        keep = out[:, MEAN].copy()
        out[:] = 0.0
        out[:, MEAN] = keep
    return out


class RadarOcc:
    """Parameters plus precomputed geometry for one model configuration."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, build: tuple[str, ...] | None = None):
        self.cfg = cfg
        self.params = ParamStore(seed)
        stages = build or ("rwa", "encoder", "refine", "aggregate", "decoder")
        self._plans: OrderedDict = OrderedDict()
        ps, c = self.params, cfg
        R, A, E = cfg.radar_bins
        if "rwa" in stages:
            ps.weight("rwa/embed_w", (8, c.embed))
            ps.zeros("rwa/embed_b", (c.embed,))
            ps.weight("rwa/pos_az", (A, c.embed), fan_in=c.embed)
            ps.weight("rwa/pos_el", (E, c.embed), fan_in=c.embed)
            for layer in range(c.rwa_layers):
                for n in ("q", "k", "v", "o"):
                    ps.weight(f"rwa/{layer}/w{n}", (c.embed, c.embed))
                    if n != "k":
                        ps.zeros(f"rwa/{layer}/b{n}", (c.embed,))
        if "encoder" in stages:
            widths = (c.embed, *c.enc_channels, c.feat_dim)
            for i in range(5):
                ps.weight(f"enc/{i}/w", (27, widths[i], widths[i + 1]), fan_in=27 * widths[i])
                ps.zeros(f"enc/{i}/b", (widths[i + 1],))
        if "refine" in stages:
            for layer in range(c.deform_layers):
                deform_attn_params(ps, f"dsa/{layer}", c.feat_dim, c.deform_heads, c.deform_points)
        if "aggregate" in stages:
            H, W, L = c.grid.shape
            ps.weight("cross/queries", (H, W, L, c.feat_dim), fan_in=c.feat_dim)
            deform_attn_params(ps, "cross", c.feat_dim, c.deform_heads, c.deform_points)
            self.query_points = voxel_centers(c.grid)
            self.query_ref, self.query_inside = c.feature_spec().phi_map(self.query_points)
        if "decoder" in stages:
            self._build_decoder()

    # -------------------------------------------------------------- decoder setup

    def _build_decoder(self) -> None:
        ps, c = self.params, self.cfg
        C = c.feat_dim
        shape = c.grid.shape
        self.dec_tables = []
        for s in range(c.n_scales):
            if s > 0:
                table, shape = dense_conv_table(shape, 2)
                self.dec_tables.append((shape, table))
                ps.weight(f"dec/{s}/down_w", (27, C, C), fan_in=27 * C)
                ps.zeros(f"dec/{s}/down_b", (C,))
            table, _ = dense_conv_table(shape, 1)
            self.dec_tables.append((shape, table))
            for j in (1, 2):
                ps.weight(f"dec/{s}/conv{j}_w", (27, C, C), fan_in=27 * C)
                ps.zeros(f"dec/{s}/conv{j}_b", (C,))
        widths = (c.n_scales * C, *c.mlp_hidden, N_CLASSES)
        for i in range(len(widths) - 1):
            ps.weight(f"head/{i}/w", (widths[i], widths[i + 1]))
            ps.zeros(f"head/{i}/b", (widths[i + 1],))

    # -------------------------------------------------------------- data preparation

    def prepare(self, rt: RadarTensor4D) -> SparseRT:
        """Apply the configured reduction (descriptor or pooling, per-range or percentile)."""
        c = self.cfg
        return reduce_tensor(rt, mode=c.sss, n_r=c.n_r, descriptor=c.dbd)

    # -------------------------------------------------------------- stages

    def range_wise_self_attention(self, t: SparseRT, training: bool = False,
                                  rng: np.random.Generator | None = None) -> SparseFeatureMap:
        c, ps = self.cfg, self.params
        R, A, E = c.radar_bins
        coords = np.asarray(t.coords, dtype=np.int64).reshape(-1, 3)
        if len(coords) == 0:
            return SparseFeatureMap(coords, Tensor(np.zeros((0, c.embed))), (R, A, E))
        if coords[:, 1].max() >= A or coords[:, 2].max() >= E or coords.min() < 0 or coords[:, 0].max() >= R:
            raise IndexError(f"token index outside the ({R}, {A}, {E}) lookup tables")
        feats = normalize_descriptors(t.features, c.radar.n_chirps, c.dbd)
        x = tc.linear(feats, ps["rwa/embed_w"], ps["rwa/embed_b"])
        x = tc.add(x, tc.take_rows(ps["rwa/pos_az"], coords[:, 1]))
        x = tc.add(x, tc.take_rows(ps["rwa/pos_el"], coords[:, 2]))
        if c.rwa:
            # pad each range to a common token count
            ranges, inverse, counts = np.unique(coords[:, 0], return_inverse=True, return_counts=True)
            T = counts.max()
            order = np.argsort(inverse, kind="stable")
            slot = np.empty(len(coords), dtype=np.int64)
            slot[order] = np.arange(len(coords)) - np.concatenate([[0], np.cumsum(counts)[:-1]])[inverse[order]]
            dest = inverse * T + slot
            xb = tc.reshape(tc.scatter_rows(x, dest, len(ranges) * T), (len(ranges), T, c.embed))
            mask = np.arange(T)[None, :] < counts[:, None]
            for layer in range(c.rwa_layers):
                p = ps.group(f"rwa/{layer}")
                h = tc.multi_head_attention(xb, xb, xb, p, c.rwa_heads, c.dropout, rng, training, key_mask=mask)
                xb = tc.add(xb, tc.dropout(h, c.dropout, rng, training))
            x = tc.take_rows(tc.reshape(xb, (len(ranges) * T, c.embed)), dest)
        return SparseFeatureMap(coords, x, (R, A, E))

    def _to_cartesian(self, x: SparseFeatureMap) -> SparseFeatureMap:
        """Nearest-voxel scatter of spherical tokens into the (x, y, z) RoI grid; collisions average."""
        spec = self.cfg.radar.spherical_spec()
        grid = self.cfg.grid
        L, W, H = grid.shape_lwh
        if len(x) == 0:
            return SparseFeatureMap(np.zeros((0, 3)), x.feats, (L, W, H))
        pts = sph_to_cart(spec.centers(x.coords))
        zyx, inside = grid.voxel_index(pts)
        xyz = zyx[:, ::-1]
        keep = np.flatnonzero(inside)
        keys = _keys(xyz[keep], (L, W, H))
        uniq, groups = np.unique(keys, return_inverse=True)
        feats = tc.segment_mean(tc.take_rows(x.feats, keep), groups, len(uniq))
        coords = np.stack(np.unravel_index(uniq, (L, W, H)), axis=1)
        return SparseFeatureMap(coords, feats, (L, W, H))

    def _encoder_plan(self, coords: np.ndarray, shape) -> list:
        """Active sites and neighbour tables of every encoder layer; they depend on coordinates only."""
        key = (shape, coords.tobytes())
        plan = self._plans.get(key)
        if plan is not None:
            self._plans.move_to_end(key)
            return plan
        plan = [(coords, shape, submanifold_table(coords, shape))]
        for stride in (1, 2, 2):
            out, out_shape = strided_out_coords(coords, shape, stride)
            plan.append((out, out_shape, _gather_table(out, coords, shape, stride)))
            coords, shape = out, out_shape
        plan.append((coords, shape, submanifold_table(coords, shape)))
        self._plans[key] = plan
        if len(self._plans) > PLAN_CACHE:
            self._plans.popitem(last=False)
        return plan

    def encode_spherical(self, x: SparseFeatureMap) -> Tensor:
        """Sparse conv stack: submanifold, sparse, sparse/2, sparse/2, submanifold → dense volume."""
        ps = self.params
        if self.cfg.sfe == "cartesian":
            x = self._to_cartesian(x)
        feats = x.feats
        plan = self._encoder_plan(x.coords, tuple(x.shape))
        for i, (coords, shape, nbr) in enumerate(plan):
            if len(coords) == 0:
                feats = Tensor(np.zeros((0, ps[f"enc/{i}/w"].shape[2])))
                continue
            feats = tc.neighbor_conv(feats, nbr, ps[f"enc/{i}/w"], ps[f"enc/{i}/b"])
            if i < 4:
                feats = tc.relu(feats)
        coords, shape, _ = plan[-1]
        return densify(SparseFeatureMap(coords, feats, shape))

    def deform_self_attn(self, F, training: bool = False, rng=None) -> Tensor:
        c = self.cfg
        F = tc.as_tensor(F)
        X, Y, Z, C = F.shape
        ref = np.stack(np.unravel_index(np.arange(X * Y * Z), (X, Y, Z)), axis=1).astype(np.float64)
        for layer in range(c.deform_layers):
            flat = tc.reshape(F, (X * Y * Z, C))
            upd = deform_attn(flat, ref, F, self.params.group(f"dsa/{layer}"), c.deform_heads, c.deform_points)
            flat = tc.add(flat, tc.dropout(upd, c.dropout, rng, training))
            F = tc.reshape(flat, (X, Y, Z, C))
        return F

    def aggregate_to_cartesian(self, F_r, training: bool = False, rng=None) -> Tensor:
        """Voxel queries attend into the feature volume; queries outside it pass through."""
        c = self.cfg
        H, W, L = c.grid.shape
        q = tc.reshape(self.params["cross/queries"], (H * W * L, c.feat_dim))
        idx = np.flatnonzero(self.query_inside)
        if len(idx) == 0:
            return tc.reshape(q, (H, W, L, c.feat_dim))
        z = tc.take_rows(q, idx)
        g = deform_attn(z, self.query_ref[idx], F_r, self.params.group("cross"), c.deform_heads, c.deform_points)
        g = tc.dropout(g, c.dropout, rng, training)
        out = tc.where_rows(self.query_inside, tc.scatter_rows(g, idx, H * W * L), q)
        return tc.reshape(out, (H, W, L, c.feat_dim))

    def decode_occupancy(self, G) -> Tensor:
        c, ps = self.cfg, self.params
        G = tc.as_tensor(G)
        H, W, L, C = G.shape
        x = tc.reshape(G, (H * W * L, C))
        shape = (H, W, L)
        levels = []
        tables = iter(self.dec_tables)
        for s in range(c.n_scales):
            if s > 0:
                shape, down = next(tables)
                x = tc.relu(tc.neighbor_conv(x, down, ps[f"dec/{s}/down_w"], ps[f"dec/{s}/down_b"]))
            _, same = next(tables)
            h = tc.relu(tc.neighbor_conv(x, same, ps[f"dec/{s}/conv1_w"], ps[f"dec/{s}/conv1_b"]))
            h = tc.neighbor_conv(h, same, ps[f"dec/{s}/conv2_w"], ps[f"dec/{s}/conv2_b"])
            x = tc.relu(tc.add(x, h))
            levels.append((x, shape))
        merged = []
        for s, (feat, shp) in enumerate(levels):
            v = tc.reshape(feat, (*shp, C))
            for _ in range(s):
                v = tc.upsample_nearest(v, 2)
            if v.shape[:3] != (H, W, L):
                # odd extents were halved with ceil; drop the overhang
                up = v.shape[:3]
                keep = np.ravel_multi_index(np.indices((H, W, L)).reshape(3, -1), up)
                v = tc.take_rows(tc.reshape(v, (int(np.prod(up)), C)), keep)
            merged.append(tc.reshape(v, (H * W * L, C)))
        y = tc.concat(merged, axis=1) if len(merged) > 1 else merged[0]
        n_layers = len(c.mlp_hidden) + 1
        for i in range(n_layers):
            y = tc.linear(y, ps[f"head/{i}/w"], ps[f"head/{i}/b"])
            if i < n_layers - 1:
                y = tc.relu(y)
        return tc.reshape(y, (H, W, L, N_CLASSES))

    def forward(self, t: SparseRT, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """SparseRT → (H, W, L, 3) logits over (free, background, foreground)."""
        if training and rng is None:
            raise ValueError("training mode needs a seeded generator for dropout")
        x = self.range_wise_self_attention(t, training, rng)
        F = self.encode_spherical(x)
        F_r = self.deform_self_attn(F, training, rng)
        G = self.aggregate_to_cartesian(F_r, training, rng)
        return self.decode_occupancy(G)

    def predict(self, t: SparseRT) -> np.ndarray:
        return self.forward(t).data.argmax(axis=-1).astype(np.uint8)


def stage_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Output shape of every stage, derived from the configuration alone."""
    R, A, E = cfg.radar_bins
    H, W, L = cfg.grid.shape
    f = cfg.encoder_shape()
    return {
        "sparse_rt": (R * min(cfg.n_r, A * E), 8 + 2),
        "rwa": (R * min(cfg.n_r, A * E), cfg.embed + 3),
        "encoder": (*f, cfg.feat_dim),
        "refined": (*f, cfg.feat_dim),
        "aggregated": (H, W, L, cfg.feat_dim),
        "decoded": (H, W, L, cfg.n_scales * cfg.feat_dim),
        "logits": (H, W, L, N_CLASSES),
    }
