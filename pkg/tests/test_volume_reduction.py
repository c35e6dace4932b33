import numpy as np
import pytest

from radarocc.radar_signal import RadarConfig, RadarTensor4D
from radarocc.volume_reduction import (IDX1, MEAN, N_CHANNELS, STD, SparseRT, doppler_descriptor,
                                       encode_descriptors, load_sparse_rt, percentile_sparsify, range_coverage,
                                       reduce_tensor, save_sparse_rt, sidelobe_sparsify)


def tensor(power):
    return RadarTensor4D(np.asarray(power, dtype=np.float64), 0.8, 0.0, 0.05, 0.05, 0.5, -4.0)


def brute_descriptor(bins):
    pairs = sorted(((-v, i) for i, v in enumerate(bins)))[:3]
    top = [-p[0] for p in pairs]
    idx = [p[1] for p in pairs]
    m = sum(bins) / len(bins)
    sd = (sum((b - m) ** 2 for b in bins) / len(bins)) ** 0.5
    return np.array(top + idx + [m, sd], dtype=np.float64)


def adversarial(R=4, A=10, E=10):
    """Range 0 holds the 100 strongest cells of the tensor."""
    rng = np.random.default_rng(0)
    vol = np.zeros((R, A, E, N_CHANNELS))
    vol[..., MEAN] = rng.uniform(0, 1, size=(R, A, E))
    vol[0, ..., MEAN] += 100
    return vol


# ---------------------------------------------------------------- descriptor

def test_descriptor_examples():
    assert np.array_equal(doppler_descriptor([5, 5, 5, 5]), [5, 5, 5, 0, 1, 2, 5, 0])
    d = doppler_descriptor([1, 4, 2, 8])
    assert np.array_equal(d[:7], [8, 4, 2, 3, 1, 2, 3.75])
    assert d[STD] == pytest.approx(np.std([1, 4, 2, 8]), abs=1e-15)


def test_descriptor_rejects_short_vectors():
    with pytest.raises(ValueError):
        doppler_descriptor([1.0, 2.0])


def test_descriptor_matches_sort_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        D = int(rng.integers(3, 20))
        # repeated values exercise the tie rule
        bins = rng.integers(0, 4, size=D).astype(float) if rng.random() < 0.5 else rng.exponential(size=D)
        assert np.allclose(doppler_descriptor(bins), brute_descriptor(list(bins)), atol=1e-12, rtol=0)


def test_encode_descriptors_per_cell_and_argmax():
    rng = np.random.default_rng(1)
    p = rng.exponential(size=(4, 4, 2, 16))
    vol = encode_descriptors(tensor(p))
    for idx in np.ndindex(4, 4, 2):
        assert np.array_equal(vol[idx], doppler_descriptor(p[idx]))
    assert np.array_equal(vol[..., IDX1], p.argmax(axis=-1))
    top = vol[..., :3]
    assert np.all(top[..., 0] >= top[..., 1]) and np.all(top[..., 1] >= top[..., 2])


def test_reduction_factor_d64():
    p = np.random.default_rng(2).exponential(size=(3, 5, 2, 64))
    vol = encode_descriptors(tensor(p))
    assert p.size == 8 * vol.size
    zero = encode_descriptors(tensor(np.zeros((2, 2, 2, 64))))
    # power channels vanish; index channels follow the ascending tie rule
    assert not zero[..., [0, 1, 2, 6, 7]].any()
    assert np.array_equal(zero[0, 0, 0, 3:6], [0, 1, 2])


# ---------------------------------------------------------------- sparsification

def test_sidelobe_matches_brute_force():
    rng = np.random.default_rng(3)
    for _ in range(100):
        R, A, E = rng.integers(1, 6, size=3)
        vol = rng.normal(size=(R, A, E, N_CHANNELS))
        vol[..., MEAN] = rng.integers(0, 5, size=(R, A, E))   # many ties
        n_r = int(rng.integers(1, A * E + 3))
        s = sidelobe_sparsify(vol, n_r)
        for r in range(R):
            cells = sorted(((-vol[r, a, e, MEAN], a, e) for a in range(A) for e in range(E)))[:n_r]
            want = np.array([[r, a, e] for _, a, e in cells])
            coords, feats = s.range_slice(r)
            assert np.array_equal(coords, want)
            assert np.array_equal(feats, vol[r, want[:, 1], want[:, 2]])


def test_sidelobe_keeps_everything_when_budget_exceeds_cells():
    vol = np.random.default_rng(4).normal(size=(3, 2, 2, 8))
    s = sidelobe_sparsify(vol, 10)
    assert np.array_equal(s.per_range_counts(), [4, 4, 4])


def test_adversarial_tensor_sidelobe_vs_percentile():
    vol = adversarial()
    s = sidelobe_sparsify(vol, 4)
    counts, ent = range_coverage(s)
    assert np.array_equal(counts, [4, 4, 4, 4]) and ent == 1.0
    p = percentile_sparsify(vol, 0.01)
    pc, pent = range_coverage(p)
    assert pc.max() > 0.5 * pc.sum()
    assert pent < 0.8


def test_percentile_quantile_arithmetic():
    vol = np.zeros((8, 6, 5, 8))
    vol[..., MEAN] = 1.0
    n = 8 * 6 * 5
    for k in (0.01, 0.1, 0.37, 0.5, 1.0):
        assert abs(len(percentile_sparsify(vol, k)) - k * n) <= 1
    assert len(percentile_sparsify(vol, 1.0)) == n


def test_percentile_agrees_with_sidelobe_when_range_independent():
    rng = np.random.default_rng(5)
    R, A, E = 5, 4, 3
    vol = np.zeros((R, A, E, 8))
    vol[..., MEAN] = rng.permutation(A * E).reshape(A, E)[None]
    s = sidelobe_sparsify(vol, 3)
    p = percentile_sparsify(vol, 3 / (A * E))
    assert np.array_equal(s.coords, p.coords)


def test_range_coverage_empty():
    s = SparseRT(np.zeros((0, 3), dtype=np.int64), np.zeros((0, 8)), (4, 2, 2))
    assert range_coverage(s)[1] == 0.0


def test_reduce_tensor_modes():
    p = np.random.default_rng(6).exponential(size=(6, 4, 4, 8))
    rt = tensor(p)
    assert np.array_equal(reduce_tensor(rt, "sidelobe", 5).per_range_counts(), [5] * 6)
    assert len(reduce_tensor(rt, "percentile", 5)) == 30
    pooled = reduce_tensor(rt, "sidelobe", 5, descriptor=False)
    assert np.all(pooled.features[:, [0, 1, 2, 3, 4, 5, 7]] == 0)
    with pytest.raises(ValueError):
        reduce_tensor(rt, "bogus")


# ---------------------------------------------------------------- file format

def test_sparse_file_roundtrip(tmp_path):
    vol = np.random.default_rng(7).exponential(size=(5, 4, 3, 8)).astype(np.float32).astype(np.float64)
    s = sidelobe_sparsify(vol, 6)
    save_sparse_rt(tmp_path / "a.sprt", s)
    raw = (tmp_path / "a.sprt").read_bytes()
    assert raw[:8] == b"ROCCSPRT" and len(raw) == 40 + 5 * 6 * 40
    back = load_sparse_rt(tmp_path / "a.sprt")
    assert np.array_equal(back.coords, s.coords) and np.array_equal(back.features, s.features)
    assert back.shape == s.shape and back.n_r == 6


def test_percentile_file_pads_short_ranges(tmp_path):
    s = percentile_sparsify(adversarial(), 0.05)
    save_sparse_rt(tmp_path / "p.sprt", s)
    back = load_sparse_rt(tmp_path / "p.sprt")
    assert np.array_equal(back.coords, s.coords) and back.n_r is None


def test_zero_tensor_reduces_to_zero_descriptors(tmp_path):
    s = reduce_tensor(RadarTensor4D.zeros(RadarConfig.desk()), "sidelobe", 32)
    save_sparse_rt(tmp_path / "z.sprt", s)
    back = load_sparse_rt(tmp_path / "z.sprt")
    assert len(back) == 64 * 32
    assert not back.features[:, [0, 1, 2, 6, 7]].any()


def test_paper_profile_sparse_size(tmp_path):
    R, A, E, _ = RadarConfig.paper().tensor_shape
    vol = np.random.default_rng(8).exponential(size=(R, A, E, 8))
    s = sidelobe_sparsify(vol, 250)
    assert np.array_equal(s.per_range_counts(), np.full(R, 250))
    save_sparse_rt(tmp_path / "paper.sprt", s)
    assert (tmp_path / "paper.sprt").stat().st_size <= 6 * 1024 ** 2
