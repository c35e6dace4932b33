import numpy as np
import pytest

from radarocc.geometry import (CartesianSpec, GridSpec, SphericalSpec, cart_to_sph, forward_distance_mask,
                               hfov_mask, sph_to_cart, voxel_centers)
from radarocc.radar_signal import RadarConfig


def wedge_fraction(g: GridSpec, hfov_deg: float, n: int = 4000) -> float:
    """Area fraction of the RoI rectangle inside |atan2(y, x)| <= hfov/2, by column integration."""
    half = np.deg2rad(hfov_deg) / 2
    x0, x1 = g.x_range
    y0, y1 = g.y_range
    xs = x0 + (np.arange(n) + 0.5) * (x1 - x0) / n
    reach = xs * np.tan(half)
    lo, hi = np.maximum(-reach, y0), np.minimum(reach, y1)
    return float(np.clip(hi - lo, 0, None).sum() * (x1 - x0) / n / ((x1 - x0) * (y1 - y0)))


def test_cart_to_sph_examples():
    assert np.allclose(cart_to_sph([10, 0, 0]), [10, 0, 0])
    assert np.allclose(cart_to_sph([0, 5, 0]), [5, np.pi / 2, 0])
    with pytest.raises(ValueError):
        cart_to_sph([0, 0, 0])


def test_round_trip():
    rng = np.random.default_rng(0)
    p = rng.uniform(-60, 60, size=(10_000, 3))
    assert np.max(np.abs(sph_to_cart(cart_to_sph(p)) - p)) < 1e-9
    s = cart_to_sph(p)
    assert np.max(np.abs(cart_to_sph(sph_to_cart(s)) - s)) < 1e-9


def test_grid_shapes_and_centers():
    g = GridSpec()
    assert g.shape_lwh == (128, 128, 14) and g.shape == (14, 128, 128)
    c = voxel_centers(g)
    assert len(c) == 229376
    assert np.allclose(c[0], [0.2, -25.4, -2.4])
    # canonical order: x fastest, then y, then z
    assert np.allclose(c[1], [0.6, -25.4, -2.4]) and np.allclose(c[128], [0.2, -25.0, -2.4])
    one = GridSpec((0, 0.4), (0, 0.4), (0, 0.4), 0.4)
    assert np.allclose(voxel_centers(one), [[0.2, 0.2, 0.2]])
    assert GridSpec.desk().shape == (8, 32, 32)


def test_grid_rejects_fractional_extents():
    with pytest.raises(ValueError):
        GridSpec((0, 1.0), (0, 0.4), (0, 0.4), 0.3)


def test_voxel_index_matches_centers():
    g = GridSpec.desk()
    zyx, inside = g.voxel_index(voxel_centers(g))
    assert inside.all()
    H, W, L = g.shape
    assert np.array_equal((zyx[:, 0] * W + zyx[:, 1]) * L + zyx[:, 2], np.arange(g.n_voxels))


def test_phi_map_cell_centers_are_integer_indices():
    spec = RadarConfig.paper().spherical_spec()
    rng = np.random.default_rng(1)
    idx = np.column_stack([rng.integers(1, 256, 500), rng.integers(0, 107, 500), rng.integers(0, 37, 500)])
    got, inside = spec.phi_map(sph_to_cart(spec.centers(idx)))
    assert inside.all() and np.max(np.abs(got - idx)) < 1e-9
    far = sph_to_cart(np.array([[spec.bins[0] * spec.spacing[0] + 1.0, 0.0, 0.0]]))
    assert not spec.phi_map(far)[1][0]


def test_phi_map_monotone_and_azimuth_sign():
    spec = RadarConfig.desk().spherical_spec()
    d = np.array([0.8, 0.3, 0.1])
    d /= np.linalg.norm(d)
    idx, _ = spec.phi_map(np.outer(np.linspace(1, 40, 50), d))
    assert np.all(np.diff(idx[:, 0]) > 0)
    centre = (spec.bins[1] - 1) / 2
    assert spec.phi_map([[5, 1, 0]])[0][0, 1] > centre and spec.phi_map([[5, -1, 0]])[0][0, 1] < centre


def test_in_fov_voxels_map_in_volume():
    spec = RadarConfig.paper().spherical_spec()
    g = GridSpec()
    c = voxel_centers(g)
    sph = cart_to_sph(c)
    half_az = (spec.bins[1] * spec.spacing[1]) / 2
    half_el = (spec.bins[2] * spec.spacing[2]) / 2
    in_fov = (np.abs(sph[:, 1]) <= half_az) & (np.abs(sph[:, 2]) <= half_el) & (sph[:, 0] < spec.bins[0] * spec.spacing[0])
    in_fov &= hfov_mask(g).reshape(-1)
    assert in_fov.sum() > 0.3 * len(c)
    assert spec.phi_map(c[in_fov])[1].all()


def test_strided_spec():
    spec = RadarConfig.paper().spherical_spec()
    s4 = spec.strided(4)
    assert s4.bins == (64, 27, 10) and s4.stride == 4
    assert np.allclose(s4.spacing, np.asarray(spec.spacing) * 4)
    # strided bin o sits on raw bin 4o
    p = sph_to_cart(spec.centers([[40, 12, 8]]))
    assert np.allclose(s4.phi_map(p)[0], [[10, 3, 2]])
    assert RadarConfig.desk().spherical_spec().strided(4).bins == (16, 8, 4)
    with pytest.raises(ValueError):
        spec.strided(3)


def test_cartesian_spec():
    g = GridSpec.desk()
    cs = CartesianSpec(g).strided(4)
    assert cs.bins == (8, 8, 2)
    idx, inside = CartesianSpec(g).phi_map(voxel_centers(g)[:3])
    assert inside.all() and np.allclose(idx, [[0, 0, 0], [1, 0, 0], [2, 0, 0]])


def test_hfov_mask():
    g = GridSpec()
    assert hfov_mask(g, 360).all()
    m = hfov_mask(GridSpec((0, 4), (-0.2, 0.2), (0, 0.4), 0.4), 1e-3)
    assert m.all()     # every center lies on the +x axis
    frac = hfov_mask(g).mean()
    assert abs(frac - wedge_fraction(g, 107)) < 0.01
    with pytest.raises(ValueError):
        hfov_mask(g, 0)


def test_forward_distance_mask():
    g = GridSpec()
    assert forward_distance_mask(g, 51.2).all()
    assert forward_distance_mask(g, 12.8).mean() == pytest.approx(32 / 128)
