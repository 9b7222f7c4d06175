import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from structflow.errors import ConfigurationError
from structflow.sphere_grid import build_gnomonic_patch, build_pyramid, tangent_projection

from conftest import random_unit


def test_centre_of_odd_grid_is_optical_axis():
    g = build_gnomonic_patch(90.0, 3, 3)
    np.testing.assert_allclose(g.direction[1, 1], [0.0, 0.0, 1.0], atol=1e-15)


def test_corners_share_z_component():
    g = build_gnomonic_patch(90.0, 3, 3)
    z = [g.direction[i, j, 2] for i in (0, 2) for j in (0, 2)]
    assert max(z) - min(z) < 1e-15


def test_unit_directions_exhaustive_scan():
    g = build_gnomonic_patch(60.0, 128, 128)
    assert np.max(np.abs(np.linalg.norm(g.direction, axis=-1) - 1.0)) < 1e-12


@pytest.mark.parametrize("shape", [(8, 8), (12, 20), (33, 17)])
def test_basis_invariants(shape):
    g = build_gnomonic_patch(100.0, *shape)
    btb = np.einsum("ijka,ijkb->ijab", g.basis, g.basis)
    np.testing.assert_allclose(btb, np.broadcast_to(np.eye(2), btb.shape), atol=1e-9)
    st_b = np.einsum("ijk,ijka->ija", g.direction, g.basis)
    assert np.max(np.abs(st_b)) < 1e-9
    assert np.all(g.pixel_separation > 0)


def test_pixel_separation_definition(grid_rect):
    g = grid_rect
    s = g.direction
    for i in range(g.height):
        for j in range(g.width):
            nb = s[i, j + 1] if j + 1 < g.width else s[i, j - 1]
            expected = np.linalg.norm(tangent_projection(s[i, j]) @ nb)
            assert g.pixel_separation[i, j] == pytest.approx(expected, rel=1e-12)


def test_pixel_separation_near_nominal_spacing():
    fov, n = 90.0, 64
    g = build_gnomonic_patch(fov, n, n)
    nominal = math.radians(fov) / n
    assert np.all(g.pixel_separation > 0.5 * nominal)
    assert np.all(g.pixel_separation < 2.0 * nominal)


def test_basis_columns_follow_raster_axes(grid16):
    g = grid16
    i, j = 7, 7
    toward_col = tangent_projection(g.direction[i, j]) @ g.direction[i, j + 1]
    toward_row = tangent_projection(g.direction[i, j]) @ g.direction[i + 1, j]
    assert g.basis[i, j, :, 0] @ toward_col > 0.99 * np.linalg.norm(toward_col)
    assert g.basis[i, j, :, 1] @ toward_row > 0.99 * np.linalg.norm(toward_row)


def test_mirror_symmetry_of_directions():
    g = build_gnomonic_patch(75.0, 10, 14)
    s = g.direction
    np.testing.assert_allclose(s[:, ::-1, 0], -s[:, :, 0], atol=1e-15)
    np.testing.assert_allclose(s[::-1, :, 1], -s[:, :, 1], atol=1e-15)
    np.testing.assert_allclose(s[::-1, ::-1, 2], s[:, :, 2], atol=1e-15)


def test_grid_is_deterministic_and_read_only():
    a = build_gnomonic_patch(70.0, 20, 24)
    b = build_gnomonic_patch(70.0, 20, 24)
    assert a.as_channels().tobytes() == b.as_channels().tobytes()
    with pytest.raises(ValueError):
        a.direction[0, 0, 0] = 1.0


def test_as_channels_layout(grid16):
    ch = grid16.as_channels()
    assert ch.shape == (16, 16, 10)
    np.testing.assert_array_equal(ch[..., :3], grid16.direction)
    np.testing.assert_array_equal(ch[..., 3:9].reshape(16, 16, 3, 2), grid16.basis)
    np.testing.assert_array_equal(ch[..., 9], grid16.pixel_separation)


@pytest.mark.parametrize("fov", [0.0, -5.0, 180.0, 200.0, float("nan")])
def test_invalid_fov(fov):
    with pytest.raises(ConfigurationError):
        build_gnomonic_patch(fov, 16, 16)


def test_degenerate_resolution():
    with pytest.raises(ConfigurationError):
        build_gnomonic_patch(60.0, 2, 16)


def test_tangent_projection_on_axis():
    np.testing.assert_array_equal(tangent_projection([0.0, 0.0, 1.0]), np.diag([1.0, 1.0, 0.0]))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_tangent_projection_properties(seed):
    s = random_unit(np.random.default_rng(seed))
    P = tangent_projection(s)
    np.testing.assert_allclose(P, P.T, atol=0)
    np.testing.assert_allclose(P @ P, P, atol=1e-12)
    assert np.max(np.abs(P @ s)) < 1e-12


def test_beta_mu_examples(grid16):
    g = build_gnomonic_patch(90.0, 9, 9)
    np.testing.assert_array_equal(g.beta_to_mu(4, 4, [0.0, 0.0]), np.zeros(3))
    np.testing.assert_allclose(g.beta_to_mu(4, 4, [1.0, 0.0]), g.basis[4, 4, :, 0])
    np.testing.assert_allclose(g.beta_to_mu(4, 4, [1.0, 0.0]), [1.0, 0.0, 0.0], atol=1e-12)
    np.testing.assert_array_equal(g.mu_to_beta(2, 3, np.zeros(3)), [0.0, 0.0])
    np.testing.assert_allclose(g.mu_to_beta(2, 3, g.basis[2, 3, :, 0]), [1.0, 0.0], atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 15), st.integers(0, 15), st.floats(-5, 5), st.floats(-5, 5))
def test_beta_mu_round_trip(i, j, b1, b2):
    g = build_gnomonic_patch(70.0, 16, 16)
    beta = np.array([b1, b2])
    mu = g.beta_to_mu(i, j, beta)
    assert abs(mu @ g.direction[i, j]) < 1e-9
    assert np.linalg.norm(mu) == pytest.approx(np.linalg.norm(beta), abs=1e-9)
    np.testing.assert_allclose(g.mu_to_beta(i, j, mu), beta, atol=1e-9)


def test_mu_to_beta_discards_normal_component(grid16, rng):
    mu = rng.normal(size=3)
    s = grid16.direction[3, 5]
    np.testing.assert_allclose(grid16.mu_to_beta(3, 5, mu + 7.0 * s), grid16.mu_to_beta(3, 5, mu), atol=1e-12)


@pytest.mark.parametrize("i,j", [(-1, 0), (16, 0), (0, 16)])
def test_out_of_bounds_index(grid16, i, j):
    with pytest.raises(IndexError):
        grid16.beta_to_mu(i, j, [1.0, 0.0])
    with pytest.raises(IndexError):
        grid16.mu_to_beta(i, j, [1.0, 0.0, 0.0])


def test_vectorised_conversions_match_pixelwise(grid_rect, rng):
    w = rng.normal(size=grid_rect.shape + (3,))
    beta = grid_rect.to_beta(w)
    for i, j in [(0, 0), (5, 7), (11, 19)]:
        np.testing.assert_allclose(beta[i, j], grid_rect.mu_to_beta(i, j, w[i, j]), atol=1e-12)
    back = grid_rect.from_beta(beta)
    tangent = w - grid_rect.direction * np.sum(grid_rect.direction * w, -1, keepdims=True)
    np.testing.assert_allclose(back, tangent, atol=1e-12)


def test_pyramid_halves_resolution():
    grids = build_pyramid(90.0, 64, 48, 3)
    assert [g.shape for g in grids] == [(64, 48), (32, 24), (16, 12)]
    with pytest.raises(ConfigurationError):
        build_pyramid(90.0, 30, 30, 3)
    with pytest.raises(ConfigurationError):
        build_pyramid(90.0, 30, 30, 0)
