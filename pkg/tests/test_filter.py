import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from structflow.errors import ConfigurationError, DataError
from structflow.filter import (
    FilterConfig,
    FilterState,
    StructureFlowFilter,
    default_smoothing,
    depth_direction,
    filter_step,
    fit_measurements,
    gate_gain,
    init_state,
    normal_matrix,
    smooth,
    solve_regularised,
    update_inverse_depth,
    update_lower,
    update_top,
)
from structflow.kinematics import clamp_tangent_flow
from structflow.measurement import fit_brightness_model, fit_inverse_depth_model
from structflow.propagate import PropagationBundle, propagate
from structflow.pyramid import upsample_flow
from structflow.sphere_grid import build_gnomonic_patch, build_pyramid


def lstsq_oracle(prior, g_y, c_y, m, c_rho, gamma1, gamma2, gamma3):
    A = np.vstack([np.sqrt(gamma1) * g_y, np.sqrt(gamma2) * m, np.sqrt(gamma3) * np.eye(3)])
    b = np.concatenate([[-np.sqrt(gamma1) * c_y, -np.sqrt(gamma2) * c_rho], np.sqrt(gamma3) * prior])
    return np.linalg.lstsq(A, b, rcond=None)[0]


def random_instance(rng):
    scale = 10.0 ** rng.uniform(-3, 1)
    return (
        rng.normal(size=3) * scale,
        rng.normal(size=3),
        rng.normal(),
        rng.normal(size=3),
        rng.normal(),
        10.0 ** rng.uniform(-2, 4),
        10.0 ** rng.uniform(-2, 4),
        10.0 ** rng.uniform(-1, 1),
    )


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_closed_form_solve_matches_generic_least_squares(seed):
    prior, g_y, c_y, m, c_rho, g1, g2, g3 = random_instance(np.random.default_rng(seed))
    got = solve_regularised(prior[None], g_y[None], np.array([c_y]), m[None], np.array([c_rho]), g1, g2, g3)[0]
    ref = lstsq_oracle(prior, g_y, c_y, m, c_rho, g1, g2, g3)
    assert np.linalg.norm(got - ref) <= 1e-9 * max(np.linalg.norm(ref), 1e-12)


def test_normal_matrix_eigenvalue_bound(rng):
    g_y = rng.normal(size=(50, 3))
    m = rng.normal(size=(50, 3))
    A = normal_matrix(g_y, m, 3.0, 7.0, 0.5)
    np.testing.assert_allclose(A, np.swapaxes(A, -1, -2))
    assert np.all(np.linalg.eigvalsh(A) >= 0.5 - 1e-12)


def test_solve_accepts_per_pixel_gains(rng):
    n = 20
    args = [rng.normal(size=(n, 3)), rng.normal(size=(n, 3)), rng.normal(size=n), rng.normal(size=(n, 3)), rng.normal(size=n)]
    g1 = rng.uniform(0, 5, n)
    g2 = rng.uniform(0, 5, n)
    got = solve_regularised(*args, g1, g2, 2.0)
    for k in range(n):
        ref = lstsq_oracle(args[0][k], args[1][k], args[2][k], args[3][k], args[4][k], g1[k], g2[k], 2.0)
        np.testing.assert_allclose(got[k], ref, atol=1e-12)


def models(grid, rng):
    image = rng.uniform(size=grid.shape)
    rho = rng.uniform(0.2, 1.0, grid.shape)
    return fit_brightness_model(grid, image), fit_inverse_depth_model(grid, rho)


def test_update_top_without_data_returns_prediction(grid16, rng):
    bm, rm = models(grid16, rng)
    prior = rng.normal(size=grid16.shape + (3,)) * 1e-3
    cfg = FilterConfig(levels=1, gamma1=0.0, gamma2=0.0, smooth_iterations=(0,))
    w = update_top(grid16, prior, rng.uniform(size=grid16.shape), rng.uniform(size=grid16.shape), bm, rm, cfg)
    np.testing.assert_allclose(w, prior, atol=1e-18)


def test_update_top_matches_pixelwise_oracle(grid16, rng):
    bm, rm = models(grid16, rng)
    prior = rng.normal(size=grid16.shape + (3,)) * 1e-3
    rho_prev = rng.uniform(0.2, 1.0, grid16.shape)
    y_prev = rng.uniform(size=grid16.shape)
    cfg = FilterConfig(levels=1, gamma1=40.0, gamma2=900.0, gamma3=0.7, smooth_iterations=(0,), residual_gate=0.0)
    w = update_top(grid16, prior, rho_prev, y_prev, bm, rm, cfg)
    ds2 = grid16.pixel_separation**2
    m = depth_direction(grid16, rm)
    for i, j in [(0, 0), (5, 9), (15, 15)]:
        ref = lstsq_oracle(
            prior[i, j], bm.gradient[i, j], ds2[i, j] * (bm.constant[i, j] - y_prev[i, j]),
            m[i, j], ds2[i, j] * (rm.constant[i, j] - rho_prev[i, j]), 40.0, 900.0, 0.7,
        )
        np.testing.assert_allclose(w[i, j], ref, rtol=1e-9, atol=1e-15)


def test_carry_forward_at_featureless_pixels():
    g = build_gnomonic_patch(60.0, 10, 10)
    image = np.full(g.shape, 0.5)
    bm = fit_brightness_model(g, image)
    rm = fit_inverse_depth_model(g, np.zeros(g.shape))
    prior = np.random.default_rng(3).normal(size=g.shape + (3,))
    cfg = FilterConfig(levels=1, smooth_iterations=(0,))
    w = update_top(g, prior, np.zeros(g.shape), image, bm, rm, cfg, level=0)
    np.testing.assert_array_equal(w, prior)


def test_update_lower_examples(grid16, rng):
    bm, rm = models(grid16, rng)
    dw_pred = rng.normal(size=grid16.shape + (3,)) * 1e-3
    cfg = FilterConfig(levels=1, gamma2=0.0, smooth_iterations=(0,))
    # the new image equals the prediction: no brightness drive
    dw = update_lower(grid16, dw_pred, bm.constant, rm.constant, bm, rm, cfg)
    np.testing.assert_allclose(dw, dw_pred, atol=1e-18)

    strong = FilterConfig(levels=1, gamma3=1e16, smooth_iterations=(0,))
    dw = update_lower(grid16, dw_pred, rng.uniform(size=grid16.shape), rng.uniform(size=grid16.shape), bm, rm, strong)
    np.testing.assert_allclose(dw, dw_pred, rtol=0, atol=1e-10)


def test_inverse_depth_fusion():
    pred = np.array([1.0, 2.0, 3.0])
    meas = np.array([3.0, 4.0, 5.0])
    valid = np.array([True, True, False])
    np.testing.assert_allclose(update_inverse_depth(pred, meas, valid, 1.0, 1.0), [2.0, 3.0, 3.0])
    np.testing.assert_allclose(update_inverse_depth(pred, meas, valid, 1.0, 0.0), [3.0, 4.0, 3.0])
    np.testing.assert_allclose(update_inverse_depth(pred, meas, valid, 3.0, 1.0), [2.5, 3.5, 3.0])


def test_gate_gain_drops_unreachable_terms():
    direction = np.array([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    constant = np.array([0.5, 2.0, 0.0])
    np.testing.assert_array_equal(gate_gain(7.0, direction, constant, 1.0), [7.0, 0.0, 7.0])
    np.testing.assert_array_equal(gate_gain(7.0, direction, constant, None), [7.0, 7.0, 7.0])


def test_smooth_is_box_average():
    f = np.zeros((9, 9))
    f[4, 4] = 25.0
    out = smooth(f, 1)
    np.testing.assert_allclose(out[2:7, 2:7], 1.0)
    assert out.sum() == pytest.approx(25.0)
    np.testing.assert_array_equal(smooth(f, 0), f)


# --------------------------------------------------------------------------
# state and filter step


def test_init_state_levels():
    grids = build_pyramid(60.0, 16, 16, 3)
    board = (np.indices((16, 16)).sum(axis=0) % 2).astype(float)
    state = init_state(grids, np.full((16, 16), 0.4), board)
    assert state.levels == 3
    assert all(not np.any(w) for w in state.w)
    assert state.dw[-1] is None and all(not np.any(d) for d in state.dw[:-1])
    np.testing.assert_array_equal(state.rho[1], 0.5)
    np.testing.assert_array_equal(state.rho[2], 0.5)
    for b in state.brightness:
        np.testing.assert_allclose(b, 0.4)

    state = init_state(grids, np.zeros((16, 16)), np.full((16, 16), 0.7))
    for r in state.rho:
        np.testing.assert_allclose(r, 0.7)


def test_static_scene_is_a_fixed_point(rng):
    grids = build_pyramid(60.0, 16, 16, 2)
    image = rng.uniform(size=(16, 16))
    rho = rng.uniform(0.2, 1.0, (16, 16))
    cfg = FilterConfig()
    state = init_state(grids, image, rho)
    for _ in range(3):
        state = filter_step(state, grids, image, rho, cfg)
    assert not np.any(state.flow)
    np.testing.assert_allclose(state.rho[0], rho, atol=1e-15)


def test_single_level_equals_top_pipeline(rng):
    grids = build_pyramid(60.0, 16, 16, 1)
    g = grids[0]
    cfg = FilterConfig(levels=1, smooth_iterations=(2,))
    img0, img1 = rng.uniform(size=(2, 16, 16))
    rho0, rho1 = rng.uniform(0.2, 1.0, (2, 16, 16))
    state = init_state(grids, img0, rho0)
    state = FilterState(
        w=[rng.normal(size=(16, 16, 3)) * 0.1 * g.pixel_separation[..., None]],
        dw=[None], rho=state.rho, brightness=state.brightness,
    )
    got = filter_step(state, grids, img1, rho1, cfg)

    pred = propagate(PropagationBundle(w=state.w[0], rho=state.rho[0], iterations=cfg.iterations(0)), g, flow_limit=cfg.flow_clamp * cfg.max_flow)
    meas = fit_measurements(grids, img1, rho1)
    w = update_top(g, pred.w, state.rho[0], state.brightness[0], meas.brightness[0], meas.inverse_depth[0], cfg, level=0)
    np.testing.assert_allclose(got.w[0], clamp_tangent_flow(g, w, cfg.flow_clamp * cfg.max_flow), atol=0)


def test_zero_increment_reconstructs_upsampled_flow(rng):
    grids = build_pyramid(60.0, 16, 16, 2)
    cfg = FilterConfig(gamma1=0.0, gamma2=0.0, smooth_iterations=(0, 0))
    img = rng.uniform(size=(16, 16))
    rho = rng.uniform(0.2, 1.0, (16, 16))
    state = init_state(grids, img, rho)
    state.w[1] = rng.normal(size=(8, 8, 3)) * 0.05 * grids[1].pixel_separation[..., None]
    state.w[0] = upsample_flow(state.w[1])
    new = filter_step(state, grids, img, rho, cfg)
    np.testing.assert_allclose(new.w[0], upsample_flow(new.w[1]), rtol=0, atol=1e-15)
    assert np.max(np.abs(new.dw[0])) < 1e-15


def test_filter_step_is_deterministic(rng):
    grids = build_pyramid(60.0, 16, 16, 2)
    frames = rng.uniform(size=(3, 16, 16))
    rho = rng.uniform(0.2, 1.0, (3, 16, 16))

    def run():
        f = StructureFlowFilter(grids, FilterConfig())
        for k in range(3):
            f.step(frames[k], rho[k])
        return f.flow, f.inverse_depth

    (a, ra), (b, rb) = run(), run()
    assert a.tobytes() == b.tobytes() and ra.tobytes() == rb.tobytes()


def test_filter_step_input_checks(rng):
    grids = build_pyramid(60.0, 16, 16, 2)
    state = init_state(grids, np.zeros((16, 16)), np.ones((16, 16)))
    with pytest.raises(DataError):
        filter_step(state, grids, np.zeros((8, 8)), np.ones((16, 16)), FilterConfig())
    with pytest.raises(DataError):
        filter_step(state, grids, np.full((16, 16), np.nan), np.ones((16, 16)), FilterConfig())
    with pytest.raises(DataError):
        filter_step(state, grids[:1], np.zeros((16, 16)), np.ones((16, 16)), FilterConfig())


def test_invalid_depth_pixels_keep_prediction(rng):
    grids = build_pyramid(60.0, 16, 16, 1)
    img = rng.uniform(size=(16, 16))
    rho = rng.uniform(0.2, 1.0, (16, 16))
    state = init_state(grids, img, rho)
    valid = np.ones((16, 16), bool)
    valid[5, 5] = False
    new = filter_step(state, grids, img, np.where(valid, rho * 2, np.nan), FilterConfig(levels=1, smooth_iterations=(0,)), valid)
    assert new.rho[0][5, 5] == pytest.approx(rho[5, 5])
    assert new.rho[0][6, 6] == pytest.approx(1.5 * rho[6, 6])


# --------------------------------------------------------------------------
# configuration


def test_config_file_round_trip(tmp_path):
    cfg = FilterConfig(levels=3, gamma1=12.5, smooth_iterations=(1, 2, 3), dominant_rule="largest", smooth_increment=False)
    path = tmp_path / "filter.ini"
    path.write_text(cfg.to_ini())
    assert FilterConfig.from_file(path) == cfg


def test_config_overrides_and_default_smoothing(tmp_path):
    path = tmp_path / "f.ini"
    path.write_text("[filter]\ngamma3 = 2\n")
    cfg = FilterConfig.from_file(path, levels=3, max_flow=None)
    assert cfg.levels == 3 and cfg.gamma3 == 2.0 and cfg.max_flow == 2.0
    assert cfg.smooth_iterations == default_smoothing(3) == (2, 2, 4)


@pytest.mark.parametrize(
    "text",
    [
        "[filter]\nbogus = 1\n",
        "[filter]\ngamma1 = abc\n",
        "[filter]\ngamma3 = 0\n",
        "[filter]\nlevels = 2\nsmooth_iterations = 1\n",
        "[filter]\nsmooth_increment = maybe\n",
        "[other]\nx = 1\n",
    ],
)
def test_config_errors(tmp_path, text):
    path = tmp_path / "bad.ini"
    path.write_text(text)
    with pytest.raises(ConfigurationError):
        FilterConfig.from_file(path)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigurationError) as info:
        FilterConfig.from_file(tmp_path / "nope.ini")
    assert info.value.exit_code == 4


@pytest.mark.parametrize(
    "kwargs",
    [dict(levels=0), dict(gamma1=-1.0), dict(gamma4=0.0, gamma5=0.0), dict(max_flow=0.0), dict(flow_clamp=1.5), dict(dominant_rule="x"), dict(residual_gate=-1.0)],
)
def test_config_validation(kwargs):
    with pytest.raises(ConfigurationError):
        FilterConfig(**kwargs)


def test_level_iterations():
    cfg = FilterConfig(levels=2, max_flow=5.0, smooth_iterations=(2, 4))
    assert cfg.level_max_flow(1) == 2.5
    assert cfg.iterations(0) == 5 and cfg.iterations(1) == 3
