"""Pyramidal predictor-update filter for structure flow.

Level indices are 0-based and finest-first: level 0 is full resolution and
level ``H-1`` the coarsest. The coarsest level keeps the structure flow itself
as state; finer levels keep an increment ``dw`` and reconstruct their flow as
``upsample(w[h+1]) + dw[h]``. Flow is stored in rad/frame.
"""
from __future__ import annotations

import configparser
import contextlib
import math
from dataclasses import dataclass, fields

import numba
import numpy as np
from scipy.ndimage import uniform_filter

from .errors import ConfigurationError, DataError
from .measurement import fit_brightness_model, fit_inverse_depth_model
from .propagate import PropagationBundle, choose_iterations, clamp_tangent, propagate
from .pyramid import build_pyramid, upsample_flow


@dataclass
class FilterConfig:
    levels: int = 2
    gamma1: float = 5.0e6
    gamma2: float = 5.0e8
    gamma3: float = 1.0
    gamma4: float = 1.0
    gamma5: float = 1.0
    # box-filter passes per level, finest first
    smooth_iterations: tuple = (2, 4)
    max_flow: float = 2.0
    frame_rate: float = 300.0
    # smooth the increment state dw on lower levels (else the reconstructed flow)
    smooth_increment: bool = True
    dominant_rule: str = "printed"
    # tangent flow is clamped to this fraction of each level's max flow so the
    # propagator's CFL bound holds on the next frame
    flow_clamp: float = 0.98
    # drop a data term where no flow within gate * max flow can explain its
    # temporal change (occlusion, disocclusion); 0 disables
    residual_gate: float = 1.0

    def __post_init__(self):
        self.smooth_iterations = tuple(int(n) for n in self.smooth_iterations)
        self.validate()

    def validate(self):
        if self.levels < 1:
            raise ConfigurationError("levels must be >= 1")
        gains = [self.gamma1, self.gamma2, self.gamma3, self.gamma4, self.gamma5]
        if any(not np.isfinite(g) or g < 0 for g in gains):
            raise ConfigurationError("gains must be finite and non-negative")
        if self.gamma3 <= 0:
            raise ConfigurationError("gamma3 must be positive")
        if self.gamma4 + self.gamma5 <= 0:
            raise ConfigurationError("gamma4 + gamma5 must be positive")
        if len(self.smooth_iterations) != self.levels:
            raise ConfigurationError(
                f"need {self.levels} smooth iteration counts, got {len(self.smooth_iterations)}"
            )
        if any(n < 0 for n in self.smooth_iterations):
            raise ConfigurationError("smooth iterations must be non-negative")
        if not self.max_flow > 0:
            raise ConfigurationError("max_flow must be positive")
        if not self.frame_rate > 0:
            raise ConfigurationError("frame_rate must be positive")
        if not 0 < self.flow_clamp <= 1:
            raise ConfigurationError("flow_clamp must lie in (0, 1]")
        if not (np.isfinite(self.residual_gate) and self.residual_gate >= 0):
            raise ConfigurationError("residual_gate must be finite and non-negative")
        if self.dominant_rule not in ("printed", "largest"):
            raise ConfigurationError(f"unknown dominant_rule {self.dominant_rule!r}")

    def level_max_flow(self, level):
        return self.max_flow / 2**level

    def iterations(self, level):
        return choose_iterations(self.level_max_flow(level))

    @classmethod
    def from_file(cls, path, **overrides):
        """Read an INI file with a ``[filter]`` section (see README for keys)."""
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise ConfigurationError(f"cannot read config file {path}")
        return cls.from_parser(parser, **overrides)

    @classmethod
    def from_parser(cls, parser, **overrides):
        if not parser.has_section("filter"):
            raise ConfigurationError("config file has no [filter] section")
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in parser.items("filter"):
            if key not in known:
                raise ConfigurationError(f"unknown filter option {key!r}")
            try:
                kwargs[key] = _parse_value(key, raw)
            except ValueError as exc:
                raise ConfigurationError(f"bad value for {key}: {raw!r}") from exc
        kwargs.update({k: v for k, v in overrides.items() if v is not None})
        if "levels" in kwargs and "smooth_iterations" not in kwargs:
            kwargs["smooth_iterations"] = default_smoothing(kwargs["levels"])
        return cls(**kwargs)

    def to_ini(self):
        lines = ["[filter]"]
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ", ".join(str(v) for v in value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


def default_smoothing(levels):
    if levels == 1:
        return (2,)
    return (2,) * (levels - 1) + (4,)


def _parse_value(key, raw):
    raw = raw.strip()
    if key == "smooth_iterations":
        return tuple(int(v) for v in raw.replace(",", " ").split())
    if key == "levels":
        return int(raw)
    if key == "smooth_increment":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(raw)
    if key == "dominant_rule":
        return raw
    return float(raw)


@dataclass
class FilterState:
    """Per-level filter state, finest level first.

    ``dw[h]`` is ``None`` on the coarsest level, whose state is ``w[-1]``. For
    the other levels ``w[h]`` caches the reconstructed flow.
    """

    w: list
    dw: list
    rho: list
    brightness: list
    frame: int = 0

    @property
    def levels(self):
        return len(self.w)

    @property
    def flow(self):
        return self.w[0]


@dataclass
class Measurements:
    brightness: list
    inverse_depth: list


def _check_inputs(grids, image, rho, validity):
    shape = grids[0].shape
    image = np.asarray(image, dtype=np.float64)
    rho = np.asarray(rho, dtype=np.float64)
    if image.shape != shape:
        raise DataError(f"image shape {image.shape} does not match grid {shape}")
    if rho.shape != shape:
        raise DataError(f"inverse depth shape {rho.shape} does not match grid {shape}")
    if validity is None:
        validity = np.isfinite(rho) & (rho >= 0)
    else:
        validity = np.asarray(validity, dtype=bool)
        if validity.shape != shape:
            raise DataError("validity mask shape does not match grid")
        validity = validity & np.isfinite(rho)
    rho = np.where(validity, rho, 0.0)
    if not np.all(np.isfinite(image)):
        raise DataError("image contains non-finite values")
    return image, rho, validity


def fit_measurements(grids, image, rho, validity=None):
    """Image and inverse-depth pyramids with per-level model fits."""
    image, rho, validity = _check_inputs(grids, image, rho, validity)
    levels = len(grids)
    images, _ = build_pyramid(image, levels)
    rhos, masks = build_pyramid(rho, levels, validity)
    return Measurements(
        brightness=[fit_brightness_model(g, y) for g, y in zip(grids, images)],
        inverse_depth=[fit_inverse_depth_model(g, r, m) for g, r, m in zip(grids, rhos, masks)],
    )


def init_state(grids, first_image, first_rho, validity=None):
    """Zero flow; inverse depth and brightness constants from the first frame."""
    meas = fit_measurements(grids, first_image, first_rho, validity)
    return FilterState(
        w=[np.zeros(g.shape + (3,)) for g in grids],
        dw=[np.zeros(g.shape + (3,)) for g in grids[:-1]] + [None],
        rho=[m.constant.copy() for m in meas.inverse_depth],
        brightness=[m.constant.copy() for m in meas.brightness],
    )


# --------------------------------------------------------------------------
# per-pixel least squares


@numba.njit(parallel=True, cache=True)
def _solve_kernel(prior, g_y, c_y, m, c_rho, gamma1, gamma2, gamma3, out):
    for p in numba.prange(prior.shape[0]):
        r1 = math.sqrt(gamma1[p])
        r2 = math.sqrt(gamma2[p])
        u1 = np.empty(3)
        u2 = np.empty(3)
        b = np.empty(3)
        for k in range(3):
            u1[k] = r1 * g_y[p, k]
            u2[k] = r2 * m[p, k]
        e1 = r1 * c_y[p]
        e2 = r2 * c_rho[p]
        a11 = gamma3
        a22 = gamma3
        a12 = 0.0
        for k in range(3):
            b[k] = gamma3 * prior[p, k] - u1[k] * e1 - u2[k] * e2
            a11 += u1[k] * u1[k]
            a22 += u2[k] * u2[k]
            a12 += u1[k] * u2[k]
        p1 = 0.0
        p2 = 0.0
        for k in range(3):
            p1 += u1[k] * b[k]
            p2 += u2[k] * b[k]
        det = a11 * a22 - a12 * a12
        z1 = (a22 * p1 - a12 * p2) / det
        z2 = (a11 * p2 - a12 * p1) / det
        for k in range(3):
            out[p, k] = (b[k] - u1[k] * z1 - u2[k] * z2) / gamma3


def solve_regularised(prior, g_y, c_y, m, c_rho, gamma1, gamma2, gamma3):
    """Pixelwise minimiser of
    ``gamma1 (g_y.x + c_y)^2 + gamma2 (m.x + c_rho)^2 + gamma3 |x - prior|^2``.

    ``gamma1`` and ``gamma2`` may be arrays to switch data terms off per pixel. The
    normal matrix ``gamma3 I + U U^T`` with ``U = [sqrt(gamma1) g_y, sqrt(gamma2) m]``
    is inverted in closed form through its 2x2 capacitance matrix.
    """
    shape = np.shape(c_y)

    def flat(a, tail=()):
        a = np.broadcast_to(np.asarray(a, dtype=np.float64), shape + tail)
        return np.ascontiguousarray(a.reshape((-1,) + tail))

    out = np.empty((int(np.prod(shape)), 3))
    _solve_kernel(
        flat(prior, (3,)), flat(g_y, (3,)), flat(c_y), flat(m, (3,)), flat(c_rho),
        flat(gamma1), flat(gamma2), float(gamma3), out,
    )
    return out.reshape(shape + (3,))


def normal_matrix(g_y, m, gamma1, gamma2, gamma3):
    """Assembled per-pixel 3x3 matrix ``A`` of the update (for diagnostics)."""
    eye = np.eye(3)
    return (
        gamma1 * g_y[..., :, None] * g_y[..., None, :]
        + gamma2 * m[..., :, None] * m[..., None, :]
        + gamma3 * eye
    )


def depth_direction(grid, rho_model):
    """``m = P d_rho + ds^2 rho s``: how ``w`` enters the inverse-depth residual."""
    ds2 = grid.pixel_separation**2
    return rho_model.gradient + (ds2 * rho_model.constant)[..., None] * grid.direction


def smooth(field, iterations):
    """Repeated 5x5 box average with replicated borders."""
    size = (5, 5) + (1,) * (field.ndim - 2)
    for _ in range(iterations):
        field = uniform_filter(field, size=size, mode="nearest")
    return field


def gate_gain(gain, direction, constant, bound):
    """``gain`` where ``|direction . x + constant| = 0`` has a solution with
    ``|x| <= bound``, zero elsewhere. ``bound=None`` keeps every term."""
    gain = np.broadcast_to(np.asarray(gain, dtype=np.float64), np.shape(constant))
    if bound is None:
        return gain
    reachable = np.abs(constant) <= np.linalg.norm(direction, axis=-1) * bound
    return np.where(reachable, gain, 0.0)


def _gains(grid, config, g_y, c_y, m, c_rho, validity, level):
    bound = None
    if config.residual_gate > 0 and level is not None:
        bound = config.residual_gate * config.level_max_flow(level) * grid.pixel_separation
    gamma2 = np.where(validity, config.gamma2, 0.0)
    return gate_gain(config.gamma1, g_y, c_y, bound), gate_gain(gamma2, m, c_rho, bound)


def update_top(grid, w_pred, rho_prev, brightness_prev, bright_model, rho_model, config, smooth_iterations=None, level=None):
    """Coarsest-level flow update from the predicted flow and new measurements.

    ``rho_prev`` and ``brightness_prev`` are the state inverse depth and the
    brightness constants of the previous frame (not propagated).
    """
    ds2 = grid.pixel_separation**2
    c_y = ds2 * (bright_model.constant - brightness_prev)
    c_rho = ds2 * (rho_model.constant - rho_prev)
    m = depth_direction(grid, rho_model)
    gamma1, gamma2 = _gains(grid, config, bright_model.gradient, c_y, m, c_rho, rho_model.validity, level)
    w = solve_regularised(w_pred, bright_model.gradient, c_y, m, c_rho, gamma1, gamma2, config.gamma3)
    if smooth_iterations is None:
        smooth_iterations = config.smooth_iterations[-1]
    return smooth(w, smooth_iterations)


def update_lower(grid, dw_pred, brightness_pred, rho_pred, bright_model, rho_model, config, smooth_iterations=0, level=None):
    """Flow increment update on a finer level.

    The references are the propagated brightness and inverse depth, which
    already account for the current increment ``dw_pred``; the data terms
    therefore constrain the change ``dw - dw_pred``, and the regulariser keeps
    ``dw`` near ``dw_pred``.
    """
    ds2 = grid.pixel_separation**2
    c_y = ds2 * (bright_model.constant - brightness_pred)
    c_rho = ds2 * (rho_model.constant - rho_pred)
    m = depth_direction(grid, rho_model)
    gamma1, gamma2 = _gains(grid, config, bright_model.gradient, c_y, m, c_rho, rho_model.validity, level)
    delta = solve_regularised(
        np.zeros_like(dw_pred), bright_model.gradient, c_y, m, c_rho, gamma1, gamma2, config.gamma3,
    )
    return smooth(dw_pred + delta, smooth_iterations)


def update_inverse_depth(rho_pred, rho_meas, validity, gamma4, gamma5):
    """Convex blend of measurement and prediction; prediction only where invalid."""
    g4 = np.where(validity, gamma4, 0.0)
    total = g4 + gamma5
    blend = (g4 * rho_meas + gamma5 * rho_pred) / np.where(total > 0, total, 1.0)
    return np.where(total > 0, blend, rho_pred)


# --------------------------------------------------------------------------
# the filter loop


class _NullTimer:
    def stage(self, name):
        return contextlib.nullcontext()


def filter_step(state, grids, image, rho, config, validity=None, timer=None):
    """Advance ``state`` by one frame of measurements; returns the new state."""
    timer = timer or _NullTimer()
    H = config.levels
    if len(grids) != H or state.levels != H:
        raise DataError(f"expected {H} grid levels, got {len(grids)} grids / {state.levels} state levels")

    with timer.stage("measurement models"):
        meas = fit_measurements(grids, image, rho, validity)

    new_w = [None] * H
    new_dw = [None] * H
    new_rho = [None] * H
    top = H - 1
    gtop = grids[top]

    with timer.stage(f"predict L{top}"):
        pred = propagate(
            PropagationBundle(w=state.w[top], rho=state.rho[top], iterations=config.iterations(top)),
            gtop,
            rule=config.dominant_rule,
            flow_limit=config.flow_clamp * config.level_max_flow(top),
        )
    with timer.stage(f"update L{top}"):
        w = update_top(
            gtop, pred.w, state.rho[top], state.brightness[top],
            meas.brightness[top], meas.inverse_depth[top], config, level=top,
        )
        new_w[top] = clamp_tangent(gtop, w, config.flow_clamp * config.level_max_flow(top))
        rm = meas.inverse_depth[top]
        new_rho[top] = update_inverse_depth(pred.rho, rm.constant, rm.validity, config.gamma4, config.gamma5)

    for h in range(top - 1, -1, -1):
        grid = grids[h]
        base = upsample_flow(new_w[h + 1])
        with timer.stage(f"predict L{h}"):
            # advect with the flow reconstructed from the freshly updated coarser level
            pred = propagate(
                PropagationBundle(
                    w=base + state.dw[h], dw=state.dw[h], rho=state.rho[h], Y=state.brightness[h],
                    iterations=config.iterations(h),
                ),
                grid,
                rule=config.dominant_rule,
                flow_limit=config.flow_clamp * config.level_max_flow(h),
            )
        with timer.stage(f"update L{h}"):
            n_smooth = config.smooth_iterations[h]
            dw = update_lower(
                grid, pred.dw, pred.Y, pred.rho,
                meas.brightness[h], meas.inverse_depth[h], config,
                smooth_iterations=n_smooth if config.smooth_increment else 0, level=h,
            )
            w = base + dw
            if not config.smooth_increment:
                w = smooth(w, n_smooth)
            w = clamp_tangent(grid, w, config.flow_clamp * config.level_max_flow(h))
            new_w[h] = w
            new_dw[h] = w - base
            rm = meas.inverse_depth[h]
            new_rho[h] = update_inverse_depth(pred.rho, rm.constant, rm.validity, config.gamma4, config.gamma5)

    return FilterState(
        w=new_w,
        dw=new_dw,
        rho=new_rho,
        brightness=[m.constant for m in meas.brightness],
        frame=state.frame + 1,
    )


class StructureFlowFilter:
    """Stateful convenience wrapper: ``step(image, rho)`` returns full-res flow."""

    def __init__(self, grids, config=None):
        self.grids = list(grids)
        self.config = config or FilterConfig(levels=len(self.grids), smooth_iterations=default_smoothing(len(self.grids)))
        if self.config.levels != len(self.grids):
            raise ConfigurationError("config levels do not match the grid pyramid")
        self.state = None

    def step(self, image, rho, validity=None, timer=None):
        if self.state is None:
            self.state = init_state(self.grids, image, rho, validity)
        else:
            self.state = filter_step(self.state, self.grids, image, rho, self.config, validity, timer)
        return self.state.flow

    @property
    def flow(self):
        return None if self.state is None else self.state.flow

    @property
    def inverse_depth(self):
        return None if self.state is None else self.state.rho[0]
