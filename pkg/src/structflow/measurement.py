"""Per-pixel linear models of brightness and inverse depth.

Both fits return a 3D tangent gradient (already scaled by the pixel separation,
so that ``gradient . P w`` equals ``ds**2`` times the per-pixel rate) and a
constant term.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .errors import DataError

# 5-tap binomial weights. The 5x5 weighted affine fit
#     min_{g, c} sum_q G(q) (Y[p+q] - g.q - c)^2,   G = g g^T
# has a diagonal normal matrix because G is even in each axis: the cross terms
# sum G q_1, sum G q_2 and sum G q_1 q_2 all vanish. Hence
#     c   = sum G Y           (the smoothing kernel)
#     g_1 = sum G q_1 Y / sum G q_1^2
# and sum_x g(x) x^2 = (4 + 4 + 4 + 4) / 16 = 1, so the derivative taps are
# simply g(x) * x.
SMOOTH_TAPS = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
DERIV_TAPS = SMOOTH_TAPS * np.arange(-2.0, 3.0)


@dataclass
class BrightnessModel:
    gradient: np.ndarray  # (rows, cols, 3), tangent
    constant: np.ndarray  # (rows, cols)
    beta_gradient: np.ndarray  # (rows, cols, 2), brightness per pixel


@dataclass
class InverseDepthModel:
    gradient: np.ndarray  # (rows, cols, 3), tangent
    constant: np.ndarray  # (rows, cols)
    validity: np.ndarray  # (rows, cols) bool
    beta_gradient: np.ndarray  # (rows, cols, 2)


def _check_raster(grid, raster, name):
    raster = np.asarray(raster, dtype=np.float64)
    if raster.shape != grid.shape:
        raise DataError(f"{name} shape {raster.shape} does not match grid {grid.shape}")
    return raster


def _lift(grid, beta):
    return grid.pixel_separation[..., None] * grid.from_beta(beta)


def fit_brightness_model(grid, image):
    image = _check_raster(grid, image, "image")
    # axis 1 is the column (beta_1) direction, axis 0 the row (beta_2) direction
    smooth_rows = correlate1d(image, SMOOTH_TAPS, axis=0, mode="nearest")
    constant = correlate1d(smooth_rows, SMOOTH_TAPS, axis=1, mode="nearest")
    g1 = correlate1d(smooth_rows, DERIV_TAPS, axis=1, mode="nearest")
    g2 = correlate1d(
        correlate1d(image, SMOOTH_TAPS, axis=1, mode="nearest"),
        DERIV_TAPS,
        axis=0,
        mode="nearest",
    )
    beta = np.stack([g1, g2], axis=-1)
    return BrightnessModel(gradient=_lift(grid, beta), constant=constant, beta_gradient=beta)


def one_sided_differences(values, valid, axis):
    """Forward and backward differences along ``axis``.

    Returns ``(forward, backward, has_forward, has_backward)``; a side is
    missing at the raster border or when the neighbour is invalid.
    """
    n = values.shape[axis]
    fwd = np.zeros_like(values)
    bwd = np.zeros_like(values)
    has_f = np.zeros(values.shape, dtype=bool)
    has_b = np.zeros(values.shape, dtype=bool)

    def sl(a, b):
        idx = [slice(None)] * values.ndim
        idx[axis] = slice(a, b)
        return tuple(idx)

    diff = values[sl(1, n)] - values[sl(0, n - 1)]
    pair_ok = valid[sl(1, n)] & valid[sl(0, n - 1)]
    fwd[sl(0, n - 1)] = diff
    has_f[sl(0, n - 1)] = pair_ok
    bwd[sl(1, n)] = diff
    has_b[sl(1, n)] = pair_ok
    return fwd, bwd, has_f, has_b


def select_smaller_difference(fwd, bwd, has_f, has_b):
    """Occlusion-aware gradient: the one-sided difference of smaller magnitude."""
    take_fwd = np.abs(fwd) <= np.abs(bwd)
    take_fwd = (take_fwd & has_f) | (has_f & ~has_b)
    out = np.where(take_fwd, fwd, bwd)
    return np.where(has_f | has_b, out, 0.0)


def fit_inverse_depth_model(grid, rho, validity=None):
    rho = _check_raster(grid, rho, "inverse depth")
    if validity is None:
        validity = np.isfinite(rho)
    validity = np.asarray(validity, dtype=bool) & np.isfinite(rho)
    if np.any(rho[validity] < 0):
        raise DataError("inverse depth must be non-negative where valid")
    values = np.where(validity, rho, 0.0)

    comps = []
    for axis in (1, 0):
        comps.append(select_smaller_difference(*one_sided_differences(values, validity, axis)))
    beta = np.stack(comps, axis=-1)
    beta[~validity] = 0.0
    return InverseDepthModel(
        gradient=_lift(grid, beta), constant=values, validity=validity, beta_gradient=beta
    )
