"""Resampling between pyramid levels."""
from __future__ import annotations

import numpy as np

from .errors import DataError


def downsample(raster, validity=None):
    """2x2 block average. Returns ``(coarse, coarse_validity)`` when a mask is given.

    With a validity mask only valid samples enter each average; a coarse pixel
    is valid when at least one of its four children is.
    """
    raster = np.asarray(raster, dtype=np.float64)
    rows, cols = raster.shape[:2]
    if rows % 2 or cols % 2:
        raise DataError(f"cannot halve odd raster of shape {rows}x{cols}")
    shape = (rows // 2, 2, cols // 2, 2) + raster.shape[2:]
    if validity is None:
        return raster.reshape(shape).mean(axis=(1, 3))

    valid = np.asarray(validity, dtype=bool)
    weights = valid.astype(np.float64).reshape(rows // 2, 2, cols // 2, 2)
    count = weights.sum(axis=(1, 3))
    w = weights.reshape(weights.shape + (1,) * (raster.ndim - 2))
    total = (np.where(w > 0, raster.reshape(shape), 0.0) * w).sum(axis=(1, 3))
    c = count.reshape(count.shape + (1,) * (raster.ndim - 2))
    coarse = np.divide(total, c, out=np.zeros_like(total), where=c > 0)
    return coarse, count > 0


def _upsample_axis(a, axis):
    # Fine pixel k sits at coarse coordinate k/2 - 1/4: even children blend
    # 3/4 of their parent with 1/4 of the previous coarse pixel, odd children
    # with the next one. Borders replicate.
    n = a.shape[axis]
    prev = np.take(a, np.clip(np.arange(n) - 1, 0, n - 1), axis=axis)
    nxt = np.take(a, np.clip(np.arange(n) + 1, 0, n - 1), axis=axis)
    even = 0.75 * a + 0.25 * prev
    odd = 0.75 * a + 0.25 * nxt
    out = np.stack([even, odd], axis=axis + 1)
    new_shape = list(a.shape)
    new_shape[axis] = 2 * n
    return out.reshape(new_shape)


def upsample_flow(field):
    """Bilinear 2x upsampling of a raster (scalar or vector valued).

    Structure flow is an angular velocity, so values are interpolated as is,
    without the x2 rescaling pixel displacements would need.
    """
    field = np.asarray(field, dtype=np.float64)
    return _upsample_axis(_upsample_axis(field, 0), 1)


def build_pyramid(raster, levels, validity=None):
    """Finest-first list of rasters (and validity masks when given)."""
    rasters = [np.asarray(raster, dtype=np.float64)]
    masks = [None if validity is None else np.asarray(validity, dtype=bool)]
    for _ in range(levels - 1):
        if validity is None:
            rasters.append(downsample(rasters[-1]))
            masks.append(None)
        else:
            coarse, mask = downsample(rasters[-1], masks[-1])
            rasters.append(coarse)
            masks.append(mask)
    return rasters, masks
