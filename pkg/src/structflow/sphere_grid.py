"""Spherical pixel grid: per-pixel viewing directions and tangent-plane bases.

Rasters throughout the package are indexed ``[row, col]``. Column index ``j``
runs along the first tangent coordinate (beta_1) and row index ``i`` along the
second (beta_2). The camera frame is x right, y down, z forward.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError


def tangent_projection(s):
    """Orthogonal projector ``I - s s^T`` onto the tangent plane at unit ``s``."""
    s = np.asarray(s, dtype=np.float64)
    return np.eye(3) - np.outer(s, s)


def _normalize(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _project(s, v):
    # P(s) v for stacked vectors
    return v - s * np.sum(s * v, axis=-1, keepdims=True)


@dataclass(frozen=True, eq=False)
class SphereGrid:
    """Immutable per-pixel geometry of one grid level.

    Attributes
    ----------
    direction : (rows, cols, 3) unit viewing directions ``s_ij``
    basis : (rows, cols, 3, 2) orthonormal tangent bases ``B(s_ij)``;
        column 0 points towards increasing ``j``, column 1 towards increasing ``i``
    pixel_separation : (rows, cols) angular spacing ``ds_ij`` in radians
    """

    fov: float
    direction: np.ndarray = field(repr=False)
    basis: np.ndarray = field(repr=False)
    pixel_separation: np.ndarray = field(repr=False)

    @property
    def shape(self):
        return self.direction.shape[:2]

    @property
    def height(self):
        return self.direction.shape[0]

    @property
    def width(self):
        return self.direction.shape[1]

    def _check_index(self, i, j):
        if not (0 <= i < self.height and 0 <= j < self.width):
            raise IndexError(f"pixel ({i}, {j}) outside {self.height}x{self.width} grid")

    def projector(self, i, j):
        self._check_index(i, j)
        return tangent_projection(self.direction[i, j])

    def beta_to_mu(self, i, j, beta):
        """Lift 2D tangent coordinates at pixel ``(i, j)`` to a 3D tangent vector."""
        self._check_index(i, j)
        return self.basis[i, j] @ np.asarray(beta, dtype=np.float64)

    def mu_to_beta(self, i, j, mu):
        """2D coordinates of a vector in the tangent plane of pixel ``(i, j)``.

        The input is projected onto the tangent plane first, so any normal
        component is discarded.
        """
        self._check_index(i, j)
        mu = tangent_projection(self.direction[i, j]) @ np.asarray(mu, dtype=np.float64)
        return self.basis[i, j].T @ mu

    def to_beta(self, field3):
        """Vectorised ``B^T P w`` over a (rows, cols, 3) field."""
        tangent = _project(self.direction, field3)
        return np.einsum("ijkl,ijk->ijl", self.basis, tangent)

    def from_beta(self, field2):
        """Vectorised ``B beta`` over a (rows, cols, 2) field."""
        return np.einsum("ijkl,ijl->ijk", self.basis, field2)

    def as_channels(self):
        """Pack the grid as a (rows, cols, 10) raster: direction, basis, ds."""
        rows, cols = self.shape
        return np.concatenate(
            [
                self.direction,
                self.basis.reshape(rows, cols, 6),
                self.pixel_separation[..., None],
            ],
            axis=-1,
        )


def _neighbour_axis(s, axis):
    """Unit tangent towards the next pixel along ``axis``, plus its spacing.

    The last row/column has no forward neighbour; the backward neighbour is used
    there and the tangent is negated so it still points towards increasing index.
    """
    fwd = np.roll(s, -1, axis=axis)
    bwd = np.roll(s, 1, axis=axis)
    last = [slice(None)] * 2
    last[axis] = -1
    last = tuple(last)

    t = _project(s, fwd)
    t[last] = -_project(s[last], bwd[last])
    ds = np.linalg.norm(t, axis=-1)
    return t / ds[..., None], ds


def build_gnomonic_patch(fov, rows, cols):
    """Grid for a single perspective patch centred on the optical axis.

    ``fov`` is the horizontal field of view in degrees; pixels are square on
    the image plane, so the vertical extent follows from ``rows / cols``.
    """
    if not (0.0 < fov < 180.0) or not math.isfinite(fov):
        raise ConfigurationError(f"field of view must lie in (0, 180) degrees, got {fov}")
    if rows < 3 or cols < 3:
        raise ConfigurationError(f"grid resolution {rows}x{cols} is degenerate")

    step = 2.0 * math.tan(math.radians(fov) / 2.0) / cols
    x = (np.arange(cols) - (cols - 1) / 2.0) * step
    y = (np.arange(rows) - (rows - 1) / 2.0) * step
    xx, yy = np.meshgrid(x, y)
    s = _normalize(np.stack([xx, yy, np.ones_like(xx)], axis=-1))

    b1, ds = _neighbour_axis(s, axis=1)
    b2, _ = _neighbour_axis(s, axis=0)

    # Symmetric orthonormalisation keeps b1/b2 equally close to the raw
    # neighbour directions, which preserves the grid's mirror symmetries.
    u = _normalize(b1 + b2)
    v = _normalize(b1 - b2)
    basis = np.stack([(u + v) / math.sqrt(2.0), (u - v) / math.sqrt(2.0)], axis=-1)

    for arr in (s, basis, ds):
        arr.setflags(write=False)
    return SphereGrid(fov=float(fov), direction=s, basis=basis, pixel_separation=ds)


def build_pyramid(fov, rows, cols, levels):
    """Grids for ``levels`` pyramid levels, finest first; each level halves both axes."""
    if levels < 1:
        raise ConfigurationError("pyramid needs at least one level")
    grids = []
    for h in range(levels):
        if h > 0 and (rows % 2 or cols % 2):
            raise ConfigurationError(
                f"level {h - 1} size {rows}x{cols} is odd and cannot be halved"
            )
        if h > 0:
            rows, cols = rows // 2, cols // 2
        grids.append(build_gnomonic_patch(fov, rows, cols))
    return grids
