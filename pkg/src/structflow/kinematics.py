"""Closed-form structure flow relations on a :class:`SphereGrid`.

Structure flow ``w`` is scene flow divided by range. All functions operate on
whole rasters; flow fields are ``(rows, cols, 3)`` arrays and depth/inverse
depth ``(rows, cols)``. Units follow the inputs: feed rad/s and get rad/s, or
feed per-frame quantities and get per-frame results.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError


@dataclass
class CameraMotion:
    """Camera velocities expressed in the camera frame."""

    v_c: np.ndarray = (0.0, 0.0, 0.0)
    omega: np.ndarray = (0.0, 0.0, 0.0)
    a_c: np.ndarray = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.v_c = np.asarray(self.v_c, dtype=np.float64).reshape(3)
        self.omega = np.asarray(self.omega, dtype=np.float64).reshape(3)
        self.a_c = np.asarray(self.a_c, dtype=np.float64).reshape(3)
        if not all(np.all(np.isfinite(x)) for x in (self.v_c, self.omega, self.a_c)):
            raise DataError("camera motion must be finite")


def _dot(a, b):
    return np.sum(a * b, axis=-1)


def rotational_flow(grid, omega):
    """``-omega x s`` at every pixel."""
    return -np.cross(np.asarray(omega, dtype=np.float64), grid.direction)


def structure_flow_ground_truth(grid, depth, cam, scene_velocity=None):
    """``w = -omega x s + (v_x - v_c) / depth``.

    ``scene_velocity`` is the per-pixel velocity of the observed point in the
    camera frame, shape (rows, cols, 3) or a single 3-vector; ``None`` means a
    static scene.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != grid.shape:
        raise DataError(f"depth shape {depth.shape} does not match grid {grid.shape}")
    if not np.all(depth > 0):
        raise DataError("depth must be strictly positive everywhere")
    rel = -cam.v_c
    if scene_velocity is not None:
        rel = np.asarray(scene_velocity, dtype=np.float64) - cam.v_c
    rel = np.broadcast_to(rel, grid.direction.shape)
    return rotational_flow(grid, cam.omega) + rel / depth[..., None]


def optical_flow_pixels(grid, w):
    """Tangent flow in 2D pixel units, ``B^T P w / ds`` (column, row order)."""
    return grid.to_beta(w) / grid.pixel_separation[..., None]


def normal_flow(grid, w):
    """Component of ``w`` along the viewing direction, in pixels."""
    return _dot(grid.direction, w) / grid.pixel_separation


def clamp_tangent_flow(grid, w, limit):
    """Scale down the tangent part of ``w`` where its optical flow exceeds ``limit`` px."""
    s = grid.direction
    radial = np.sum(s * w, axis=-1, keepdims=True)
    tangent = w - radial * s
    pixels = np.linalg.norm(tangent, axis=-1) / grid.pixel_separation
    scale = np.minimum(1.0, limit / np.maximum(pixels, 1e-300))
    return radial * s + tangent * scale[..., None]


def flow_split(grid, w, cam):
    """Rotational and stabilised parts ``(w_r, w_s)`` with ``w_r + w_s = w``."""
    w_r = rotational_flow(grid, cam.omega)
    return w_r, w - w_r


def source_term(grid, rho, w, cam):
    """Per-pixel ``omega x w - a_w`` with ``a_w = rho a_c - omega x (w + omega x s)``.

    This is the exogenous part of the structure flow evolution that the
    predictor drops. Inputs in SI units (rad/s, m/s^2) give rad/s^2.
    """
    rho = np.asarray(rho, dtype=np.float64)
    omega = cam.omega
    om_x_s = np.cross(omega, grid.direction)
    a_w = rho[..., None] * cam.a_c - np.cross(omega, w + om_x_s)
    return np.cross(omega, w) - a_w


def per_frame(w, frame_rate):
    """Convert a rad/s field to rad/frame."""
    return np.asarray(w) / float(frame_rate)


def per_second(w, frame_rate):
    return np.asarray(w) * float(frame_rate)
