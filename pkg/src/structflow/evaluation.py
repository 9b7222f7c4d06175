"""Error metrics against ground truth and colour encodings of flow fields."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .kinematics import normal_flow, optical_flow_pixels

# Units the metrics are evaluated in; recorded alongside results.
AAE_CONVENTION = "rad/frame, homogeneous 1 under squared norms"


def _check(w_gt, w):
    w_gt = np.asarray(w_gt, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if w_gt.shape != w.shape:
        raise DataError(f"flow shapes differ: {w_gt.shape} vs {w.shape}")
    return w_gt, w


def rmse_field(grid, w_gt, w, units=("rad/frame", "rad/frame")):
    """Per-pixel ``|w_gt - w| / ds`` in pixels.

    ``units`` declares the units of both inputs and must agree.
    """
    if units[0] != units[1]:
        raise DataError(f"unit mismatch: {units[0]} vs {units[1]}")
    w_gt, w = _check(w_gt, w)
    return np.linalg.norm(w_gt - w, axis=-1) / grid.pixel_separation


def aae_field(grid, w_gt, w):
    """Per-pixel angle in degrees between ``(w_gt, 1)`` and ``(w, 1)``.

    Evaluated as ``atan2(|u ^ v|, u . v)``; for ``u = (a, 1)``, ``v = (b, 1)``
    the wedge norm is ``|a x b|^2 + |a - b|^2``, which stays accurate for the
    tiny angles typical of per-frame flow.
    """
    w_gt, w = _check(w_gt, w)
    dot = 1.0 + np.sum(w_gt * w, axis=-1)
    wedge = np.sqrt(np.sum(np.cross(w_gt, w) ** 2, axis=-1) + np.sum((w_gt - w) ** 2, axis=-1))
    return np.degrees(np.arctan2(wedge, dot))


@dataclass
class ErrorSummary:
    rmse: list = field(default_factory=list)
    aae: list = field(default_factory=list)
    frames: list = field(default_factory=list)
    rmse_fields: list = field(default_factory=list)
    aae_fields: list = field(default_factory=list)
    keep_fields: bool = False

    def add(self, grid, w_gt, w, frame=None, mask=None):
        r = rmse_field(grid, w_gt, w)
        a = aae_field(grid, w_gt, w)
        sel = slice(None) if mask is None else mask
        self.rmse.append(float(np.mean(r[sel])))
        self.aae.append(float(np.mean(a[sel])))
        self.frames.append(len(self.frames) if frame is None else frame)
        if self.keep_fields:
            self.rmse_fields.append(r)
            self.aae_fields.append(a)
        return self.rmse[-1], self.aae[-1]

    @property
    def mean_rmse(self):
        return float(np.mean(self.rmse)) if self.rmse else float("nan")

    @property
    def mean_aae(self):
        return float(np.mean(self.aae)) if self.aae else float("nan")

    def window(self, start, stop):
        """Mean RMSE and AAE over frames ``start <= frame < stop``."""
        idx = [k for k, f in enumerate(self.frames) if start <= f < stop]
        if not idx:
            raise DataError(f"no frames in window [{start}, {stop})")
        return (
            float(np.mean([self.rmse[k] for k in idx])),
            float(np.mean([self.aae[k] for k in idx])),
        )

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_HEADER)
            for f, r, a in zip(self.frames, self.rmse, self.aae):
                writer.writerow([f, f"{r:.9g}", f"{a:.9g}"])


CSV_HEADER = ("frame_index", "mean_rmse_px", "mean_aae_deg")


def _hsv_to_rgb(h, s, v):
    # h in [0, 1)
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1 - s)
    q = v * (1 - f * s)
    t = v * (1 - (1 - f) * s)
    choices = [
        np.stack(c, axis=-1)
        for c in ((v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q))
    ]
    out = np.zeros(h.shape + (3,))
    for k in range(6):
        out = np.where((i == k)[..., None], choices[k], out)
    return out


def encode_tangent_flow_colorwheel(grid, w, max_flow=None):
    """Colour-wheel image (uint8 RGB) of the tangent flow in pixels.

    Hue follows the flow direction, saturation grows with magnitude up to
    ``max_flow`` pixels (default: the field's maximum); zero flow is white.
    """
    phi = optical_flow_pixels(grid, w)
    mag = np.hypot(phi[..., 0], phi[..., 1])
    if max_flow is None:
        max_flow = float(mag.max())
    sat = np.clip(mag / max_flow, 0.0, 1.0) if max_flow > 0 else np.zeros_like(mag)
    hue = (np.arctan2(phi[..., 1], phi[..., 0]) / (2 * np.pi)) % 1.0
    rgb = _hsv_to_rgb(hue, sat, np.ones_like(sat))
    return np.round(rgb * 255).astype(np.uint8)


def encode_normal_flow(grid, w, max_flow=None):
    """Signed colour map of normal flow: blue negative, white zero, red positive."""
    n = normal_flow(grid, w)
    if max_flow is None:
        max_flow = float(np.abs(n).max())
    x = np.clip(n / max_flow, -1.0, 1.0) if max_flow > 0 else np.zeros_like(n)
    pos = np.clip(x, 0, 1)
    neg = np.clip(-x, 0, 1)
    rgb = np.stack([1 - neg, 1 - pos - neg, 1 - pos], axis=-1)
    return np.round(rgb * 255).astype(np.uint8)
