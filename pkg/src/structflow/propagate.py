"""Upwind integration of the structure flow transport equations over one frame.

Every field ``f`` in the bundle obeys

    df/dt = -(grad f) . Phi - f <s, w>        (w, dw, rho)
    dY/dt = -(grad Y) . Phi                    (brightness)

where ``Phi`` is the optical flow of the advecting structure flow ``w`` in
pixels per frame. One frame is split into ``N`` substeps of ``dt = 1/N``; each
substep advects along columns first, then along rows. The ``-f <s, w>`` source
is applied once per substep, in the column pass; applying it in both passes
would square the per-substep decay factor.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, replace

import numba
import numpy as np

from .errors import ConfigurationError, StabilityError

_CFL_SLACK = 1e-12

if "NUMBA_THREADING_LAYER" not in os.environ:
    # prefer layers that need no version-pinned runtime
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]


@dataclass
class PropagationBundle:
    w: np.ndarray
    rho: np.ndarray
    dw: np.ndarray | None = None
    Y: np.ndarray | None = None
    iterations: int = 1

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigurationError("propagation needs at least one iteration")


def choose_iterations(max_flow_pixels):
    """Smallest substep count keeping ``dt * max_flow <= 1``."""
    if not max_flow_pixels > 0:
        raise ConfigurationError(f"max flow must be positive, got {max_flow_pixels}")
    return max(1, math.ceil(max_flow_pixels))


def _shift(a, offset, axis):
    """``a`` sampled at ``index + offset`` along ``axis`` with replicated borders."""
    n = a.shape[axis]
    idx = np.clip(np.arange(n) + offset, 0, n - 1)
    return np.take(a, idx, axis=axis)


def dominant_optical_flow(component, axis, rule="printed"):
    """Neighbour flow component used to linearise self-advection along ``axis``.

    ``component`` is the optical flow component aligned with ``axis`` (u for
    columns, axis=1; v for rows, axis=0). With ``rule="printed"`` pixel ``k``
    takes the component at ``k-1`` when ``|c[k+1]| - |c[k-1]| > 0`` and at ``k+1``
    otherwise; ``rule="largest"`` takes the larger-magnitude neighbour instead.
    """
    prev = _shift(component, -1, axis)
    nxt = _shift(component, 1, axis)
    rising = (np.abs(nxt) - np.abs(prev)) > 0
    if rule == "printed":
        return np.where(rising, prev, nxt)
    if rule == "largest":
        return np.where(rising, nxt, prev)
    raise ConfigurationError(f"unknown dominant flow rule {rule!r}")


def _one_sided(f, axis):
    # replicate ghost cells: the missing side differences to zero
    f = np.moveaxis(f, axis, 0)
    backward = np.zeros_like(f)
    forward = np.zeros_like(f)
    np.subtract(f[1:], f[:-1], out=backward[1:])
    forward[:-1] = backward[1:]
    return np.moveaxis(backward, 0, axis), np.moveaxis(forward, 0, axis)


def upwind_diff(f, dominant, axis):
    """Backward difference where ``dominant > 0``, forward difference elsewhere."""
    backward, forward = _one_sided(f, axis)
    mask = dominant > 0
    if f.ndim == mask.ndim + 1:
        mask = mask[..., None]
    return np.where(mask, backward, forward)


def _check_cfl(dominant, dt):
    peak = float(np.max(np.abs(dominant))) if dominant.size else 0.0
    if not np.isfinite(peak) or dt * peak > 1.0 + _CFL_SLACK:
        raise StabilityError(
            f"CFL violated: dt * max dominant flow = {dt * peak:.6g} > 1 "
            f"(max flow {peak:.6g} px)",
            magnitude=peak,
        )


@numba.njit(parallel=True, cache=True)
def _advect_kernel(stack, sourced, dominant, radial, use_source, dt, axis, out):
    rows, cols, channels = stack.shape
    for i in numba.prange(rows):
        for j in range(cols):
            u = dominant[i, j]
            for k in range(channels):
                f = stack[i, j, k]
                d = 0.0
                if axis == 1:
                    if u > 0:
                        if j > 0:
                            d = f - stack[i, j - 1, k]
                    elif j < cols - 1:
                        d = stack[i, j + 1, k] - f
                else:
                    if u > 0:
                        if i > 0:
                            d = f - stack[i - 1, j, k]
                    elif i < rows - 1:
                        d = stack[i + 1, j, k] - f
                step = u * d
                if use_source and k < sourced:
                    step += f * radial[i, j]
                out[i, j, k] = f - dt * step


def _advect(stack, sourced, dominant, radial, dt, axis):
    """One upwind pass over a channel stack; ``radial=None`` skips the source.

    Borders use replicated ghost cells, so the missing one-sided difference is
    zero. Matches ``f - dt * (dominant * upwind_diff(f) + f * radial)``
    channel by channel, with the source on the first ``sourced`` channels.
    """
    out = np.empty_like(stack)
    use_source = radial is not None
    if radial is None:
        radial = dominant  # unused placeholder keeps the kernel signature fixed
    _advect_kernel(stack, sourced, dominant, radial, use_source, dt, axis, out)
    return out


def _flow_component(grid, w, comp):
    # B is orthogonal to s, so the projection P drops out of B^T P w
    return np.einsum("ijk,ijk->ij", grid.basis[..., comp], w) / grid.pixel_separation


@numba.njit(parallel=True, cache=True)
def _pass_coefficients(stack, direction, basis_c, ds, axis, largest, comp, dom, radial):
    """Flow component along ``axis``, its dominant neighbour value and ``<s, w>``."""
    rows, cols = ds.shape
    for i in numba.prange(rows):
        for j in range(cols):
            c = 0.0
            r = 0.0
            for k in range(3):
                c += basis_c[i, j, k] * stack[i, j, k]
                r += direction[i, j, k] * stack[i, j, k]
            comp[i, j] = c / ds[i, j]
            radial[i, j] = r
    for i in numba.prange(rows):
        for j in range(cols):
            if axis == 1:
                prev = comp[i, max(j - 1, 0)]
                nxt = comp[i, min(j + 1, cols - 1)]
            else:
                prev = comp[max(i - 1, 0), j]
                nxt = comp[min(i + 1, rows - 1), j]
            rising = abs(nxt) - abs(prev) > 0
            if rising != largest:
                dom[i, j] = prev
            else:
                dom[i, j] = nxt


@numba.njit(parallel=True, cache=True)
def _clamp_kernel(stack, direction, ds, limit):
    rows, cols = ds.shape
    for i in numba.prange(rows):
        for j in range(cols):
            r = 0.0
            for k in range(3):
                r += direction[i, j, k] * stack[i, j, k]
            t2 = 0.0
            for k in range(3):
                t = stack[i, j, k] - r * direction[i, j, k]
                t2 += t * t
            pixels = math.sqrt(t2) / ds[i, j]
            if pixels > limit:
                scale = limit / pixels
                for k in range(3):
                    sk = r * direction[i, j, k]
                    stack[i, j, k] = sk + (stack[i, j, k] - sk) * scale


def clamp_tangent(grid, w, limit):
    """Copy of ``w`` with its tangent part capped at ``limit`` pixels per frame."""
    out = np.array(w, dtype=np.float64, order="C")
    _clamp_kernel(out, np.ascontiguousarray(grid.direction), np.ascontiguousarray(grid.pixel_separation), float(limit))
    return out


_RULES = {"printed": False, "largest": True}


def propagate(bundle, grid, evolve_flow=True, rule="printed", source_passes="column", flow_limit=None):
    """Advance all bundle fields by one frame.

    With ``evolve_flow=False`` the structure flow is held fixed and acts as a
    prescribed transport velocity for the other fields. ``source_passes="both"``
    applies the geometric source in the row pass as well (doubling it).
    ``flow_limit`` (pixels) caps the tangent part of the advecting flow on
    entry and after every pass; self-advection and the source can otherwise push a flow that
    starts inside the CFL bound past it within the frame.

    Raises
    ------
    StabilityError
        if any substep's dominant flow exceeds ``1 / dt`` pixels.
    """
    if source_passes not in ("column", "both"):
        raise ConfigurationError(f"unknown source_passes {source_passes!r}")
    n_iter = bundle.iterations
    dt = 1.0 / n_iter
    s = grid.direction

    # channel layout: w (3), dw (3), rho (1), then Y (1, no source)
    parts = [bundle.w] + ([bundle.dw] if bundle.dw is not None else []) + [bundle.rho[..., None]]
    sourced = sum(p.shape[-1] for p in parts)
    if bundle.Y is not None:
        parts.append(np.asarray(bundle.Y, dtype=np.float64)[..., None])
    stack = np.concatenate([np.asarray(p, dtype=np.float64) for p in parts], axis=-1)
    if rule not in _RULES:
        raise ConfigurationError(f"unknown dominant flow rule {rule!r}")
    largest = _RULES[rule]
    direction = np.ascontiguousarray(s, dtype=np.float64)
    ds = np.ascontiguousarray(grid.pixel_separation, dtype=np.float64)
    bases = [np.ascontiguousarray(grid.basis[..., c], dtype=np.float64) for c in (0, 1)]
    if flow_limit is not None:
        _clamp_kernel(stack, direction, ds, float(flow_limit))
    w_fixed = np.array(stack[..., :3])
    comp = np.empty(grid.shape)
    dom = np.empty(grid.shape)
    radial = np.empty(grid.shape)

    for _ in range(n_iter):
        for axis, c in ((1, 0), (0, 1)):
            _pass_coefficients(stack, direction, bases[c], ds, axis, largest, comp, dom, radial)
            _check_cfl(dom, dt)
            with_source = axis == 1 or source_passes == "both"
            stack = _advect(stack, sourced, dom, radial if with_source else None, dt, axis)
            if not evolve_flow:
                stack[..., :3] = w_fixed
            elif flow_limit is not None:
                _clamp_kernel(stack, direction, ds, float(flow_limit))

    k = 3
    dw = None
    if bundle.dw is not None:
        dw, k = stack[..., 3:6], 6
    rho = stack[..., k]
    Y = stack[..., k + 1] if bundle.Y is not None else None
    return replace(bundle, w=stack[..., :3], dw=dw, rho=rho, Y=Y)
