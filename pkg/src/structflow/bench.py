"""Per-stage timing of filter steps on a synthetic sequence."""
from __future__ import annotations

import contextlib
import time
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .filter import FilterConfig, default_smoothing, filter_step, init_state
from .simulator import PRESETS, Pose, Trajectory, simulate
from .sphere_grid import build_pyramid


class StageTimer:
    """Collects wall-clock samples per named stage via ``with timer.stage(name)``."""

    def __init__(self, clock=time.perf_counter):
        self.clock = clock
        self.samples = defaultdict(list)
        self.enabled = True

    @contextlib.contextmanager
    def stage(self, name):
        if not self.enabled:
            yield
            return
        start = self.clock()
        try:
            yield
        finally:
            self.samples[name].append(self.clock() - start)


@dataclass
class StageStats:
    name: str
    mean_ms: float
    std_ms: float
    pixels: int

    @property
    def hz(self):
        return 1e3 / self.mean_ms if self.mean_ms > 0 else float("inf")

    @property
    def mpix_per_s(self):
        return self.pixels / (self.mean_ms * 1e3) if self.mean_ms > 0 else float("inf")


def summarise(samples, pixels):
    """Mean and population std (so one sample has std 0) per stage, in ms."""
    rows = []
    for name, values in samples.items():
        ms = np.asarray(values) * 1e3
        rows.append(StageStats(name, float(ms.mean()), float(ms.std()), pixels))
    return rows


def run_benchmark(resolution=128, max_flow=2.0, levels=2, repetitions=10, fov=90.0, preset="corridor"):
    """Time ``repetitions`` filter steps after one untimed warm-up step.

    Frames are rendered before timing starts, so the timed region covers
    only measurement fitting, prediction and update.
    """
    config = FilterConfig(levels=levels, max_flow=max_flow, smooth_iterations=default_smoothing(levels))
    grids = build_pyramid(fov, resolution, resolution, levels)
    make_scene, cam = PRESETS[preset]
    frames = list(simulate(make_scene(), Trajectory(Pose(), cam), grids[0], repetitions + 2))

    timer = StageTimer()
    state = init_state(grids, frames[0].brightness, 1.0 / frames[0].depth)
    timer.enabled = False
    state = filter_step(state, grids, frames[1].brightness, 1.0 / frames[1].depth, config, timer=timer)
    timer.enabled = True
    for fr in frames[2:]:
        with timer.stage("total"):
            state = filter_step(state, grids, fr.brightness, 1.0 / fr.depth, config, timer=timer)
    return summarise(timer.samples, resolution * resolution)


def format_table(rows):
    head = f"{'stage':<20} {'mean ms':>10} {'std ms':>10} {'Hz':>10} {'Mpix/s':>10}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r.name:<20} {r.mean_ms:>10.3f} {r.std_ms:>10.3f} {r.hz:>10.1f} {r.mpix_per_s:>10.2f}")
    return "\n".join(lines)
