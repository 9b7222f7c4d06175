"""Procedural ray-cast scenes with analytic structure flow ground truth.

Scenes are built from textured planes and spheres, each translating with a
constant world velocity. The camera follows constant body-frame angular
velocity and acceleration; poses are integrated in closed form.
"""
from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import ConfigurationError
from .kinematics import CameraMotion, structure_flow_ground_truth

_EPS = 1e-9


@dataclass
class Texture:
    """``0.5 + sum_i sin(k_i . p + phase_i) / 6`` over object-local 3D points.

    Three waves keep the value in [0, 1].
    """

    waves: np.ndarray
    phases: np.ndarray

    def __post_init__(self):
        self.waves = np.asarray(self.waves, dtype=np.float64).reshape(3, 3)
        self.phases = np.asarray(self.phases, dtype=np.float64).reshape(3)

    def __call__(self, points):
        arg = points @ self.waves.T + self.phases
        return 0.5 + np.sin(arg).sum(axis=-1) / 6.0


@dataclass
class Plane:
    point: np.ndarray
    normal: np.ndarray

    def __post_init__(self):
        self.point = np.asarray(self.point, dtype=np.float64)
        n = np.asarray(self.normal, dtype=np.float64)
        norm = np.linalg.norm(n)
        if not norm > 0:
            raise ConfigurationError("plane normal must be non-zero")
        self.normal = n / norm

    def intersect(self, origin, dirs, offset):
        denom = dirs @ self.normal
        num = (self.point + offset - origin) @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = num / denom
        return np.where((np.abs(denom) > 1e-12) & (t > _EPS), t, np.inf)


@dataclass
class Sphere:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        if not self.radius > 0:
            raise ConfigurationError("sphere radius must be positive")

    def intersect(self, origin, dirs, offset):
        oc = origin - (self.center + offset)
        b = dirs @ oc
        c = oc @ oc - self.radius**2
        disc = b * b - c
        root = np.sqrt(np.maximum(disc, 0.0))
        near, far = -b - root, -b + root
        t = np.where(near > _EPS, near, far)
        return np.where((disc >= 0) & (t > _EPS), t, np.inf)


@dataclass
class SceneObject:
    geometry: Plane | Sphere
    texture: Texture
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    name: str = ""

    def __post_init__(self):
        self.velocity = np.asarray(self.velocity, dtype=np.float64).reshape(3)


@dataclass
class SceneModel:
    objects: list
    background_depth: float | None = None
    background_texture: Texture | None = None

    def all_objects(self):
        objs = list(self.objects)
        if self.background_depth is not None:
            tex = self.background_texture or Texture(
                np.eye(3) * (2 * math.pi / (0.15 * self.background_depth)), np.zeros(3)
            )
            objs.append(SceneObject(Sphere(np.zeros(3), self.background_depth), tex, name="background"))
        return objs


@dataclass
class Pose:
    """Camera-to-world rotation and camera position in the world frame."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)


@dataclass
class RenderedFrame:
    brightness: np.ndarray
    depth: np.ndarray
    object_id: np.ndarray
    time: float

    def __iter__(self):
        # unpacks as (brightness, depth)
        return iter((self.brightness, self.depth))


def render_frame(scene, pose, grid, time=0.0):
    """Cast one ray per pixel; nearest hit gives range and texture brightness."""
    dirs = grid.direction.reshape(-1, 3) @ pose.rotation.T
    objs = scene.all_objects()
    if not objs:
        raise ConfigurationError("scene has no objects and no background")
    hits = np.stack(
        [o.geometry.intersect(pose.position, dirs, o.velocity * time) for o in objs]
    )
    ids = np.argmin(hits, axis=0)
    depth = hits[ids, np.arange(dirs.shape[0])]
    if not np.all(np.isfinite(depth)):
        raise ConfigurationError(
            f"{np.count_nonzero(~np.isfinite(depth))} rays escape the scene; "
            "add geometry or a finite background depth"
        )
    points = pose.position + dirs * depth[:, None]
    brightness = np.empty_like(depth)
    for k, o in enumerate(objs):
        sel = ids == k
        if np.any(sel):
            brightness[sel] = o.texture(points[sel] - o.velocity * time)
    shape = grid.shape
    return RenderedFrame(brightness.reshape(shape), depth.reshape(shape), ids.reshape(shape), time)


def ground_truth_flow(scene, pose, cam, grid, depth, object_id=None, frame_rate=None, time=0.0):
    """Structure flow from range and relative velocities.

    Per-frame units when ``frame_rate`` is given, else rad/s.
    """
    if object_id is None:
        object_id = render_frame(scene, pose, grid, time).object_id
    world_vel = np.stack([o.velocity for o in scene.all_objects()])
    v_x = world_vel[object_id] @ pose.rotation  # R^T v for each pixel
    w = structure_flow_ground_truth(grid, depth, cam, v_x)
    return w / frame_rate if frame_rate else w


def _integrals(omega, t):
    """``R(t)`` plus ``int_0^t exp(tau K)`` and its time integral, ``K = [omega]_x``."""
    theta = float(np.linalg.norm(omega))
    K = np.array(
        [[0.0, -omega[2], omega[1]], [omega[2], 0.0, -omega[0]], [-omega[1], omega[0], 0.0]]
    )
    K2 = K @ K
    x = theta * t
    if x < 1e-3:
        th2 = theta * theta
        c1 = t**2 / 2 - th2 * t**4 / 24
        c2 = t**3 / 6 - th2 * t**5 / 120
        c3 = t**4 / 24 - th2 * t**6 / 720
    else:
        c1 = (1 - math.cos(x)) / theta**2
        c2 = (t - math.sin(x) / theta) / theta**2
        c3 = (t**2 / 2 - c1) / theta**2
    rot = Rotation.from_rotvec(np.asarray(omega) * t).as_matrix()
    j1 = t * np.eye(3) + c1 * K + c2 * K2
    j2 = 0.5 * t**2 * np.eye(3) + c2 * K + c3 * K2
    return rot, j1, j2


def advance(pose, cam, dt):
    """Exact pose and body velocity after ``dt`` seconds.

    Body angular velocity and body acceleration are held constant, so the
    body-frame velocity obeys ``dv/dt = -omega x v + a``.
    """
    rot, j1, j2 = _integrals(cam.omega, dt)
    R0 = pose.rotation
    v_world = R0 @ cam.v_c
    position = pose.position + v_world * dt + R0 @ (j2 @ cam.a_c)
    rotation = R0 @ rot
    # re-orthonormalise against drift over long runs
    u, _, vt = np.linalg.svd(rotation)
    rotation = u @ vt
    v_world_new = v_world + R0 @ (j1 @ cam.a_c)
    return Pose(rotation, position), CameraMotion(rotation.T @ v_world_new, cam.omega, cam.a_c)


@dataclass
class Trajectory:
    """Camera state sampled at ``frame_rate``."""

    pose: Pose
    cam: CameraMotion
    frame_rate: float = 300.0
    frame: int = 0

    @property
    def time(self):
        return self.frame / self.frame_rate

    def step(self):
        pose, cam = advance(self.pose, self.cam, 1.0 / self.frame_rate)
        return Trajectory(pose, cam, self.frame_rate, self.frame + 1)


@dataclass
class SequenceFrame:
    index: int
    brightness: np.ndarray
    depth: np.ndarray
    flow: np.ndarray  # rad/frame
    object_id: np.ndarray
    pose: Pose
    cam: CameraMotion


def simulate(scene, trajectory, grid, frames):
    """Yield ``frames`` consecutive frames with ground truth in rad/frame."""
    traj = trajectory
    for k in range(frames):
        frame = render_frame(scene, traj.pose, grid, traj.time)
        flow = ground_truth_flow(
            scene, traj.pose, traj.cam, grid, frame.depth, frame.object_id, traj.frame_rate
        )
        yield SequenceFrame(k, frame.brightness, frame.depth, flow, frame.object_id, traj.pose, traj.cam)
        traj = traj.step()


# --------------------------------------------------------------------------
# presets


def _waves(*rows):
    return np.array(rows, dtype=np.float64)


def corridor_scene(width=3.0, camera_height=1.2, length=8.0, background_depth=60.0):
    """Two textured side walls, a ground plane and an end wall."""
    tau = 2 * math.pi
    half = width / 2
    return SceneModel(
        objects=[
            SceneObject(
                Plane((-half, 0, 0), (1, 0, 0)),
                Texture(_waves((0, tau / 0.37, tau / 0.91), (0, tau / 0.53, -tau / 1.27), (0, tau / 1.9, tau / 0.71)), (0.3, 1.7, 2.9)),
                name="left_wall",
            ),
            SceneObject(
                Plane((half, 0, 0), (-1, 0, 0)),
                Texture(_waves((0, tau / 0.41, tau / 0.83), (0, -tau / 0.59, tau / 1.13), (0, tau / 1.7, tau / 0.67)), (2.1, 0.4, 1.1)),
                name="right_wall",
            ),
            SceneObject(
                Plane((0, camera_height, 0), (0, -1, 0)),
                Texture(_waves((tau / 0.43, 0, tau / 0.97), (-tau / 0.61, 0, tau / 1.31), (tau / 1.1, 0, tau / 0.77)), (1.3, 2.2, 0.5)),
                name="ground",
            ),
            SceneObject(
                Plane((0, 0, length), (0, 0, -1)),
                Texture(_waves((tau / 0.93, tau / 1.37, 0), (-tau / 1.21, tau / 0.87, 0), (tau / 1.9, tau / 2.3, 0)), (0.9, 2.6, 1.8)),
                name="end_wall",
            ),
        ],
        background_depth=background_depth,
    )


def approach_recede_scene(speed=2.0):
    """One sphere moving towards the camera and one moving away, over a backdrop."""
    tau = 2 * math.pi
    return SceneModel(
        objects=[
            SceneObject(
                Sphere((-0.75, 0.0, 4.0), 0.6),
                Texture(_waves((tau / 0.31, tau / 0.47, tau / 0.23), (-tau / 0.41, tau / 0.29, tau / 0.37), (tau / 0.53, -tau / 0.33, tau / 0.43)), (0.2, 1.4, 2.5)),
                velocity=(0.0, 0.0, -speed),
                name="approaching",
            ),
            SceneObject(
                Sphere((0.75, 0.0, 2.5), 0.6),
                Texture(_waves((tau / 0.29, -tau / 0.43, tau / 0.37), (tau / 0.39, tau / 0.31, -tau / 0.27), (-tau / 0.49, tau / 0.35, tau / 0.41)), (1.9, 0.6, 2.2)),
                velocity=(0.0, 0.0, speed),
                name="receding",
            ),
            SceneObject(
                Plane((0, 0, 9.0), (0, 0, -1)),
                Texture(_waves((tau / 1.1, tau / 1.6, 0), (-tau / 1.4, tau / 0.9, 0), (tau / 2.1, tau / 2.7, 0)), (0.7, 2.0, 1.2)),
                name="backdrop",
            ),
        ],
        background_depth=60.0,
    )


PRESETS = {
    "corridor": (corridor_scene, CameraMotion(v_c=(0.0, 0.0, 2.0))),
    "spheres": (approach_recede_scene, CameraMotion()),
}


# --------------------------------------------------------------------------
# scene files


def _vec(raw, n=3):
    vals = [float(v) for v in raw.replace(",", " ").split()]
    if len(vals) != n:
        raise ValueError(f"expected {n} numbers, got {raw!r}")
    return np.array(vals)


def load_scene(path):
    """Parse a scene INI file; returns ``(scene, camera_section_dict)``."""
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise ConfigurationError(f"cannot read scene file {path}")
    return parse_scene(parser)


def parse_scene(parser):
    try:
        bg = parser.get("scene", "background_depth", fallback="none").strip().lower()
        background = None if bg in ("none", "inf", "") else float(bg)
        objects = []
        for section in parser.sections():
            if not section.startswith("object."):
                continue
            sec = parser[section]
            kind = sec.get("type", "").strip().lower()
            if kind == "plane":
                geom = Plane(_vec(sec["point"]), _vec(sec["normal"]))
            elif kind == "sphere":
                geom = Sphere(_vec(sec["center"]), float(sec["radius"]))
            else:
                raise ConfigurationError(f"{section}: unknown object type {kind!r}")
            waves = np.stack([_vec(row) for row in sec["texture_waves"].split(";")])
            tex = Texture(waves, _vec(sec.get("texture_phases", "0 0 0")))
            objects.append(
                SceneObject(geom, tex, _vec(sec.get("velocity", "0 0 0")), name=section[7:])
            )
        camera = dict(parser["camera"]) if parser.has_section("camera") else {}
    except (KeyError, ValueError) as exc:
        raise ConfigurationError(f"invalid scene description: {exc}") from exc
    if not objects and background is None:
        raise ConfigurationError("scene file defines no objects")
    return SceneModel(objects, background), camera


def camera_from_section(camera, frame_rate=None):
    """Initial trajectory from a scene file's ``[camera]`` section."""
    try:
        cam = CameraMotion(
            _vec(camera.get("velocity", "0 0 0")),
            _vec(camera.get("omega", "0 0 0")),
            _vec(camera.get("acceleration", "0 0 0")),
        )
        pose = Pose(position=_vec(camera.get("position", "0 0 0")))
        rate = frame_rate or float(camera.get("frame_rate", 300.0))
    except ValueError as exc:
        raise ConfigurationError(f"invalid camera section: {exc}") from exc
    return Trajectory(pose, cam, rate)


def _fmt(v):
    return " ".join(repr(float(x)) for x in np.ravel(v))


def scene_to_ini(scene, trajectory=None):
    """Serialise a scene (and optional initial camera) to scene-file text."""
    lines = ["[scene]", f"background_depth = {scene.background_depth if scene.background_depth is not None else 'none'}", ""]
    for k, o in enumerate(scene.objects):
        lines.append(f"[object.{o.name or k}]")
        g = o.geometry
        if isinstance(g, Plane):
            lines += ["type = plane", f"point = {_fmt(g.point)}", f"normal = {_fmt(g.normal)}"]
        else:
            lines += ["type = sphere", f"center = {_fmt(g.center)}", f"radius = {float(g.radius)!r}"]
        lines.append(f"velocity = {_fmt(o.velocity)}")
        lines.append("texture_waves = " + "; ".join(_fmt(r) for r in o.texture.waves))
        lines.append(f"texture_phases = {_fmt(o.texture.phases)}")
        lines.append("")
    if trajectory is not None:
        lines += [
            "[camera]",
            f"position = {_fmt(trajectory.pose.position)}",
            f"velocity = {_fmt(trajectory.cam.v_c)}",
            f"omega = {_fmt(trajectory.cam.omega)}",
            f"acceleration = {_fmt(trajectory.cam.a_c)}",
            f"frame_rate = {trajectory.frame_rate!r}",
            "",
        ]
    return "\n".join(lines)
