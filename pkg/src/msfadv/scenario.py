"""Scenarios: background scan, camera frame, calibration and object placement.

The shipped synthetic scenario is a flat road: a simulated ground scan from the
default ray grid, a sky/road image and a canonical camera mounted next to the
LiDAR. Objects are modelled in their own frame with the base on z = 0 and are
placed by a yaw about their vertical axis, a ground-plane shift and a lift to
the ground height.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import diff_engine as dv
from .geometry import RigidPose, TriMesh, pose_vertices, shapes
from .sensor_sim import (
    Calibration,
    LidarSpec,
    PointCloud,
    RayTable,
    SensorError,
    SensorImage,
    quantize_image,
    quantize_points,
    read_bin,
    read_calib,
    read_ppm,
    write_bin,
    write_calib,
    write_ppm,
)

SENSOR_HEIGHT = 1.73
IMAGE_SIZE = (200, 400)  # rows, cols
FOCAL = 300.0
PRINCIPAL = (200.0, 70.0)
CAMERA_OFFSET = (0.27, 0.0, -0.08)
BUNDLE_FILES = ("pc.bin", "image.ppm", "calib.txt", "scene.cfg")


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class ObjectPose:
    """Placement of an object on the ground: position (m) and yaw (rad)."""

    x: float
    y: float = 0.0
    yaw: float = 0.0

    def rigid(self) -> RigidPose:
        return RigidPose(self.yaw, (self.x, self.y), (0.0, 0.0, 0.0))

    def as_list(self) -> list:
        return [float(self.x), float(self.y), float(math.degrees(self.yaw))]


def place(vertices, pose: ObjectPose, ground_z: float):
    """Object-frame vertices (array or Var) -> LiDAR frame at ``pose``."""
    return dv.add(pose_vertices(vertices, pose.rigid()), np.array([0.0, 0.0, ground_z]))


@dataclass(eq=False)
class Scenario:
    background: PointCloud
    image: SensorImage
    calib: Calibration
    ground_z: float
    placement: ObjectPose
    spec: LidarSpec = field(default_factory=LidarSpec)

    @cached_property
    def ray_table(self) -> RayTable:
        return RayTable(self.background, self.spec)


def canonical_calibration(size=IMAGE_SIZE, focal=FOCAL, principal=PRINCIPAL, offset=CAMERA_OFFSET) -> Calibration:
    """Forward-looking pinhole camera; LiDAR x→camera z, y→−x, z→−y."""
    R = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    t = -R @ np.asarray(offset, dtype=np.float64)
    K = np.array([[focal, 0.0, principal[0]], [0.0, focal, principal[1]], [0.0, 0.0, 1.0]])
    return Calibration(K @ np.hstack([R, t[:, None]]))


def ground_scan(spec: LidarSpec, ground_z: float = -SENSOR_HEIGHT, seed: int = 0) -> PointCloud:
    """One return per downward ray that meets the ground plane within range."""
    rng = np.random.default_rng(seed)
    d = spec.directions()
    with np.errstate(divide="ignore"):
        t = np.where(d[:, 2] < 0, ground_z / d[:, 2], np.inf)
    keep = t <= spec.max_range
    pts = d[keep] * t[keep, None]
    inten = 0.12 + 0.06 * rng.random(len(pts))
    return PointCloud(quantize_points(np.column_stack([pts, inten])))


def road_image(size=IMAGE_SIZE, horizon: float = PRINCIPAL[1], seed: int = 0) -> SensorImage:
    rng = np.random.default_rng(seed)
    H, W = size
    rows = np.arange(H, dtype=np.float64)[:, None, None]
    top = np.array([0.45, 0.62, 0.88])
    low = np.array([0.78, 0.84, 0.92])
    s = np.clip(rows / max(horizon, 1.0), 0.0, 1.0)
    sky = top + (low - top) * s
    g = 0.38 + 0.08 * np.clip((rows - horizon) / (H - horizon), 0.0, 1.0)
    road = np.broadcast_to(g, (H, 1, 1)) + 0.015 * rng.standard_normal((H, W, 1))
    img = np.where(rows < horizon, np.broadcast_to(sky, (H, W, 3)), np.broadcast_to(road, (H, W, 3)))
    return SensorImage(quantize_image(np.clip(img, 0.0, 1.0)))


def make_scenario(seed: int = 0, placement: ObjectPose | None = None, spec: LidarSpec | None = None) -> Scenario:
    spec = LidarSpec() if spec is None else spec
    return Scenario(
        background=ground_scan(spec, -SENSOR_HEIGHT, seed),
        image=road_image(seed=seed),
        calib=canonical_calibration(),
        ground_z=-SENSOR_HEIGHT,
        placement=ObjectPose(7.0, 0.0, 0.0) if placement is None else placement,
        spec=spec,
    )


def default_object() -> TriMesh:
    """The benign object: a 1 m traffic-cone-like cone, base on z = 0."""
    return shapes.cone(radius=0.35, height=1.0, segments=16, rings=4)


# ---------------------------------------------------------------------------
# bundle I/O


def _write_cfg(path, values: dict):
    with open(path, "w") as fh:
        for k, v in values.items():
            fh.write(f"{k} = {v!r}\n" if isinstance(v, float) else f"{k} = {v}\n")


def read_kv(path) -> dict:
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ScenarioError(f"{path}:{lineno}: expected key = value")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def save_bundle(scn: Scenario, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    write_bin(scn.background, os.path.join(directory, "pc.bin"))
    write_ppm(scn.image, os.path.join(directory, "image.ppm"))
    write_calib(scn.calib, os.path.join(directory, "calib.txt"))
    p = scn.placement
    _write_cfg(os.path.join(directory, "scene.cfg"), {
        "ground_z": float(scn.ground_z),
        "x": float(p.x),
        "y": float(p.y),
        "yaw_deg": float(math.degrees(p.yaw)),
    })


def load_bundle(directory, spec: LidarSpec | None = None) -> Scenario:
    if not os.path.isdir(directory):
        raise ScenarioError(f"scenario directory not found: {directory}")
    for name in BUNDLE_FILES:
        if not os.path.isfile(os.path.join(directory, name)):
            raise ScenarioError(f"scenario is missing {name} ({os.path.join(directory, name)})")
    try:
        cfg = read_kv(os.path.join(directory, "scene.cfg"))
        ground = float(cfg["ground_z"])
        pose = ObjectPose(float(cfg.get("x", 7.0)), float(cfg.get("y", 0.0)),
                          math.radians(float(cfg.get("yaw_deg", 0.0))))
    except (KeyError, ValueError) as exc:
        raise ScenarioError(f"scene.cfg: bad or missing entry ({exc})") from None
    try:
        pc = read_bin(os.path.join(directory, "pc.bin"))
        img = read_ppm(os.path.join(directory, "image.ppm"))
        calib = read_calib(os.path.join(directory, "calib.txt"))
    except (SensorError, OSError) as exc:
        raise ScenarioError(str(exc)) from None
    return Scenario(pc, img, calib, ground, pose, LidarSpec() if spec is None else spec)
