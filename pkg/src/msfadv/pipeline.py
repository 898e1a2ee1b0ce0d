"""Object pose -> rendered sensor data -> features -> branch confidences."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diff_engine as dv
from .scenario import ObjectPose, Scenario, place
from .sensor_sim import DEFAULT_ALBEDO, render_camera_diff, render_lidar_diff
from .soft_features import DEFAULT_EPS_DIV, DEFAULT_MU, bev_aggregate, derive_features, roi_filter
from .surrogates import (
    DetectionRegion,
    SurrogateWeights,
    camera_confidence,
    detection_region,
    fuse_rule,
    lidar_confidence,
    resample_region,
    pooled_lidar_features,
)


@dataclass(frozen=True)
class SensingOptions:
    mu: float = DEFAULT_MU
    eps_div: float = DEFAULT_EPS_DIV
    albedo: tuple = DEFAULT_ALBEDO
    blur_sigma: float = 1.0


@dataclass
class Sensed:
    conf_lidar: object
    conf_camera: object
    points: object
    image: object
    bev: object
    region: DetectionRegion

    def detected(self, weights: SurrogateWeights) -> bool:
        return fuse_rule(self.conf_lidar, self.conf_camera, weights)

    def confidences(self) -> tuple:
        return float(dv.value_of(self.conf_lidar)), float(dv.value_of(self.conf_camera))


def region_for(benign_vertices: np.ndarray, scn: Scenario, pose: ObjectPose) -> DetectionRegion:
    """The branch regions are fixed by where the benign object sits at ``pose``."""
    posed = place(np.asarray(benign_vertices), pose, scn.ground_z)
    return detection_region(posed, scn.ground_z, scn.calib, scn.image.data.shape)


def sense(vertices, faces: np.ndarray, scn: Scenario, pose: ObjectPose, region: DetectionRegion,
          weights: SurrogateWeights, opts: SensingOptions = SensingOptions(),
          cloud_transform: Callable | None = None,
          image_transform: Callable | None = None) -> Sensed:
    """Render both sensors with the object at ``pose`` and score the region.

    ``vertices`` are object-frame positions (array or Var). The optional
    transforms act on forward values only (input-transformation defenses) and
    are meant for evaluation, never on a tape: ``cloud_transform(points,
    region)`` and ``image_transform(image)`` both take and return arrays.
    """
    posed = place(vertices, pose, scn.ground_z)
    points = render_lidar_diff(posed, faces, scn.background, scn.spec, scn.ray_table).points
    if cloud_transform is not None:
        points = cloud_transform(np.asarray(dv.value_of(points)), region)
    pts = roi_filter(points, region.roi_lo, region.roi_hi)
    bev = bev_aggregate(derive_features(pts, region.grid, opts.mu, opts.eps_div), opts.eps_div)
    conf_l = lidar_confidence(bev, region, weights)

    image = render_camera_diff(posed, faces, scn.image, scn.calib, opts.albedo, opts.blur_sigma).image
    if image_transform is not None:
        image = image_transform(np.asarray(dv.value_of(image)))
    conf_c = camera_confidence(image, region, weights)
    return Sensed(conf_l, conf_c, points, image, bev, region)


def calibration_features(vertices, faces, scn: Scenario, pose: ObjectPose, region: DetectionRegion,
                         opts: SensingOptions = SensingOptions(), template_shape=None):
    """Pooled LiDAR features and the grey camera patch, without any weights."""
    from .surrogates import TEMPLATE_SHAPE

    posed = place(np.asarray(vertices), pose, scn.ground_z)
    if len(faces):
        points = render_lidar_diff(posed, faces, scn.background, scn.spec, scn.ray_table).points
        image = render_camera_diff(posed, faces, scn.image, scn.calib, opts.albedo, opts.blur_sigma).value()
    else:
        points, image = scn.background.points, scn.image.data
    pts = roi_filter(points, region.roi_lo, region.roi_hi)
    bev = bev_aggregate(derive_features(pts, region.grid, opts.mu, opts.eps_div), opts.eps_div)
    pooled = np.asarray(pooled_lidar_features(bev, region))
    patch = np.asarray(resample_region(image, region.pixels, template_shape or TEMPLATE_SHAPE))
    return pooled, patch


def calibration_poses(n: int = 5, x_range=(5.0, 35.0), y: float = 0.15, yaw_deg: float = 2.5) -> list:
    """Poses of the shipped calibration set: evenly spaced in X, alternating lateral offset and yaw."""
    xs = np.linspace(x_range[0], x_range[1], n)
    return [ObjectPose(float(x), y * (-1) ** k, np.radians(yaw_deg) * (-1) ** k) for k, x in enumerate(xs)]


def calibrate(benign, scn: Scenario, poses=None, opts: SensingOptions = SensingOptions()) -> SurrogateWeights:
    """Fit both surrogate branches on the benign object present / absent at each pose."""
    from .surrogates import calibrate_surrogates

    poses = calibration_poses() if poses is None else poses
    empty = np.zeros((0, 3), dtype=np.int64)
    fp, fa, pp, pa = [], [], [], []
    for pose in poses:
        region = region_for(benign.vertices, scn, pose)
        f, p = calibration_features(benign.vertices, benign.faces, scn, pose, region, opts)
        fp.append(f)
        pp.append(p)
        f, p = calibration_features(benign.vertices, empty, scn, pose, region, opts)
        fa.append(f)
        pa.append(p)
    return calibrate_surrogates(np.array(fp), np.array(fa), pp, pa)
