"""Input-transformation defenses: bit-depth reduction and median smoothing, plus a sweep evaluator.

Both act on the rendered sensor data before feature derivation. Point-cloud
coordinates are mapped to [0, 1] by the detection region's ROI box before
quantization; LiDAR median smoothing runs over the scan's range grid
(channel x azimuth).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import median_filter

from .attack import AttackConfig, verification_poses
from .geometry import TriMesh
from .pipeline import SensingOptions, region_for, sense
from .scenario import Scenario
from .sensor_sim import LidarSpec, PointCloud, RayTable, SensorImage
from .surrogates import SurrogateWeights

DEFENSES = ("bits", "median")
MODALITIES = ("image", "lidar", "both")


class DefenseError(ValueError):
    pass


def _check_bits(bits):
    if int(bits) != bits or not 1 <= bits <= 8:
        raise DefenseError(f"bits must be an integer in [1, 8], got {bits}")
    return int(bits)


def bit_depth_reduce(values, bits: int) -> np.ndarray:
    """round(x·(2^b − 1)) / (2^b − 1), rounding halves away from zero."""
    levels = float(2 ** _check_bits(bits) - 1)
    x = np.asarray(values, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) * levels + 0.5) / levels


def bit_depth_reduce_cloud(points, bits: int, lo, hi) -> np.ndarray:
    """Quantize x, y, z in ROI-normalized units and intensity directly."""
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
    lo = np.asarray(lo, dtype=np.float64)
    ext = np.asarray(hi, dtype=np.float64) - lo
    if np.any(ext <= 0):
        raise DefenseError("ROI box must have positive extent")
    out = pts.copy()
    out[:, :3] = lo + bit_depth_reduce((pts[:, :3] - lo) / ext, bits) * ext
    out[:, 3] = bit_depth_reduce(pts[:, 3], bits)
    return out


def _check_kernel(k):
    if int(k) != k or k < 1 or k % 2 == 0:
        raise DefenseError(f"median window must be an odd integer >= 1, got {k}")
    return int(k)


def median_smooth(img, k: int):
    """Per-channel k x k median filter with edge replication."""
    k = _check_kernel(k)
    wrap = isinstance(img, SensorImage)
    a = img.data if wrap else np.asarray(img)
    if k == 1:
        out = a.copy()
    else:
        size = (k, k) + (1,) * (a.ndim - 2)
        out = median_filter(a, size=size, mode="nearest")
    return SensorImage(out) if wrap else out


def median_smooth_cloud(points, k: int, spec: LidarSpec | None = None) -> np.ndarray:
    """Median of range and intensity over k x k neighbourhoods of the range grid.

    Each grid cell is represented by its nearest point; empty cells are ignored
    inside a window, borders replicate. A representative keeps its direction
    and takes the median range; other points are left as they are.
    """
    k = _check_kernel(k)
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
    if k == 1 or len(pts) == 0:
        return pts.copy()
    spec = LidarSpec() if spec is None else spec
    table = RayTable(PointCloud(pts), spec)
    shape = (spec.n_channels, spec.n_azimuth)
    occupied = table.rep >= 0
    rep = table.rep[occupied]
    rng_grid = np.where(occupied, table.range, np.nan).reshape(shape)
    int_grid = np.full(table.rep.shape, np.nan)
    int_grid[occupied] = pts[rep, 3]
    int_grid = int_grid.reshape(shape)
    h = k // 2
    cells = np.flatnonzero(occupied)
    r_i, c_i = np.unravel_index(cells, shape)

    def filt(grid):
        # azimuth wraps around; channels replicate at the ends
        g = np.pad(grid, ((h, h), (0, 0)), mode="edge")
        g = np.pad(g, ((0, 0), (h, h)), mode="wrap")
        win = sliding_window_view(g, (k, k))[r_i, c_i]
        return np.nanmedian(win.reshape(len(cells), -1), axis=1)

    out = pts.copy()
    new_r = filt(rng_grid)
    old_r = table.range[occupied]
    out[rep, :3] = pts[rep, :3] * (new_r / old_r)[:, None]
    out[rep, 3] = np.clip(filt(int_grid), 0.0, 1.0)
    return out


# ---------------------------------------------------------------------------
# sweep


def make_transforms(defense: str, param, modality: str = "both", spec: LidarSpec | None = None):
    """(cloud_transform, image_transform) for ``sense``; ``None`` where the modality is untouched."""
    if defense not in DEFENSES:
        raise DefenseError(f"unknown defense '{defense}' (choose from {', '.join(DEFENSES)})")
    if modality not in MODALITIES:
        raise DefenseError(f"unknown modality '{modality}'")
    if defense == "bits":
        b = _check_bits(param)
        cloud = lambda p, region: bit_depth_reduce_cloud(p, b, region.roi_lo, region.roi_hi)
        image = lambda im: bit_depth_reduce(im, b)
    else:
        k = _check_kernel(param)
        cloud = lambda p, region: median_smooth_cloud(p, k, spec)
        image = lambda im: median_smooth(im, k)
    return (cloud if modality in ("lidar", "both") else None,
            image if modality in ("image", "both") else None)


@dataclass
class SweepRow:
    parameter: object
    benign_rate: float
    attack_rate: float


def detection_rates(adv: TriMesh, benign: TriMesh, scn: Scenario, weights: SurrogateWeights,
                    transforms=(None, None), poses=None, opts: SensingOptions = SensingOptions()):
    """(fraction of poses where the benign object is detected, fraction where the adversarial one is not)."""
    poses = verification_poses(AttackConfig()) if poses is None else poses
    cloud_t, image_t = transforms
    det_b = det_a = 0
    for pose in poses:
        region = region_for(benign.vertices, scn, pose)
        det_b += sense(benign.vertices, benign.faces, scn, pose, region, weights, opts, cloud_t, image_t).detected(weights)
        det_a += sense(adv.vertices, adv.faces, scn, pose, region, weights, opts, cloud_t, image_t).detected(weights)
    n = len(poses)
    return det_b / n, 1.0 - det_a / n


def evaluate_defense(adv: TriMesh, benign: TriMesh, scn: Scenario, weights: SurrogateWeights,
                     defense: str, sweep, modality: str = "both", poses=None,
                     opts: SensingOptions = SensingOptions()) -> list:
    sweep = list(sweep)
    if not sweep:
        raise DefenseError("empty parameter sweep")
    rows = []
    for p in sweep:
        t = make_transforms(defense, p, modality, scn.spec)
        b, a = detection_rates(adv, benign, scn, weights, t, poses, opts)
        rows.append(SweepRow(p, b, a))
    return rows


def write_sweep(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["parameter", "benign_rate", "attack_rate"])
        for r in rows:
            w.writerow([r.parameter, repr(float(r.benign_rate)), repr(float(r.attack_rate))])
