"""Small differentiable stand-ins for the LiDAR and camera detectors.

LiDAR branch: ``sigmoid(w · pooled + b)`` where ``pooled`` holds the mean
occupancy, mean count, maximum height and mean intensity of the BEV cells in
the object's detection region.

Camera branch: the region is bilinearly resampled to the template size,
converted to grey and compared by normalized cross-correlation;
``sigmoid(scale · ncc + bias)``.

Fusion: an object is detected when either branch reaches its threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diff_engine as dv
from .soft_features import CellGrid, FeatureGrid

POOLED_FEATURES = ("occupancy_mean", "count_mean", "height_max", "intensity_mean")
SHIPPED_LIDAR_BIAS = -4.0
HEADER = "msfadv-surrogate v1"

# detection-region geometry
CELL_XY = 0.25
CELL_Z = 0.5
GRID_XY = 8
GRID_Z = 4
FOOTPRINT_MARGIN = 0.1
PIXEL_PAD_FRAC = 0.15
PIXEL_PAD_MIN = 2
TEMPLATE_SHAPE = (24, 16)
GRAY = np.array([0.299, 0.587, 0.114])


class RegionError(ValueError):
    pass


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DetectionRegion:
    """Where each branch looks for the object: BEV cells and an image rectangle."""

    grid: CellGrid
    bev: tuple  # (i0, i1, j0, j1), half-open cell ranges
    pixels: tuple  # (r0, r1, c0, c1), half-open pixel ranges
    roi_lo: tuple
    roi_hi: tuple

    def __post_init__(self):
        i0, i1, j0, j1 = self.bev
        nx, ny = self.grid.counts[:2]
        if not (0 <= i0 < i1 <= nx and 0 <= j0 < j1 <= ny):
            raise RegionError(f"BEV region {self.bev} outside grid {nx}×{ny}")
        r0, r1, c0, c1 = self.pixels
        if not (r0 < r1 and c0 < c1 and r0 >= 0 and c0 >= 0):
            raise RegionError(f"pixel region {self.pixels} is empty or negative")


def detection_region(posed_vertices: np.ndarray, ground_z: float, calib, image_shape) -> DetectionRegion:
    """Region of a (benign, posed) object: BEV footprint + margin and padded projected bbox."""
    v = np.asarray(posed_vertices, dtype=np.float64)
    lo, hi = v.min(axis=0), v.max(axis=0)
    cx, cy = 0.5 * (lo[:2] + hi[:2])
    half = 0.5 * GRID_XY * CELL_XY
    origin = (cx - half, cy - half, ground_z - 0.5 * CELL_Z)
    grid = CellGrid(origin, (CELL_XY, CELL_XY, CELL_Z), (GRID_XY, GRID_XY, GRID_Z))
    f_lo = (lo[:2] - FOOTPRINT_MARGIN - np.asarray(origin[:2])) / CELL_XY
    f_hi = (hi[:2] + FOOTPRINT_MARGIN - np.asarray(origin[:2])) / CELL_XY
    i0, j0 = np.clip(np.floor(f_lo).astype(int), 0, GRID_XY - 1)
    i1, j1 = np.clip(np.ceil(f_hi).astype(int), 1, GRID_XY)
    up = grid.upper()
    roi_lo = (origin[0] - 0.5 * CELL_XY, origin[1] - 0.5 * CELL_XY, origin[2])
    roi_hi = (up[0] + 0.5 * CELL_XY, up[1] + 0.5 * CELL_XY, up[2])

    P = calib.projection
    h = v @ P[:, :3].T + P[:, 3]
    front = h[:, 2] > 1e-6
    if not front.any():
        raise RegionError("object is behind the camera; no image region")
    uv = h[front, :2] / h[front, 2:3]
    (u0, v0), (u1, v1) = uv.min(axis=0), uv.max(axis=0)
    pu = max(PIXEL_PAD_FRAC * (u1 - u0), PIXEL_PAD_MIN)
    pv = max(PIXEL_PAD_FRAC * (v1 - v0), PIXEL_PAD_MIN)
    H, W = image_shape[:2]
    r0 = max(int(np.floor(v0 - pv)), 0)
    r1 = min(int(np.ceil(v1 + pv)) + 1, H)
    c0 = max(int(np.floor(u0 - pu)), 0)
    c1 = min(int(np.ceil(u1 + pu)) + 1, W)
    if r0 >= r1 or c0 >= c1:
        raise RegionError("object projects outside the image")
    return DetectionRegion(grid, (int(i0), int(i1), int(j0), int(j1)), (r0, r1, c0, c1), roi_lo, roi_hi)


@dataclass(frozen=True, eq=False)
class SurrogateWeights:
    lidar_weights: np.ndarray
    lidar_bias: float
    camera_scale: float
    camera_bias: float
    template: np.ndarray
    tau_lidar: float = 0.5
    tau_camera: float = 0.5

    def __post_init__(self):
        w = np.array(self.lidar_weights, dtype=np.float64).reshape(len(POOLED_FEATURES))
        t = np.array(self.template, dtype=np.float64)
        if t.ndim != 2:
            raise ValueError("template must be a 2D raster")
        if abs(t.mean()) > 1e-9 or abs(np.linalg.norm(t) - 1.0) > 1e-9:
            raise ValueError("template must have zero mean and unit norm")
        for tau in (self.tau_lidar, self.tau_camera):
            if not 0.0 < tau < 1.0:
                raise ValueError("thresholds must lie in (0, 1)")
        w.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "lidar_weights", w)
        object.__setattr__(self, "template", t)
        for k in ("lidar_bias", "camera_scale", "camera_bias", "tau_lidar", "tau_camera"):
            object.__setattr__(self, k, float(getattr(self, k)))


def normalize_template(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    t = t - t.mean()
    n = np.linalg.norm(t)
    if n < 1e-12:
        raise CalibrationError("template has zero variance")
    return t / n


# ---------------------------------------------------------------------------
# LiDAR branch


def pooled_lidar_features(bev: FeatureGrid, region: DetectionRegion):
    """The 4 pooled region features (array or Var)."""
    if not bev.bev:
        raise ValueError("lidar confidence needs a BEV feature grid")
    i0, i1, j0, j1 = region.bev
    nx, ny = bev.shape
    if i1 > nx or j1 > ny:
        raise RegionError("detection region outside the feature grid")
    sl = (slice(i0, i1), slice(j0, j1))
    occ = dv.mean(dv.take(bev["occupancy"], sl))
    cnt = dv.mean(dv.take(bev["count"], sl))
    hmax = dv.max_(dv.take(bev["height_max"], sl))
    imean = dv.mean(dv.take(bev["intensity_mean"], sl))
    return dv.stack([occ, cnt, hmax, imean])


def lidar_logit(pooled, weights: SurrogateWeights):
    return dv.add(dv.sum_(dv.mul(pooled, weights.lidar_weights)), weights.lidar_bias)


def lidar_confidence(bev: FeatureGrid, region: DetectionRegion, weights: SurrogateWeights):
    return dv.sigmoid(lidar_logit(pooled_lidar_features(bev, region), weights))


# ---------------------------------------------------------------------------
# camera branch


def resample_region(img, rect: tuple, shape: tuple = TEMPLATE_SHAPE):
    """Bilinear resampling of image rows/cols ``rect`` to ``shape`` (grey, differentiable)."""
    iv = np.asarray(dv.value_of(img))
    H, W = iv.shape[:2]
    r0, r1, c0, c1 = rect
    if r0 < 0 or c0 < 0 or r1 > H or c1 > W or r0 >= r1 or c0 >= c1:
        raise RegionError(f"pixel region {rect} outside image {H}×{W}")
    h, w = shape
    ys = np.clip(r0 - 0.5 + (np.arange(h) + 0.5) * (r1 - r0) / h, 0.0, H - 1.0)
    xs = np.clip(c0 - 0.5 + (np.arange(w) + 0.5) * (c1 - c0) / w, 0.0, W - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    out = None
    for yy, xx, wt in ((y0, x0, (1 - wy) * (1 - wx)), (y0, x1, (1 - wy) * wx),
                       (y1, x0, wy * (1 - wx)), (y1, x1, wy * wx)):
        term = dv.mul(dv.take(img, (yy[:, None], xx[None, :])), wt)
        out = term if out is None else dv.add(out, term)
    return dv.sum_(dv.mul(out, GRAY), axis=2)


def ncc(patch, template: np.ndarray):
    """Normalized cross-correlation with a zero-mean unit-norm template; 0 for flat patches."""
    x = dv.sub(patch, dv.mean(patch))
    xv = np.asarray(dv.value_of(x))
    if np.sqrt(np.sum(xv * xv)) < 1e-9:
        return 0.0
    return dv.div(dv.sum_(dv.mul(x, template)), dv.sqrt(dv.sum_(dv.mul(x, x))))


def camera_logit(img, region: DetectionRegion, weights: SurrogateWeights):
    patch = resample_region(img, region.pixels, weights.template.shape)
    return dv.add(dv.mul(ncc(patch, weights.template), weights.camera_scale), weights.camera_bias)


def camera_confidence(img, region: DetectionRegion, weights: SurrogateWeights):
    return dv.sigmoid(camera_logit(img, region, weights))


def fuse_rule(conf_l, conf_c, weights: SurrogateWeights | None = None,
              tau_lidar: float = 0.5, tau_camera: float = 0.5) -> bool:
    """OR fusion with inclusive thresholds."""
    if weights is not None:
        tau_lidar, tau_camera = weights.tau_lidar, weights.tau_camera
    return bool(float(dv.value_of(conf_l)) >= tau_lidar or float(dv.value_of(conf_c)) >= tau_camera)


# ---------------------------------------------------------------------------
# calibration

LOGIT_HI = math.log(0.95 / 0.05)
LOGIT_OK = math.log(0.9 / 0.1)


def fit_logistic_1d(pos, neg, target_logit: float = LOGIT_HI):
    """Scale/bias putting the closest positive at +target and closest negative at -target."""
    pos, neg = np.asarray(pos, float), np.asarray(neg, float)
    gap = pos.min() - neg.max()
    if not gap > 1e-12:
        raise CalibrationError(f"camera scores are not separable (gap {gap:.3g})")
    scale = 2.0 * target_logit / gap
    bias = -scale * 0.5 * (pos.min() + neg.max())
    return float(scale), float(bias)


def _check_lidar(w, pos, neg, bias):
    lp, ln = pos @ w + bias, neg @ w + bias
    return lp.min() >= LOGIT_OK and ln.max() <= -LOGIT_OK


def fit_lidar_weights(pos: np.ndarray, neg: np.ndarray, bias: float = SHIPPED_LIDAR_BIAS,
                      margin: float = LOGIT_HI):
    """Smallest weights (feature-scaled L1) with a fixed bias meeting the logit margins.

    Every present case must reach logit >= ``margin`` and every absent case
    <= -``margin``. The L1 objective weighs each feature by its spread over the
    calibration set, so no feature is favoured for its units. Solved as a
    linear program; raises :class:`CalibrationError` when infeasible.
    """
    from scipy.optimize import linprog

    pos = np.atleast_2d(np.asarray(pos, float))
    neg = np.atleast_2d(np.asarray(neg, float))
    X = np.vstack([pos, neg])
    d = X.shape[1]
    spread = np.maximum(X.max(axis=0) - X.min(axis=0), 1e-9)
    sign = np.concatenate([np.ones(len(pos)), -np.ones(len(neg))])
    # w = u - v with u, v >= 0;  sign·(x·w + b) >= margin
    A = -(sign[:, None] * X)
    A_ub = np.hstack([A, -A])
    b_ub = sign * bias - margin
    res = linprog(np.concatenate([spread, spread]), A_ub=A_ub, b_ub=b_ub,
                  bounds=[(0, None)] * (2 * d), method="highs")
    if res.status != 0:
        raise CalibrationError(f"LiDAR features are not separable with bias {bias}")
    w = res.x[:d] - res.x[d:]
    if not _check_lidar(w, pos, neg, bias):
        raise CalibrationError("LiDAR fit missed a margin constraint")
    return w


def calibrate_surrogates(present_pooled, absent_pooled, present_patches, absent_patches,
                         tau_lidar: float = 0.5, tau_camera: float = 0.5) -> SurrogateWeights:
    """Fit both branches from pooled LiDAR features and grey camera patches.

    The template is the normalized mean of the normalized present patches.
    """
    w = fit_lidar_weights(np.asarray(present_pooled), np.asarray(absent_pooled))
    norm_p = [normalize_template(p) for p in present_patches]
    template = normalize_template(np.mean(norm_p, axis=0))
    cp = [float(dv.value_of(ncc(p, template))) for p in present_patches]
    cn = [float(dv.value_of(ncc(p, template))) for p in absent_patches]
    scale, bias = fit_logistic_1d(cp, cn)
    return SurrogateWeights(w, SHIPPED_LIDAR_BIAS, scale, bias, template, tau_lidar, tau_camera)


# ---------------------------------------------------------------------------
# weights file


def save_weights(weights: SurrogateWeights, path) -> None:
    f = lambda xs: " ".join(repr(float(x)) for x in np.ravel(xs))
    lines = [
        HEADER,
        f"lidar_weights = {f(weights.lidar_weights)}",
        f"lidar_bias = {weights.lidar_bias!r}",
        f"camera_scale = {weights.camera_scale!r}",
        f"camera_bias = {weights.camera_bias!r}",
        f"tau_lidar = {weights.tau_lidar!r}",
        f"tau_camera = {weights.tau_camera!r}",
        f"template_shape = {weights.template.shape[0]} {weights.template.shape[1]}",
        f"template = {f(weights.template)}",
    ]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_weights(path) -> SurrogateWeights:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != HEADER:
        raise ValueError(f"{path}: missing '{HEADER}' header")
    kv = {}
    for ln in lines[1:]:
        if ln.strip():
            k, v = ln.split("=", 1)
            kv[k.strip()] = v.split()
    try:
        shape = tuple(int(x) for x in kv["template_shape"])
        return SurrogateWeights(
            np.array(kv["lidar_weights"], dtype=float),
            float(kv["lidar_bias"][0]),
            float(kv["camera_scale"][0]),
            float(kv["camera_bias"][0]),
            np.array(kv["template"], dtype=float).reshape(shape),
            float(kv["tau_lidar"][0]),
            float(kv["tau_camera"][0]),
        )
    except KeyError as exc:
        raise ValueError(f"{path}: missing key {exc}") from None
