from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class SensorError(ValueError):
    pass


class BehindCameraError(SensorError):
    pass


@dataclass(frozen=True, eq=False)
class PointCloud:
    """LiDAR returns as an (N, 4) array of x, y, z (m) and intensity in [0, 1]."""

    points: np.ndarray

    def __post_init__(self):
        p = np.array(self.points, dtype=np.float64).reshape(-1, 4)
        if not np.all(np.isfinite(p)):
            raise SensorError("point cloud has non-finite values")
        if len(p) and (p[:, 3].min() < 0.0 or p[:, 3].max() > 1.0):
            raise SensorError("intensity outside [0, 1]")
        p.flags.writeable = False
        object.__setattr__(self, "points", p)

    def __len__(self):
        return len(self.points)

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]


@dataclass(frozen=True, eq=False)
class SensorImage:
    """H×W×3 raster with values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        d = np.array(self.data, dtype=np.float64)
        if d.ndim != 3 or d.shape[2] != 3:
            raise SensorError(f"image must be H×W×3, got {d.shape}")
        if d.size and (d.min() < 0.0 or d.max() > 1.0 or not np.all(np.isfinite(d))):
            raise SensorError("pixel values outside [0, 1]")
        d.flags.writeable = False
        object.__setattr__(self, "data", d)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True, eq=False)
class Calibration:
    """3×4 projection from homogeneous LiDAR-frame points to homogeneous pixels."""

    projection: np.ndarray

    def __post_init__(self):
        P = np.array(self.projection, dtype=np.float64).reshape(3, 4)
        if not np.all(np.isfinite(P)):
            raise SensorError("calibration has non-finite entries")
        if abs(np.linalg.det(P[:, :3])) < 1e-12:
            raise SensorError("calibration's left 3×3 block is singular")
        P.flags.writeable = False
        object.__setattr__(self, "projection", P)

    def camera_center(self) -> np.ndarray:
        M, p4 = self.projection[:, :3], self.projection[:, 3]
        return -np.linalg.solve(M, p4)

    def optical_axis(self) -> np.ndarray:
        """Unit viewing direction in the LiDAR frame (positive depth side)."""
        a = self.projection[2, :3]
        return a / np.linalg.norm(a)


@dataclass(frozen=True)
class LidarSpec:
    elevations: tuple = field(default_factory=lambda: tuple(np.linspace(-24.9, 2.0, 64)))
    azimuth_res: float = 0.17
    max_range: float = 120.0
    intensity: float = 0.4

    def __post_init__(self):
        el = tuple(float(e) for e in self.elevations)
        object.__setattr__(self, "elevations", el)
        if len(el) == 0:
            raise SensorError("LiDAR spec has no channels")
        if any(b < a for a, b in zip(el, el[1:])):
            raise SensorError("LiDAR channels must be sorted")
        if not self.azimuth_res > 0:
            raise SensorError("azimuth resolution must be positive")
        if not self.max_range > 0:
            raise SensorError("max range must be positive")
        if not 0.0 <= self.intensity <= 1.0:
            raise SensorError("object intensity must lie in [0, 1]")

    @property
    def n_channels(self) -> int:
        return len(self.elevations)

    @property
    def n_azimuth(self) -> int:
        return int(np.ceil(360.0 / self.azimuth_res - 1e-9))

    def azimuths(self) -> np.ndarray:
        return np.arange(self.n_azimuth) * self.azimuth_res - 180.0

    def directions(self, ch=None, az=None) -> np.ndarray:
        """Unit ray directions for channel / azimuth index arrays (default: full grid)."""
        if ch is None:
            ch, az = np.meshgrid(np.arange(self.n_channels), np.arange(self.n_azimuth), indexing="ij")
            ch, az = ch.ravel(), az.ravel()
        e = np.radians(np.asarray(self.elevations)[ch])
        a = np.radians(np.asarray(az) * self.azimuth_res - 180.0)
        return np.stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)], axis=-1)
