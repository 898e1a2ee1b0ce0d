"""KITTI-style point clouds, binary PPM images and ``P:`` calibration files."""

from __future__ import annotations

import numpy as np

from .types import Calibration, PointCloud, SensorError, SensorImage


def read_bin(path) -> PointCloud:
    raw = np.fromfile(path, dtype="<f4")
    if raw.size % 4:
        raise SensorError(f"{path}: size is not a multiple of 4 float32 values")
    pts = raw.reshape(-1, 4).astype(np.float64)
    pts[:, 3] = np.clip(pts[:, 3], 0.0, 1.0)
    return PointCloud(pts)


def write_bin(pc: PointCloud, path) -> None:
    np.asarray(pc.points, dtype="<f4").tofile(path)


def quantize_points(points: np.ndarray) -> np.ndarray:
    """Round-trip through float32, as the binary file would."""
    return np.asarray(points, dtype=np.float32).astype(np.float64)


def _ppm_tokens(buf: bytes, count: int):
    toks, pos = [], 0
    while len(toks) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise SensorError("truncated PPM header")
        toks.append(buf[start:pos])
    return toks, pos + 1


def read_ppm(path) -> SensorImage:
    with open(path, "rb") as fh:
        buf = fh.read()
    toks, pos = _ppm_tokens(buf, 4)
    if toks[0] != b"P6":
        raise SensorError(f"{path}: not a binary PPM (P6)")
    w, h, maxval = (int(t) for t in toks[1:])
    if maxval != 255:
        raise SensorError(f"{path}: only 8-bit PPM supported")
    body = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=pos)
    return SensorImage(body.reshape(h, w, 3).astype(np.float64) / 255.0)


def to_uint8(data: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(data) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def quantize_image(data: np.ndarray) -> np.ndarray:
    return to_uint8(data).astype(np.float64) / 255.0


def write_ppm(img: SensorImage, path) -> None:
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (img.width, img.height))
        fh.write(to_uint8(img.data).tobytes())


def read_calib(path) -> Calibration:
    with open(path) as fh:
        for line in fh:
            if line.startswith("P:"):
                vals = line[2:].split()
                if len(vals) != 12:
                    raise SensorError(f"{path}: expected 12 values after 'P:', got {len(vals)}")
                return Calibration(np.array([float(v) for v in vals]).reshape(3, 4))
    raise SensorError(f"{path}: no 'P:' line")


def write_calib(calib: Calibration, path) -> None:
    with open(path, "w") as fh:
        fh.write("P: " + " ".join(repr(float(x)) for x in calib.projection.ravel()) + "\n")
