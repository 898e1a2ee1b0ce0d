"""Soft-silhouette camera rendering of a mesh over a background image.

Pixel (row i, column j) samples image coordinates (u, v) = (j, i).

Coverage of a pixel is ``sigmoid(-sd / blur_sigma)`` where ``sd`` is the signed
distance to the projected silhouette outline: the contour edges, i.e. edges
of front-facing triangles whose neighbour across the edge is back-facing or
missing. Inside the silhouette the sign is negative. Beyond ±6·blur_sigma the
coverage is set to exactly 1 or 0 so far pixels keep the background verbatim.
Visible surface colour is Lambertian with the light placed at the camera.
Everything downstream of the projected vertex positions is differentiable; the
owner triangle of a pixel and the nearest contour edge are fixed selections.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .. import diff_engine as dv
from ..geometry import TriMesh
from .types import BehindCameraError, Calibration, SensorImage

AMBIENT = 0.4
DIFFUSE = 0.6
CUTOFF_SIGMAS = 6.0
NEAR = 0.05
DEFAULT_ALBEDO = (0.9, 0.45, 0.1)


def project_points(calib: Calibration, pts):
    """Perspective projection of (N,3) points; returns (uv (N,2), depth (N,))."""
    P = calib.projection
    h = dv.add(dv.matmul(pts, P[:, :3].T), P[:, 3])
    depth = dv.take(h, (slice(None), 2))
    uv = dv.div(dv.take(h, (slice(None), slice(0, 2))), dv.reshape(depth, (-1, 1)))
    return uv, depth


def project_point(calib: Calibration, p):
    """Pixel coordinates of one point; raises :class:`BehindCameraError` for depth <= 0."""
    P = calib.projection
    pv = np.asarray(dv.value_of(p), dtype=np.float64)
    depth = P[2, :3] @ pv + P[2, 3]
    if not depth > 0:
        raise BehindCameraError(f"point {pv.tolist()} is behind the camera (depth {depth:.6g})")
    uv, _ = project_points(calib, dv.reshape(p, (1, 3)))
    return dv.reshape(uv, (2,))


@dataclass
class CameraRender:
    image: object  # (H, W, 3) ndarray or Var
    coverage: np.ndarray  # (H, W) forward coverage
    window: tuple | None  # (row0, row1, col0, col1), half-open
    behind_camera: bool = False

    def value(self) -> np.ndarray:
        return dv.value_of(self.image)


def _contour_edges(faces: np.ndarray, front: np.ndarray, n_vertices: int):
    """Directed edges of front faces whose twin face is missing or not front-facing."""
    F = len(faces)
    d_from = faces[:, [0, 1, 2]].ravel()
    d_to = faces[:, [1, 2, 0]].ravel()
    owner = np.repeat(np.arange(F), 3)
    key = d_from * n_vertices + d_to
    order = np.argsort(key, kind="stable")
    skey = key[order]
    fr = np.flatnonzero(front[owner])
    twin = d_to[fr] * n_vertices + d_from[fr]
    pos = np.clip(np.searchsorted(skey, twin), 0, len(skey) - 1)
    found = skey[pos] == twin
    twin_face = np.where(found, owner[order[pos]], -1)
    contour = (twin_face < 0) | ~front[np.maximum(twin_face, 0)]
    sel = fr[contour]
    return np.stack([d_from[sel], d_to[sel]], axis=1), owner[sel]


def _segment_dist2(p, a, b):
    """Squared distance from points p (P,2) to segments a-b (K,2) -> (P,K), plus the segment parameter."""
    ab = b - a
    L2 = np.maximum(np.sum(ab * ab, axis=1), 1e-300)
    ap = p[:, None, :] - a[None]
    s = np.clip(np.einsum("pki,ki->pk", ap, ab) / L2, 0.0, 1.0)
    diff = ap - s[..., None] * ab[None]
    return np.sum(diff * diff, axis=-1), s


def _edge_distance(pix, a, b, s):
    """Differentiable distance from fixed pixels to segments with varying ends."""
    ab = dv.sub(b, a)
    pa = dv.sub(pix, a)
    pb = dv.sub(pix, b)
    eps = 1e-18
    d_a = dv.sqrt(dv.add(dv.dot(pa, pa), eps))
    d_b = dv.sqrt(dv.add(dv.dot(pb, pb), eps))
    abx, aby = dv.take(ab, (slice(None), 0)), dv.take(ab, (slice(None), 1))
    pax, pay = dv.take(pa, (slice(None), 0)), dv.take(pa, (slice(None), 1))
    crs = dv.sub(dv.mul(abx, pay), dv.mul(aby, pax))
    d_perp = dv.div(dv.abs_(crs), dv.sqrt(dv.add(dv.dot(ab, ab), eps)))
    out = dv.where(s <= 0.0, d_a, d_perp)
    return dv.where(s >= 1.0, d_b, out)


def face_shading(vertices, faces: np.ndarray, light: np.ndarray, albedo) -> object:
    a = dv.take(vertices, faces[:, 0])
    b = dv.take(vertices, faces[:, 1])
    c = dv.take(vertices, faces[:, 2])
    n = dv.cross(dv.sub(b, a), dv.sub(c, a))
    nn = dv.div(n, dv.reshape(dv.norm(n), (-1, 1)))
    lam = dv.maximum(dv.dot(nn, light), 0.0)
    return dv.mul(dv.reshape(dv.add(dv.mul(lam, DIFFUSE), AMBIENT), (-1, 1)), np.asarray(albedo, dtype=np.float64))


def render_camera_diff(vertices, faces: np.ndarray, background: SensorImage, calib: Calibration,
                       albedo=DEFAULT_ALBEDO, blur_sigma: float = 1.0) -> CameraRender:
    bg = background.data
    H, W = bg.shape[:2]
    no_cov = np.zeros((H, W))
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if len(faces) == 0:
        return CameraRender(bg, no_cov, None)
    if not blur_sigma > 0:
        raise ValueError("blur_sigma must be positive")
    vv = np.asarray(dv.value_of(vertices))
    P = calib.projection
    depth_v = vv @ P[2, :3] + P[2, 3]
    valid = np.all(depth_v[faces] > NEAR, axis=1)
    if not valid.any():
        warnings.warn("mesh is entirely behind the camera; image left unchanged")
        return CameraRender(bg, no_cov, None, behind_camera=True)
    C = calib.camera_center()
    tri = vv[faces]
    nrm = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    front = valid & (np.einsum("fi,fi->f", nrm, C - tri[:, 0]) > 0)
    if not front.any():
        return CameraRender(bg, no_cov, None)

    uv_val = (vv @ P[:2, :3].T + P[:2, 3]) / np.where(depth_v > NEAR, depth_v, 1.0)[:, None]
    ff = np.flatnonzero(front)
    used = np.unique(faces[ff])
    pad = int(np.ceil(CUTOFF_SIGMAS * blur_sigma)) + 2
    c0 = max(int(np.floor(uv_val[used, 0].min())) - pad, 0)
    c1 = min(int(np.ceil(uv_val[used, 0].max())) + pad + 1, W)
    r0 = max(int(np.floor(uv_val[used, 1].min())) - pad, 0)
    r1 = min(int(np.ceil(uv_val[used, 1].max())) + pad + 1, H)
    if c0 >= c1 or r0 >= r1:
        return CameraRender(bg, no_cov, None)
    rr, cc = np.meshgrid(np.arange(r0, r1), np.arange(c0, c1), indexing="ij")
    pix = np.stack([cc.ravel(), rr.ravel()], axis=1).astype(np.float64)
    npix = len(pix)

    # owner face by screen-space barycentrics and interpolated inverse depth
    best_iz = np.full(npix, -np.inf)
    owner = np.full(npix, -1, dtype=np.int64)
    step = max(1, 200_000 // max(npix, 1))
    for s in range(0, len(ff), step):
        fs = ff[s:s + step]
        A, B, Cc = (uv_val[faces[fs, k]] for k in range(3))
        iz = 1.0 / depth_v[faces[fs]]
        v0, v1 = B - A, Cc - A
        den = v0[:, 0] * v1[:, 1] - v0[:, 1] * v1[:, 0]
        okf = np.abs(den) > 1e-12
        den = np.where(okf, den, 1.0)
        q = pix[None, :, :] - A[:, None, :]
        l1 = (q[..., 0] * v1[:, None, 1] - q[..., 1] * v1[:, None, 0]) / den[:, None]
        l2 = (v0[:, None, 0] * q[..., 1] - v0[:, None, 1] * q[..., 0]) / den[:, None]
        l0 = 1.0 - l1 - l2
        ins = okf[:, None] & (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
        z = l0 * iz[:, 0, None] + l1 * iz[:, 1, None] + l2 * iz[:, 2, None]
        z = np.where(ins, z, -np.inf)
        k = np.argmax(z, axis=0)
        zk = z[k, np.arange(npix)]
        better = zk > best_iz
        best_iz = np.where(better, zk, best_iz)
        owner = np.where(better, fs[k], owner)
    inside = owner >= 0

    edges, edge_face = _contour_edges(faces, front, len(vv))
    if len(edges):
        d2, sparam = _segment_dist2(pix, uv_val[edges[:, 0]], uv_val[edges[:, 1]])
        near_e = np.argmin(d2, axis=1)
        dist = np.sqrt(d2[np.arange(npix), near_e])
        s_near = sparam[np.arange(npix), near_e]
    else:
        near_e = np.zeros(npix, dtype=np.int64)
        dist = np.full(npix, np.inf)
        s_near = np.zeros(npix)
    sd = np.where(inside, -dist, dist)
    band = np.abs(sd) < CUTOFF_SIGMAS * blur_sigma
    cov_val = np.where(sd <= -CUTOFF_SIGMAS * blur_sigma, 1.0, 0.0)
    with np.errstate(over="ignore"):
        cov_val[band] = 1.0 / (1.0 + np.exp(sd[band] / blur_sigma))

    shade_face = np.where(inside, owner, edge_face[near_e] if len(edges) else 0)
    touched = cov_val > 0
    tidx = np.flatnonzero(touched)
    bg_patch = bg[r0:r1, c0:c1].reshape(-1, 3)

    light = -calib.optical_axis()
    uf = np.unique(shade_face[tidx])
    shade = face_shading(vertices, faces[uf], light, albedo)
    shade_pix = dv.take(shade, np.searchsorted(uf, shade_face[tidx]))

    bidx = np.flatnonzero(band)
    if bidx.size and dv.is_var(vertices):
        uv, _ = project_points(calib, vertices)
        e = near_e[bidx]
        a = dv.take(uv, edges[e, 0])
        b = dv.take(uv, edges[e, 1])
        d = _edge_distance(pix[bidx], a, b, s_near[bidx])
        sgn = np.where(inside[bidx], -1.0, 1.0)
        cov_band = dv.sigmoid(dv.mul(d, -sgn / blur_sigma))
        cov_full = dv.replace_rows(cov_val, bidx, cov_band)
        cov_t = dv.take(cov_full, tidx)
    else:
        cov_t = cov_val[tidx]
    cov_col = dv.reshape(cov_t, (-1, 1))
    bg_t = bg_patch[tidx]
    mixed = dv.add(dv.mul(cov_col, shade_pix), dv.mul(dv.sub(1.0, cov_col), bg_t))

    rows, cols = rr.ravel()[tidx], cc.ravel()[tidx]
    image = dv.embed(bg, mixed, (rows, cols))
    coverage = np.zeros((H, W))
    coverage[r0:r1, c0:c1] = cov_val.reshape(r1 - r0, c1 - c0)
    return CameraRender(image, coverage, (r0, r1, c0, c1))


def render_camera(mesh: TriMesh, background: SensorImage, calib: Calibration,
                  albedo=DEFAULT_ALBEDO, blur_sigma: float = 1.0) -> SensorImage:
    if mesh.is_empty():
        return background
    out = render_camera_diff(mesh.vertices, mesh.faces, background, calib, albedo, blur_sigma)
    if out.window is None:
        return background
    return SensorImage(np.clip(out.value(), 0.0, 1.0))
