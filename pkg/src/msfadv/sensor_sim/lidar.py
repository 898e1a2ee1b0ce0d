"""Ray-cast LiDAR rendering of a mesh into a background scan.

The sensor sits at the origin of the LiDAR frame. Rays form a fixed
(channel × azimuth) grid. A background point is associated with the ray cell
nearest to its direction; the closest point of a cell is that ray's return.
An object hit closer than the return replaces it; rays without a return get
the hit appended. Hit points are differentiable in the triangle vertices
through the plane-intersection formula, with the set of hit rays and the face
each ray hits held fixed in the backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import diff_engine as dv
from ..geometry import TriMesh
from .types import LidarSpec, PointCloud, SensorError

T_MIN = 1e-6


def ray_triangle_intersect(origin, direction, v0, v1, v2):
    """Möller–Trumbore. Returns ``(t, b1, b2)`` or ``None`` for a miss."""
    o, d = np.asarray(origin, float), np.asarray(direction, float)
    v0, v1, v2 = (np.asarray(v, float) for v in (v0, v1, v2))
    t, b1, b2, hit = _mt(o[None], d[None], v0[None], v1[None], v2[None])
    if not hit[0]:
        return None
    return float(t[0]), float(b1[0]), float(b2[0])


def _mt(o, d, v0, v1, v2):
    """Broadcasting Möller–Trumbore over matching leading shapes."""
    e1 = v1 - v0
    e2 = v2 - v0
    p = np.cross(d, e2)
    det = np.einsum("...i,...i->...", e1, p)
    ok = np.abs(det) > 1e-12
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = o - v0
    b1 = np.einsum("...i,...i->...", s, p) * inv
    q = np.cross(s, e1)
    b2 = np.einsum("...i,...i->...", d, q) * inv
    t = np.einsum("...i,...i->...", e2, q) * inv
    hit = ok & (b1 >= 0.0) & (b2 >= 0.0) & (b1 + b2 <= 1.0) & (t > T_MIN)
    return t, b1, b2, hit


def nearest_hits(dirs: np.ndarray, tris: np.ndarray, origin=np.zeros(3), chunk_elems: int = 400_000):
    """Nearest face per ray. Returns (t, face) with t=inf / face=-1 on a miss."""
    R, F = len(dirs), len(tris)
    t_best = np.full(R, np.inf)
    f_best = np.full(R, -1, dtype=np.int64)
    if R == 0 or F == 0:
        return t_best, f_best
    step = max(1, chunk_elems // F)
    v0, v1, v2 = tris[None, :, 0], tris[None, :, 1], tris[None, :, 2]
    o = np.asarray(origin, float)[None, None, :]
    for s in range(0, R, step):
        d = dirs[s:s + step, None, :]
        t, _, _, hit = _mt(o, d, v0, v1, v2)
        t = np.where(hit, t, np.inf)
        k = np.argmin(t, axis=1)
        tk = t[np.arange(len(k)), k]
        t_best[s:s + step] = tk
        f_best[s:s + step] = np.where(np.isfinite(tk), k, -1)
    return t_best, f_best


class RayTable:
    """Association of a background scan with the ray grid of a spec."""

    def __init__(self, background: PointCloud, spec: LidarSpec):
        self.spec = spec
        self.background = background
        pts = background.points
        n_ch, n_az = spec.n_channels, spec.n_azimuth
        rep = np.full(n_ch * n_az, -1, dtype=np.int64)
        rng = np.full(n_ch * n_az, np.inf)
        if len(pts):
            ch, az = self.cell_of(pts[:, :3])
            r = np.linalg.norm(pts[:, :3], axis=1)
            cell = ch * n_az + az
            # nearest point per cell, ties to the lowest index
            order = np.lexsort((np.arange(len(pts)), r, cell))
            first = np.ones(len(order), dtype=bool)
            first[1:] = cell[order][1:] != cell[order][:-1]
            win = order[first]
            rep[cell[win]] = win
            rng[cell[win]] = r[win]
        self.rep = rep
        self.range = rng

    def cell_of(self, xyz: np.ndarray):
        spec = self.spec
        el = np.degrees(np.arctan2(xyz[:, 2], np.hypot(xyz[:, 0], xyz[:, 1])))
        chans = np.asarray(spec.elevations)
        i = np.clip(np.searchsorted(chans, el), 1, max(len(chans) - 1, 1))
        if len(chans) == 1:
            ch = np.zeros(len(el), dtype=np.int64)
        else:
            ch = np.where(np.abs(el - chans[i - 1]) <= np.abs(chans[i] - el), i - 1, i)
        az = np.degrees(np.arctan2(xyz[:, 1], xyz[:, 0]))
        col = np.rint((az + 180.0) / spec.azimuth_res).astype(np.int64) % spec.n_azimuth
        return ch.astype(np.int64), col


def candidate_rays(vertices: np.ndarray, spec: LidarSpec):
    """Ray (channel, azimuth) indices whose directions can meet the mesh's bounding volume."""
    lo, hi = vertices.min(axis=0), vertices.max(axis=0)
    # horizontal distance bounds from the xy bounding box
    dx = max(lo[0], 0.0, -hi[0])
    dy = max(lo[1], 0.0, -hi[1])
    rho_min = np.hypot(dx, dy)
    rho_max = np.max(np.hypot(vertices[:, 0], vertices[:, 1]))
    chans = np.asarray(spec.elevations)
    if rho_min <= 1e-9:
        ch = np.arange(spec.n_channels)
        az = np.arange(spec.n_azimuth)
    else:
        e_hi = np.degrees(np.arctan2(hi[2], rho_min if hi[2] > 0 else rho_max))
        e_lo = np.degrees(np.arctan2(lo[2], rho_min if lo[2] < 0 else rho_max))
        ch = np.flatnonzero((chans >= e_lo - 1e-9) & (chans <= e_hi + 1e-9))
        a_c = np.arctan2(np.mean(vertices[:, 1]), np.mean(vertices[:, 0]))
        rel = np.angle(np.exp(1j * (np.arctan2(vertices[:, 1], vertices[:, 0]) - a_c)))
        a0 = np.degrees(a_c + rel.min())
        a1 = np.degrees(a_c + rel.max())
        k0 = int(np.floor((a0 + 180.0) / spec.azimuth_res))
        k1 = int(np.ceil((a1 + 180.0) / spec.azimuth_res))
        az = np.arange(k0, k1 + 1) % spec.n_azimuth
        az = np.unique(az)
    cc, aa = np.meshgrid(ch, az, indexing="ij")
    return cc.ravel(), aa.ravel()


@dataclass
class LidarRender:
    points: object  # (M, 4) ndarray or Var
    replaced_rows: np.ndarray  # output rows overwritten by object hits
    appended_rows: np.ndarray  # output rows added for rays without a return
    ray_cells: np.ndarray  # flat (channel * n_az + azimuth) id of each hit
    hit_faces: np.ndarray

    def value(self) -> np.ndarray:
        return dv.value_of(self.points)

    def cloud(self) -> PointCloud:
        return PointCloud(self.value())

    @property
    def object_rows(self) -> np.ndarray:
        return np.concatenate([self.replaced_rows, self.appended_rows])


def hit_points(vertices, faces: np.ndarray, face_idx: np.ndarray, dirs: np.ndarray, origin=np.zeros(3)):
    """o + t·d with t from the face plane; differentiable in ``vertices``."""
    f = faces[face_idx]
    a = dv.take(vertices, f[:, 0])
    b = dv.take(vertices, f[:, 1])
    c = dv.take(vertices, f[:, 2])
    n = dv.cross(dv.sub(b, a), dv.sub(c, a))
    t = dv.div(dv.dot(n, dv.sub(a, origin)), dv.dot(n, dirs))
    return dv.add(dv.mul(dv.reshape(t, (-1, 1)), dirs), origin)


def render_lidar_diff(vertices, faces: np.ndarray, background: PointCloud, spec: LidarSpec,
                      table: RayTable | None = None) -> LidarRender:
    if spec is None or spec.n_channels == 0:
        raise SensorError("empty LiDAR spec")
    if table is None:
        table = RayTable(background, spec)
    base = background.points
    none = np.zeros(0, dtype=np.int64)
    vv = np.asarray(dv.value_of(vertices))
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if len(faces) == 0:
        return LidarRender(base, none, none, none, none)
    ch, az = candidate_rays(vv, spec)
    dirs = spec.directions(ch, az)
    t, fi = nearest_hits(dirs, vv[faces])
    cell = ch * spec.n_azimuth + az
    bg = table.range[cell]
    hit = (fi >= 0) & (t <= spec.max_range) & (t < bg)
    cell, fi, dirs = cell[hit], fi[hit], dirs[hit]
    order = np.argsort(cell, kind="stable")
    cell, fi, dirs = cell[order], fi[order], dirs[order]
    if cell.size == 0:
        return LidarRender(base, none, none, none, none)
    P = hit_points(vertices, faces, fi, dirs)
    pts4 = dv.concatenate([P, np.full((len(cell), 1), spec.intensity)], axis=1)
    rows = table.rep[cell]
    has_bg = rows >= 0
    rep_rows = rows[has_bg]
    out = dv.replace_rows(base, rep_rows, dv.take(pts4, np.flatnonzero(has_bg)))
    app = np.flatnonzero(~has_bg)
    if app.size:
        out = dv.concatenate([out, dv.take(pts4, app)], axis=0)
    app_rows = np.arange(len(base), len(base) + app.size)
    cells = np.concatenate([cell[has_bg], cell[~has_bg]])
    fids = np.concatenate([fi[has_bg], fi[~has_bg]])
    return LidarRender(out, rep_rows, app_rows, cells, fids)


def render_lidar(mesh: TriMesh, background: PointCloud, spec: LidarSpec | None = None,
                 table: RayTable | None = None) -> PointCloud:
    spec = LidarSpec() if spec is None else spec
    if mesh.is_empty():
        return background
    return render_lidar_diff(mesh.vertices, mesh.faces, background, spec, table).cloud()
