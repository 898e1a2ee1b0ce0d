"""Printability metrics: watertightness, self-intersection ratio, Gaussian curvature."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .mesh import TriMesh


def watertightness(mesh: TriMesh) -> bool:
    """True iff every undirected edge has exactly two faces using it in opposite directions."""
    f = mesh.faces
    if len(f) == 0:
        return False
    d = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    # every directed edge must be unique and have its reverse present exactly once
    dirs, counts = np.unique(d, axis=0, return_counts=True)
    if np.any(counts != 1):
        return False
    fwd = dirs[:, 0] * (mesh.n_vertices + 1) + dirs[:, 1]
    rev = np.sort(dirs[:, 1] * (mesh.n_vertices + 1) + dirs[:, 0])
    return bool(np.array_equal(np.sort(fwd), rev))


def boundary_vertices(mesh: TriMesh) -> np.ndarray:
    """Vertices touching an edge used by exactly one face."""
    f = mesh.faces
    e = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    return np.unique(uniq[counts == 1].ravel())


# ---------------------------------------------------------------------------
# triangle-triangle intersection


def _orient(a, b, c, d):
    """Signed volume sign of (b-a, c-a, d-a), vectorized over leading axes."""
    return np.einsum("...i,...i->...", np.cross(b - a, c - a), d - a)


def _segment_hits_triangle(p, q, a, b, c, tol):
    """Non-coplanar segment pq vs triangle abc, boundaries inclusive."""
    sp = _orient(a, b, c, p)
    sq = _orient(a, b, c, q)
    straddles = (sp * sq <= 0) & ~((np.abs(sp) <= tol) & (np.abs(sq) <= tol))
    s1 = _orient(p, q, a, b)
    s2 = _orient(p, q, b, c)
    s3 = _orient(p, q, c, a)
    inside = ((s1 >= -tol) & (s2 >= -tol) & (s3 >= -tol)) | ((s1 <= tol) & (s2 <= tol) & (s3 <= tol))
    return straddles & inside


def _coplanar_overlap(t1, t2):
    """2D overlap test for two coplanar triangles (3×3 arrays)."""
    n = np.cross(t1[1] - t1[0], t1[2] - t1[0])
    drop = int(np.argmax(np.abs(n)))
    keep = [k for k in range(3) if k != drop]
    A, B = t1[:, keep], t2[:, keep]

    def cross2(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    def seg_int(p1, p2, p3, p4):
        d1, d2 = cross2(p3, p4, p1), cross2(p3, p4, p2)
        d3, d4 = cross2(p1, p2, p3), cross2(p1, p2, p4)
        return d1 * d2 <= 0 and d3 * d4 <= 0

    def inside(p, T):
        s = [cross2(T[i], T[(i + 1) % 3], p) for i in range(3)]
        return all(x >= 0 for x in s) or all(x <= 0 for x in s)

    for i in range(3):
        for j in range(3):
            if seg_int(A[i], A[(i + 1) % 3], B[j], B[(j + 1) % 3]):
                return True
    return inside(A[0], B) or inside(B[0], A)


def triangles_intersect(t1: np.ndarray, t2: np.ndarray, tol: float = 0.0) -> bool:
    """Exact-predicate style test for two triangles given as 3×3 vertex arrays."""
    res = _pairs_intersect(t1[None], t2[None], tol)
    return bool(res[0])


def _pairs_intersect(T1, T2, tol):
    n1 = np.cross(T1[:, 1] - T1[:, 0], T1[:, 2] - T1[:, 0])
    scale = np.linalg.norm(n1, axis=1)
    d = np.einsum("ni,nki->nk", n1, T2 - T1[:, None, 0])
    coplanar = np.all(np.abs(d) <= 1e-12 * np.maximum(scale, 1e-300)[:, None] * 1e3 + tol, axis=1)
    hit = np.zeros(len(T1), dtype=bool)
    for k in range(3):
        hit |= _segment_hits_triangle(T1[:, k], T1[:, (k + 1) % 3], T2[:, 0], T2[:, 1], T2[:, 2], tol)
        hit |= _segment_hits_triangle(T2[:, k], T2[:, (k + 1) % 3], T1[:, 0], T1[:, 1], T1[:, 2], tol)
    hit &= ~coplanar
    for i in np.flatnonzero(coplanar):
        hit[i] = _coplanar_overlap(T1[i], T2[i])
    return hit


def self_intersection_ratio(mesh: TriMesh) -> float:
    """Fraction of faces intersecting at least one face they share no vertex with."""
    F = mesh.n_faces
    if F == 0:
        return 0.0
    tri = mesh.vertices[mesh.faces]
    lo, hi = tri.min(axis=1), tri.max(axis=1)
    flagged = np.zeros(F, dtype=bool)
    for i in range(F - 1):
        j = np.arange(i + 1, F)
        ok = np.all((lo[j] <= hi[i]) & (hi[j] >= lo[i]), axis=1)
        j = j[ok]
        if j.size == 0:
            continue
        share = (mesh.faces[j][:, :, None] == mesh.faces[i][None, None, :]).any(axis=(1, 2))
        j = j[~share]
        if j.size == 0:
            continue
        hit = _pairs_intersect(np.broadcast_to(tri[i], (j.size, 3, 3)), tri[j], 0.0)
        if hit.any():
            flagged[i] = True
            flagged[j[hit]] = True
    return float(flagged.mean())


# ---------------------------------------------------------------------------
# curvature


def _corner_angles(mesh: TriMesh) -> np.ndarray:
    v, f = mesh.vertices, mesh.faces
    ang = np.zeros((len(f), 3))
    for k in range(3):
        a = v[f[:, k]]
        b = v[f[:, (k + 1) % 3]]
        c = v[f[:, (k + 2) % 3]]
        u, w = b - a, c - a
        cosv = np.einsum("ij,ij->i", u, w) / (np.linalg.norm(u, axis=1) * np.linalg.norm(w, axis=1))
        ang[:, k] = np.arccos(np.clip(cosv, -1.0, 1.0))
    return ang


def angle_deficits(mesh: TriMesh) -> np.ndarray:
    """2π minus the incident corner angles, per vertex."""
    ang = _corner_angles(mesh)
    total = np.zeros(mesh.n_vertices)
    np.add.at(total, mesh.faces.ravel(), ang.ravel())
    return 2.0 * np.pi - total


def mixed_areas(mesh: TriMesh) -> np.ndarray:
    """Mixed Voronoi areas: circumcentric for non-obtuse faces, area/2 or /4 otherwise."""
    v, f = mesh.vertices, mesh.faces
    ang = _corner_angles(mesh)
    area = mesh.face_areas()
    out = np.zeros(mesh.n_vertices)
    obtuse = ang > np.pi / 2
    any_obt = obtuse.any(axis=1)
    for k in range(3):
        i = f[:, k]
        j = f[:, (k + 1) % 3]
        l = f[:, (k + 2) % 3]
        # Voronoi part: edges (i,j) opposite corner l, (i,l) opposite corner j
        cot_l = 1.0 / np.tan(ang[:, (k + 2) % 3])
        cot_j = 1.0 / np.tan(ang[:, (k + 1) % 3])
        e_ij = np.sum((v[j] - v[i]) ** 2, axis=1)
        e_il = np.sum((v[l] - v[i]) ** 2, axis=1)
        vor = (e_ij * cot_l + e_il * cot_j) / 8.0
        contrib = np.where(any_obt, np.where(obtuse[:, k], area / 2.0, area / 4.0), vor)
        np.add.at(out, i, contrib)
    return out


@dataclass
class CurvatureResult:
    per_vertex: np.ndarray  # NaN where skipped
    mean: float
    skipped: np.ndarray  # vertex indices without a usable area (or on the boundary)


def mean_gaussian_curvature(mesh: TriMesh) -> CurvatureResult:
    """K(v) = angle deficit / mixed area; boundary and zero-area vertices are skipped."""
    K = np.full(mesh.n_vertices, np.nan)
    used = np.zeros(mesh.n_vertices, dtype=bool)
    used[mesh.faces.ravel()] = True
    area = mixed_areas(mesh)
    ok = used & (area > 0)
    if not watertightness(mesh):
        ok[boundary_vertices(mesh)] = False
    K[ok] = angle_deficits(mesh)[ok] / area[ok]
    skipped = np.flatnonzero(~ok)
    if skipped.size and np.any(used[skipped]):
        warnings.warn(f"{int(np.sum(used[skipped]))} vertices skipped in curvature (boundary or zero area)")
    mean = float(np.mean(K[ok])) if ok.any() else float("nan")
    return CurvatureResult(K, mean, skipped)


def euler_characteristic(mesh: TriMesh) -> int:
    f = mesh.faces
    e = np.unique(np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1), axis=0)
    used = np.unique(f.ravel())
    return int(len(used) - len(e) + len(f))


# ---------------------------------------------------------------------------
# distances


def point_triangle_distance(p: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Distance from each point (P,3) to each triangle (T,3,3) -> (P,T). Closest-point by regions."""
    p = p[:, None, :]
    a, b, c = tri[None, :, 0], tri[None, :, 1], tri[None, :, 2]
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.sum(ab * ap, -1)
    d2 = np.sum(ac * ap, -1)
    bp = p - b
    d3 = np.sum(ab * bp, -1)
    d4 = np.sum(ac * bp, -1)
    cp = p - c
    d5 = np.sum(ab * cp, -1)
    d6 = np.sum(ac * cp, -1)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
        closest = a + ab * v[..., None] + ac * w[..., None]
        # edge regions
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
    e_ab = a + ab * t_ab[..., None]
    e_ac = a + ac * t_ac[..., None]
    e_bc = b + (c - b) * t_bc[..., None]
    conds = [
        (d1 <= 0) & (d2 <= 0),
        (d3 >= 0) & (d4 <= d3),
        (d6 >= 0) & (d5 <= d6),
        (vc <= 0) & (d1 >= 0) & (d3 <= 0),
        (vb <= 0) & (d2 >= 0) & (d6 <= 0),
        (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0),
    ]
    choices = [a, b, c, e_ab, e_ac, e_bc]
    out = closest
    for cond, ch in zip(reversed(conds), reversed(choices)):
        out = np.where(cond[..., None], np.broadcast_to(ch, out.shape), out)
    return np.linalg.norm(p - out, axis=-1)


def sample_surface(mesh: TriMesh, n: int, rng: np.random.Generator) -> np.ndarray:
    area = mesh.face_areas()
    fi = rng.choice(mesh.n_faces, size=n, p=area / area.sum())
    r1, r2 = rng.random(n), rng.random(n)
    s = np.sqrt(r1)
    tri = mesh.vertices[mesh.faces[fi]]
    return (1 - s)[:, None] * tri[:, 0] + (s * (1 - r2))[:, None] * tri[:, 1] + (s * r2)[:, None] * tri[:, 2]


def point_mesh_distance(points: np.ndarray, mesh: TriMesh, chunk: int = 256) -> np.ndarray:
    tri = mesh.vertices[mesh.faces]
    out = np.empty(len(points))
    for s in range(0, len(points), chunk):
        out[s:s + chunk] = point_triangle_distance(points[s:s + chunk], tri).min(axis=1)
    return out


def hausdorff_distance(a: TriMesh, b: TriMesh, samples: int = 2000, seed: int = 0) -> float:
    """Symmetric Hausdorff estimate from vertices plus random surface samples of each mesh."""
    rng = np.random.default_rng(seed)
    pa = np.concatenate([a.vertices, sample_surface(a, samples, rng)])
    pb = np.concatenate([b.vertices, sample_surface(b, samples, rng)])
    return float(max(point_mesh_distance(pa, b).max(), point_mesh_distance(pb, a).max()))
