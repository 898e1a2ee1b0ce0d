"""Procedural closed meshes used by the tests, the CLI and the shipped scenario."""

from __future__ import annotations

import numpy as np

from .mesh import TriMesh


def box(size=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0)) -> TriMesh:
    """Axis-aligned box, 8 vertices and 12 outward-facing triangles."""
    sx, sy, sz = (0.5 * float(s) for s in size)
    v = np.array(
        [[-sx, -sy, -sz], [sx, -sy, -sz], [sx, sy, -sz], [-sx, sy, -sz],
         [-sx, -sy, sz], [sx, -sy, sz], [sx, sy, sz], [-sx, sy, sz]]
    ) + np.asarray(center, dtype=np.float64)
    f = [
        [0, 2, 1], [0, 3, 2],  # bottom
        [4, 5, 6], [4, 6, 7],  # top
        [0, 1, 5], [0, 5, 4],  # y-
        [2, 3, 7], [2, 7, 6],  # y+
        [1, 2, 6], [1, 6, 5],  # x+
        [3, 0, 4], [3, 4, 7],  # x-
    ]
    return TriMesh(v, f)


def subdivided_box(n: int, size=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0)) -> TriMesh:
    """Box whose faces are n×n quad grids (12·n² triangles, shared seams)."""
    half = 0.5 * np.asarray(size, dtype=np.float64)
    index: dict[tuple, int] = {}
    verts: list = []

    def vid(p):
        key = tuple(np.round(p / half * n).astype(int))
        if key not in index:
            index[key] = len(verts)
            verts.append(p)
        return index[key]

    faces = []
    t = np.linspace(-1.0, 1.0, n + 1)
    for axis in range(3):
        for sign in (-1.0, 1.0):
            u_ax, v_ax = [a for a in range(3) if a != axis]
            for i in range(n):
                for j in range(n):
                    quad = []
                    for di, dj in ((0, 0), (1, 0), (1, 1), (0, 1)):
                        p = np.zeros(3)
                        p[axis] = sign
                        p[u_ax] = t[i + di]
                        p[v_ax] = t[j + dj]
                        quad.append(vid(p * half))
                    a, b, c, d = quad
                    tris = [[a, b, c], [a, c, d]]
                    # orient outward: (u, v, axis) right-handed check
                    e_u = np.eye(3)[u_ax]
                    e_v = np.eye(3)[v_ax]
                    if np.dot(np.cross(e_u, e_v), np.eye(3)[axis]) * sign < 0:
                        tris = [[a, c, b], [a, d, c]]
                    faces += tris
    return TriMesh(np.array(verts) + np.asarray(center, dtype=np.float64), faces)


def tetrahedron(scale: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriMesh:
    v = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=np.float64)
    f = [[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]]
    return TriMesh(v * scale + np.asarray(center, dtype=np.float64), f)


def icosphere(subdivisions: int = 2, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriMesh:
    p = (1.0 + 5.0 ** 0.5) / 2.0
    v = [[-1, p, 0], [1, p, 0], [-1, -p, 0], [1, -p, 0],
         [0, -1, p], [0, 1, p], [0, -1, -p], [0, 1, -p],
         [p, 0, -1], [p, 0, 1], [-p, 0, -1], [-p, 0, 1]]
    f = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
         [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
         [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
         [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    verts = [np.array(x, dtype=np.float64) / np.linalg.norm(x) for x in v]
    for _ in range(subdivisions):
        cache: dict[tuple, int] = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        nf = []
        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        f = nf
    return TriMesh(np.array(verts) * radius + np.asarray(center, dtype=np.float64), f)


def cone(radius: float = 0.35, height: float = 1.0, segments: int = 16, rings: int = 4,
         top_radius: float = 0.0) -> TriMesh:
    """Closed cone standing on z = 0, axis along z.

    ``rings`` horizontal vertex rings (bottom included) give the attack interior
    vertices to move; a positive ``top_radius`` truncates it into a frustum.
    """
    ang = 2.0 * np.pi * np.arange(segments) / segments
    verts = [[0.0, 0.0, 0.0]]  # base centre
    for r in range(rings):
        s = r / rings
        rad = radius + (top_radius - radius) * s
        z = height * s
        verts += [[rad * np.cos(a), rad * np.sin(a), z] for a in ang]
    verts.append([0.0, 0.0, height])  # apex / top centre
    apex = len(verts) - 1

    def ring(r, k):
        return 1 + r * segments + (k % segments)

    faces = []
    for k in range(segments):
        faces.append([0, ring(0, k + 1), ring(0, k)])
        for r in range(rings - 1):
            a, b = ring(r, k), ring(r, k + 1)
            c, d = ring(r + 1, k + 1), ring(r + 1, k)
            faces += [[a, b, c], [a, c, d]]
        faces.append([ring(rings - 1, k), ring(rings - 1, k + 1), apex])
    return TriMesh(np.array(verts), faces)


def quad(corners) -> TriMesh:
    """Single planar quad (two triangles) from 4 corners in order."""
    return TriMesh(np.asarray(corners, dtype=np.float64), [[0, 1, 2], [0, 2, 3]])


def flat_grid(n: int = 4, size: float = 1.0) -> TriMesh:
    """Planar (n+1)×(n+1) vertex grid in z = 0; interior vertices are flat."""
    t = np.linspace(0.0, size, n + 1)
    xx, yy = np.meshgrid(t, t, indexing="ij")
    v = np.stack([xx.ravel(), yy.ravel(), np.zeros(xx.size)], axis=1)
    faces = []
    for i in range(n):
        for j in range(n):
            a = i * (n + 1) + j
            b, c, d = a + (n + 1), a + (n + 2), a + 1
            faces += [[a, b, c], [a, c, d]]
    return TriMesh(v, faces)


def merge(*meshes: TriMesh) -> TriMesh:
    verts, faces, off = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + off)
        off += m.n_vertices
    return TriMesh(np.concatenate(verts), np.concatenate(faces))
