"""Quadric edge-collapse decimation for closed manifold meshes.

Each vertex carries the sum of the fundamental quadrics of its incident face
planes. An edge collapse moves both endpoints to the position minimizing the
summed quadric (falling back to the endpoints / midpoint when the system is
singular). Collapses are taken cheapest first from a lazily-updated heap and
rejected when they would break manifoldness (link condition), flip a face
normal or create a sliver.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from .mesh import TriMesh
from .printability import watertightness


@dataclass
class DecimationResult:
    mesh: TriMesh
    reached_target: bool
    faces: int


def _plane_quadric(p0, p1, p2):
    n = np.cross(p1 - p0, p2 - p0)
    ln = np.linalg.norm(n)
    if ln == 0:
        return np.zeros((4, 4))
    n = n / ln
    pl = np.append(n, -np.dot(n, p0))
    # area weighting keeps large flat faces dominant
    return 0.5 * ln * np.outer(pl, pl)


def _optimal(Q, a, b):
    A = Q.copy()
    A[3] = [0, 0, 0, 1]
    cands = []
    if abs(np.linalg.det(A)) > 1e-12:
        x = np.linalg.solve(A, [0, 0, 0, 1.0])[:3]
        cands.append(x)
    cands += [a, b, 0.5 * (a + b)]
    best, best_cost = None, np.inf
    for x in cands:
        h = np.append(x, 1.0)
        c = float(h @ Q @ h)
        if c < best_cost - 1e-18:
            best, best_cost = x, c
    return best, max(best_cost, 0.0)


def qecd_simplify(mesh: TriMesh, target_faces: int) -> DecimationResult:
    """Collapse edges until ``faces <= target_faces`` or no legal collapse remains."""
    if target_faces < 4:
        raise ValueError("target_faces must be >= 4")
    if not watertightness(mesh):
        raise ValueError("decimation requires a watertight mesh")
    if mesh.n_faces <= target_faces:
        return DecimationResult(mesh, True, mesh.n_faces)

    V = [np.array(p) for p in mesh.vertices]
    faces = {i: list(map(int, f)) for i, f in enumerate(mesh.faces)}
    vfaces = [set() for _ in V]
    for fi, f in faces.items():
        for x in f:
            vfaces[x].add(fi)
    Q = [np.zeros((4, 4)) for _ in V]
    for f in faces.values():
        q = _plane_quadric(V[f[0]], V[f[1]], V[f[2]])
        for x in f:
            Q[x] += q
    alive = [True] * len(V)
    version = [0] * len(V)

    def neighbors(x):
        out = set()
        for fi in vfaces[x]:
            out.update(faces[fi])
        out.discard(x)
        return out

    heap = []

    def push(a, b):
        if a > b:
            a, b = b, a
        pos, cost = _optimal(Q[a] + Q[b], V[a], V[b])
        heapq.heappush(heap, (cost, a, b, version[a], version[b], tuple(pos)))

    for a in range(len(V)):
        for b in neighbors(a):
            if a < b:
                push(a, b)

    def legal(a, b, pos):
        na, nb = neighbors(a), neighbors(b)
        shared = na & nb
        # link condition: exactly the two opposite vertices of the edge
        edge_faces = vfaces[a] & vfaces[b]
        if len(edge_faces) != 2 or len(shared) != 2:
            return False
        if len(faces) - 2 < 4:
            return False
        for x, other in ((a, b), (b, a)):
            for fi in vfaces[x]:
                if fi in edge_faces:
                    continue
                f = faces[fi]
                p_old = [V[k] for k in f]
                p_new = [pos if k == x else V[k] for k in f]
                n0 = np.cross(p_old[1] - p_old[0], p_old[2] - p_old[0])
                n1 = np.cross(p_new[1] - p_new[0], p_new[2] - p_new[0])
                l0, l1 = np.linalg.norm(n0), np.linalg.norm(n1)
                if l1 < 1e-12 or np.dot(n0, n1) <= 0.2 * l0 * l1:
                    return False
        return True

    n_faces = len(faces)
    while n_faces > target_faces and heap:
        cost, a, b, va, vb, pos = heapq.heappop(heap)
        if not (alive[a] and alive[b]) or version[a] != va or version[b] != vb:
            continue
        pos = np.array(pos)
        if not legal(a, b, pos):
            continue
        # collapse b into a
        for fi in list(vfaces[a] & vfaces[b]):
            for x in faces[fi]:
                vfaces[x].discard(fi)
            del faces[fi]
            n_faces -= 1
        for fi in vfaces[b]:
            faces[fi] = [a if x == b else x for x in faces[fi]]
            vfaces[a].add(fi)
        vfaces[b] = set()
        alive[b] = False
        V[a] = pos
        Q[a] = Q[a] + Q[b]
        version[a] += 1
        for x in neighbors(a):
            version[x] += 1
        for x in neighbors(a):
            push(a, x)
            for y in neighbors(x):
                if y != a:
                    push(x, y)

    keep = [i for i in range(len(V)) if alive[i] and vfaces[i]]
    remap = {old: new for new, old in enumerate(keep)}
    nv = np.array([V[i] for i in keep])
    nf = np.array([[remap[x] for x in faces[fi]] for fi in sorted(faces)], dtype=np.int64)
    out = TriMesh(nv, nf)
    return DecimationResult(out, len(nf) <= target_faces, len(nf))
