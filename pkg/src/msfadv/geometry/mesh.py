"""Triangle meshes, OBJ I/O, adjacency and rigid ground-plane poses."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .. import diff_engine as dv

MIN_FACE_AREA = 1e-12


class MeshError(ValueError):
    pass


def _face_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    if len(faces) == 0:
        return np.zeros(0)
    a, b, c = (vertices[faces[:, k]] for k in range(3))
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Vertex-face mesh in the LiDAR frame (meters, x forward, y left, z up).

    Faces are counter-clockwise seen from outside. Arrays are made read-only so
    a mesh can be shared between workers; perturbations build new meshes via
    :meth:`with_vertices`, which keeps the face array object itself.
    """

    vertices: np.ndarray
    faces: np.ndarray
    check: bool = field(default=True, repr=False)

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = self.faces
        if not (isinstance(f, np.ndarray) and f.dtype == np.int64 and not f.flags.writeable):
            f = np.array(f, dtype=np.int64).reshape(-1, 3)
            f.flags.writeable = False
        v.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if self.check:
            self.validate()

    def validate(self):
        v, f = self.vertices, self.faces
        if not np.all(np.isfinite(v)):
            raise MeshError("non-finite vertex coordinates")
        if len(f) == 0:
            return
        if f.min() < 0 or f.max() >= len(v):
            bad = int(np.flatnonzero((f < 0).any(1) | (f >= len(v)).any(1))[0])
            raise MeshError(f"face {bad} references a vertex outside 0..{len(v) - 1}")
        rep = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        small = _face_areas(v, f) <= MIN_FACE_AREA
        bad = np.flatnonzero(rep | small)
        if bad.size:
            raise MeshError(f"face {int(bad[0])} is degenerate")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def with_vertices(self, vertices, check: bool = False) -> "TriMesh":
        """Same topology (the identical face array), new positions."""
        vertices = np.asarray(vertices, dtype=np.float64)
        if vertices.shape != self.vertices.shape:
            raise MeshError(f"vertex array shape {vertices.shape} != {self.vertices.shape}")
        return TriMesh(vertices, self.faces, check=check)

    def face_areas(self) -> np.ndarray:
        return _face_areas(self.vertices, self.faces)

    def face_normals(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, k]] for k in range(3))
        n = np.cross(b - a, c - a)
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def translated(self, offset) -> "TriMesh":
        return self.with_vertices(self.vertices + np.asarray(offset, dtype=np.float64))

    def __len__(self):
        return self.n_faces


def empty_mesh() -> TriMesh:
    return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))


def same_topology(a: TriMesh, b: TriMesh) -> bool:
    return a.vertices.shape == b.vertices.shape and np.array_equal(a.faces, b.faces)


# ---------------------------------------------------------------------------
# OBJ


def load_obj(path) -> TriMesh:
    """Read ``v``/``f`` records of an ASCII OBJ; polygons are fan-triangulated."""
    verts, faces, face_lines = [], [], []
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tok = line.split()
            try:
                if tok[0] == "v":
                    if len(tok) < 4:
                        raise ValueError("vertex needs 3 coordinates")
                    verts.append([float(t) for t in tok[1:4]])
                elif tok[0] == "f":
                    idx = []
                    for t in tok[1:]:
                        i = int(t.split("/")[0])
                        if i < 0:
                            i = len(verts) + 1 + i
                        idx.append(i - 1)
                    if len(idx) < 3:
                        raise ValueError("face needs at least 3 vertices")
                    for k in range(1, len(idx) - 1):
                        faces.append([idx[0], idx[k], idx[k + 1]])
                        face_lines.append(lineno)
            except ValueError as exc:
                raise MeshError(f"{path}:{lineno}: {exc}") from None
    v = np.array(verts, dtype=np.float64).reshape(-1, 3)
    f = np.array(faces, dtype=np.int64).reshape(-1, 3)
    if len(f):
        bad = np.flatnonzero((f < 0).any(1) | (f >= len(v)).any(1))
        if bad.size:
            k = int(bad[0])
            raise MeshError(f"{path}:{face_lines[k]}: vertex index out of range (have {len(v)} vertices)")
    try:
        return TriMesh(v, f)
    except MeshError as exc:
        msg = str(exc)
        if msg.startswith("face "):
            k = int(msg.split()[1])
            raise MeshError(f"{path}:{face_lines[k]}: {msg}") from None
        raise


def save_obj(mesh: TriMesh, path) -> None:
    lines = [f"v {x:.9f} {y:.9f} {z:.9f}\n" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}\n" for a, b, c in mesh.faces]
    with open(path, "w") as fh:
        fh.writelines(lines)


# ---------------------------------------------------------------------------
# adjacency


def unique_edges(mesh: TriMesh) -> np.ndarray:
    """Undirected edges (i < j), sorted lexicographically."""
    f = mesh.faces
    if len(f) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0)


def vertex_neighbors(mesh: TriMesh) -> list[set]:
    """Γ(i): vertices sharing a face edge with i. Isolated vertices get an empty set."""
    nbrs = [set() for _ in range(mesh.n_vertices)]
    for i, j in unique_edges(mesh):
        nbrs[i].add(int(j))
        nbrs[j].add(int(i))
    return nbrs


def directed_edges(mesh: TriMesh) -> np.ndarray:
    """Every ordered pair (i, q) with q ∈ Γ(i); each undirected edge appears twice."""
    e = unique_edges(mesh)
    return np.concatenate([e, e[:, ::-1]])


# ---------------------------------------------------------------------------
# rigid pose


def _wrap_angle(a: float) -> float:
    a = math.remainder(a, 2.0 * math.pi)
    return math.pi if a <= -math.pi else a


@dataclass(frozen=True)
class RigidPose:
    """Yaw about the vertical axis through ``anchor`` followed by a ground-plane shift."""

    yaw: float = 0.0
    shift: tuple = (0.0, 0.0)
    anchor: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "yaw", _wrap_angle(float(self.yaw)))
        object.__setattr__(self, "shift", tuple(float(s) for s in self.shift))
        object.__setattr__(self, "anchor", tuple(float(s) for s in self.anchor))
        if len(self.shift) != 2 or len(self.anchor) != 3:
            raise ValueError("shift must be 2D and anchor 3D")

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def inverse(self) -> "RigidPose":
        a = np.asarray(self.anchor)
        a2 = (a[0] + self.shift[0], a[1] + self.shift[1], a[2])
        return RigidPose(-self.yaw, (-self.shift[0], -self.shift[1]), a2)


def pose_vertices(vertices, pose: RigidPose):
    """Apply ``pose`` to an (N,3) array or Var; the adjoint is the transposed rotation."""
    R = pose.rotation()
    a = np.asarray(pose.anchor)
    t = a + np.array([pose.shift[0], pose.shift[1], 0.0])
    # v R^T + (t - a R^T): one matmul and one constant offset
    return dv.add(dv.matmul(vertices, R.T), t - a @ R.T)


def apply_pose(mesh: TriMesh, pose: RigidPose) -> TriMesh:
    return mesh.with_vertices(pose_vertices(mesh.vertices, pose))
