"""Soft point-in-cell membership and differentiable cell-level LiDAR features.

A point contributes to the 8 cells whose centres enclose it. Per dimension the
membership factor is ``1 - d/L``; the trilinear variant uses the raw centre
offset ``d = |u_m - u_i|`` and the tanh variant squashes it,
``d = L/2 + L/2·tanh(mu·(|u_m - u_i| - L/2))``, which is close to the hard 0/1
membership while staying smooth. ``mu`` multiplies metres directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diff_engine as dv

CHANNELS = (
    "count", "density", "occupancy",
    "height_max", "height_min", "height_mean",
    "intensity_max", "intensity_min", "intensity_mean",
)

DEFAULT_MU = 100.0
DEFAULT_EPS_DIV = 1e-7


@dataclass(frozen=True)
class CellGrid:
    origin: tuple
    dims: tuple  # (L, W, H) metres
    counts: tuple  # (Nx, Ny, Nz)

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(float(x) for x in self.origin))
        object.__setattr__(self, "dims", tuple(float(x) for x in self.dims))
        object.__setattr__(self, "counts", tuple(int(x) for x in self.counts))
        if len(self.origin) != 3 or len(self.dims) != 3 or len(self.counts) != 3:
            raise ValueError("grid needs 3D origin, dims and counts")
        if min(self.dims) <= 0:
            raise ValueError("cell dimensions must be positive")
        if min(self.counts) <= 0:
            raise ValueError("cell counts must be positive")

    @property
    def shape(self) -> tuple:
        return self.counts

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.counts))

    @property
    def volume(self) -> float:
        L, W, H = self.dims
        return L * W * H

    def upper(self) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(self.dims) * np.asarray(self.counts)

    def center(self, idx) -> np.ndarray:
        return np.asarray(self.origin) + (np.asarray(idx, dtype=np.float64) + 0.5) * np.asarray(self.dims)

    def flat(self, idx) -> np.ndarray:
        idx = np.asarray(idx)
        return np.ravel_multi_index(tuple(idx[..., k] for k in range(3)), self.counts)

    def enclosing_base(self, xyz: np.ndarray) -> np.ndarray:
        """Lower corner index of the 8 cells whose centres enclose each point."""
        rel = (np.asarray(xyz) - np.asarray(self.origin)) / np.asarray(self.dims) - 0.5
        return np.floor(rel).astype(np.int64)


def _factor(delta, size: float, mu: float | None):
    if mu is None:
        return dv.sub(1.0, dv.mul(delta, 1.0 / size))
    # 1 - (L/2 + L/2 tanh(mu (delta - L/2))) / L
    return dv.sub(0.5, dv.mul(dv.tanh(dv.mul(dv.sub(delta, 0.5 * size), mu)), 0.5))


def _soft_pi_single(point, grid: CellGrid, cell, mu):
    p = np.asarray(dv.value_of(point), dtype=np.float64)[:3]
    cell = np.asarray(cell, dtype=np.int64)
    base = grid.enclosing_base(p)
    if np.any(cell < base) or np.any(cell > base + 1):
        return 0.0
    center = grid.center(cell)
    out = 1.0
    for k in range(3):
        delta = dv.abs_(dv.sub(dv.take(point, k), center[k]))
        out = dv.mul(out, _factor(delta, grid.dims[k], mu))
    return out


def soft_pi_trilinear(point, grid: CellGrid, cell):
    """Trilinear membership of ``point`` (xyz[, intensity]) in ``cell``; 0 outside the enclosing 8."""
    return _soft_pi_single(point, grid, cell, None)


def soft_pi_tanh(point, grid: CellGrid, cell, mu: float = DEFAULT_MU):
    if not mu > 0:
        raise ValueError("mu must be positive")
    return _soft_pi_single(point, grid, cell, float(mu))


_CORNERS = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.int64)


def point_cell_weights(xyz, grid: CellGrid, mu: float | None = DEFAULT_MU):
    """Memberships of every point in its enclosing cells.

    Returns ``(point_index, flat_cell, weight)`` for the (point, cell) pairs
    that fall inside the grid; ``weight`` is a Var when ``xyz`` is.
    """
    xv = np.asarray(dv.value_of(xyz), dtype=np.float64).reshape(-1, 3)
    n = len(xv)
    if n == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0)
    base = grid.enclosing_base(xv)
    cells = base[:, None, :] + _CORNERS[None]  # (n, 8, 3)
    inside = np.all((cells >= 0) & (cells < np.asarray(grid.counts)), axis=2)
    pi, ci = np.nonzero(inside)
    cidx = cells[pi, ci]
    centers = np.asarray(grid.origin) + (cidx + 0.5) * np.asarray(grid.dims)
    pts = dv.take(xyz, pi)
    delta = dv.abs_(dv.sub(pts, centers))
    w = None
    for k in range(3):
        f = _factor(dv.take(delta, (slice(None), k)), grid.dims[k], mu)
        w = f if w is None else dv.mul(w, f)
    return pi, grid.flat(cidx), w


@dataclass
class FeatureGrid:
    grid: CellGrid
    channels: dict
    min_valid: np.ndarray  # cells where the min features are defined
    bev: bool = False

    def __getitem__(self, name):
        return self.channels[name]

    def value(self, name) -> np.ndarray:
        return np.asarray(dv.value_of(self.channels[name]))

    @property
    def shape(self):
        return self.grid.counts[:2] if self.bev else self.grid.counts


def derive_features(points, grid: CellGrid, mu: float | None = DEFAULT_MU,
                    eps_div: float = DEFAULT_EPS_DIV) -> FeatureGrid:
    """Per-cell count, density, occupancy and height / intensity statistics.

    ``points`` is an (N, 4) array or Var (x, y, z, intensity). Heights are
    measured from the grid floor (``z - origin_z``). ``mu=None`` selects the
    trilinear membership.
    """
    if mu is not None and not mu > 0:
        raise ValueError("mu must be positive")
    if not eps_div > 0:
        raise ValueError("eps_div must be positive")
    shape = grid.counts
    n = grid.n_cells
    pv = np.asarray(dv.value_of(points), dtype=np.float64).reshape(-1, 4)
    if len(pv) == 0:
        z = np.zeros(shape)
        return FeatureGrid(grid, {c: z.copy() for c in CHANNELS}, np.zeros(shape, bool))
    xyz = dv.take(points, (slice(None), slice(0, 3)))
    pi, cell, w = point_cell_weights(xyz, grid, mu)
    hgt = dv.sub(dv.take(points, (pi, np.full(len(pi), 2))), grid.origin[2])
    inten = dv.take(points, (pi, np.full(len(pi), 3)))
    count = dv.scatter_add(w, cell, n)
    strong = np.asarray(dv.value_of(w)) > 0.5
    ch = {"count": count, "density": dv.mul(count, 1.0 / grid.volume)}
    ch["occupancy"] = dv.straight_through(count, (np.asarray(dv.value_of(count)) > 0.5).astype(np.float64))
    denom = dv.add(count, eps_div)
    for name, val in (("height", hgt), ("intensity", inten)):
        sv = dv.mul(w, val)
        ch[f"{name}_max"] = dv.segment_max(sv, cell, n)
        ch[f"{name}_min"] = dv.segment_min(sv, cell, n, mask=strong)
        ch[f"{name}_mean"] = dv.div(dv.scatter_add(sv, cell, n), denom)
    min_valid = np.zeros(n, dtype=bool)
    min_valid[cell[strong]] = True
    ch = {k: dv.reshape(ch[k], shape) for k in CHANNELS}
    return FeatureGrid(grid, ch, min_valid.reshape(shape))


def bev_aggregate(fg: FeatureGrid, eps_div: float = DEFAULT_EPS_DIV) -> FeatureGrid:
    """Collapse the vertical axis of a 3D feature grid."""
    if fg.bev:
        raise ValueError("feature grid is already 2D")
    nx, ny, nz = fg.grid.counts
    ncol = nx * ny
    col = np.repeat(np.arange(ncol), nz)  # row-major (x, y, z) flattening
    flat = {k: dv.reshape(v, (-1,)) for k, v in fg.channels.items()}
    count = dv.sum_(fg.channels["count"], axis=2)
    out = {
        "count": count,
        "density": dv.sum_(fg.channels["density"], axis=2),
        "occupancy": dv.straight_through(count, (np.asarray(dv.value_of(count)) > 0.5).astype(np.float64)),
    }
    mv = fg.min_valid.reshape(-1)
    for name in ("height", "intensity"):
        out[f"{name}_max"] = dv.reshape(dv.segment_max(flat[f"{name}_max"], col, ncol), (nx, ny))
        out[f"{name}_min"] = dv.reshape(dv.segment_min(flat[f"{name}_min"], col, ncol, mask=mv), (nx, ny))
        weighted = dv.sum_(dv.mul(fg.channels[f"{name}_mean"], fg.channels["count"]), axis=2)
        out[f"{name}_mean"] = dv.div(weighted, dv.add(count, eps_div))
    min_valid = fg.min_valid.any(axis=2)
    return FeatureGrid(fg.grid, {k: out[k] for k in CHANNELS}, min_valid, bev=True)


def hard_count_oracle(points, grid: CellGrid) -> np.ndarray:
    """Exact integer membership counts; points on a shared face go to the lower-index cell."""
    p = np.asarray(dv.value_of(points), dtype=np.float64)
    if p.size == 0:
        return np.zeros(grid.counts, dtype=np.int64)
    m = hard_membership(p.reshape(-1, p.shape[-1]), grid)
    return np.bincount(m[m >= 0], minlength=grid.n_cells).reshape(grid.counts)


def hard_membership(points, grid: CellGrid) -> np.ndarray:
    """Flat cell index per point under the hard rule (-1 outside the grid)."""
    p = np.asarray(points, dtype=np.float64)[:, :3]
    rel = (p - np.asarray(grid.origin)) / np.asarray(grid.dims)
    idx = np.ceil(rel).astype(np.int64) - 1
    idx = np.where(rel == 0.0, 0, idx)
    ok = np.all((idx >= 0) & (idx < np.asarray(grid.counts)) & (rel >= 0), axis=1)
    out = np.full(len(p), -1, dtype=np.int64)
    out[ok] = grid.flat(idx[ok])
    return out


def roi_filter(points, lo, hi):
    """Keep points with lo <= xyz <= hi (inclusive); the selection is not differentiated."""
    pv = np.asarray(dv.value_of(points), dtype=np.float64)
    if len(pv) == 0:
        return points
    keep = np.flatnonzero(np.all((pv[:, :3] >= np.asarray(lo)) & (pv[:, :3] <= np.asarray(hi)), axis=1))
    if keep.size == len(pv):
        return points
    return dv.take(points, keep)


def dump_features(fg: FeatureGrid, path) -> None:
    """ASCII dump: one header line, then per channel a name line and row-major values."""
    vals = {k: fg.value(k) for k in CHANNELS}
    shape = vals["count"].shape
    with open(path, "w") as fh:
        fh.write("featuregrid v1 shape " + " ".join(str(s) for s in shape))
        fh.write(" origin " + " ".join(repr(x) for x in fg.grid.origin))
        fh.write(" dims " + " ".join(repr(x) for x in fg.grid.dims) + "\n")
        for k in CHANNELS:
            fh.write(k + "\n")
            flat = vals[k].reshape(shape[0], -1)
            for row in flat:
                fh.write(" ".join(f"{x:.9g}" for x in row) + "\n")


def load_features(path) -> dict:
    with open(path) as fh:
        header = fh.readline().split()
        i = header.index("shape")
        j = header.index("origin")
        shape = tuple(int(x) for x in header[i + 1:j])
        out = {}
        for _ in CHANNELS:
            name = fh.readline().strip()
            rows = [fh.readline().split() for _ in range(shape[0])]
            out[name] = np.array(rows, dtype=np.float64).reshape(shape)
    return out
