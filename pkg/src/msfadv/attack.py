"""Adversarial object optimization: losses, EoT objective, projected gradient descent.

The objective for adversarial vertices ``v`` (object frame) is

    mean over sampled poses of (conf_lidar + conf_camera)  +  lam * L_r(v, v0)

with ``L_r`` the Laplacian smoothness of the displacement field plus a penalty
on lowering the object's base. ``L_r`` does not depend on the pose, so it is
added once per evaluation. Each sampled pose gets its own tape; their vertex
gradients are summed in sample order.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import diff_engine as dv
from .geometry import TriMesh, directed_edges, same_topology
from .parallel import ordered_map
from .pipeline import SensingOptions, region_for, sense
from .scenario import ObjectPose, Scenario
from .surrogates import SurrogateWeights, fuse_rule


class AttackError(RuntimeError):
    pass


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.02
    init: float = 0.01
    mu: float = 100.0
    eps_div: float = 1e-7
    x_range: tuple = (5.0, 35.0)
    y_range: tuple = (-0.3, 0.3)
    yaw_range: tuple = (-5.0, 5.0)  # degrees
    learning_rate: float = 0.001
    lam: float = 20.0
    beta1: float = 0.001
    samples: int = 4
    max_iters: int = 1000

    def __post_init__(self):
        for k in ("x_range", "y_range", "yaw_range"):
            r = tuple(float(x) for x in getattr(self, k))
            if len(r) != 2 or r[0] > r[1]:
                raise ValueError(f"{k} must be an ordered pair")
            object.__setattr__(self, k, r)
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be non-negative")
        if self.init < 0 or self.learning_rate < 0 or self.lam < 0 or self.beta1 < 0:
            raise ValueError("init, learning_rate, lambda and beta1 must be non-negative")
        if int(self.samples) < 1:
            raise ValueError("samples must be >= 1")
        if int(self.max_iters) < 0:
            raise ValueError("max_iters must be >= 0")
        if not self.mu > 0 or not self.eps_div > 0:
            raise ValueError("mu and eps_div must be positive")
        object.__setattr__(self, "samples", int(self.samples))
        object.__setattr__(self, "max_iters", int(self.max_iters))

    def sensing(self, base: SensingOptions = SensingOptions()) -> SensingOptions:
        return SensingOptions(self.mu, self.eps_div, base.albedo, base.blur_sigma)

    def replace(self, **kw) -> "AttackConfig":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(kw)
        return AttackConfig(**d)


_CONFIG_KEYS = {
    "epsilon": "epsilon", "init": "init", "mu": "mu", "eps_div": "eps_div",
    "x_range": "x_range", "y_range": "y_range", "yaw_range": "yaw_range",
    "learning_rate": "learning_rate", "lambda": "lam", "beta1": "beta1",
    "samples": "samples", "max_iters": "max_iters",
}


def load_config(path) -> AttackConfig:
    """ASCII ``key = value`` file; ranges are two whitespace- or comma-separated numbers."""
    kw = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            k, v = (s.strip() for s in line.split("=", 1))
            if k not in _CONFIG_KEYS:
                raise ValueError(f"{path}:{lineno}: unknown key '{k}'")
            vals = v.replace(",", " ").split()
            try:
                if k.endswith("_range"):
                    if len(vals) != 2:
                        raise ValueError("range needs two values")
                    kw[_CONFIG_KEYS[k]] = (float(vals[0]), float(vals[1]))
                elif k in ("samples", "max_iters"):
                    kw[_CONFIG_KEYS[k]] = int(vals[0])
                else:
                    kw[_CONFIG_KEYS[k]] = float(vals[0])
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return AttackConfig(**kw)


def save_config(cfg: AttackConfig, path) -> None:
    inv = {v: k for k, v in _CONFIG_KEYS.items()}
    with open(path, "w") as fh:
        for f in fields(cfg):
            v = getattr(cfg, f.name)
            s = " ".join(repr(float(x)) for x in v) if isinstance(v, tuple) else repr(v)
            fh.write(f"{inv[f.name]} = {s}\n")


# ---------------------------------------------------------------------------
# poses


def sample_poses(cfg: AttackConfig, rng: np.random.Generator, n: int | None = None) -> list:
    n = cfg.samples if n is None else n
    x = rng.uniform(*cfg.x_range, size=n)
    y = rng.uniform(*cfg.y_range, size=n)
    yaw = np.radians(rng.uniform(*cfg.yaw_range, size=n))
    return [ObjectPose(float(a), float(b), float(c)) for a, b, c in zip(x, y, yaw)]


def verification_poses(cfg: AttackConfig = AttackConfig()) -> list:
    """8 fixed poses: X evenly spanning its range, Y and yaw alternating between their extremes."""
    xs = np.linspace(cfg.x_range[0], cfg.x_range[1], 8)
    out = []
    for k, x in enumerate(xs):
        y = cfg.y_range[1] if k % 2 == 0 else cfg.y_range[0]
        yaw = cfg.yaw_range[1] if k % 2 == 0 else cfg.yaw_range[0]
        out.append(ObjectPose(float(x), float(y), math.radians(yaw)))
    return out


# ---------------------------------------------------------------------------
# losses


def _check_topology(vertices, benign: TriMesh):
    shape = np.shape(dv.value_of(vertices))
    if shape != benign.vertices.shape:
        raise TopologyError(f"vertex array {shape} does not match benign mesh {benign.vertices.shape}")


def realizability_loss(vertices, benign: TriMesh, beta1: float = 0.001, edges=None):
    """Sum over directed neighbour pairs of |Δv_i − Δv_q|² plus beta1·(min z − min z_benign)²."""
    if isinstance(vertices, TriMesh):
        if not same_topology(vertices, benign):
            raise TopologyError("meshes do not share topology")
        vertices = vertices.vertices
    _check_topology(vertices, benign)
    e = directed_edges(benign) if edges is None else edges
    delta = dv.sub(vertices, benign.vertices)
    diff = dv.sub(dv.take(delta, e[:, 0]), dv.take(delta, e[:, 1]))
    lap = dv.sum_(dv.mul(diff, diff))
    zmin = dv.min_(dv.take(vertices, (slice(None), 2)))
    dz = dv.sub(zmin, float(benign.vertices[:, 2].min()))
    return dv.add(lap, dv.mul(dv.mul(dz, dz), beta1))


def adversarial_loss(vertices, benign: TriMesh, scn: Scenario, pose: ObjectPose, weights: SurrogateWeights,
                     opts: SensingOptions = SensingOptions(), region=None):
    """conf_lidar + conf_camera with the object at ``pose``."""
    region = region_for(benign.vertices, scn, pose) if region is None else region
    s = sense(vertices, benign.faces, scn, pose, region, weights, opts)
    return dv.add(s.conf_lidar, s.conf_camera), s


@dataclass
class Evaluation:
    value: float
    grad: np.ndarray | None
    adv_losses: list
    confidences: list  # (conf_l, conf_c) per pose
    realizability: float

    def all_undetected(self, weights: SurrogateWeights) -> bool:
        return not any(fuse_rule(cl, cc, weights) for cl, cc in self.confidences)


def evaluate(vertices: np.ndarray, benign: TriMesh, scn: Scenario, cfg: AttackConfig,
             weights: SurrogateWeights, poses: list, with_grad: bool = True,
             opts: SensingOptions | None = None, edges=None) -> Evaluation:
    """Objective over the given poses, optionally with its vertex gradient."""
    opts = cfg.sensing() if opts is None else cfg.sensing(opts)
    vertices = np.asarray(vertices, dtype=np.float64)

    def one(pose):
        if with_grad:
            tape = dv.Tape()
            v = tape.variable(vertices)
            loss, s = adversarial_loss(v, benign, scn, pose, weights, opts)
            if isinstance(loss, dv.Var):
                (g,) = tape.backward(loss, [v])
            else:  # nothing rendered depends on the vertices
                g = np.zeros_like(vertices)
        else:
            loss, s = adversarial_loss(vertices, benign, scn, pose, weights, opts)
            g = None
        return float(dv.value_of(loss)), g, s.confidences()

    results = ordered_map(one, poses)
    n = len(poses)
    adv = [r[0] for r in results]
    if with_grad:
        tape = dv.Tape()
        v = tape.variable(vertices)
        lr = realizability_loss(v, benign, cfg.beta1, edges)
        (g_r,) = tape.backward(lr, [v])
        grad = np.zeros_like(vertices)
        for r in results:  # fixed sample order
            grad = grad + r[1]
        grad = grad / n + cfg.lam * g_r
        lr_val = float(lr.value)
    else:
        lr_val = float(realizability_loss(vertices, benign, cfg.beta1, edges))
        grad = None
    value = float(np.mean(adv)) + cfg.lam * lr_val
    return Evaluation(value, grad, adv, [r[2] for r in results], lr_val)


def objective(vertices, benign: TriMesh, scn: Scenario, cfg: AttackConfig, weights: SurrogateWeights,
              seed: int = 0, opts: SensingOptions | None = None) -> float:
    """E_t[L_a] + lam·L_r with ``cfg.samples`` poses drawn from ``seed``."""
    if isinstance(vertices, TriMesh):
        vertices = vertices.vertices
    poses = sample_poses(cfg, np.random.default_rng(seed))
    return evaluate(vertices, benign, scn, cfg, weights, poses, with_grad=False, opts=opts).value


def objective_on_tape(v, benign: TriMesh, scn: Scenario, cfg: AttackConfig, weights: SurrogateWeights,
                      poses: list, opts: SensingOptions | None = None):
    """Same objective recorded on a single tape (for end-to-end gradient checks)."""
    opts = cfg.sensing() if opts is None else cfg.sensing(opts)
    total = 0.0
    for pose in poses:
        loss, _ = adversarial_loss(v, benign, scn, pose, weights, opts)
        total = dv.add(total, loss)
    return dv.add(dv.mul(total, 1.0 / len(poses)), dv.mul(realizability_loss(v, benign, cfg.beta1), cfg.lam))


# ---------------------------------------------------------------------------
# PGD


def project_linf(vertices: np.ndarray, benign_vertices: np.ndarray, eps: float) -> np.ndarray:
    """Clamp each coordinate's deviation into [-eps, eps], exactly in floating point."""
    v0 = np.asarray(benign_vertices, dtype=np.float64)
    v = v0 + np.clip(np.asarray(vertices, dtype=np.float64) - v0, -eps, eps)
    # v0 + eps can round past the bound; step back by ulps until it holds
    for _ in range(4):
        over = np.abs(v - v0) > eps
        if not over.any():
            break
        v[over] = np.nextafter(v[over], v0[over])
    return v


def pgd_step(vertices, benign: TriMesh, grad: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    """v <- v − lr·grad, then project onto the L∞ ball of radius epsilon around the benign mesh."""
    v = vertices.vertices if isinstance(vertices, TriMesh) else np.asarray(vertices, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != v.shape:
        raise TopologyError(f"gradient shape {grad.shape} != vertex shape {v.shape}")
    if not np.all(np.isfinite(grad)):
        raise AttackError("non-finite gradient")
    return project_linf(v - cfg.learning_rate * grad, benign.vertices, cfg.epsilon)


def perturbation_stats(vertices, benign: TriMesh) -> tuple:
    """(mean per-vertex L1 norm, mean per-vertex L2 norm, max per-coordinate deviation), in cm."""
    if isinstance(vertices, TriMesh):
        if not same_topology(vertices, benign):
            raise TopologyError("meshes do not share topology")
        vertices = vertices.vertices
    v = np.asarray(vertices, dtype=np.float64)
    if v.shape != benign.vertices.shape:
        raise TopologyError("vertex arrays differ in shape")
    d = v - benign.vertices
    if d.size == 0:
        return 0.0, 0.0, 0.0
    return (float(np.mean(np.abs(d).sum(axis=1)) * 100.0),
            float(np.mean(np.linalg.norm(d, axis=1)) * 100.0),
            float(np.abs(d).max() * 100.0))


@dataclass
class AttackReport:
    iterations: int
    objective: list
    success: bool
    degenerate: bool
    verification: list  # per pose: x, y, yaw_deg, conf_lidar, conf_camera, detected
    final_conf_lidar: float  # max over verification poses
    final_conf_camera: float
    delta_l1_cm: float
    delta_l2_cm: float
    delta_linf_cm: float
    seed: int
    config: dict
    wall_time: float = field(default=0.0, compare=False)

    def to_json(self) -> str:
        """Deterministic JSON; wall time is left out so reruns are byte-identical."""
        d = asdict(self)
        d.pop("wall_time")
        return json.dumps(d, indent=2, sort_keys=True) + "\n"


def verify(vertices, benign: TriMesh, scn: Scenario, cfg: AttackConfig, weights: SurrogateWeights,
           poses=None, opts: SensingOptions | None = None) -> list:
    poses = verification_poses(cfg) if poses is None else poses
    ev = evaluate(vertices, benign, scn, cfg, weights, poses, with_grad=False, opts=opts)
    rows = []
    for pose, (cl, cc) in zip(poses, ev.confidences):
        rows.append({
            "x": pose.x, "y": pose.y, "yaw_deg": math.degrees(pose.yaw),
            "conf_lidar": cl, "conf_camera": cc, "detected": fuse_rule(cl, cc, weights),
        })
    return rows


def run_attack(benign: TriMesh, scn: Scenario, cfg: AttackConfig, weights: SurrogateWeights, seed: int = 0,
               opts: SensingOptions | None = None, callback=None):
    """PGD with EoT until no verification pose detects the object, or ``max_iters``.

    Returns ``(adversarial mesh, AttackReport)``. ``callback(it, vertices, evaluation)``
    is called after every objective evaluation.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    v0 = benign.vertices
    v = project_linf(v0 + rng.uniform(-cfg.init, cfg.init, size=v0.shape), v0, cfg.epsilon)
    vposes = verification_poses(cfg)
    edges = directed_edges(benign)
    benign_rows = verify(v0, benign, scn, cfg, weights, vposes, opts)
    degenerate = not all(r["detected"] for r in benign_rows)
    trace = []
    it = 0
    rows = None
    success = False
    for it in range(cfg.max_iters):
        poses = sample_poses(cfg, rng)
        ev = evaluate(v, benign, scn, cfg, weights, poses, with_grad=True, opts=opts, edges=edges)
        if not np.isfinite(ev.value) or not np.all(np.isfinite(ev.grad)):
            raise AttackError(f"non-finite objective at iteration {it}")
        trace.append(ev.value)
        if callback is not None:
            callback(it, v, ev)
        if ev.all_undetected(weights):
            rows = verify(v, benign, scn, cfg, weights, vposes, opts)
            if not any(r["detected"] for r in rows):
                success = True
                break
            rows = None
        v = pgd_step(v, benign, ev.grad, cfg)
    else:
        it = cfg.max_iters
    if rows is None:
        rows = verify(v, benign, scn, cfg, weights, vposes, opts)
        success = not any(r["detected"] for r in rows)
    adv = benign.with_vertices(v)
    l1, l2, linf = perturbation_stats(v, benign)
    cfg_d = {f.name: (list(getattr(cfg, f.name)) if isinstance(getattr(cfg, f.name), tuple) else getattr(cfg, f.name))
             for f in fields(cfg)}
    report = AttackReport(
        iterations=int(it),
        objective=[float(x) for x in trace],
        success=bool(success or degenerate),
        degenerate=bool(degenerate),
        verification=rows,
        final_conf_lidar=float(max(r["conf_lidar"] for r in rows)),
        final_conf_camera=float(max(r["conf_camera"] for r in rows)),
        delta_l1_cm=l1, delta_l2_cm=l2, delta_linf_cm=linf,
        seed=int(seed), config=cfg_d,
        wall_time=time.perf_counter() - t0,
    )
    return adv, report
