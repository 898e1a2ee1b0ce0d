"""Comparison attackers: Gaussian vertex noise and a genetic search over the attack objective."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .attack import AttackConfig, evaluate, sample_poses
from .geometry import TriMesh, directed_edges
from .parallel import ordered_map
from .pipeline import SensingOptions
from .scenario import Scenario
from .surrogates import SurrogateWeights

GN_SIGMA = 0.021


def gn_attack(benign: TriMesh, sigma: float = GN_SIGMA, seed: int = 0) -> TriMesh:
    """Add independent N(0, sigma²) noise to every vertex coordinate."""
    if not sigma >= 0:
        raise ValueError("sigma must be non-negative")
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, 1.0, size=benign.vertices.shape) * sigma
    if sigma == 0:
        # adding +0.0 would flip the sign of -0.0 coordinates
        return benign.with_vertices(benign.vertices.copy())
    return benign.with_vertices(benign.vertices + noise)


@dataclass(frozen=True)
class GaConfig:
    population: int = 50
    generations: int = 40
    bound: float = 0.02
    mutation_sigma: float | None = None  # default bound / 4
    mutation_rate: float = 0.1
    crossover_rate: float = 0.8
    elitism: int = 1
    tournament: int = 3

    def __post_init__(self):
        if self.population < 2:
            raise ValueError("population must be >= 2")
        if self.generations < 0:
            raise ValueError("generations must be >= 0")
        if not self.bound > 0:
            raise ValueError("bound must be positive")
        for k in ("mutation_rate", "crossover_rate"):
            if not 0.0 <= getattr(self, k) <= 1.0:
                raise ValueError(f"{k} must lie in [0, 1]")
        if not 0 <= self.elitism <= self.population:
            raise ValueError("elitism must lie in [0, population]")
        if self.tournament < 1:
            raise ValueError("tournament size must be >= 1")
        if self.mutation_sigma is not None and self.mutation_sigma < 0:
            raise ValueError("mutation_sigma must be non-negative")

    @property
    def sigma(self) -> float:
        return self.bound / 4.0 if self.mutation_sigma is None else float(self.mutation_sigma)


@dataclass
class GaResult:
    mesh: TriMesh
    best_fitness: float
    trace: list  # best fitness after each generation; entry 0 is the initial population

    def write_trace(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["generation", "best_fitness"])
            for g, f in enumerate(self.trace):
                w.writerow([g, repr(float(f))])


def _tournament(rng, fitness, k):
    idx = rng.integers(0, len(fitness), size=k)
    return int(idx[np.argmin(fitness[idx])])


def ga_attack(benign: TriMesh, scn: Scenario, cfg: AttackConfig, weights: SurrogateWeights,
              ga: GaConfig = GaConfig(), seed: int = 0, opts: SensingOptions | None = None) -> GaResult:
    """Gradient-free search over clamped per-coordinate offsets.

    Fitness is the attack objective (lower is better) on one EoT pose set drawn
    from ``seed`` and held fixed for the whole run, so fitness values across
    generations are comparable and the elitist trace cannot increase.
    """
    rng = np.random.default_rng(seed)
    poses = sample_poses(cfg, rng)
    edges = directed_edges(benign)
    v0 = benign.vertices
    b = ga.bound

    def fitness_of(offset):
        val = evaluate(v0 + offset, benign, scn, cfg, weights, poses, with_grad=False, opts=opts, edges=edges).value
        return val if np.isfinite(val) else np.inf

    pop = rng.uniform(-b, b, size=(ga.population,) + v0.shape)
    fit = np.array(ordered_map(fitness_of, list(pop)))
    trace = [float(fit.min())]
    for _ in range(ga.generations):
        order = np.argsort(fit, kind="stable")
        children = [pop[i].copy() for i in order[:ga.elitism]]
        while len(children) < ga.population:
            a = pop[_tournament(rng, fit, ga.tournament)]
            c = pop[_tournament(rng, fit, ga.tournament)]
            if rng.random() < ga.crossover_rate:
                child = np.where(rng.random(v0.shape) < 0.5, a, c)
            else:
                child = a.copy()
            child = np.clip(child, -b, b)
            mut = rng.random(v0.shape) < ga.mutation_rate
            child = np.clip(child + mut * rng.normal(0.0, ga.sigma, size=v0.shape), -b, b)
            children.append(child)
        new = np.array(children)
        n_el = ga.elitism
        new_fit = np.empty(ga.population)
        new_fit[:n_el] = fit[order[:n_el]]
        new_fit[n_el:] = ordered_map(fitness_of, list(new[n_el:]))
        pop, fit = new, new_fit
        trace.append(float(fit.min()))
    best = int(np.argmin(fit))
    return GaResult(benign.with_vertices(v0 + pop[best]), float(fit[best]), trace)
