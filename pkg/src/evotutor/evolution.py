"""Outer evolutionary loop over flattened EA-adapter genotypes.

Selection is multi-objective: an individual survives only if no population
member weakly dominates it on (fitness, novelty). Oversized fronts are
truncated by crowding distance; undersized ones are topped up from successive
non-dominated fronts. Variation is arithmetic crossover between elite parents
followed by isotropic Gaussian mutation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Individual:
    id: int
    ea_params: np.ndarray
    fitness: float | None = None
    novelty: float | None = None
    parents: tuple[int, ...] = ()
    birth_generation: int = 0

    def require_evaluated(self) -> None:
        if self.fitness is None or self.novelty is None:
            raise ValueError(f"individual {self.id} has not been evaluated")


@dataclass(frozen=True)
class EAConfig:
    population: int = 8
    generations: int = 20
    mutation_sigma: float = 0.02
    crossover_low: float = 0.2
    crossover_high: float = 0.8
    elite_fraction: float = 0.5
    novelty_k: int = 3
    elitism: int = 1

    def validate(self) -> None:
        if self.population < 2:
            raise ValueError("population must be >= 2")
        if self.generations < 1:
            raise ValueError("generations must be >= 1")
        if self.mutation_sigma < 0:
            raise ValueError("mutation_sigma must be >= 0")
        if not 0.0 <= self.crossover_low <= self.crossover_high <= 1.0:
            raise ValueError("crossover range must satisfy 0 <= low <= high <= 1")
        if not 0.0 < self.elite_fraction <= 1.0:
            raise ValueError("elite_fraction must be in (0, 1]")
        if self.novelty_k < 1 or self.elitism < 0:
            raise ValueError("invalid novelty_k or elitism")

    def elite_target(self) -> int:
        return max(2, int(np.ceil(self.elite_fraction * self.population)))


def episode_fitness(returns: list[float] | np.ndarray) -> float:
    """Mean undiscounted episodic return over the evaluation episodes."""
    returns = np.asarray(returns, dtype=np.float64)
    if returns.size == 0:
        raise ValueError("fitness needs at least one evaluation episode")
    return float(returns.mean())


def novelty(individual: Individual, population: list[Individual], k: int = 3) -> float:
    """Mean distance to the k nearest neighbours in EA parameter space."""
    others = [p for p in population if p is not individual]
    if not others:
        raise ValueError("novelty needs a population of at least 2")
    dists = np.sort(
        [float(np.linalg.norm(individual.ea_params - p.ea_params)) for p in others]
    )
    k = min(k, len(others))
    return float(dists[:k].mean())


def dominates(a: Individual, b: Individual) -> bool:
    a.require_evaluated()
    b.require_evaluated()
    return (
        a.fitness >= b.fitness
        and a.novelty >= b.novelty
        and (a.fitness > b.fitness or a.novelty > b.novelty)
    )


def non_dominated_front(population: list[Individual]) -> list[Individual]:
    return [
        ind
        for ind in population
        if not any(dominates(other, ind) for other in population if other is not ind)
    ]


def crowding_distance(front: list[Individual]) -> np.ndarray:
    """NSGA-II crowding distance on the (fitness, novelty) plane."""
    n = len(front)
    distance = np.zeros(n)
    if n <= 2:
        return np.full(n, np.inf)
    for key in ("fitness", "novelty"):
        values = np.array([getattr(ind, key) for ind in front], dtype=np.float64)
        order = np.argsort(values, kind="stable")
        distance[order[0]] = np.inf
        distance[order[-1]] = np.inf
        spread = values[order[-1]] - values[order[0]]
        if spread > 0:
            for pos in range(1, n - 1):
                distance[order[pos]] += (
                    values[order[pos + 1]] - values[order[pos - 1]]
                ) / spread
    return distance


def pareto_elites(population: list[Individual], target: int) -> list[Individual]:
    """Elite set: non-dominated individuals, crowding-truncated or front-filled."""
    if not population:
        raise ValueError("empty population")
    target = min(target, len(population))
    selected: list[Individual] = []
    remaining = list(population)
    while remaining and len(selected) < target:
        front = non_dominated_front(remaining)
        crowd = crowding_distance(front)
        ranked_idx = sorted(
            range(len(front)), key=lambda i: (-crowd[i], front[i].id)
        )
        ranked = [front[i] for i in ranked_idx]
        room = target - len(selected)
        selected.extend(ranked[:room])
        front_ids = {id(ind) for ind in front}
        remaining = [ind for ind in remaining if id(ind) not in front_ids]
    return selected


def crossover(p1: np.ndarray, p2: np.ndarray, gamma: float) -> np.ndarray:
    if p1.shape != p2.shape:
        raise ValueError(f"parent length mismatch {p1.shape} vs {p2.shape}")
    return gamma * p1 + (1.0 - gamma) * p2


def mutate(v: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return v.copy()
    return v + rng.normal(0.0, sigma, size=v.shape)


def next_generation(
    population: list[Individual],
    elites: list[Individual],
    config: EAConfig,
    rng: np.random.Generator,
    id_start: int,
    generation: int,
) -> list[Individual]:
    """Elitism copies plus crossover/mutation offspring, exactly N individuals."""
    if not elites:
        raise ValueError("empty elite set")
    n = config.population
    by_fitness = sorted(elites, key=lambda ind: (-(ind.fitness or 0.0), ind.id))
    new_pop: list[Individual] = []
    next_id = id_start
    for elite in by_fitness[: min(config.elitism, n)]:
        new_pop.append(
            Individual(
                id=next_id,
                ea_params=elite.ea_params.copy(),
                parents=(elite.id,),
                birth_generation=generation,
            )
        )
        next_id += 1
    while len(new_pop) < n:
        p1 = elites[int(rng.integers(len(elites)))]
        p2 = elites[int(rng.integers(len(elites)))]
        gamma = float(rng.uniform(config.crossover_low, config.crossover_high))
        child = mutate(crossover(p1.ea_params, p2.ea_params, gamma), config.mutation_sigma, rng)
        new_pop.append(
            Individual(
                id=next_id,
                ea_params=child,
                parents=(p1.id, p2.id),
                birth_generation=generation,
            )
        )
        next_id += 1
    return new_pop
