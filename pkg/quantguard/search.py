"""Genetic search for the smallest per-layer bit widths that keep Top-1 agreement on a
set of counter-examples."""
import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from quantguard.errors import BitAllocationError, ShapeMismatchError
from quantguard.network import Network, predict_batch
from quantguard.quantizer import MAX_BITS, MIN_BITS, BitAllocation, quantize_network

logger = logging.getLogger("quantguard.search")


@dataclass(frozen=True)
class GAConfig:
    population_size: int = 5
    generations_per_layer: int = 110
    n_min: int = MIN_BITS
    n_max: int = MAX_BITS
    mutation_rate: float | None = None  # None -> 1 / number of layers
    crossover_rate: float = 0.9
    tournament_size: int = 2
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.population_size < 2:
            raise ValueError("population_size must be at least 2")
        if not MIN_BITS <= self.n_min <= self.n_max <= MAX_BITS:
            raise BitAllocationError(
                f"bounds must satisfy {MIN_BITS} <= n_min <= n_max <= {MAX_BITS}, got [{self.n_min}, {self.n_max}]"
            )
        if self.generations_per_layer < 0 or self.tournament_size < 1 or self.workers < 1:
            raise ValueError("generations_per_layer, tournament_size and workers must be positive")
        for name in ("mutation_rate", "crossover_rate"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be a probability, got {value}")


class CounterExampleSet:
    """Deduplicated, insertion-ordered collection of concrete inputs."""

    def __init__(self, inputs: Iterable[Sequence[float]] = (), domain_clip: tuple[float, float] | None = None):
        self.domain_clip = domain_clip
        self._inputs: list[np.ndarray] = []
        self._keys: set[bytes] = set()
        for x in inputs:
            self.add(x)

    @staticmethod
    def _key(x: np.ndarray) -> bytes:
        return np.ascontiguousarray(x, dtype=np.float64).tobytes()

    def add(self, x: Sequence[float] | np.ndarray) -> bool:
        """Insert ``x``; False if it was already present."""
        x = np.array(x, dtype=np.float64)
        if x.ndim != 1 or not np.all(np.isfinite(x)):
            raise ValueError("counter-examples must be finite vectors")
        if self._inputs and x.shape != self._inputs[0].shape:
            raise ShapeMismatchError(f"counter-example has {x.size} features, set holds {self._inputs[0].size}")
        if self.domain_clip is not None and (np.any(x < self.domain_clip[0]) or np.any(x > self.domain_clip[1])):
            raise ValueError(f"counter-example leaves the input domain {self.domain_clip}")
        key = self._key(x)
        if key in self._keys:
            return False
        x.flags.writeable = False
        self._keys.add(key)
        self._inputs.append(x)
        return True

    def __contains__(self, x) -> bool:
        return self._key(np.asarray(x, dtype=np.float64)) in self._keys

    def __len__(self) -> int:
        return len(self._inputs)

    def __iter__(self):
        return iter(self._inputs)

    @property
    def inputs(self) -> list[np.ndarray]:
        return list(self._inputs)

    def as_array(self, input_dim: int) -> np.ndarray:
        if not self._inputs:
            return np.empty((0, input_dim))
        return np.stack(self._inputs)

    def copy(self) -> "CounterExampleSet":
        return CounterExampleSet(self._inputs, self.domain_clip)


@dataclass(frozen=True)
class Candidate:
    alloc: BitAllocation
    feasible: bool
    violations: int

    @property
    def fitness(self) -> int:
        return self.alloc.total

    def rank_key(self) -> tuple:
        # feasible first; infeasible ordered by violated counter-examples; then fewer bits
        return (not self.feasible, self.violations, self.fitness, self.alloc.bits)


@dataclass
class GARun:
    best: BitAllocation
    trace: list[tuple[int, int, bool, int]] = field(default_factory=list)
    evaluations: int = 0


class _Evaluator:
    """Counts counter-examples each allocation gets wrong, memoized per allocation."""

    def __init__(self, net: Network, ces: CounterExampleSet):
        self.net = net
        self.X = ces.as_array(net.input_dim)
        self.expected = predict_batch(net, self.X) if len(self.X) else np.empty(0, dtype=np.int64)
        self.cache: dict[tuple[int, ...], Candidate] = {}

    def violations(self, alloc: BitAllocation) -> int:
        if not len(self.X):
            return 0
        realization = quantize_network(self.net, alloc).realization
        return int(np.count_nonzero(predict_batch(realization, self.X) != self.expected))

    def evaluate_many(self, allocs: Sequence[BitAllocation], workers: int) -> list[Candidate]:
        pending = list({a.bits: a for a in allocs if a.bits not in self.cache}.values())
        if workers > 1 and len(pending) > 1:
            with ThreadPoolExecutor(max_workers=workers) as executor:
                counts = list(executor.map(self.violations, pending))
        else:
            counts = [self.violations(a) for a in pending]
        for alloc, count in zip(pending, counts):
            self.cache[alloc.bits] = Candidate(alloc, count == 0, count)
        return [self.cache[a.bits] for a in allocs]


def feasible(net: Network, alloc: BitAllocation, ces: CounterExampleSet) -> bool:
    return _Evaluator(net, ces).violations(alloc) == 0


def _tournament(population: list[Candidate], size: int, rng: np.random.Generator) -> Candidate:
    picks = rng.integers(0, len(population), size=size)
    return min((population[i] for i in picks), key=Candidate.rank_key)


def run_ga(
    net: Network,
    ces: CounterExampleSet,
    cfg: GAConfig | None = None,
    generations: int | None = None,
) -> GARun:
    cfg = cfg or GAConfig()
    rng = np.random.default_rng(cfg.seed)
    depth = net.depth
    generations = depth * cfg.generations_per_layer if generations is None else generations
    mutation_rate = cfg.mutation_rate if cfg.mutation_rate is not None else 1.0 / depth
    evaluator = _Evaluator(net, ces)

    def _alloc(bits) -> BitAllocation:
        return BitAllocation(tuple(int(b) for b in bits), cfg.n_min, cfg.n_max)

    def _random() -> BitAllocation:
        return _alloc(rng.integers(cfg.n_min, cfg.n_max + 1, size=depth))

    # all-n_max is the assumed-feasible anchor, all-n_min the unconstrained floor
    seeds = [_alloc([cfg.n_max] * depth), _alloc([cfg.n_min] * depth)]
    seeds += [_random() for _ in range(cfg.population_size - len(seeds))]
    population = sorted(evaluator.evaluate_many(seeds[:cfg.population_size], cfg.workers), key=Candidate.rank_key)
    trace = []

    for generation in range(generations):
        offspring = []
        for _ in range(cfg.population_size):
            first = _tournament(population, cfg.tournament_size, rng).alloc.bits
            second = _tournament(population, cfg.tournament_size, rng).alloc.bits
            if rng.random() < cfg.crossover_rate:
                take_first = rng.random(depth) < 0.5
                child = np.where(take_first, first, second)
            else:
                child = np.array(first)
            mutate = rng.random(depth) < mutation_rate
            child = np.where(mutate, rng.integers(cfg.n_min, cfg.n_max + 1, size=depth), child)
            offspring.append(_alloc(child))

        merged = {c.alloc.bits: c for c in population}
        for cand in evaluator.evaluate_many(offspring, cfg.workers):
            merged.setdefault(cand.alloc.bits, cand)
        population = sorted(merged.values(), key=Candidate.rank_key)[:cfg.population_size]
        while len(population) < cfg.population_size:
            population.append(evaluator.evaluate_many([_random()], 1)[0])
            population.sort(key=Candidate.rank_key)

        leader = population[0]
        trace.append((generation, leader.fitness, leader.feasible, len(evaluator.cache)))
        logger.debug("GA generation", extra={"event": "ga_generation", "generation": generation,
                                             "best_fitness": leader.fitness, "feasible": leader.feasible})

    leader = population[0]
    best = leader.alloc if leader.feasible else _alloc([cfg.n_max] * depth)
    logger.info(
        "GA finished",
        extra={"event": "ga_complete", "bits": list(best.bits), "total_bits": best.total,
               "generations": generations, "evaluations": len(evaluator.cache),
               "counter_examples": len(ces)},
    )
    return GARun(best, trace, len(evaluator.cache))


def ga_minimize(
    net: Network,
    ces: CounterExampleSet,
    cfg: GAConfig | None = None,
    trace_path: str | Path | None = None,
) -> BitAllocation:
    result = run_ga(net, ces, cfg)
    if trace_path is not None:
        write_trace(result.trace, trace_path)
    return result.best


def brute_force_minimize(net: Network, ces: CounterExampleSet, n_min: int, n_max: int) -> BitAllocation:
    """Exhaustive optimum over [n_min, n_max]^L; ties go to the lexicographically smallest bits."""
    evaluator = _Evaluator(net, ces)
    best = None
    for bits in itertools.product(range(n_min, n_max + 1), repeat=net.depth):
        alloc = BitAllocation(bits, n_min, n_max)
        if best is not None and alloc.total >= best.total:
            continue
        if evaluator.violations(alloc) == 0:
            best = alloc
    return best or BitAllocation.uniform(net.depth, n_max, n_min, n_max)


def tune_ga(
    net: Network,
    ces: CounterExampleSet,
    cfg: GAConfig,
    runs: int,
    generation_options: Sequence[int],
) -> list[dict]:
    """Share of seeded GA runs that reach the exhaustive optimum, per total generation count."""
    optimum = brute_force_minimize(net, ces, cfg.n_min, cfg.n_max).total
    rows = []
    for generations in generation_options:
        hits = 0
        for run in range(runs):
            seeded = replace(cfg, seed=cfg.seed + run)
            hits += run_ga(net, ces, seeded, generations=generations).best.total == optimum
        rows.append({
            "layers": net.depth,
            "generations": generations,
            "population": cfg.population_size,
            "optimal_pct": 100.0 * hits / runs if runs else 0.0,
        })
        logger.info("GA tuning row", extra={"event": "ga_tuning", **rows[-1]})
    return rows


def write_trace(trace: Sequence[tuple[int, int, bool, int]], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table = np.array(trace, dtype=np.int64).reshape(-1, 4)
    np.savetxt(path, table, delimiter=",", fmt="%d",
               header="generation,best_fitness,best_feasible,evaluations", comments="")
    return path
