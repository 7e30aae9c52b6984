"""Evolutionary search over genotypes: NSGA-II, SMS-EMOA and a constrained baseline.

The loops work on ``(n, 46)`` gene arrays and ``(n, 2)`` objective arrays;
:class:`Individual` objects are only built for the returned result.  All
randomness flows from one ``numpy`` generator seeded by ``SearchConfig.seed``,
so a run is a pure function of its config and evaluator.
"""

from __future__ import annotations

import logging
import os
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Callable

import numpy as np

from . import __version__
from .genotype import (
    FULL_SPACE,
    Genotype,
    OperatorConfig,
    SearchSpace,
    crossover_genes,
    mutate_genes,
    phenotype_keys,
)
from .pareto import crowding_distance, hv_contributions_2d, hypervolume_2d, non_dominated_sort
from .surrogate import EvaluationError, Evaluator, ObjectiveVector, evaluate_genes

log = logging.getLogger(__name__)

ALGORITHMS = ("nsga2", "sms-emoa", "ofa-baseline")
SPACES = {"full": FULL_SPACE, "reduced": SearchSpace.reduced()}
DEFAULT_REF_POINT = (100.0, 25.0)

# baseline population split, as in the original OFA evolution finder
PARENT_RATIO = 0.25
MUTATION_RATIO = 0.5


class SearchError(RuntimeError):
    """The evaluator failed during a run."""

    def __init__(self, generation: int, cause: Exception):
        super().__init__(f"generation {generation}: {cause}")
        self.generation = generation
        self.cause = cause


class InfeasibleError(RuntimeError):
    """No architecture satisfying the latency constraint was found."""


@dataclass(frozen=True)
class SearchConfig:
    algorithm: str = "nsga2"
    population_size: int = 100
    generations: int = 1000
    operators: OperatorConfig = field(default_factory=OperatorConfig)
    ref_point: tuple[float, float] = DEFAULT_REF_POINT
    seed: int = 0
    latency_constraint: float | None = None
    space: str = "full"
    retry_cap: int = 100
    record_fronts: bool = True
    check_invariants: bool = False

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.population_size < 2:
            raise ValueError("population_size must be >= 2")
        if self.generations < 1:
            raise ValueError("generations must be >= 1")
        if self.space not in SPACES:
            raise ValueError(f"space must be one of {sorted(SPACES)}, got {self.space!r}")
        if len(self.ref_point) != 2:
            raise ValueError("ref_point needs two coordinates")
        object.__setattr__(self, "ref_point", (float(self.ref_point[0]), float(self.ref_point[1])))
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.algorithm == "ofa-baseline" and self.latency_constraint is None:
            raise ValueError("ofa-baseline needs a latency_constraint")
        if self.retry_cap < 1:
            raise ValueError("retry_cap must be >= 1")

    @property
    def search_space(self) -> SearchSpace:
        return SPACES[self.space]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ref_point"] = list(self.ref_point)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SearchConfig":
        d = dict(d)
        if "operators" in d and isinstance(d["operators"], dict):
            d["operators"] = OperatorConfig(**d["operators"])
        if "ref_point" in d:
            d["ref_point"] = tuple(d["ref_point"])
        return cls(**d)


@dataclass(frozen=True)
class Individual:
    genotype: Genotype
    objectives: ObjectiveVector


@dataclass
class RunManifest:
    tool_version: str
    algorithm: str
    config: dict
    seed: int
    evaluator: dict
    generation_unit: str
    started_at: str
    finished_at: str


@dataclass
class SearchResult:
    population: list[Individual]
    front: list[Individual]
    hv_history: list[float]
    manifest: RunManifest
    front_history: list[np.ndarray] | None = None

    @property
    def config(self) -> SearchConfig:
        return SearchConfig.from_dict(self.manifest.config)

    def __eq__(self, other):
        if not isinstance(other, SearchResult):
            return NotImplemented
        if (self.front_history is None) != (other.front_history is None):
            return False
        same_hist = self.front_history is None or (
            len(self.front_history) == len(other.front_history)
            and all(np.array_equal(a, b) for a, b in zip(self.front_history, other.front_history))
        )
        return (
            self.population == other.population
            and self.front == other.front
            and self.hv_history == other.hv_history
            and self.manifest == other.manifest
            and same_hist
        )


def timestamp() -> str:
    """UTC ISO time; honours ``SOURCE_DATE_EPOCH`` for reproducible outputs."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = float(epoch) if epoch else time.time()
    return datetime.fromtimestamp(t, tz=timezone.utc).isoformat(timespec="seconds")


def _evaluate(evaluator: Evaluator, genes: np.ndarray, generation: int, workers: int) -> np.ndarray:
    try:
        return evaluate_genes(evaluator, genes, workers)
    except EvaluationError as exc:
        raise SearchError(generation, exc) from exc
    except Exception as exc:  # evaluator bugs surface with the generation index
        raise SearchError(generation, exc) from exc


def _individuals(genes: np.ndarray, objs: np.ndarray) -> list[Individual]:
    return [
        Individual(Genotype.from_genes(g), ObjectiveVector(float(o[0]), float(o[1])))
        for g, o in zip(genes, objs)
    ]


def _report_front(genes: np.ndarray, objs: np.ndarray) -> list[Individual]:
    """Rank-0 members, one per phenotype, sorted by latency then phenotype key."""
    front = non_dominated_sort(objs)[0]
    keys = phenotype_keys(genes[front])
    seen: dict[bytes, int] = {}
    for i, key in zip(front, keys):
        seen.setdefault(key, i)
    chosen = sorted(seen.items(), key=lambda kv: (objs[kv[1], 1], objs[kv[1], 0], kv[0]))
    idx = [i for _, i in chosen]
    return _individuals(genes[idx], objs[idx])


def _check_front(objs: np.ndarray, generation: int) -> None:
    le = np.all(objs[:, None, :] <= objs[None, :, :], axis=2)
    lt = np.any(objs[:, None, :] < objs[None, :, :], axis=2)
    if np.any(le & lt):
        raise AssertionError(f"generation {generation}: reported front is not pairwise non-dominated")


def _binary_tournament(
    rank: np.ndarray, score: np.ndarray, n: int, rng: np.random.Generator
) -> np.ndarray:
    """Winner indices of ``n`` tournaments: lower rank, then higher score, then a coin flip."""
    size = rank.shape[0]
    a = rng.integers(size, size=n)
    b = rng.integers(size, size=n)
    coin = rng.random(n) < 0.5
    a_wins = (rank[a] < rank[b]) | (
        (rank[a] == rank[b]) & ((score[a] > score[b]) | ((score[a] == score[b]) & coin))
    )
    return np.where(a_wins, a, b)


def _rank_and_crowding(objs: np.ndarray, fronts: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    rank = np.empty(objs.shape[0], dtype=np.int64)
    crowd = np.empty(objs.shape[0])
    for k, f in enumerate(fronts):
        rank[f] = k
        crowd[f] = crowding_distance(objs[f])
    return rank, crowd


def _nsga2_survival(objs: np.ndarray, n: int, rng: np.random.Generator):
    """Indices of the ``n`` survivors plus their rank and crowding distance."""
    fronts = non_dominated_sort(objs)
    rank, crowd = _rank_and_crowding(objs, fronts)
    chosen: list[int] = []
    for f in fronts:
        if len(chosen) + len(f) <= n:
            chosen.extend(f)
            if len(chosen) == n:
                break
            continue
        f = np.asarray(f)
        # descending crowding, ties in random order
        order = np.lexsort((rng.random(f.size), -crowd[f]))
        chosen.extend(f[order[: n - len(chosen)]].tolist())
        break
    keep = np.asarray(chosen)
    return keep, rank[keep], crowd[keep]


def _finish(cfg, evaluator, genes, objs, hv, history, started, unit) -> SearchResult:
    manifest = RunManifest(
        tool_version=__version__,
        algorithm=cfg.algorithm,
        config=cfg.to_dict(),
        seed=cfg.seed,
        evaluator=evaluator.identity(),
        generation_unit=unit,
        started_at=started,
        finished_at=timestamp(),
    )
    return SearchResult(
        population=_individuals(genes, objs),
        front=_report_front(genes, objs),
        hv_history=hv,
        manifest=manifest,
        front_history=history if cfg.record_fronts else None,
    )


def run_nsga2(
    cfg: SearchConfig,
    evaluator: Evaluator,
    on_generation: Callable[[int, np.ndarray], None] | None = None,
    workers: int = 1,
) -> SearchResult:
    """Generational NSGA-II.

    Each generation breeds ``population_size`` children by binary tournament
    (rank, then crowding distance), uniform crossover and mutation, then keeps
    the best ``population_size`` of parents and children by front rank,
    truncating the last admitted front by crowding distance.
    """
    if cfg.algorithm != "nsga2":
        raise ValueError(f"run_nsga2 called with algorithm={cfg.algorithm!r}")
    started = timestamp()
    rng = np.random.default_rng(cfg.seed)
    space = cfg.search_space
    n = cfg.population_size
    rate = cfg.operators.mutation_rate

    genes = space.sample(rng, n)
    objs = _evaluate(evaluator, genes, 0, workers)
    rank, crowd = _rank_and_crowding(objs, non_dominated_sort(objs))
    hv: list[float] = []
    history: list[np.ndarray] = []

    for gen in range(1, cfg.generations + 1):
        pa = _binary_tournament(rank, crowd, n, rng)
        pb = _binary_tournament(rank, crowd, n, rng)
        kids = mutate_genes(crossover_genes(genes[pa], genes[pb], rng), rate, rng, space)
        kid_objs = _evaluate(evaluator, kids, gen, workers)
        all_genes = np.concatenate([genes, kids])
        all_objs = np.concatenate([objs, kid_objs])
        keep, rank, crowd = _nsga2_survival(all_objs, n, rng)
        genes, objs = all_genes[keep], all_objs[keep]
        front = objs[rank == 0]
        if cfg.check_invariants:
            _check_front(front, gen)
        hv.append(hypervolume_2d(front, cfg.ref_point))
        if cfg.record_fronts:
            history.append(front.copy())
        if on_generation is not None:
            on_generation(gen, objs)
    return _finish(cfg, evaluator, genes, objs, hv, history, started, "generation")


def _selection_ref(objs: np.ndarray, ref_point) -> np.ndarray:
    # the configured point when it bounds the population, else worst + (1, 1)
    return np.maximum(np.asarray(ref_point, dtype=np.float64), objs.max(axis=0) + 1.0)


def _least_contributor(objs: np.ndarray, fronts: list[list[int]], ref_point, rng: np.random.Generator) -> int:
    """Member of the worst front with the smallest exclusive contribution (random among ties)."""
    last = fronts[-1]
    if len(last) == 1:
        return last[0]
    c = hv_contributions_2d(objs[last], _selection_ref(objs, ref_point))
    ties = np.flatnonzero(c == c.min())
    return last[int(ties[rng.integers(ties.size)])] if ties.size > 1 else last[int(ties[0])]


def _rank_and_contribution(objs: np.ndarray, fronts: list[list[int]], ref: np.ndarray):
    rank = np.empty(objs.shape[0], dtype=np.int64)
    contrib = np.empty(objs.shape[0])
    for k, f in enumerate(fronts):
        rank[f] = k
        contrib[f] = hv_contributions_2d(objs[f], ref)
    return rank, contrib


def run_sms_emoa(
    cfg: SearchConfig,
    evaluator: Evaluator,
    on_step: Callable[[int, np.ndarray], None] | None = None,
    workers: int = 1,
) -> SearchResult:
    """Steady-state SMS-EMOA.

    One child per step; the population then loses the member of its worst
    front with the smallest exclusive hypervolume contribution.  A reported
    generation is ``population_size`` steps.

    Contributions are measured against ``max(ref_point, worst + (1, 1))``.
    While the configured reference point bounds the population this is that
    point itself, so the front hypervolume it reports never decreases.
    """
    if cfg.algorithm != "sms-emoa":
        raise ValueError(f"run_sms_emoa called with algorithm={cfg.algorithm!r}")
    started = timestamp()
    rng = np.random.default_rng(cfg.seed)
    space = cfg.search_space
    n = cfg.population_size
    rate = cfg.operators.mutation_rate

    genes = space.sample(rng, n)
    objs = _evaluate(evaluator, genes, 0, workers)
    fronts = non_dominated_sort(objs)
    rank, contrib = _rank_and_contribution(objs, fronts, _selection_ref(objs, cfg.ref_point))
    hv: list[float] = []
    history: list[np.ndarray] = []
    step = 0

    for gen in range(1, cfg.generations + 1):
        for _ in range(n):
            step += 1
            pa, pb = _binary_tournament(rank, contrib, 2, rng)
            child = mutate_genes(crossover_genes(genes[pa], genes[pb], rng), rate, rng, space)
            child_obj = _evaluate(evaluator, child, gen, workers)
            genes = np.concatenate([genes, child])
            objs = np.concatenate([objs, child_obj])

            fronts = non_dominated_sort(objs)
            drop = _least_contributor(objs, fronts, cfg.ref_point, rng)
            genes = np.delete(genes, drop, axis=0)
            objs = np.delete(objs, drop, axis=0)

            # ranks of the survivors are unchanged by removing a worst-front member
            fronts = [[i - (i > drop) for i in f if i != drop] for f in fronts]
            fronts = [f for f in fronts if f]
            rank, contrib = _rank_and_contribution(objs, fronts, _selection_ref(objs, cfg.ref_point))
            if on_step is not None:
                on_step(step, objs)
        front = objs[rank == 0]
        if cfg.check_invariants:
            _check_front(front, gen)
        hv.append(hypervolume_2d(front, cfg.ref_point))
        if cfg.record_fronts:
            history.append(front.copy())
    return _finish(cfg, evaluator, genes, objs, hv, history, started, f"{n} steps")


def _feasible_batch(
    make: Callable[[int], np.ndarray],
    count: int,
    evaluator: Evaluator,
    limit: float,
    cap: int,
    generation: int,
    workers: int,
):
    """Draw candidates with ``make(k)`` until ``count`` are feasible or ``cap`` rounds pass."""
    genes_out, objs_out = [], []
    need = count
    for _ in range(cap):
        if need == 0:
            break
        cand = make(need)
        objs = _evaluate(evaluator, cand, generation, workers)
        ok = objs[:, 1] <= limit
        genes_out.append(cand[ok])
        objs_out.append(objs[ok])
        need -= int(ok.sum())
    if not genes_out:
        return np.empty((0, 46), dtype=np.int64), np.empty((0, 2))
    return np.concatenate(genes_out), np.concatenate(objs_out)


def run_ofa_baseline(cfg: SearchConfig, evaluator: Evaluator, workers: int = 1) -> Individual:
    """Single-objective evolution: lowest error subject to latency <= constraint.

    Infeasible candidates are redrawn (at most ``retry_cap`` rounds per batch).
    Each generation keeps the best quarter as parents and refills the rest
    with mutated parents and uniform crossovers of two parents.
    """
    if cfg.latency_constraint is None:
        raise ValueError("run_ofa_baseline needs cfg.latency_constraint")
    limit = float(cfg.latency_constraint)
    rng = np.random.default_rng(cfg.seed)
    space = cfg.search_space
    n = cfg.population_size
    rate = cfg.operators.mutation_rate
    cap = cfg.retry_cap

    genes, objs = _feasible_batch(lambda k: space.sample(rng, k), n, evaluator, limit, cap, 0, workers)
    if genes.shape[0] == 0:
        raise InfeasibleError(
            f"no architecture with latency <= {limit} ms found in {cap} sampling rounds"
        )
    if genes.shape[0] < n:
        log.warning("only %d of %d initial samples are feasible", genes.shape[0], n)

    n_parents = max(1, int(round(PARENT_RATIO * n)))
    n_mutants = int(round(MUTATION_RATIO * n))
    n_cross = max(0, n - n_parents - n_mutants)

    def ranked(g, o):
        order = np.lexsort((o[:, 1], o[:, 0]))
        return g[order], o[order]

    for gen in range(1, cfg.generations + 1):
        genes, objs = ranked(genes, objs)
        par_g, par_o = genes[:n_parents], objs[:n_parents]
        np_ = par_g.shape[0]

        def mutants(k):
            return mutate_genes(par_g[rng.integers(np_, size=k)], rate, rng, space)

        def crosses(k):
            return crossover_genes(par_g[rng.integers(np_, size=k)], par_g[rng.integers(np_, size=k)], rng)

        mg, mo = _feasible_batch(mutants, n_mutants, evaluator, limit, cap, gen, workers)
        cg, co = _feasible_batch(crosses, n_cross, evaluator, limit, cap, gen, workers)
        genes = np.concatenate([par_g, mg, cg])
        objs = np.concatenate([par_o, mo, co])

    genes, objs = ranked(genes, objs)
    return _individuals(genes[:1], objs[:1])[0]


def run_search(cfg: SearchConfig, evaluator: Evaluator, workers: int = 1) -> SearchResult:
    if cfg.algorithm == "nsga2":
        return run_nsga2(cfg, evaluator, workers=workers)
    if cfg.algorithm == "sms-emoa":
        return run_sms_emoa(cfg, evaluator, workers=workers)
    raise ValueError("use run_ofa_baseline for the single-objective baseline")


def hypervolume_progression(result: SearchResult, ref=None) -> list[tuple[int, float]]:
    """``(generation, hypervolume)`` pairs, recomputed from stored fronts when ``ref`` differs."""
    recorded = tuple(result.manifest.config["ref_point"])
    if ref is None or tuple(float(x) for x in ref) == recorded:
        return [(g, hv) for g, hv in enumerate(result.hv_history, start=1)]
    if result.front_history is None:
        raise ValueError("result has no stored fronts; cannot recompute for a new reference point")
    return [(g, hypervolume_2d(f, ref)) for g, f in enumerate(result.front_history, start=1)]
