import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import brute_dominates, exhaustive_reduced
from ofa2.genotype import OperatorConfig, SearchSpace, phenotype_key
from ofa2.pareto import hv_contributions_2d, hypervolume_2d, non_dominated_sort
from ofa2.search import (
    DEFAULT_REF_POINT,
    SPACES,
    InfeasibleError,
    SearchConfig,
    SearchError,
    _least_contributor,
    _nsga2_survival,
    hypervolume_progression,
    run_nsga2,
    run_ofa_baseline,
    run_search,
    run_sms_emoa,
)
from ofa2.surrogate import SyntheticEvaluator, SyntheticSurrogate

EV = SyntheticEvaluator()


def cfg(**kw) -> SearchConfig:
    base = dict(algorithm="nsga2", population_size=20, generations=10, seed=1)
    base.update(kw)
    return SearchConfig(**base)


def assert_pairwise_nondominated(individuals):
    objs = [i.objectives.as_tuple() for i in individuals]
    for a in objs:
        for b in objs:
            assert not brute_dominates(a, b)


class TestConfig:
    def test_defaults(self):
        c = SearchConfig()
        assert (c.population_size, c.generations, c.ref_point) == (100, 1000, (100.0, 25.0))
        assert c.operators.mutation_rate == 0.1
        assert DEFAULT_REF_POINT == (100.0, 25.0)

    @pytest.mark.parametrize(
        "kw",
        [
            {"algorithm": "moead"},
            {"population_size": 1},
            {"generations": 0},
            {"space": "tiny"},
            {"algorithm": "ofa-baseline"},
            {"seed": -1},
            {"ref_point": (1.0, 2.0, 3.0)},
        ],
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            cfg(**kw)

    def test_dict_round_trip(self):
        c = cfg(operators=OperatorConfig(0.2), ref_point=(90, 30), latency_constraint=20.0)
        assert SearchConfig.from_dict(c.to_dict()) == c


class TestNSGA2:
    def test_one_generation_front(self):
        res = run_nsga2(cfg(population_size=4, generations=1), EV)
        assert_pairwise_nondominated(res.front)
        assert len(res.hv_history) == 1
        assert len(res.population) == 4

    def test_front_is_subset_of_population(self):
        res = run_nsga2(cfg(check_invariants=True), EV)
        pop_keys = {phenotype_key(i.genotype) for i in res.population}
        keys = [phenotype_key(i.genotype) for i in res.front]
        assert set(keys) <= pop_keys
        assert len(keys) == len(set(keys))
        assert_pairwise_nondominated(res.front)
        lats = [i.objectives.latency for i in res.front]
        assert lats == sorted(lats)

    def test_deterministic(self):
        assert run_nsga2(cfg(), EV) == run_nsga2(cfg(), EV)
        assert run_nsga2(cfg(), EV, workers=3) == run_nsga2(cfg(), EV)
        assert run_nsga2(cfg(seed=2), EV) != run_nsga2(cfg(), EV)

    def test_manifest(self):
        res = run_nsga2(cfg(), EV)
        m = res.manifest
        assert m.algorithm == "nsga2" and m.seed == 1
        assert m.evaluator == EV.identity()
        assert res.config == cfg()
        assert m.started_at == "2023-11-14T22:13:20+00:00"

    def test_hv_series_uses_front_zero(self):
        res = run_nsga2(cfg(), EV)
        assert len(res.hv_history) == len(res.front_history) == 10
        for h, f in zip(res.hv_history, res.front_history):
            assert h == hypervolume_2d(f, DEFAULT_REF_POINT)

    def test_no_history_when_disabled(self):
        res = run_nsga2(cfg(record_fronts=False), EV)
        assert res.front_history is None

    def test_evaluator_failure_names_generation(self):
        class FailsLater:
            calls = 0

            def evaluate_genes(self, genes):
                self.calls += 1
                if self.calls == 4:
                    raise RuntimeError("device unplugged")
                return EV.evaluate_genes(genes)

            def identity(self):
                return {}

        with pytest.raises(SearchError) as info:
            run_nsga2(cfg(), FailsLater())
        assert info.value.generation == 3

    def test_wrong_algorithm(self):
        with pytest.raises(ValueError):
            run_nsga2(cfg(algorithm="sms-emoa"), EV)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31), st.integers(4, 60))
    def test_survival_respects_front_order(self, seed, n):
        rng = np.random.default_rng(seed)
        objs = rng.integers(0, 8, size=(2 * n, 2)).astype(float)
        keep, rank, _ = _nsga2_survival(objs, n, rng)
        assert len(keep) == n == len(set(keep.tolist()))
        ranks = np.empty(2 * n, dtype=int)
        for k, f in enumerate(non_dominated_sort(objs)):
            ranks[f] = k
        dropped = np.setdiff1d(np.arange(2 * n), keep)
        if dropped.size:
            assert ranks[keep].max() <= ranks[dropped].min()
        assert np.array_equal(rank, ranks[keep])


class TestSMSEMOA:
    def test_runs_and_reports(self):
        c = cfg(algorithm="sms-emoa", population_size=10, generations=5, check_invariants=True)
        res = run_sms_emoa(c, EV)
        assert len(res.population) == 10
        assert len(res.hv_history) == 5
        assert res.manifest.generation_unit == "10 steps"
        assert_pairwise_nondominated(res.front)

    def test_deterministic(self):
        c = cfg(algorithm="sms-emoa", population_size=8, generations=4)
        assert run_sms_emoa(c, EV) == run_sms_emoa(c, EV)

    def test_on_step_count(self):
        steps = []
        run_sms_emoa(cfg(algorithm="sms-emoa", population_size=6, generations=3), EV, on_step=lambda s, o: steps.append(s))
        assert steps == list(range(1, 19))

    def test_reduced_space_series_non_decreasing(self):
        c = cfg(algorithm="sms-emoa", population_size=20, generations=30, space="reduced", seed=4)
        res = run_sms_emoa(c, EV)
        series = [h for _, h in hypervolume_progression(res)]
        assert all(b >= a for a, b in zip(series, series[1:]))

    def test_duplicate_removed_before_contributor(self):
        objs = np.array([[1.0, 3.0], [2.0, 2.0], [2.0, 2.0], [3.0, 1.0]])
        fronts = non_dominated_sort(objs)
        for seed in range(20):
            drop = _least_contributor(objs, fronts, (4.0, 4.0), np.random.default_rng(seed))
            assert drop in (1, 2)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6)), min_size=2, max_size=25), st.integers(0, 99))
    def test_removal_is_a_least_contributor_of_worst_front(self, pts, seed):
        objs = np.asarray(pts, dtype=float)
        fronts = non_dominated_sort(objs)
        drop = _least_contributor(objs, fronts, (10.0, 10.0), np.random.default_rng(seed))
        last = fronts[-1]
        assert drop in last
        c = hv_contributions_2d(objs[last], (10.0, 10.0))
        assert c[last.index(drop)] == c.min()
        if len(fronts) == 1:
            before = hypervolume_2d(objs, (10.0, 10.0))
            after = hypervolume_2d(np.delete(objs, drop, axis=0), (10.0, 10.0))
            has_zero = np.any(c == 0.0)
            assert not (has_zero and after < before)


class TestProgression:
    def test_constant_population(self):
        space = SearchSpace.restricted(kernel=(3,), width=(3,), depth=(2,), resolution=(224,))
        SPACES["single"] = space
        try:
            res = run_nsga2(cfg(space="single"), EV)
        finally:
            del SPACES["single"]
        series = hypervolume_progression(res)
        assert len(series) == 10
        assert len({h for _, h in series}) == 1

    def test_ref_dominating_every_point_gives_zeros(self):
        res = run_nsga2(cfg(), EV)
        assert [h for _, h in hypervolume_progression(res, (0.0, 0.0))] == [0.0] * 10

    def test_recompute_for_new_ref(self):
        res = run_nsga2(cfg(), EV)
        series = hypervolume_progression(res, (100.0, 80.0))
        assert [g for g, _ in series] == list(range(1, 11))
        assert all(h >= h0 for (_, h), h0 in zip(series, res.hv_history))

    def test_needs_history_for_new_ref(self):
        res = run_nsga2(cfg(record_fronts=False), EV)
        with pytest.raises(ValueError):
            hypervolume_progression(res, (1.0, 1.0))


class TestBaseline:
    def base(self, **kw):
        return cfg(algorithm="ofa-baseline", **kw)

    def test_unconstrained_limit(self):
        best = run_ofa_baseline(self.base(latency_constraint=1000.0, population_size=40, generations=100), EV)
        top = SyntheticSurrogate().objectives_from_work(np.array([20 * 49 * 6.0]))[0]
        assert best.objectives.top1_error <= top[0] + 5.0

    def test_infeasible(self):
        with pytest.raises(InfeasibleError):
            run_ofa_baseline(self.base(latency_constraint=5.5, retry_cap=3), EV)

    def test_feasible_and_deterministic(self):
        c = self.base(latency_constraint=20.0)
        a, b = run_ofa_baseline(c, EV), run_ofa_baseline(c, EV)
        assert a == b
        assert a.objectives.latency <= 20.0

    @pytest.mark.parametrize("limit", [9.0, 12.5, 16.0])
    def test_reduced_space_matches_exhaustive(self, limit):
        ex = exhaustive_reduced()
        objs = ex["objs"]
        best = objs[objs[:, 1] <= limit][:, 0].min()
        got = run_ofa_baseline(self.base(latency_constraint=limit, space="reduced", population_size=50, generations=200), EV)
        assert got.objectives.top1_error == best

    def test_run_search_rejects_baseline(self):
        with pytest.raises(ValueError):
            run_search(self.base(latency_constraint=20.0), EV)
