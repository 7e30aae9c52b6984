import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import FIXTURES
from ofa2.genotype import (
    FULL_SPACE,
    KERNEL_OPTIONS,
    MAX_DEPTH,
    N_UNITS,
    RESOLUTION_OPTIONS,
    WIDTH_OPTIONS,
    Genotype,
    decode,
    random_genotype,
)
from ofa2.persistence import load_predictor
from ofa2.surrogate import (
    FEATURE_WIDTH,
    AccuracyPredictor,
    ConfigurationError,
    EvaluationError,
    LatencyTable,
    ObjectiveVector,
    PredictorEvaluator,
    SyntheticEvaluator,
    SyntheticSurrogate,
    encode_features,
    encode_features_batch,
    evaluate_genes,
    evaluate_population,
    predict_accuracy,
    predict_latency,
    synthetic_objectives,
)

seeds = st.integers(min_value=0, max_value=2**32 - 1)


def make(ks=3, w=3, d=2, r=224) -> Genotype:
    return Genotype((ks,) * 20, (w,) * 20, (d,) * 5, r)


def random_table(rng) -> LatencyTable:
    entries = {
        (r, u, s, k, w): float(rng.uniform(0.0, 3.0))
        for r in RESOLUTION_OPTIONS
        for u in range(N_UNITS)
        for s in range(MAX_DEPTH)
        for k in KERNEL_OPTIONS
        for w in WIDTH_OPTIONS
    }
    stem = {r: float(rng.uniform(0, 2)) for r in RESOLUTION_OPTIONS}
    head = {r: float(rng.uniform(0, 2)) for r in RESOLUTION_OPTIONS}
    return LatencyTable(entries, stem, head)


def resum_latency(table: LatencyTable, g: Genotype) -> float:
    total = table.stem[g.r] + table.head[g.r]
    for u in range(5):
        for s in range(g.d[u]):
            i = 4 * u + s
            total += table.entries[(g.r, u, s, g.ks[i], g.w[i])]
    return total


class TestObjectiveVector:
    def test_valid(self):
        assert ObjectiveVector(20.0, 10.0).as_tuple() == (20.0, 10.0)

    @pytest.mark.parametrize("err,lat", [(-1, 1), (101, 1), (50, -1), (math.nan, 1), (50, math.inf)])
    def test_invalid(self, err, lat):
        with pytest.raises(ValueError):
            ObjectiveVector(err, lat)


class TestFeatures:
    def test_width(self):
        assert FEATURE_WIDTH == 145
        assert encode_features(make()).shape == (145,)
        assert encode_features(decode(make(d=4))).shape == (145,)

    def test_depth_two_nonzero_count(self):
        x = encode_features(make(d=2))
        blocks = x[:120].reshape(20, 6)
        live = blocks.any(axis=1)
        # 10 active slots span 10 * 6 = 60 block entries, two of which per slot are set
        assert live.sum() * 6 == 60
        assert np.count_nonzero(x[:120]) == 20
        assert np.all(blocks[live].sum(axis=1) == 2)
        assert np.count_nonzero(x[120:]) == 1

    def test_one_hot_positions(self):
        x = encode_features(make(ks=5, w=6, d=2, r=132))
        assert x[0:6].tolist() == [0, 1, 0, 0, 0, 1]
        assert x[12:24].tolist() == [0] * 12  # unit 0 slots 2 and 3 are inactive
        assert x[121] == 1.0

    def test_architecture_and_genotype_agree(self):
        g = random_genotype(np.random.default_rng(1))
        assert np.array_equal(encode_features(g), encode_features(decode(g)))

    @settings(max_examples=100, deadline=None)
    @given(seeds)
    def test_phenotype_equal_genotypes_share_features(self, seed):
        rng = np.random.default_rng(seed)
        g = random_genotype(rng)
        genes = g.to_array()
        for u in range(5):
            for s in range(g.d[u], 4):
                genes[4 * u + s] = rng.choice(KERNEL_OPTIONS)
                genes[20 + 4 * u + s] = rng.choice(WIDTH_OPTIONS)
        h = Genotype.from_genes(genes)
        assert np.array_equal(encode_features(g), encode_features(h))
        assert np.array_equal(encode_features_batch(np.stack([g.to_array(), genes]))[1], encode_features(g))


class TestAccuracyPredictor:
    def test_default_shape(self):
        p = AccuracyPredictor.random(np.random.default_rng(0))
        assert p.dims == [145, 400, 400, 400, 1]

    def test_constant_network(self):
        p = AccuracyPredictor.constant(75.0)
        rng = np.random.default_rng(2)
        for _ in range(5):
            assert predict_accuracy(p, random_genotype(rng)) == 75.0

    def test_identity_path(self):
        # feature 120 (resolution 128) routed through one unit per layer
        p = AccuracyPredictor.constant(0.0, hidden=(4, 4, 4))
        p.weights[0][120, 2] = 1.0
        p.weights[1][2, 1] = 1.0
        p.weights[2][1, 3] = 1.0
        p.weights[3][3, 0] = 61.25
        assert predict_accuracy(p, make(r=128)) == 61.25
        assert predict_accuracy(p, make(r=132)) == 0.0

    def test_relu_clips_negative(self):
        p = AccuracyPredictor.constant(10.0, hidden=(2, 2, 2))
        p.weights[0][120, 0] = -5.0
        p.weights[1][0, 0] = 1.0
        p.weights[2][0, 0] = 1.0
        p.weights[3][0, 0] = 1.0
        assert predict_accuracy(p, make(r=128)) == 10.0

    def test_width_mismatch(self):
        p = AccuracyPredictor.constant(1.0, hidden=(3, 3, 3), input_dim=144)
        with pytest.raises(ConfigurationError):
            predict_accuracy(p, make())
        with pytest.raises(ConfigurationError):
            PredictorEvaluator(p, LatencyTable.uniform())

    def test_shape_chain_validated(self):
        with pytest.raises(ConfigurationError):
            AccuracyPredictor([np.zeros((145, 3)), np.zeros((4, 1))], [np.zeros(3), np.zeros(1)])
        with pytest.raises(ConfigurationError):
            AccuracyPredictor([np.zeros((145, 2))], [np.zeros(2)])
        with pytest.raises(ConfigurationError):
            AccuracyPredictor([np.full((145, 1), np.nan)], [np.zeros(1)])

    def test_published_fixture(self):
        p = load_predictor(FIXTURES / "predictor_small.txt")
        expected = json.loads((FIXTURES / "predictor_small_expected.json").read_text())
        g = Genotype.from_genes(expected["genes"])
        assert predict_accuracy(p, g) == pytest.approx(expected["accuracy"], abs=1e-6)

    @settings(max_examples=25, deadline=None)
    @given(seeds)
    def test_forward_matches_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        p = AccuracyPredictor.random(rng, hidden=(7, 5, 6))
        x = encode_features(random_genotype(rng))
        h = x.tolist()
        for layer, (w, b) in enumerate(zip(p.weights, p.biases)):
            out = []
            for j in range(w.shape[1]):
                t = float(b[j]) + math.fsum(h[i] * float(w[i, j]) for i in range(w.shape[0]))
                out.append(max(t, 0.0) if layer < 3 else t)
            h = out
        assert p.forward(x)[0] == pytest.approx(h[0], rel=1e-6, abs=1e-9)

    def test_additive_network_formula(self):
        p = AccuracyPredictor.additive()
        g = make(ks=7, w=6, d=3, r=224)
        expected = 55.0 + 15 * (0.5 + 0.3 + 0.4) + 0.16 * 24
        assert predict_accuracy(p, g) == pytest.approx(expected, abs=1e-9)


class TestLatencyTable:
    def test_uniform_depth_two(self):
        assert predict_latency(LatencyTable.uniform(1.0, 0.0), make(d=2)) == 10.0

    def test_increment_active_entry(self):
        rng = np.random.default_rng(3)
        t = random_table(rng)
        g = make(ks=5, w=4, d=3, r=200)
        base = predict_latency(t, g)
        entries = dict(t.entries)
        entries[(200, 1, 2, 5, 4)] += 0.75
        bumped = LatencyTable(entries, t.stem, t.head)
        assert predict_latency(bumped, g) == pytest.approx(base + 0.75, abs=1e-12)
        # slot 3 is inactive at depth 3
        entries[(200, 1, 3, 5, 4)] += 10.0
        assert predict_latency(LatencyTable(entries, t.stem, t.head), g) == pytest.approx(base + 0.75, abs=1e-12)

    def test_removing_a_layer_subtracts_its_entry(self):
        t = random_table(np.random.default_rng(4))
        g = make(ks=7, w=3, d=4, r=176)
        genes = g.to_list()
        genes[40] = 3  # unit 0 loses slot 3
        h = Genotype.from_genes(genes)
        assert predict_latency(t, g) - predict_latency(t, h) == pytest.approx(t.entries[(176, 0, 3, 7, 3)], abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(seeds)
    def test_resummation_oracle(self, seed):
        rng = np.random.default_rng(seed)
        t = random_table(rng)
        g = random_genotype(rng)
        assert predict_latency(t, g) == pytest.approx(resum_latency(t, g), abs=1e-12)

    def test_missing_key_named(self):
        t = LatencyTable.uniform()
        entries = dict(t.entries)
        del entries[(224, 2, 1, 5, 4)]
        t = LatencyTable(entries, t.stem, t.head)
        genes = make(ks=5, w=4, d=2).to_list()
        with pytest.raises(LookupError, match=r"\(224, 2, 1, 5, 4\)"):
            predict_latency(t, Genotype.from_genes(genes))
        with pytest.raises(EvaluationError) as info:
            evaluate_genes(PredictorEvaluator(AccuracyPredictor.constant(50.0), t), np.array([make().to_list(), genes]))
        assert info.value.index == 1

    def test_missing_overhead_named(self):
        t = LatencyTable.uniform()
        stem = dict(t.stem)
        del stem[128]
        with pytest.raises(LookupError, match="stem"):
            predict_latency(LatencyTable(t.entries, stem, t.head), make(r=128))

    def test_negative_entry_rejected(self):
        with pytest.raises(ConfigurationError):
            LatencyTable({(224, 0, 0, 3, 3): -1.0}, {}, {})

    def test_table_reproduces_synthetic_latency(self):
        s = SyntheticSurrogate()
        t = LatencyTable.from_surrogate(s)
        rng = np.random.default_rng(5)
        for _ in range(20):
            g = random_genotype(rng)
            assert predict_latency(t, g) == pytest.approx(synthetic_objectives(s, g).latency, rel=1e-12)


class TestSynthetic:
    def test_formula(self):
        s = SyntheticSurrogate(a=1e-3, b=2.0, c=0.5)
        g = make(ks=5, w=4, d=2, r=112 * 2)
        work = 10 * 25 * 4
        obj = synthetic_objectives(s, g)
        assert obj.top1_error == pytest.approx(100 * math.exp(-1e-3 * work))
        assert obj.latency == pytest.approx(2.0 + 0.5 * work)

    def test_maximal_architecture_is_extreme(self):
        s = SyntheticSurrogate()
        best = synthetic_objectives(s, make(ks=7, w=6, d=4, r=224))
        sample = SyntheticEvaluator(s).evaluate_genes(FULL_SPACE.sample(np.random.default_rng(6), 5000))
        assert np.all(sample[:, 0] >= best.top1_error)
        assert np.all(sample[:, 1] <= best.latency)

    def test_work_doubles(self):
        s = SyntheticSurrogate()
        # k^2 * w: 3^2*6 = 54 is twice 3^2*3 = 27
        assert s.work(make(ks=3, w=6).to_array())[0] == 2 * s.work(make(ks=3, w=3).to_array())[0]

    @settings(max_examples=100, deadline=None)
    @given(seeds)
    def test_work_order_gives_conflict(self, seed):
        s = SyntheticSurrogate()
        genes = FULL_SPACE.sample(np.random.default_rng(seed), 2)
        w = s.work(genes)
        o = s.objectives_from_work(w)
        if w[0] < w[1]:
            assert o[0, 0] > o[1, 0] and o[0, 1] < o[1, 1]

    def test_bad_parameters(self):
        with pytest.raises(ConfigurationError):
            SyntheticSurrogate(a=0.0)


class TestEvaluatePopulation:
    def test_empty(self):
        assert evaluate_population(SyntheticEvaluator(), []) == []

    def test_singleton(self):
        g = random_genotype(np.random.default_rng(7))
        assert evaluate_population(SyntheticEvaluator(), [g]) == [synthetic_objectives(SyntheticSurrogate(), g)]

    def test_order_preserved_under_shuffle_and_threads(self):
        rng = np.random.default_rng(8)
        gs = [random_genotype(rng) for _ in range(50)]
        ev = PredictorEvaluator(AccuracyPredictor.random(rng, hidden=(8, 8, 8)), random_table(rng))
        base = evaluate_population(ev, gs)
        perm = rng.permutation(50)
        shuffled = evaluate_population(ev, [gs[i] for i in perm], workers=4)
        assert shuffled == [base[i] for i in perm]

    def test_error_is_complement_of_clipped_accuracy(self):
        g = make()
        hi = PredictorEvaluator(AccuracyPredictor.constant(130.0), LatencyTable.uniform())
        lo = PredictorEvaluator(AccuracyPredictor.constant(62.5), LatencyTable.uniform())
        assert evaluate_population(hi, [g])[0].top1_error == 0.0
        assert evaluate_population(lo, [g])[0].top1_error == 37.5

    def test_non_finite_objectives_carry_index(self):
        class Broken:
            def evaluate_genes(self, genes):
                out = np.ones((len(genes), 2))
                out[-1, 0] = np.nan
                return out

            def identity(self):
                return {}

        genes = FULL_SPACE.sample(np.random.default_rng(9), 6)
        with pytest.raises(EvaluationError) as info:
            evaluate_genes(Broken(), genes)
        assert info.value.index == 5

    def test_identity_is_stable(self):
        assert SyntheticEvaluator().identity() == SyntheticEvaluator().identity()
        assert SyntheticEvaluator().identity() != SyntheticEvaluator(SyntheticSurrogate(b=4.0)).identity()
