import itertools
import math

import numpy as np
import pytest
from scipy import stats as sps

from entronas.arch import ConvLayer, InputShape, estimate_flops, fixture, shallow_seed
from entronas.analysis import (
    DATASET_COLUMNS,
    S_FEEDFORWARD,
    S_MODEL,
    CorrelationDataset,
    SweepResult,
    UndefinedCorrelation,
    bivariate_sweep,
    conv_entropy,
    correlation_table_csv,
    geometric_means,
    sample_dataset,
    significance_stars,
    spearman,
    spearman_permutation_test,
    summarize,
    uniformize,
)
from entronas.fitness import A1, A2


def ranks_by_hand(v):
    # plain ranking for tie-free input, 1-based
    order = sorted(range(len(v)), key=lambda i: v[i])
    r = [0] * len(v)
    for pos, i in enumerate(order):
        r[i] = pos + 1
    return r


def spearman_by_hand(x, y):
    rx, ry = ranks_by_hand(x), ranks_by_hand(y)
    n = len(x)
    d2 = sum((a - b) ** 2 for a, b in zip(rx, ry))
    return 1 - 6 * d2 / (n * (n * n - 1))


class TestSummaries:
    def test_geometric_kernel(self):
        L, c, k = geometric_means([(64, 3), (64, 5)])
        assert L == 2 and c == pytest.approx(64)
        assert k == pytest.approx(math.sqrt(15))

    def test_two_layer_uniformize(self):
        u = uniformize([(32, 3), (128, 5)])
        assert u.layers == 2
        assert u.channels == pytest.approx(64.0)
        assert u.kernel == pytest.approx(math.sqrt(15))
        assert u.conv_entropy() == pytest.approx(13.734, abs=5e-4)
        assert u.conv_entropy() == pytest.approx(conv_entropy([(32, 3), (128, 5)]), abs=1e-12)

    def test_fixed_point_and_single_layer(self):
        u = uniformize([(48, 5)] * 7)
        assert (u.layers, u.channels, u.kernel) == (7, pytest.approx(48), pytest.approx(5))
        again = uniformize(u.layer_pairs())
        assert again.layers == u.layers
        assert (again.channels, again.kernel) == (pytest.approx(u.channels), pytest.approx(u.kernel))
        one = uniformize([ConvLayer(24, 8, 3)])
        assert (one.layers, one.channels, one.kernel) == (1, pytest.approx(24), pytest.approx(3))

    def test_summarize_a1(self):
        s = summarize(fixture("a1"))
        assert s.total_layers == 3 * (1 + 3 + 8 + 10 + 10)
        assert (s.hidden_dim, s.dim_feedforward) == (424, 912)
        assert uniformize(fixture("a1")).conv_entropy() == pytest.approx(
            conv_entropy(fixture("a1")), abs=1e-9)

    def test_empty(self):
        with pytest.raises(ValueError):
            geometric_means([])


class TestSpearman:
    def test_examples(self):
        assert spearman([1, 2, 3, 4, 5], [2, 4, 6, 8, 10]) == 1.0
        assert spearman([1, 2, 3, 4, 5], [5, 4, 3, 2, 1]) == -1.0
        assert spearman([1, 2, 3, 4, 5], [1, 3, 2, 5, 4]) == pytest.approx(0.8, abs=1e-12)

    def test_against_hand_ranks(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = int(rng.integers(2, 40))
            x = rng.permutation(n * 3)[:n].astype(float)
            y = rng.standard_normal(n)
            assert spearman(x, y) == pytest.approx(spearman_by_hand(list(x), list(y)), abs=1e-12)

    def test_against_scipy_with_ties(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            n = int(rng.integers(3, 50))
            x = rng.integers(0, 5, n)
            y = rng.integers(0, 5, n)
            if len(set(x)) < 2 or len(set(y)) < 2:
                continue
            assert spearman(x, y) == pytest.approx(sps.spearmanr(x, y).statistic, abs=1e-12)

    def test_symmetry_and_invariance(self):
        rng = np.random.default_rng(2)
        x, y = rng.standard_normal(30), rng.standard_normal(30)
        assert spearman(x, y) == pytest.approx(spearman(y, x), abs=1e-15)
        assert spearman(x, -y) == pytest.approx(-spearman(x, y), abs=1e-12)
        assert spearman(np.exp(x), y ** 3) == pytest.approx(spearman(x, y), abs=1e-12)

    def test_undefined(self):
        with pytest.raises(UndefinedCorrelation):
            spearman([1.0], [2.0])
        with pytest.raises(UndefinedCorrelation):
            spearman([1, 1, 1], [1, 2, 3])
        with pytest.raises(UndefinedCorrelation):
            spearman([1, 2], [1, 2, 3])


class TestPermutation:
    def test_exhaustive_small(self):
        # n=5: compare with the full enumeration of 120 orderings
        x = [1, 2, 3, 4, 5]
        y = [1, 3, 2, 5, 4]
        rho = spearman(x, y)
        exact = sum(abs(spearman(x, p)) >= abs(rho) - 1e-12
                    for p in itertools.permutations(y)) / 120
        _, p = spearman_permutation_test(x, y, n_perm=20000, seed=3)
        assert p == pytest.approx(exact, abs=0.015)

    def test_strong_and_null(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal(200)
        _, p_strong = spearman_permutation_test(x, x + 0.1 * rng.standard_normal(200))
        assert p_strong == pytest.approx(1 / 1001)
        _, p_null = spearman_permutation_test(x, rng.standard_normal(200))
        assert p_null > 0.01

    def test_deterministic(self):
        x, y = [3, 1, 4, 1.5, 9, 2.6], [2, 7, 1, 8, 2.8, 1.8]
        assert spearman_permutation_test(x, y, seed=5) == spearman_permutation_test(x, y, seed=5)

    def test_stars(self):
        assert significance_stars(0.001) == "***"
        assert significance_stars(0.03) == "**"
        assert significance_stars(0.07) == "*"
        assert significance_stars(0.2) == ""


class TestDataset:
    def test_deterministic_and_budgeted(self):
        seed = shallow_seed()
        shape = InputShape(64, 64)
        from entronas.entropy import McConfig
        mc = McConfig(shape=shape)
        budget = 3 * estimate_flops(seed, shape).total
        a = sample_dataset(seed, 60, flops_budget=budget, mc=mc, seed=1)
        b = sample_dataset(seed, 60, flops_budget=budget, mc=mc, seed=1)
        assert a.rows == b.rows
        assert len(a) == 60
        cols = a.columns()
        assert set(cols) == set(DATASET_COLUMNS)
        assert np.all(np.isfinite(cols["score"]))
        back = CorrelationDataset.from_csv(a.to_csv())
        assert back.rows == a.rows
        rows = a.correlations(n_perm=50)
        assert [r.parameter for r in rows] == list(DATASET_COLUMNS[:-1])
        assert correlation_table_csv(rows).startswith("parameter,rho,p_value,stars\n")

    def test_seed_over_budget(self):
        with pytest.raises(ValueError):
            sample_dataset(shallow_seed(), 10, flops_budget=1)


class TestSweep:
    def test_grid(self):
        assert len(S_MODEL) == 33 and S_MODEL[0] == 256 and S_MODEL[-1] == 512
        assert len(S_FEEDFORWARD) == 128
        assert all(f % 12 == 0 for f in S_FEEDFORWARD)
        assert S_FEEDFORWARD[0] == 516 and S_FEEDFORWARD[-1] == 2040

    def test_small_sweep(self):
        res = bivariate_sweep(fixture("a1"), A1, d_models=(256, 512), d_feedforwards=(516, 2040))
        assert len(res) == 4
        e = dict(zip(zip(res.d_model, res.d_feedforward), res.entropy))
        assert e[(512, 516)] > e[(256, 516)]
        assert e[(256, 2040)] > e[(256, 516)]
        assert SweepResult.from_csv(res.to_csv()).to_csv() == res.to_csv()

    def test_full_sweep_correlations(self):
        res = bivariate_sweep(fixture("a2"), A2)
        assert len(res) == 33 * 128
        rows = res.correlations(n_perm=100)
        assert all(r.rho > 0.5 for r in rows)
