import math

import numpy as np
import pytest

from entronas.entropy import StageStats
from entronas.fitness import A1, A2, FitnessWeights, combine, fitness, stage_score


def stats_from(z_log_var, channels=(1,) * 6):
    return [StageStats(i + 1, v, c) for i, (v, c) in enumerate(zip(z_log_var, channels))]


def stats_with_z(z):
    # C_in = 1 so Z' equals the log-variance
    return stats_from(z)


def test_stage_score_examples():
    assert stage_score(StageStats(1, 0.0, 64)) == pytest.approx(math.log(64))
    assert stage_score(StageStats(1, 0.0, 64)) == pytest.approx(4.1589, abs=1e-4)
    assert stage_score(StageStats(1, 2.5, 1)) == 2.5
    two_layer = math.log(288) + math.log(3200)
    assert stage_score(StageStats(3, two_layer, 128)) == pytest.approx(18.586, abs=1e-3)


def test_presets():
    assert A1.a == (0, 0, 1, 1, 2, 4)
    assert A2.a == (0, 0, 1, 1, 3, 6)
    assert FitnessWeights.parse("a2") is A2
    assert FitnessWeights.parse("1,2,3,4,5,6").a == (1, 2, 3, 4, 5, 6)
    with pytest.raises(ValueError):
        FitnessWeights.parse("1,2,3")
    with pytest.raises(ValueError):
        FitnessWeights((0,) * 6)
    with pytest.raises(ValueError):
        FitnessWeights((-1, 1, 1, 1, 1, 1))


def test_fitness_examples():
    ones = stats_with_z([1] * 6)
    assert fitness(ones, A1).value == pytest.approx(4 / 3)
    assert fitness(ones, A2).value == pytest.approx(11 / 6)
    single = FitnessWeights((0, 0, 0, 0, 0, 6))
    assert fitness(stats_with_z([9, 9, 9, 9, 9, 2]), single).value == pytest.approx(2.0)


def test_value_matches_per_stage():
    rng = np.random.default_rng(0)
    for _ in range(100):
        w = FitnessWeights(tuple(rng.uniform(0, 5, 6)))
        stats = stats_from(rng.normal(0, 50, 6), rng.integers(1, 4096, 6))
        fv = fitness(stats, w)
        assert fv.value == pytest.approx(sum(a * z for a, z in zip(w.a, fv.per_stage_z)) / 6)


def test_linearity():
    rng = np.random.default_rng(1)
    for _ in range(100):
        z1, z2 = rng.normal(0, 10, 6), rng.normal(0, 10, 6)
        alpha, beta = rng.normal(size=2)
        lhs = combine(alpha * z1 + beta * z2, A2)
        rhs = alpha * combine(z1, A2) + beta * combine(z2, A2)
        assert lhs == pytest.approx(rhs, abs=1e-9)


def test_zero_weight_stages_ignored():
    rng = np.random.default_rng(2)
    for w in (A1, A2):
        base = rng.normal(0, 10, 6)
        moved = base.copy()
        moved[:2] += rng.normal(0, 1000, 2)
        assert fitness(stats_with_z(base), w).value == fitness(stats_with_z(moved), w).value


def test_shift_preserves_ranking():
    rng = np.random.default_rng(3)
    zs = rng.normal(0, 10, (20, 6))
    before = [combine(z, A1) for z in zs]
    after = [combine(z + 7.5, A1) for z in zs]
    shift = 7.5 * sum(A1.a) / 6
    np.testing.assert_allclose(np.array(after) - np.array(before), shift)
    assert np.argsort(before).tolist() == np.argsort(after).tolist()


def test_requires_six_ordered():
    with pytest.raises(ValueError):
        fitness(stats_with_z([1] * 5), A1)
    shuffled = stats_with_z([1] * 6)[::-1]
    with pytest.raises(ValueError):
        fitness(shuffled, A1)
