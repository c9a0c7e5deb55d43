import math

import numpy as np
import pytest
from scipy import stats

from flowtoll.dp import (NON_PRIVATE, PrivacyBudget, QualityScore, advanced_composition_epsilon,
                         dp_jdp_composition_bound, exp_mech_probabilities, exponential_mechanism,
                         laplace_noise, laplace_sample, utility_bound_exp_mech)


def test_laplace_zero_scale_is_exact(rng):
    assert laplace_sample(0.0, rng) == 0.0
    with pytest.raises(ValueError):
        laplace_sample(-1.0, rng)


def test_laplace_mean_and_tails(rng):
    b = 2.0
    z = laplace_noise(b, rng, size=100_000)
    assert abs(z.mean()) <= 3 * math.sqrt(2) * b / math.sqrt(len(z))
    for q in (0.1, 0.01):
        freq = np.mean(np.abs(z) > b * math.log(1 / q))
        assert abs(freq - q) <= 4 * math.sqrt(q * (1 - q) / len(z))
    # whole-distribution check against the scipy Laplace law
    assert stats.kstest(z, stats.laplace(scale=b).cdf).pvalue > 1e-3


def test_laplace_determinism():
    a = laplace_noise(1.0, np.random.default_rng(7), size=50)
    b = laplace_noise(1.0, np.random.default_rng(7), size=50)
    assert np.array_equal(a, b)


def test_exp_mech_argmax_limit(rng):
    qs = QualityScore(("a", "b", "c"), [0.0, 0.0, 5.0])
    assert exponential_mechanism(qs, math.inf, rng) == "c"
    tie = QualityScore(("a", "b", "c"), [1.0, 3.0, 3.0])
    assert exponential_mechanism(tie, math.inf, rng) == "b"


def test_exp_mech_uniform_when_equal(rng):
    qs = QualityScore(tuple(range(4)), [2.0] * 4)
    draws = np.array([exponential_mechanism(qs, 1.0, rng) for _ in range(100_000)])
    freq = np.bincount(draws, minlength=4) / len(draws)
    sd = math.sqrt(0.25 * 0.75 / len(draws))
    assert np.all(np.abs(freq - 0.25) <= 3 * sd)


def test_exp_mech_softmax_ratio(rng):
    eps, dq = 0.8, 1.0
    qs = QualityScore(("lo", "hi"), [0.0, math.log(4) * 2 * dq / eps], dq)
    assert exp_mech_probabilities(qs, eps)[1] == pytest.approx(0.8)
    draws = [exponential_mechanism(qs, eps, rng, return_index=True) for _ in range(100_000)]
    assert abs(np.mean(draws) - 0.8) <= 3 * math.sqrt(0.16 / 100_000)


def test_exp_mech_large_scores_are_stable():
    qs = QualityScore(("a", "b"), [1e6, 1e6 + 1.0])
    p = exp_mech_probabilities(qs, 2.0)
    assert np.all(np.isfinite(p)) and p.sum() == pytest.approx(1.0)


def test_exp_mech_errors():
    with pytest.raises(ValueError):
        QualityScore((), [])
    with pytest.raises(ValueError):
        exp_mech_probabilities(QualityScore(("a",), [-np.inf]), 1.0)


def test_utility_bound():
    assert utility_bound_exp_mech(1.0, 1.0, 8, 0.1) == pytest.approx(2 * math.log(80))
    assert utility_bound_exp_mech(1.0, 1.0, 8, 0.1) == pytest.approx(8.764, abs=1e-3)
    assert utility_bound_exp_mech(1.0, math.inf, 8, 0.1) == 0.0
    assert utility_bound_exp_mech(1.0, 2.0, 8, 0.1) == pytest.approx(utility_bound_exp_mech(1.0, 1.0, 8, 0.1) / 2)


def test_advanced_composition():
    assert advanced_composition_epsilon(1.0, math.exp(-1), 1) == pytest.approx(1 / math.sqrt(8))
    assert advanced_composition_epsilon(1.0, 0.1, 4) == pytest.approx(advanced_composition_epsilon(1.0, 0.1, 1) / 2)
    for eps, delta, T in [(1.0, 1e-3, 10), (0.3, 1e-6, 200), (2.0, 0.05, 1)]:
        e1 = advanced_composition_epsilon(eps, delta, T)
        assert T * e1 == pytest.approx(eps * math.sqrt(T / (8 * math.log(1 / delta))))
    with pytest.raises(ValueError):
        advanced_composition_epsilon(1.0, 1.0, 3)


def test_dp_jdp_composition():
    eps, delta = 1.0, 1e-3
    assert dp_jdp_composition_bound(eps / 4, delta / 2, eps / 4) == pytest.approx((3 * eps / 4, delta / 2))
    assert dp_jdp_composition_bound(0.3, 0.01, 0.0) == (0.3, 0.01)
    assert dp_jdp_composition_bound(0.0, 0.0, 0.2) == (0.4, 0.0)


def test_budget_ledger():
    b = PrivacyBudget(1.0, 1e-3, 0.05)
    b.charge("a", 0.25, 5e-4)
    b.charge("b", 0.25)
    assert b.basic_total() == (0.5, 5e-4)
    assert b.within_budget()
    assert len(b.charges) == 2
    d = b.to_dict()
    assert d["total"] == {"epsilon": 0.5, "delta": 5e-4}
    assert "warning" not in d
    free = PrivacyBudget(math.inf, 1e-3, 0.05)
    assert free.to_dict()["warning"] == NON_PRIVATE
    with pytest.raises(ValueError):
        PrivacyBudget(0.0, 0.1, 0.1)
