from __future__ import annotations

import math

import numpy as np
import pytest

from agebranch import fixtures
from agebranch import semigroup as sg
from agebranch import spine as sp
from agebranch.model import SpecError, offspring_pmf

L2_LAMBDA = (1.5 + math.sqrt(4.25)) / 2
L2_H1 = 1 / L2_LAMBDA


@pytest.fixture(scope="module")
def l2():
    spec = fixtures.l2toy()
    envs = spec.generate_envs(200, 0)
    return spec, envs, sg.harmonic_profiles(spec, envs, 5, max_age=1)


def test_l2toy_biased_cell(l2):
    spec, envs, prof = l2
    want = (2 + L2_H1) * 0.25 / L2_LAMBDA
    assert sp.biased_offspring_pmf(spec, envs, prof, 0, 2, 1) == pytest.approx(want, abs=1e-10)
    assert sp.biased_offspring_pmf(spec, envs, prof, 0, 2, 1) == pytest.approx(0.3596118, abs=1e-7)


def test_zero_weight_outcome(l2):
    spec, envs, prof = l2
    assert sp.biased_offspring_pmf(spec, envs, prof, 1, 0, 0) == 0.0


@pytest.mark.parametrize("name", ["l2toy", "binomial", "geometric", "polytail"])
@pytest.mark.parametrize("x", [0, 1, 3])
def test_biased_law_normalizes(name, x):
    spec = fixtures.get_fixture(name)
    envs = spec.generate_envs(400, 1)
    prof = sg.harmonic_profiles(spec, envs, 3, max_age=x)
    total = sum(sp.biased_offspring_pmf(spec, envs, prof, x, k, s, t=1)
                for k in range(3000) for s in (0, 1))
    assert total == pytest.approx(1.0, abs=1e-6 if name == "polytail" else 1e-10)
    a, b = sp.mixture_weights(spec, envs, prof, x, t=1)
    assert a + b == pytest.approx(1.0, abs=1e-12)


def test_normalizer_detects_inconsistent_profiles(l2):
    spec, envs, prof = l2
    with pytest.raises(sp.ConsistencyError):
        sp.biased_offspring_pmf(spec, envs, prof.perturbed(1, 1, 0.1), 0, 2, 1)


@pytest.mark.parametrize("name,x", [("l2toy", 0), ("binomial", 1)])
def test_biased_sampler_joint_law(name, x):
    spec = fixtures.get_fixture(name)
    envs = spec.generate_envs(400, 2)
    prof = sg.harmonic_profiles(spec, envs, 2, max_age=x)
    rng = np.random.default_rng(11)
    reps = 100_000
    counts = {}
    for _ in range(reps):
        k, s, _ = sp.sample_biased_offspring(spec, envs, prof, x, rng)
        counts[(k, s)] = counts.get((k, s), 0) + 1
    for k in range(3):
        for s in (0, 1):
            p = sp.biased_offspring_pmf(spec, envs, prof, x, k, s)
            assert abs(counts.get((k, s), 0) / reps - p) <= 4 * math.sqrt(p * (1 - p) / reps) + 1e-12


def test_l2toy_child_choice(l2):
    spec, envs, prof = l2
    rng = np.random.default_rng(12)
    picks = []
    while len(picks) < 20_000:
        k, s, c = sp.sample_biased_offspring(spec, envs, prof, 0, rng)
        if (k, s) == (2, 1):
            picks.append(c == 1)
    p = L2_H1 / (2 + L2_H1)
    assert p == pytest.approx(0.219223, abs=1e-6)
    assert abs(np.mean(picks) - p) < 4 * math.sqrt(p * (1 - p) / len(picks))


def test_spine_is_immortal_and_consistent():
    spec = fixtures.geometric_supercritical()
    runs = sp.spine_ensemble(spec, 0, 60, 20, seed=3)
    for t in runs:
        assert t.n == 60 and len(t.spine_age) == 61
        # the marked child is the survivor or a newborn actually produced
        for j in range(t.n):
            c, x = t.child[j], t.spine_age[j]
            assert (c == 0 and t.k[j] >= 1) or (c == x + 1 and t.sigma[j] == 1)
            assert t.spine_age[j + 1] == c
        assert np.isfinite(t.W).all() and (t.W > 0).all()


def test_spine_reproducible_and_thread_safe():
    spec = fixtures.geometric_supercritical()
    a = sp.spine_ensemble(spec, 0, 40, 8, seed=4, threads=1)
    b = sp.spine_ensemble(spec, 0, 40, 8, seed=4, threads=8)
    for u, v in zip(a, b):
        assert np.array_equal(u.k, v.k) and np.array_equal(u.W, v.W)


def test_spine_w_without_off_spine_tracking():
    spec = fixtures.geometric_supercritical()
    t = sp.spine_ensemble(spec, 0, 30, 1, seed=5, track_off_spine=False)[0]
    assert t.capped and t.cap_time == 0
    assert (t.W > 0).all()


def test_growth_statistic_definition():
    spec = fixtures.geometric_supercritical()
    t = sp.spine_ensemble(spec, 0, 30, 1, seed=6)[0]
    ns = np.arange(5, 21)
    want = max(max(math.log(t.N_h[n]), 0.0) / n for n in ns)
    assert sp.growth_statistic(t, 5, 20) == pytest.approx(want)


def test_spine_w_percentile_stable_under_doubling():
    spec = fixtures.geometric_supercritical()
    short = sp.spine_ensemble(spec, 0, 201, 100, seed=7)
    long = sp.spine_ensemble(spec, 0, 401, 100, seed=7)
    p200 = np.percentile([t.W[200] for t in short], 99)
    p400 = np.percentile([t.W[400] for t in long], 99)
    assert math.isfinite(p200) and math.isfinite(p400)
    assert abs(math.log(p400 / p200)) < math.log(2)


# --- exact change of measure --------------------------------------------------------


@pytest.mark.parametrize("name,n", [("l2toy", 1), ("l2toy", 2), ("binomial", 1), ("binomial", 2)])
def test_change_of_measure_exact(name, n):
    spec = fixtures.get_fixture(name)
    envs = spec.generate_envs(400, 0)
    res = sp.change_of_measure_check(spec, envs, 0, n)
    assert res["max_gap"] <= 1e-9
    assert res["mass_Pstar"] == pytest.approx(1.0, abs=1e-10)
    assert res["mass_P"] == pytest.approx(1.0, abs=1e-12)
    assert res["unbiasing_gap"] <= 1e-9


def test_change_of_measure_deterministic():
    spec = fixtures.deterministic()
    envs = spec.generate_envs(400, 0)
    res = sp.change_of_measure_check(spec, envs, 0, 3)
    assert res["trees"] == 1
    assert res["max_gap"] == pytest.approx(0.0, abs=1e-15)
    assert res["mass_Pstar"] == pytest.approx(1.0, abs=1e-15)


def test_change_of_measure_l2toy_one_step_by_hand(l2):
    # P*(tree) = W_1 P(tree) for the four one-step outcomes
    spec, envs, prof = l2
    for k in (1, 2):
        for s in (0, 1):
            w = (k + s * L2_H1) / L2_LAMBDA
            want = w * offspring_pmf(spec, 0, "a", k, s)
            assert sp.biased_offspring_pmf(spec, envs, prof, 0, k, s) == pytest.approx(want, abs=1e-10)


def test_change_of_measure_needs_bounded_support():
    spec = fixtures.geometric_supercritical()
    with pytest.raises(SpecError):
        sp.change_of_measure_check(spec, spec.generate_envs(400, 0), 0, 1)
