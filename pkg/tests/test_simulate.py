from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agebranch import fixtures
from agebranch import semigroup as sg
from agebranch import simulate as sim
from agebranch.model import AgePopulation, SpecError, offspring_pmf, sample_offspring


# --- one step ---------------------------------------------------------------------


def test_empty_population_is_absorbing():
    spec = fixtures.geometric_supercritical()
    rng = np.random.default_rng(0)
    assert not sim.step(spec, AgePopulation(), "good", rng)


def test_deterministic_doubling():
    spec = fixtures.deterministic()
    rng = np.random.default_rng(0)
    pop = sim.step(spec, AgePopulation.single(0), "a", rng)
    assert pop == AgePopulation({0: 1, 1: 1})
    for n in range(2, 8):
        pop = sim.step(spec, pop, "a", rng)
        # everyone survives and has one newborn, so the total doubles
        assert pop.total == 2**n
        assert pop[0] == 2 ** (n - 1)


@pytest.mark.parametrize("name,e", [("geometric", "good"), ("polytail", "a"), ("binomial", "b"), ("poisson", "a")])
def test_step_first_moment(name, e):
    spec = fixtures.get_fixture(name)
    pop = AgePopulation({0: 2, 1: 1, 4: 3})
    op = sg.mean_operator(spec, e, 4)
    want = pop.integrate(op.apply(np.ones(6)))
    reps = 100_000
    rng = np.random.default_rng(1)
    z = pop.to_array()
    totals = np.array([sim._step_dense(spec, z, e, rng).sum() for _ in range(reps)], dtype=float)
    se = totals.std(ddof=1) / math.sqrt(reps)
    assert abs(totals.mean() - want) < 4 * se


def test_aggregated_step_matches_individual_sampling():
    spec = fixtures.binomial()
    pop = AgePopulation({0: 2, 2: 1})
    reps = 40_000
    rng = np.random.default_rng(2)
    z = pop.to_array()
    agg = np.array([sim._step_dense(spec, z, "a", rng)[:4] for _ in range(reps)])
    ind = np.zeros((reps, 4), dtype=np.int64)
    for r in range(reps):
        for x, c in pop.counts.items():
            for _ in range(c):
                k, sigma = sample_offspring(spec, x, "a", rng)
                ind[r, 0] += k
                ind[r, x + 1] += sigma
    for col in range(4):
        a, b = agg[:, col].astype(float), ind[:, col].astype(float)
        se = math.sqrt(a.var() / reps + b.var() / reps)
        assert abs(a.mean() - b.mean()) <= 4 * se + 1e-12
        assert a.var() == pytest.approx(b.var(), rel=0.05, abs=1e-12)


def test_step_cap():
    spec = fixtures.deterministic()
    with pytest.raises(sim.PopulationCapExceeded):
        sim.step(spec, AgePopulation({0: 10}), "a", np.random.default_rng(0), cap=15)


def test_step_pmf_single_individual():
    spec = fixtures.l2toy()
    rng = np.random.default_rng(3)
    reps = 40_000
    seen = {}
    for _ in range(reps):
        p = sim.step(spec, AgePopulation.single(0), "a", rng)
        key = (p[0], p[1])
        seen[key] = seen.get(key, 0) + 1
    for k in (1, 2):
        for s in (0, 1):
            q = offspring_pmf(spec, 0, "a", k, s)
            assert abs(seen.get((k, s), 0) / reps - q) < 4 * math.sqrt(q * (1 - q) / reps)


# --- trajectories -------------------------------------------------------------------


def test_run_is_reproducible():
    spec = fixtures.geometric_supercritical()
    a = sim.run(spec, AgePopulation.single(0), 30, seed=5)
    b = sim.run(spec, AgePopulation.single(0), 30, seed=5)
    c = sim.run(spec, AgePopulation.single(0), 30, seed=5, replicate=1)
    assert np.array_equal(a.totals, b.totals) and np.array_equal(a.log_W, b.log_W)
    assert a.populations == b.populations
    assert not np.array_equal(a.totals, c.totals) or a.extinction_time is not None


def test_extinct_trajectory_has_zero_martingale():
    spec = fixtures.subcritical()
    for r in range(20):
        t = sim.run(spec, AgePopulation.single(0), 60, seed=1, replicate=r)
        if t.extinction_time is not None:
            assert t.W_path[-1] == 0.0
            assert t.totals[t.extinction_time] == 0
            break
    else:
        pytest.fail("no extinct replicate")


def test_deterministic_martingale_is_constant():
    spec = fixtures.deterministic()
    t = sim.run(spec, AgePopulation.single(0), 20, seed=0)
    assert np.allclose(t.W_path, 1.0, atol=1e-12)
    assert t.totals[-1] == 2**20


def test_cap_discards_step_and_flags():
    spec = fixtures.deterministic()
    t = sim.run(spec, AgePopulation.single(0), 30, seed=0, cap=1000)
    assert t.capped and t.n_reached == 9
    assert t.totals[-1] == 512


def test_subcritical_extinction():
    spec = fixtures.subcritical()
    assert sg.lyapunov_estimate(spec, 500, 0)["log_lambda_hat"] < 0
    ens = sim.run_ensemble(spec, AgePopulation.single(0), 200, 1000, seed=3)
    assert (ens.extinction_time >= 0).mean() >= 0.99


def test_ensemble_thread_determinism():
    spec = fixtures.geometric_supercritical()
    z0 = AgePopulation.single(0)
    a = sim.run_ensemble(spec, z0, 25, 40, seed=8, threads=1)
    b = sim.run_ensemble(spec, z0, 25, 40, seed=8, threads=8)
    assert np.array_equal(a.totals, b.totals)
    assert np.array_equal(a.log_W, b.log_W)
    assert sim.summarize(a).to_dict() == sim.summarize(b).to_dict()


def test_ensemble_is_quenched():
    spec = fixtures.geometric_supercritical()
    ens = sim.run_ensemble(spec, AgePopulation.single(0), 10, 5, seed=2)
    assert ens.envs.sequence == spec.generate_envs(len(ens.envs), 2).sequence


def test_quenched_mean_of_totals():
    # E[Z_n(1) | env] = Z_0 M_{0,n} 1 for every realized environment
    spec = fixtures.binomial()
    z0 = AgePopulation.single(0)
    ens = sim.run_ensemble(spec, z0, 8, 20_000, seed=4)
    q = sg.quenched_mean(spec, ens.envs, z0, 8)
    tot = ens.totals[:, 8].astype(float)
    assert abs(tot.mean() - math.exp(q.log_mass)) < 4 * tot.std(ddof=1) / math.sqrt(len(tot))


# --- exact martingale check ----------------------------------------------------------


@pytest.mark.parametrize("name,n", [("l2toy", 1), ("l2toy", 2), ("binomial", 1), ("binomial", 2)])
def test_martingale_identity_exact(name, n):
    spec = fixtures.get_fixture(name)
    envs = spec.generate_envs(400, 0)
    res = sim.martingale_enumeration_check(spec, envs, AgePopulation.single(0), n)
    assert res["residual"] <= 1e-10
    assert 0 < res["outcomes"] <= 100_000


def test_martingale_deterministic_residual_zero():
    spec = fixtures.deterministic()
    envs = spec.generate_envs(400, 0)
    res = sim.martingale_enumeration_check(spec, envs, AgePopulation.single(0), 3)
    assert res["residual"] == pytest.approx(0.0, abs=1e-15)
    # one history per generation, each with a single joint outcome
    assert res["outcomes"] == 3


def test_martingale_check_has_power():
    spec = fixtures.l2toy()
    envs = spec.generate_envs(400, 0)
    prof = sg.harmonic_profiles(spec, envs, 2, max_age=0)
    bad = prof.perturbed(1, 1, 0.01)
    res = sim.martingale_enumeration_check(spec, envs, AgePopulation.single(0), 1, bad)
    assert res["residual"] > 1e-4


def test_martingale_check_needs_bounded_support():
    spec = fixtures.geometric_supercritical()
    with pytest.raises(SpecError):
        sim.martingale_enumeration_check(spec, spec.generate_envs(400, 0), AgePopulation.single(0), 1)


# --- experiments ------------------------------------------------------------------------


def test_kesten_stigum_refuses_subcritical():
    with pytest.raises(sim.PreconditionError, match="A4 .Supercriticality"):
        sim.kesten_stigum_experiment(fixtures.subcritical(), 10, 10, 0)


def test_kesten_stigum_refuses_infinite_mean():
    with pytest.raises(sim.PreconditionError):
        sim.kesten_stigum_experiment(fixtures.polytail(0.9, 0.95), 10, 10, 0)


def test_kesten_stigum_small_run():
    st_ = sim.kesten_stigum_experiment(fixtures.geometric_supercritical(), 400, 20, 1)
    d = st_.to_dict()
    assert abs(d["mean_W"] - 1.0) < 4 * d["mean_W_ci_halfwidth"]
    assert d["ratio_count"] > 0 and not any(k.startswith("_") for k in d)


def test_type_frequency_constant_function_has_zero_error():
    spec = fixtures.geometric_supercritical()
    res = sim.type_frequency_experiment(spec, lambda a: np.ones(len(a)), 50, 10, 0)
    for e in res.errors:
        assert np.allclose(e, 0.0, atol=1e-12)


@given(vals=st.lists(st.floats(-2.0, 2.0), min_size=3, max_size=3))
@settings(max_examples=10, deadline=None)
def test_type_frequency_error_bounded_by_sup_norm(vals):
    spec = fixtures.binomial()
    res = sim.type_frequency_experiment(spec, np.array(vals), 30, 6, 0)
    bound = 2 * max(abs(v) for v in vals)
    for e in res.errors:
        assert (e <= bound + 1e-12).all()


def test_extinction_explosion_small_run():
    res = sim.extinction_explosion_experiment(fixtures.geometric_supercritical(), 300, 60, 0)
    assert res["gap"] <= res["gap_allowance"] + 1e-12
    assert res["one_step_lower_bound"] <= res["p_ext_hat"]


def test_extinction_explosion_refuses_markov():
    with pytest.raises(sim.PreconditionError, match="IID"):
        sim.extinction_explosion_experiment(fixtures.geometric_markov(), 10, 10, 0)


def test_extinction_explosion_refuses_no_death():
    with pytest.raises(sim.PreconditionError):
        sim.extinction_explosion_experiment(fixtures.l2toy(), 10, 10, 0)


def test_confidence_helpers():
    m, h = sim.mean_ci(np.array([1.0, 1.0, 1.0]))
    assert m == 1.0 and h == 0.0
    p, h = sim.proportion_ci(25, 100)
    assert p == 0.25 and h == pytest.approx(1.959964 * math.sqrt(0.25 * 0.75 / 100), rel=1e-5)


def test_tabular_rows():
    spec = fixtures.geometric_supercritical()
    ens = sim.run_ensemble(spec, AgePopulation.single(0), 5, 3, seed=0)
    rows = list(sim.replicate_rows(ens))
    assert len(rows) == 3 and all(len(r) == len(sim.REPLICATE_HEADER) for r in rows)
    gens = list(sim.generation_rows(spec, ens))
    assert len(gens) == 6 and gens[0][-1] == 0.0
