from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special

from agebranch import fixtures
from agebranch.model import (
    AgePopulation,
    BoundedSupport,
    EnvSequence,
    GeometricTail,
    LeslieSpec,
    MarkovEnv,
    PoissonFamily,
    PolyTail,
    Profile,
    SpecError,
    constant,
    dump_spec,
    is_primitive,
    load_spec,
    monotonicity_violation,
    offspring_pmf,
    sample_offspring,
)
from agebranch.rng import ENV_STREAM, REPLICATE_STREAM, stream


# --- profiles -------------------------------------------------------------------


def test_profile_values_and_settle():
    p = Profile(0.6, 0.2, 0.5)
    assert p(0) == pytest.approx(0.6)
    assert p(1) == pytest.approx(0.4)
    assert p(60) == pytest.approx(0.2)
    a = p.settle_age()
    assert float(p(a)) == 0.2
    assert p.is_nonincreasing and not p.is_nondecreasing


def test_profile_rho_zero_is_step():
    p = Profile(0.5, 0.0, 0.0)
    assert float(p(0)) == 0.5 and float(p(1)) == 0.0 and float(p(7)) == 0.0


@pytest.mark.parametrize("bad", [dict(p0=1.0, p_inf=0.0, rho=1.0), dict(p0=float("nan"), p_inf=0.0)])
def test_profile_rejects_bad_parameters(bad):
    with pytest.raises(SpecError):
        Profile(**bad)


# --- offspring families ---------------------------------------------------------


def _family_cases():
    return [
        (GeometricTail({"a": Profile(0.6, 0.3, 0.5)}), 3),
        (PoissonFamily({"a": Profile(2.0, 0.5, 0.5)}), 3),
        (PolyTail({"a": Profile(3.5, 4.0, 0.5)}), 2),
        (BoundedSupport({"a": {"pmfs": [[0.1, 0.2, 0.7], [0.5, 0.5]]}}), 1),
        (BoundedSupport({"a": {"binomial": {"trials": 3, "p": Profile(0.6, 0.2, 0.5)}}}), 2),
    ]


@pytest.mark.parametrize("fam,x", _family_cases())
def test_pmf_sf_moments_consistent(fam, x):
    k = np.arange(0, 4000)
    pmf = fam.pmf(k, x, "a")
    assert pmf.sum() == pytest.approx(1.0, abs=1e-9)
    sf = fam.sf(k, x, "a")
    assert np.allclose(sf, 1.0 - np.concatenate([[0.0], np.cumsum(pmf)[:-1]]), atol=1e-9)
    assert float(fam.mean(x, "a")) == pytest.approx(float(np.dot(k, pmf)), rel=1e-6)
    assert fam.second_moment(x, "a") == pytest.approx(float(np.dot(k * k, pmf)), rel=1e-4)


@given(q=st.floats(0.01, 0.95))
@settings(max_examples=40, deadline=None)
def test_geometric_closed_forms(q):
    fam = GeometricTail({"a": constant(q)})
    assert float(fam.mean(0, "a")) == pytest.approx(q / (1 - q))
    assert fam.second_moment(0, "a") == pytest.approx(q * (1 + q) / (1 - q) ** 2)
    assert float(fam.sf(5, 0, "a")) == pytest.approx(q**5)


@given(d=st.floats(2.05, 8.0))
@settings(max_examples=30, deadline=None)
def test_polytail_closed_forms(d):
    fam = PolyTail({"a": constant(d)})
    assert float(fam.sf(1, 0, "a")) == 1.0
    assert float(fam.sf(7, 0, "a")) == pytest.approx(7.0**-d)
    assert float(fam.pmf(0, 0, "a")) == 0.0
    assert float(fam.mean(0, "a")) == pytest.approx(special.zeta(d))
    assert fam.second_moment(0, "a") == pytest.approx(2 * special.zeta(d - 1) - special.zeta(d))


def test_polytail_infinite_moments():
    fam = PolyTail({"a": constant(1.5)})
    assert fam.second_moment(0, "a") == math.inf
    assert float(PolyTail({"a": constant(0.9)}).mean(0, "a")) == math.inf


@pytest.mark.parametrize("m", [2, 3, 10, 100])
def test_polytail_size_biased_sf_matches_direct_sum(m):
    d = 2.7
    fam = PolyTail({"a": constant(d)})
    k = np.arange(m, 2_000_000, dtype=float)
    direct = float(np.sum(k * (k**-d - (k + 1) ** -d))) / special.zeta(d)
    assert fam.size_biased_sf(m, 0, "a") == pytest.approx(direct, rel=1e-5)


def _sample_check(draws, mean, var):
    n = len(draws)
    assert abs(draws.mean() - mean) < 4 * math.sqrt(var / n)


@pytest.mark.parametrize("fam,x", _family_cases())
def test_aggregated_totals_match_summed_law(fam, x):
    rng = np.random.default_rng(3)
    c, reps = 7, 40_000
    tot = fam.sample_totals(np.full(reps, c), np.full(reps, x), "a", rng)
    m = float(fam.mean(x, "a"))
    v = fam.second_moment(x, "a") - m * m
    _sample_check(tot.astype(float), c * m, c * v)
    assert tot.var() == pytest.approx(c * v, rel=0.1)


@pytest.mark.parametrize("fam,x", _family_cases())
def test_size_biased_sampler_mean(fam, x):
    rng = np.random.default_rng(5)
    draws = np.array([fam.sample_size_biased(x, "a", rng) for _ in range(20_000)], dtype=float)
    m = float(fam.mean(x, "a"))
    m2 = fam.second_moment(x, "a")
    assert draws.min() >= 1
    # size-biased mean E F^2 / E F; third moment bounded crudely through the sample
    assert abs(draws.mean() - m2 / m) <= 4 * draws.std() / math.sqrt(len(draws)) + 1e-12


def test_bounded_size_biased_exact_law():
    fam = BoundedSupport({"a": {"pmfs": [[0.2, 0.3, 0.5]]}})
    rng = np.random.default_rng(0)
    draws = np.array([fam.sample_size_biased(0, "a", rng) for _ in range(30_000)])
    p2 = 2 * 0.5 / (0.3 + 1.0)
    assert abs((draws == 2).mean() - p2) < 4 * math.sqrt(p2 * (1 - p2) / len(draws))
    assert (draws > 0).all()


def test_bounded_rejects_bad_tables():
    with pytest.raises(SpecError):
        BoundedSupport({"a": {"pmfs": [[0.5, 0.6]]}})
    with pytest.raises(SpecError):
        BoundedSupport({"a": {}})


# --- environments ---------------------------------------------------------------


def test_env_sequence_is_reproducible():
    spec = fixtures.geometric_supercritical()
    a = spec.generate_envs(300, 11)
    b = spec.generate_envs(300, 11)
    c = spec.generate_envs(300, 12)
    assert np.array_equal(a.indices, b.indices)
    assert not np.array_equal(a.indices, c.indices)
    assert a[0] in spec.environments


def test_iid_env_frequencies():
    spec = fixtures.geometric_supercritical()
    envs = spec.generate_envs(40_000, 1)
    p = (envs.indices == 0).mean()
    assert abs(p - 0.5) < 4 * math.sqrt(0.25 / 40_000)


def test_markov_stationary_frequencies():
    spec = fixtures.geometric_markov()
    pi = spec.env_process.stationary()
    assert pi == pytest.approx([0.6, 0.4])
    envs = spec.generate_envs(100_000, 2)
    assert abs((envs.indices == 0).mean() - 0.6) < 0.02


def test_periodic_markov_rejected():
    assert not is_primitive(np.array([[0.0, 1.0], [1.0, 0.0]]))
    with pytest.raises(SpecError):
        MarkovEnv(((0.0, 1.0), (1.0, 0.0)))


def test_env_from_labels_rejects_unknown():
    with pytest.raises(SpecError):
        EnvSequence.from_labels(("a",), ["a", "b"])


def test_streams_are_independent_of_order():
    a = stream(5, REPLICATE_STREAM, 3).random(4)
    stream(5, REPLICATE_STREAM, 2).random(10)
    assert np.array_equal(a, stream(5, REPLICATE_STREAM, 3).random(4))
    assert not np.array_equal(a, stream(5, ENV_STREAM, 3).random(4))


# --- spec -----------------------------------------------------------------------


@pytest.mark.parametrize("name", sorted(fixtures.FIXTURES))
def test_spec_roundtrip(name, tmp_path):
    spec = fixtures.get_fixture(name)
    path = tmp_path / "s.json"
    dump_spec(spec, path)
    again = load_spec(path)
    assert again.to_dict() == spec.to_dict()
    f1, s1 = spec.mean_tables(20)
    f2, s2 = again.mean_tables(20)
    assert np.array_equal(f1, f2) and np.array_equal(s1, s2)


def test_spec_schema_errors_name_the_field():
    d = fixtures.geometric_supercritical().to_dict()
    bad = json.loads(json.dumps(d))
    bad["survival"]["good"]["p00"] = 1
    with pytest.raises(SpecError, match="survival.good"):
        LeslieSpec.from_dict(bad)
    bad = json.loads(json.dumps(d))
    bad["fertility"]["kind"] = "zipf"
    with pytest.raises(SpecError, match="fertility.kind"):
        LeslieSpec.from_dict(bad)
    bad = json.loads(json.dumps(d))
    del bad["env_process"]
    with pytest.raises(SpecError, match="missing"):
        LeslieSpec.from_dict(bad)


def test_l2toy_mean_tables():
    f, s = fixtures.l2toy().mean_tables(3)
    assert f[0, :2].tolist() == [1.5, 1.0]
    assert s[0, :2].tolist() == [0.5, 0.0]


def test_monotonicity_witness():
    assert monotonicity_violation(fixtures.geometric_supercritical()) is None
    w = monotonicity_violation(fixtures.increasing_fertility())
    assert w is not None and w[1] == "a"


@pytest.mark.parametrize("x", [0, 1, 4])
def test_offspring_pmf_normalized(x):
    spec = fixtures.binomial()
    total = sum(offspring_pmf(spec, x, "a", k, s) for k in range(3) for s in (0, 1))
    assert total == pytest.approx(1.0)


def test_sample_offspring_range():
    spec = fixtures.l2toy()
    rng = np.random.default_rng(0)
    for _ in range(200):
        k, s = sample_offspring(spec, 0, "a", rng)
        assert k in (1, 2) and s in (0, 1)


# --- populations ----------------------------------------------------------------


@given(st.dictionaries(st.integers(0, 50), st.integers(0, 1000), max_size=10))
def test_age_population_roundtrip(d):
    pop = AgePopulation(d)
    assert pop.total == sum(d.values())
    assert AgePopulation.from_array(pop.to_array()) == pop
    assert all(c > 0 for c in pop.counts.values())
    assert hash(pop) == hash(AgePopulation(dict(d)))


def test_age_population_rejects_negative():
    with pytest.raises(ValueError):
        AgePopulation({-1: 2})


def test_age_population_integrate():
    pop = AgePopulation({0: 2, 3: 1})
    assert pop.integrate(np.array([1.0, 0.0, 0.0, 5.0])) == 7.0
    assert pop.max_age == 3 and pop[3] == 1 and pop[2] == 0


# --- named cases ----------------------------------------------------------------


def test_l2toy_offspring_pmf_cell():
    assert offspring_pmf(fixtures.l2toy(), 0, "a", 2, 1) == pytest.approx(0.25)


@pytest.mark.parametrize("name", ["l2toy", "binomial", "geometric", "poisson"])
def test_offspring_pmf_total_mass(name):
    spec = fixtures.get_fixture(name)
    e = spec.environments[0]
    total = sum(offspring_pmf(spec, 0, e, k, s) for k in range(400) for s in (0, 1))
    assert total == pytest.approx(1.0, abs=1e-12)


def test_geometric_pmf_from_telescoped_tail():
    fam = GeometricTail({"a": constant(0.5)})
    assert float(fam.pmf(3, 0, "a")) == pytest.approx(0.0625)
    assert float(fam.pmf(3, 0, "a")) == pytest.approx(float(fam.sf(3, 0, "a") - fam.sf(4, 0, "a")))


def test_degenerate_offspring_sample():
    spec = fixtures.deterministic()
    rng = np.random.default_rng(1)
    assert {sample_offspring(spec, 3, "a", rng) for _ in range(50)} == {(1, 1)}


def test_sample_offspring_matches_pmf():
    spec = fixtures.binomial()
    rng = np.random.default_rng(9)
    n = 100_000
    draws = [sample_offspring(spec, 1, "a", rng) for _ in range(n)]
    counts = {}
    for d in draws:
        counts[d] = counts.get(d, 0) + 1
    for k in range(3):
        for s in (0, 1):
            p = offspring_pmf(spec, 1, "a", k, s)
            assert abs(counts.get((k, s), 0) / n - p) <= 4 * math.sqrt(p * (1 - p) / n) + 1e-12


def test_sample_offspring_reproducible():
    spec = fixtures.geometric_supercritical()
    a = [sample_offspring(spec, 2, "good", np.random.default_rng(4)) for _ in range(3)]
    r1, r2 = np.random.default_rng(4), np.random.default_rng(4)
    assert [sample_offspring(spec, 2, "good", r1) for _ in range(20)] == \
        [sample_offspring(spec, 2, "good", r2) for _ in range(20)]
    assert len(set(a)) == 1


def test_constant_env_sequence():
    spec = fixtures.l2toy()
    assert spec.generate_envs(5, 0).sequence == ["a"] * 5


def test_markov_two_thirds_stationary():
    spec = LeslieSpec.from_dict({
        **fixtures.geometric_markov().to_dict(),
        "env_process": {"kind": "markov", "transition": [[0.9, 0.1], [0.2, 0.8]]},
    })
    pi = spec.env_process.stationary()
    assert pi == pytest.approx([2 / 3, 1 / 3])
    envs = spec.generate_envs(100_000, 3)
    assert abs((envs.indices == 0).mean() - 2 / 3) < 0.01
