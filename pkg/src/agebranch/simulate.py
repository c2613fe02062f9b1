"""Forward Monte Carlo of the Leslie process under one realized environment.

Individuals sharing an age draw their newborn totals in one aggregated call
whose law equals the sum of independent per-individual draws, so simulation
cost scales with the number of occupied ages rather than with population size.
"""

from __future__ import annotations

import itertools
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from agebranch.model import AgePopulation, BoundedSupport, EnvSequence, LeslieSpec, SpecError
from agebranch.rng import REPLICATE_STREAM, stream
from agebranch.semigroup import HarmonicProfiles, harmonic_profiles, quenched_mean

DEFAULT_CAP = 10_000_000
# extra environments generated past the last simulated generation for h_n
HORIZON_PAD = 1000
Z95 = 1.959963984540054


class PopulationCapExceeded(RuntimeError):
    pass


class PreconditionError(RuntimeError):
    """An experiment was asked to run on a spec that fails its hypotheses."""


# ---------------------------------------------------------------------------
# One generation
# ---------------------------------------------------------------------------


def _step_dense(spec: LeslieSpec, z: np.ndarray, e: str, rng) -> np.ndarray:
    ages = np.nonzero(z)[0]
    out = np.zeros(len(z) + 1, dtype=np.int64)
    if len(ages) == 0:
        return out
    counts = z[ages]
    out[0] = int(spec.fertility.sample_totals(counts, ages, e, rng).sum())
    out[ages + 1] = rng.binomial(counts, spec.survival_prob(ages, e))
    return out


def step(spec: LeslieSpec, pop: AgePopulation, e: str, rng, cap: int | None = None) -> AgePopulation:
    """One generation: every age-``x`` individual leaves ``F`` newborns and survives w.p. ``s``."""
    if not pop:
        return AgePopulation()
    nxt = _step_dense(spec, pop.to_array(), e, rng)
    if cap is not None and nxt.sum() > cap:
        raise PopulationCapExceeded(f"population {int(nxt.sum())} exceeds cap {cap}")
    return AgePopulation.from_array(nxt)


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------


@dataclass
class Trajectory:
    """One replicate.  Arrays are indexed by generation ``0..n_reached``."""

    envs: EnvSequence
    log_W: np.ndarray
    totals: np.ndarray
    age0: np.ndarray
    zf: np.ndarray | None
    extinction_time: int | None
    capped: bool
    horizon_hit: bool
    populations: list | None = None

    @property
    def W_path(self) -> np.ndarray:
        return np.exp(self.log_W)

    @property
    def n_reached(self) -> int:
        return len(self.log_W) - 1

    @property
    def W_final(self) -> float:
        return float(math.exp(self.log_W[-1]))

    @property
    def max_age0(self) -> int:
        return int(self.age0.max())


def prepare_environment(spec: LeslieSpec, z0: AgePopulation, n_max: int, seed: int,
                        envs: EnvSequence | None = None, tol: float = 1e-10):
    """Realized environment and harmonic profiles shared by every replicate."""
    if envs is None:
        envs = spec.generate_envs(n_max + HORIZON_PAD, seed)
    prof = harmonic_profiles(spec, envs, n_max, tol, max_age=max(z0.max_age, 0))
    return envs, prof


def run(spec: LeslieSpec, z0: AgePopulation, n_max: int, seed: int, cap: int = DEFAULT_CAP,
        envs: EnvSequence | None = None, profiles: HarmonicProfiles | None = None,
        replicate: int = 0, record: bool = True, test_fn=None) -> Trajectory:
    """Simulate ``Z_0..Z_{n_max}`` and the martingale ``W_n`` in log scale.

    The environment comes from the ``seed`` environment stream and the offspring
    draws from the stream of ``replicate``, so replicates never share draws.
    A generation whose total would exceed ``cap`` is discarded and the
    trajectory stops there with ``capped`` set.
    """
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    if not z0:
        raise ValueError("initial population must be nonempty")
    if profiles is None or envs is None:
        envs, profiles = prepare_environment(spec, z0, n_max, seed, envs)
    rng = stream(seed, REPLICATE_STREAM, replicate)
    log_lam = profiles.log_lambda_cumsum()
    fvals = None if test_fn is None else np.asarray(test_fn, dtype=float)

    z = z0.to_array()
    log_z0h = math.log(float(np.dot(z, profiles[0][: len(z)])))
    log_W, totals, age0, zf = [], [], [], []
    pops = [] if record else None
    ext, capped = None, False

    def observe(n, z):
        tot = int(z.sum())
        totals.append(tot)
        age0.append(int(z[0]) if len(z) else 0)
        if fvals is not None:
            zf.append(float(np.dot(z, fvals[: len(z)])) if tot else 0.0)
        if tot == 0:
            log_W.append(-math.inf)
        else:
            zh = float(np.dot(z, profiles[n][: len(z)]))
            log_W.append(math.log(zh) - log_lam[n] - log_z0h)
        if record:
            pops.append(AgePopulation.from_array(z))

    observe(0, z)
    for n in range(n_max):
        if z.sum() == 0:
            z = np.zeros(len(z) + 1, dtype=np.int64)
        else:
            nxt = _step_dense(spec, z, envs[n], rng)
            if nxt.sum() > cap:
                capped = True
                break
            z = nxt
        observe(n + 1, z)
        if ext is None and totals[-1] == 0:
            ext = n + 1
    return Trajectory(envs, np.array(log_W), np.array(totals, dtype=np.int64), np.array(age0, dtype=np.int64),
                      np.array(zf) if fvals is not None else None, ext, capped, False, pops)


# ---------------------------------------------------------------------------
# Ensembles
# ---------------------------------------------------------------------------


@dataclass
class Ensemble:
    """Per-replicate arrays padded to ``n_max + 1`` generations.

    After a cap, generations are filled with the last observed values.
    """

    envs: EnvSequence
    profiles: HarmonicProfiles
    z0: AgePopulation
    n_max: int
    seed: int
    log_W: np.ndarray
    totals: np.ndarray
    age0: np.ndarray
    zf: np.ndarray | None
    extinction_time: np.ndarray  # -1 when alive at n_max
    capped: np.ndarray
    cap_time: np.ndarray  # -1 when never capped

    @property
    def replicates(self) -> int:
        return len(self.extinction_time)

    @property
    def W_final(self) -> np.ndarray:
        return np.exp(self.log_W[:, -1])

    def alive(self, n: int) -> np.ndarray:
        return self.totals[:, n] > 0


def _pad(arr, n_max):
    out = np.empty(n_max + 1, dtype=arr.dtype)
    out[: len(arr)] = arr
    out[len(arr):] = arr[-1]
    return out


def run_ensemble(spec: LeslieSpec, z0: AgePopulation, n_max: int, replicates: int, seed: int,
                 cap: int = DEFAULT_CAP, threads: int = 1, test_fn=None,
                 envs: EnvSequence | None = None) -> Ensemble:
    """Independent replicates on one shared realized environment (quenched)."""
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    envs, prof = prepare_environment(spec, z0, n_max, seed, envs)

    def one(r):
        return run(spec, z0, n_max, seed, cap, envs, prof, replicate=r, record=False, test_fn=test_fn)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            trajs = list(pool.map(one, range(replicates)))
    else:
        trajs = [one(r) for r in range(replicates)]

    log_W = np.vstack([_pad(t.log_W, n_max) for t in trajs])
    totals = np.vstack([_pad(t.totals, n_max) for t in trajs])
    age0 = np.vstack([_pad(t.age0, n_max) for t in trajs])
    zf = np.vstack([_pad(t.zf, n_max) for t in trajs]) if test_fn is not None else None
    ext = np.array([-1 if t.extinction_time is None else t.extinction_time for t in trajs])
    capped = np.array([t.capped for t in trajs])
    cap_time = np.array([t.n_reached if t.capped else -1 for t in trajs])
    return Ensemble(envs, prof, z0, n_max, seed, log_W, totals, age0, zf, ext, capped, cap_time)


def mean_ci(x: np.ndarray) -> tuple[float, float]:
    """Sample mean and normal 95% half-width."""
    x = np.asarray(x, dtype=float)
    if len(x) < 2:
        return (float(x.mean()) if len(x) else math.nan), math.inf
    return float(x.mean()), Z95 * float(x.std(ddof=1)) / math.sqrt(len(x))


def proportion_ci(k: int, n: int) -> tuple[float, float]:
    """Proportion and Wald 95% half-width."""
    p = k / n
    return p, Z95 * math.sqrt(p * (1.0 - p) / n)


@dataclass
class EnsembleStats:
    replicates: int
    n_max: int
    mean_W: float
    mean_W_ci: float
    survival_fraction: float
    extinction_fraction: float
    extinction_ci: float
    capped_fraction: float
    w_floor: float
    frac_W_above_floor: dict
    growth_rates: np.ndarray = field(repr=False)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "replicates": self.replicates,
            "n_max": self.n_max,
            "mean_W": self.mean_W,
            "mean_W_ci_halfwidth": self.mean_W_ci,
            "survival_fraction": self.survival_fraction,
            "extinction_fraction": self.extinction_fraction,
            "extinction_ci_halfwidth": self.extinction_ci,
            "capped_fraction": self.capped_fraction,
            "w_floor": self.w_floor,
            "frac_W_above_floor": {f"{k:g}": v for k, v in self.frac_W_above_floor.items()},
            "growth_rate_median": float(np.median(self.growth_rates)) if len(self.growth_rates) else None,
            **{k: v for k, v in self.extra.items() if not k.startswith("_")},
        }


def summarize(ens: Ensemble, w_floor: float = 1e-6) -> EnsembleStats:
    R, n = ens.replicates, ens.n_max
    W = ens.W_final
    mW, ciW = mean_ci(W)
    extinct = int((ens.extinction_time >= 0).sum())
    p_ext, ci_ext = proportion_ci(extinct, R)
    alive = ens.totals[:, n] > 0
    growth = ens.totals[alive & ~ens.capped, n].astype(float) ** (1.0 / n)
    floors = {f: float((W > f).mean()) for f in (0.1 * w_floor, w_floor, 10.0 * w_floor)}
    return EnsembleStats(R, n, mW, ciW, 1.0 - p_ext, p_ext, ci_ext, float(ens.capped.mean()),
                         w_floor, floors, growth)


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------


def kesten_stigum_experiment(spec: LeslieSpec, replicates: int, n_max: int, seed: int,
                             z0: AgePopulation | None = None, cap: int = DEFAULT_CAP, threads: int = 1,
                             eps: float = 0.5, ensemble: Ensemble | None = None) -> EnsembleStats:
    """Mean of ``W_n`` (target 1), survival and the size ratio on survivors."""
    from agebranch.verify import check_LlogL, check_supercritical

    ll = check_LlogL(spec, eps)
    if not ll["pass"]:
        raise PreconditionError(f"LlogL criterion fails: {ll}")
    sup = check_supercritical(spec, seed=seed)
    if not sup.passed:
        raise PreconditionError(f"A4 (Supercriticality) fails: {sup.to_dict()['verdicts'][0]['witness']}")
    z0 = z0 or AgePopulation.single(0)
    ens = ensemble or run_ensemble(spec, z0, n_max, replicates, seed, cap, threads)
    stats = summarize(ens)
    log_mass = quenched_mean(spec, ens.envs, z0, n_max).log_mass
    alive = (ens.totals[:, n_max] > 0) & ~ens.capped
    ratio = ens.totals[alive, n_max] / np.exp(ens.log_W[alive, n_max] + log_mass)
    stats.extra.update({
        "experiment": "kesten-stigum",
        "lambda_hat": float(math.exp(sup.witness("log_lambda"))),
        "ratio_median": float(np.median(ratio)) if len(ratio) else None,
        "ratio_count": int(len(ratio)),
        "ci_covers_one": bool(abs(stats.mean_W - 1.0) <= stats.mean_W_ci),
    })
    stats.extra["_ratio"] = ratio
    stats.extra["_ensemble"] = ens
    return stats


@dataclass
class TypeFrequencyResult:
    n: np.ndarray
    median_error: np.ndarray
    survivors: np.ndarray
    errors: list  # per generation, array over surviving replicates

    def to_dict(self) -> dict:
        return {"experiment": "type-freq", "n": self.n.tolist(),
                "median_error": [None if math.isnan(v) else v for v in self.median_error.tolist()],
                "survivors": self.survivors.tolist()}


def type_frequency_experiment(spec: LeslieSpec, f, replicates: int, n_max: int, seed: int,
                              z0: AgePopulation | None = None, cap: int = DEFAULT_CAP,
                              threads: int = 1) -> TypeFrequencyResult:
    """``|Z_n(f)/Z_n(1) - pi_n(f)|`` over surviving replicates for every generation.

    ``f`` is an array on ages (shorter arrays are padded with zeros) or a callable.
    """
    z0 = z0 or AgePopulation.single(0)
    size = z0.max_age + n_max + 2
    fa = np.asarray(f(np.arange(size)) if callable(f) else f, dtype=float)
    fa = np.concatenate([fa, np.zeros(max(size - len(fa), 0))])[:size]
    ens = run_ensemble(spec, z0, n_max, replicates, seed, cap, threads, test_fn=fa)
    qm = quenched_mean(spec, ens.envs, z0, n_max, path=True)
    errs, med, surv = [], [], []
    for n in range(n_max + 1):
        alive = (ens.totals[:, n] > 0) & ~((ens.cap_time >= 0) & (ens.cap_time < n))
        freq = ens.zf[alive, n] / ens.totals[alive, n]
        e = np.abs(freq - qm[n].integrate(fa))
        errs.append(e)
        surv.append(int(alive.sum()))
        med.append(float(np.median(e)) if len(e) else math.nan)
    if surv[-1] == 0:
        warnings.warn("all replicates extinct by n_max; type-frequency errors are empty")
    return TypeFrequencyResult(np.arange(n_max + 1), np.array(med), np.array(surv), errs)


def extinction_explosion_experiment(spec: LeslieSpec, replicates: int, n_max: int, seed: int,
                                    w_floor: float = 1e-6, z0: AgePopulation | None = None,
                                    cap: int = DEFAULT_CAP, threads: int = 1,
                                    early: int | None = None) -> dict:
    """Extinction frequency against the frequency of a vanishing martingale."""
    from agebranch.verify import check_ext_expl_conditions

    cond = check_ext_expl_conditions(spec)
    if cond.verdict("iid_environment") != "pass":
        raise PreconditionError("the extinction/non-explosion identity needs an IID environment")
    if not cond.passed:
        raise PreconditionError(f"extinction/explosion conditions fail: {cond.to_dict()}")
    z0 = z0 or AgePopulation.single(0)
    early = early or max(n_max // 4, 1)
    ens = run_ensemble(spec, z0, n_max, replicates, seed, cap, threads)
    R = ens.replicates
    W = ens.W_final
    p_ext, ci_ext = proportion_ci(int((ens.extinction_time >= 0).sum()), R)
    p_w, ci_w = proportion_ci(int((W < w_floor).sum()), R)
    sens = {f"{f:g}": float((W < f).mean()) for f in (0.1 * w_floor, w_floor, 10 * w_floor)}
    a = cond.witness("inf_P_F0")
    s = cond.witness("sup_s")
    lower = (a * (1.0 - s)) ** z0.total
    alive = ens.totals[:, n_max] > 0
    max_late = ens.age0[alive].max(axis=1)
    max_early = ens.age0[alive, : early + 1].max(axis=1)
    return {
        "experiment": "ext-expl",
        "replicates": R,
        "n_max": n_max,
        "w_floor": w_floor,
        "p_ext_hat": p_ext,
        "p_ext_ci_halfwidth": ci_ext,
        "p_Wzero_hat": p_w,
        "p_Wzero_ci_halfwidth": ci_w,
        "p_W_below_floor_sensitivity": sens,
        "gap": abs(p_ext - p_w),
        "gap_allowance": 2.0 * (ci_ext + ci_w),
        "one_step_lower_bound": lower,
        "a": a,
        "sup_s": s,
        "capped_fraction": float(ens.capped.mean()),
        "early_n": early,
        "survivors": int(alive.sum()),
        "frac_maxZ0_increases": float((max_late > max_early).mean()) if alive.any() else None,
        "_ensemble": ens,
    }


# ---------------------------------------------------------------------------
# Exact martingale check
# ---------------------------------------------------------------------------

MAX_OUTCOMES = 1_000_000


def _individual_outcomes(spec: LeslieSpec, x: int, e: str):
    """Nonzero-probability ``(k, sigma, prob)`` for one individual of age ``x``."""
    out = []
    fert = spec.fertility
    kmax = fert.support_max(x, e)
    s = float(spec.survival_prob(x, e))
    for k in range(kmax + 1):
        pk = float(fert.pmf(k, x, e))
        for sigma, ps in ((0, 1.0 - s), (1, s)):
            if pk * ps > 0:
                out.append((k, sigma, pk * ps))
    return out


def _children_enumeration(spec, pop: AgePopulation, e: str):
    """Per-individual outcome lists for a population, in a fixed order."""
    lists = []
    for x, c in pop.counts.items():
        outs = _individual_outcomes(spec, x, e)
        lists.extend([(x, outs)] * c)
    return lists


def _outcome_count(lists) -> int:
    return math.prod(len(o) for _, o in lists)


def martingale_enumeration_check(spec: LeslieSpec, envs: EnvSequence, z0: AgePopulation, n: int,
                                 profiles: HarmonicProfiles | None = None) -> dict:
    """Exact ``max |E[W_{m+1} | F_m] - W_m|`` over all histories with ``m < n``.

    Every joint offspring outcome of every individual is enumerated.
    """
    if not isinstance(spec.fertility, BoundedSupport):
        raise SpecError("exact enumeration needs bounded-support fertility")
    if n < 1:
        raise ValueError("n must be >= 1")
    if profiles is None:
        profiles = harmonic_profiles(spec, envs, n, max_age=z0.max_age)
    log_lam = profiles.log_lambda_cumsum()
    z0h = z0.integrate(profiles[0])

    def W(pop, m):
        return pop.integrate(profiles[m]) / (math.exp(log_lam[m]) * z0h) if pop else 0.0

    histories = [(z0, 1.0)]
    residual, outcomes = 0.0, 0
    for m in range(n):
        e = envs[m]
        nxt = {}
        h_next = profiles[m + 1]
        denom = math.exp(log_lam[m + 1]) * z0h
        for pop, prob in histories:
            lists = _children_enumeration(spec, pop, e)
            count = _outcome_count(lists)
            outcomes += count
            if outcomes > MAX_OUTCOMES:
                raise SpecError(f"enumeration needs more than {MAX_OUTCOMES} outcomes (at least {outcomes})")
            expect = 0.0
            for combo in itertools.product(*[o for _, o in lists]):
                p = 1.0
                child = {}
                for (x, _), (k, sigma, pr) in zip(lists, combo):
                    p *= pr
                    if k:
                        child[0] = child.get(0, 0) + k
                    if sigma:
                        child[x + 1] = child.get(x + 1, 0) + 1
                cpop = AgePopulation(child)
                expect += p * (cpop.integrate(h_next) / denom if cpop else 0.0)
                if m + 1 < n:
                    nxt[cpop] = nxt.get(cpop, 0.0) + prob * p
            residual = max(residual, abs(expect - W(pop, m)))
        histories = list(nxt.items())
    return {"residual": residual, "outcomes": outcomes, "n": n}


# ---------------------------------------------------------------------------
# Tabular output
# ---------------------------------------------------------------------------

REPLICATE_HEADER = ["replicate", "extinction_time", "W_final", "final_total", "max_Z0", "capped"]
GENERATION_HEADER = ["n", "env", "survivors", "mean_W", "mean_total", "log_mean_norm"]


def replicate_rows(ens: Ensemble):
    for r in range(ens.replicates):
        yield [r, int(ens.extinction_time[r]), float(ens.W_final[r]), int(ens.totals[r, -1]),
               int(ens.age0[r].max()), int(ens.capped[r])]


def generation_rows(spec: LeslieSpec, ens: Ensemble):
    qm = quenched_mean(spec, ens.envs, ens.z0, ens.n_max, path=True)
    for n in range(ens.n_max + 1):
        yield [n, ens.envs[n], int((ens.totals[:, n] > 0).sum()), float(np.exp(ens.log_W[:, n]).mean()),
               float(ens.totals[:, n].mean()), qm[n].log_mass]
