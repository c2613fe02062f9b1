"""Size-biased trees with a marked spine.

Along the spine, an age-``x`` individual at time ``t`` reproduces with weight
``(k h_{t+1}(0) + sigma h_{t+1}(x+1)) / (lambda_t h_t(x))`` relative to the
ordinary law, and passes the mark to one of its children with probability
proportional to ``h_{t+1}`` of the child's age.  Everyone else reproduces
normally.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from agebranch.model import AgePopulation, BoundedSupport, EnvSequence, LeslieSpec, SpecError, offspring_pmf
from agebranch.rng import SPINE_STREAM, stream
from agebranch.semigroup import HarmonicProfiles, harmonic_profiles
from agebranch.simulate import DEFAULT_CAP, HORIZON_PAD, MAX_OUTCOMES, _individual_outcomes, _step_dense


class ConsistencyError(RuntimeError):
    """The biased law failed to normalize against the harmonic profiles."""


def _normalizer(spec, envs, profiles, x, t):
    e = envs[t]
    f = float(spec.fertility.mean(x, e))
    s = float(spec.survival_prob(x, e))
    h1 = profiles[t + 1]
    direct = f * h1[0] + s * h1[x + 1]
    target = profiles.lambdas[t] * profiles[t][x]
    if abs(direct - target) > 1e-8 * max(target, 1e-300):
        raise ConsistencyError(f"biased law at age {x}, time {t}: f h(0) + s h(x+1) = {direct} "
                               f"but lambda h(x) = {target}")
    return f, s, h1, target


def biased_offspring_pmf(spec: LeslieSpec, envs: EnvSequence, profiles: HarmonicProfiles,
                         x: int, k: int, sigma: int, t: int = 0) -> float:
    _, _, h1, norm = _normalizer(spec, envs, profiles, x, t)
    w = k * h1[0] + sigma * h1[x + 1]
    return w * offspring_pmf(spec, x, envs[t], k, sigma) / norm


def mixture_weights(spec, envs, profiles, x, t=0) -> tuple[float, float]:
    """Probabilities of marking a newborn and of marking the survivor."""
    f, s, h1, norm = _normalizer(spec, envs, profiles, x, t)
    return f * h1[0] / norm, s * h1[x + 1] / norm


def sample_biased_offspring(spec: LeslieSpec, envs: EnvSequence, profiles: HarmonicProfiles,
                            x: int, rng, t: int = 0) -> tuple[int, int, int]:
    """``(k, sigma, age of the marked child)`` from the biased law."""
    p_new, _ = mixture_weights(spec, envs, profiles, x, t)
    e = envs[t]
    s = float(spec.survival_prob(x, e))
    if rng.random() < p_new:
        k = spec.fertility.sample_size_biased(x, e, rng)
        sigma = int(rng.random() < s)
        return k, sigma, 0
    k = spec.fertility.sample(x, e, rng)
    return k, 1, x + 1


# ---------------------------------------------------------------------------
# Spine trajectories
# ---------------------------------------------------------------------------


@dataclass
class SpineTrajectory:
    """Arrays over generations; per-step records have length ``n``.

    ``N_h[t]`` is the spine's offspring measure at time ``t`` integrated against
    ``h_{t+1}``.  After the off-spine population exceeds the cap it is no longer
    simulated; from then on its share of ``W_n`` is frozen at its conditional
    expectation, and later spine siblings enter ``W_n`` the same way.
    """

    spine_age: np.ndarray
    k: np.ndarray
    sigma: np.ndarray
    child: np.ndarray
    N_h: np.ndarray
    totals: np.ndarray
    W: np.ndarray
    capped: bool
    cap_time: int | None

    @property
    def n(self) -> int:
        return len(self.k)

    def rows(self):
        for t in range(self.n):
            yield [t, int(self.spine_age[t]), int(self.k[t]), int(self.sigma[t]), int(self.child[t]),
                   float(self.N_h[t])]


SPINE_HEADER = ["n", "spine_age", "k", "sigma", "chosen_child_age", "N_h"]


def prepare_spine(spec: LeslieSpec, x0: int, n: int, seed: int, envs: EnvSequence | None = None,
                  store_all: bool = True):
    if envs is None:
        envs = spec.generate_envs(n + 1 + HORIZON_PAD, seed)
    prof = harmonic_profiles(spec, envs, n + 1, max_age=x0)
    return envs, prof


def spine_run(spec: LeslieSpec, x0: int, n: int, seed: int, cap: int = DEFAULT_CAP,
              envs: EnvSequence | None = None, profiles: HarmonicProfiles | None = None,
              replicate: int = 0, track_off_spine: bool = True) -> SpineTrajectory:
    if n < 1:
        raise ValueError("n must be >= 1")
    if profiles is None or envs is None:
        envs, profiles = prepare_spine(spec, x0, n, seed, envs)
    rng = stream(seed, SPINE_STREAM, replicate)
    log_lam = profiles.log_lambda_cumsum()
    h0 = profiles[0][x0]

    ages = np.empty(n + 1, dtype=np.int64)
    ks = np.empty(n, dtype=np.int64)
    sig = np.empty(n, dtype=np.int64)
    child = np.empty(n, dtype=np.int64)
    N_h = np.empty(n)
    totals = np.zeros(n + 1, dtype=np.int64)
    W = np.empty(n + 1)

    x = x0
    off = np.zeros(x0 + 1, dtype=np.int64)
    off_w = 0.0  # off-spine share of W_t times h_0(x0)
    capped, cap_time = not track_off_spine, (0 if not track_off_spine else None)
    ages[0], totals[0], W[0] = x, 1, 1.0
    for t in range(n):
        k, sigma, c = sample_biased_offspring(spec, envs, profiles, x, rng, t)
        h1 = profiles[t + 1]
        ks[t], sig[t], child[t] = k, sigma, c
        N_h[t] = k * h1[0] + sigma * h1[x + 1]
        sib0 = k - (c == 0)
        sib1 = sigma - (c == x + 1)
        scale = math.exp(-log_lam[t + 1])
        if not capped:
            nxt = _step_dense(spec, off, envs[t], rng)
            if len(nxt) < x + 2:
                nxt = np.concatenate([nxt, np.zeros(x + 2 - len(nxt), dtype=np.int64)])
            nxt[0] += sib0
            nxt[x + 1] += sib1
            if nxt.sum() + 1 > cap:
                capped, cap_time = True, t + 1
            else:
                off = nxt
                off_w = float(np.dot(off, h1[: len(off)])) * scale
                totals[t + 1] = int(off.sum()) + 1
        if capped:
            off_w += (sib0 * h1[0] + sib1 * h1[x + 1]) * scale
        x = c
        ages[t + 1] = x
        W[t + 1] = (off_w + h1[x] * scale) / h0
    return SpineTrajectory(ages, ks, sig, child, N_h, totals, W, capped, cap_time)


def growth_statistic(traj: SpineTrajectory, n_min: int = 1, n_max: int | None = None) -> float:
    """``max_{n_min <= n <= n_max} (1/n) log+ N_{s_n}(h_{n+1})``."""
    n_max = traj.n - 1 if n_max is None else n_max
    ns = np.arange(max(n_min, 1), n_max + 1)
    return float(np.max(np.maximum(np.log(traj.N_h[ns]), 0.0) / ns))


def spine_ensemble(spec: LeslieSpec, x0: int, n: int, runs: int, seed: int, cap: int = DEFAULT_CAP,
                   track_off_spine: bool = True, threads: int = 1) -> list:
    envs, prof = prepare_spine(spec, x0, n, seed)

    def one(r):
        return spine_run(spec, x0, n, seed, cap, envs, prof, replicate=r, track_off_spine=track_off_spine)

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, range(runs)))
    return [one(r) for r in range(runs)]


# ---------------------------------------------------------------------------
# Exact change of measure on enumerable fixtures
# ---------------------------------------------------------------------------


@dataclass
class _Node:
    age: int
    parent: int  # index in previous generation, -1 for the root
    outcome: tuple | None = None  # (k, sigma, p)


def _enumerate_trees(spec, envs, x0, n):
    """All labelled trees of depth ``n`` as (generations, probability)."""
    trees = [([[_Node(x0, -1)]], 1.0)]
    count = 0
    for t in range(n):
        e = envs[t]
        new = []
        for gens, p in trees:
            last = gens[-1]
            lists = [_individual_outcomes(spec, nd.age, e) for nd in last]
            count += math.prod(len(o) for o in lists) if lists else 1
            if count > MAX_OUTCOMES:
                raise SpecError(f"tree enumeration exceeds {MAX_OUTCOMES} outcomes (at least {count})")
            for combo in itertools.product(*lists):
                prob = p
                done = [_Node(nd.age, nd.parent, o) for nd, o in zip(last, combo)]
                nxt = []
                for i, (nd, (k, sigma, pr)) in enumerate(zip(last, combo)):
                    prob *= pr
                    # children ordered: survivor first, then newborns
                    if sigma:
                        nxt.append(_Node(nd.age + 1, i))
                    nxt.extend(_Node(0, i) for _ in range(k))
                new.append((gens[:-1] + [done, nxt], prob))
        trees = new
    return trees, count


def change_of_measure_check(spec: LeslieSpec, envs: EnvSequence, x0: int, n: int,
                            profiles: HarmonicProfiles | None = None) -> dict:
    """Compare ``P*(tree)`` with ``W_n(tree) P(tree)`` on every depth-``n`` tree.

    ``P*`` is built from the biased law and the spine's child choice, summed over
    all spine positions; it never uses ``W_n`` directly.
    """
    if not isinstance(spec.fertility, BoundedSupport):
        raise SpecError("exact enumeration needs bounded-support fertility")
    if n < 1:
        raise ValueError("n must be >= 1")
    if profiles is None:
        profiles = harmonic_profiles(spec, envs, n, max_age=x0)
    log_lam = profiles.log_lambda_cumsum()
    trees, outcomes = _enumerate_trees(spec, envs, x0, n)
    max_gap, mass_star, mass_p, unbias_lhs, unbias_rhs = 0.0, 0.0, 0.0, 0.0, 0.0
    for gens, p in trees:
        leaves = gens[-1]
        W = sum(profiles[n][nd.age] for nd in leaves) / (math.exp(log_lam[n]) * profiles[0][x0])
        pstar = 0.0
        for leaf_index in range(len(leaves)):
            # walk the spine from the leaf to the root
            on_path = {n: leaf_index}
            for t in range(n, 0, -1):
                on_path[t - 1] = gens[t][on_path[t]].parent
            prob = 1.0
            for t in range(n):
                h_next = profiles[t + 1]
                for i, nd in enumerate(gens[t]):
                    k, sigma, pr = nd.outcome
                    if i == on_path[t]:
                        ch = gens[t + 1][on_path[t + 1]]
                        weight = k * h_next[0] + sigma * h_next[nd.age + 1]
                        prob *= biased_offspring_pmf(spec, envs, profiles, nd.age, k, sigma, t)
                        prob *= h_next[ch.age] / weight
                    else:
                        prob *= pr
            pstar += prob
        max_gap = max(max_gap, abs(pstar - W * p))
        mass_star += pstar
        mass_p += p
        # unbiasing: E*[phi / W_n] = E[phi; W_n > 0] for phi = min(Z_n(1), 3)
        phi = min(len(leaves), 3)
        if W > 0:
            unbias_lhs += pstar * phi / W
            unbias_rhs += p * phi
    return {"n": n, "trees": len(trees), "outcomes": outcomes, "max_gap": float(max_gap),
            "mass_Pstar": float(mass_star), "mass_P": float(mass_p),
            "unbiasing_gap": float(abs(unbias_lhs - unbias_rhs))}
