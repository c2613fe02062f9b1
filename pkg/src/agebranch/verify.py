"""Decidable checks of the model hypotheses and of two auxiliary series inequalities.

A series counts as finite when its partial sum plus a certified upper bound
on the remainder stays below ``FINITE_GUARD``.  Suprema over the unbounded age
axis are taken by scanning up to the age where every profile has reached its
floor; past that age all quantities are constant in age.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from agebranch.model import (
    BoundedSupport,
    GeometricTail,
    LeslieSpec,
    PoissonFamily,
    PolyTail,
    monotonicity_violation,
)

FINITE_GUARD = 1e12
PASS, FAIL, NA = "pass", "fail", "not-applicable"


@dataclass
class Verdict:
    name: str
    status: str
    witness: dict = field(default_factory=dict)
    note: str = ""

    def to_dict(self) -> dict:
        d = {"name": self.name, "status": self.status, "witness": _jsonable(self.witness)}
        if self.note:
            d["note"] = self.note
        return d


@dataclass
class AssumptionReport:
    name: str
    verdicts: list
    tol: float = 0.0

    @property
    def passed(self) -> bool:
        return all(v.status != FAIL for v in self.verdicts)

    def verdict(self, name: str) -> str:
        for v in self.verdicts:
            if v.name == name:
                return v.status
        raise KeyError(name)

    def witness(self, key: str):
        for v in self.verdicts:
            if key in v.witness:
                return v.witness[key]
        raise KeyError(key)

    def to_dict(self) -> dict:
        return {"name": self.name, "pass": self.passed, "tol": self.tol,
                "verdicts": [v.to_dict() for v in self.verdicts]}


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def scan_ages(spec: LeslieSpec) -> np.ndarray:
    """Ages ``0..A`` with ``A`` past every profile's settle age."""
    return np.arange(spec.settle_age() + 2)


def _active_envs(spec: LeslieSpec):
    w = spec.env_marginal()
    return [(e, float(wi)) for e, wi in zip(spec.environments, w) if wi > 0]


# ---------------------------------------------------------------------------
# Assumption H
# ---------------------------------------------------------------------------


def check_H(spec: LeslieSpec, kmax: int = 200) -> AssumptionReport:
    ages = scan_ages(spec)
    f, s = spec.mean_tables(len(ages) - 1)
    out = []

    # i) positivity
    bad = None
    for i, e in enumerate(spec.environments):
        for name, arr in (("f", f[i]), ("s", s[i])):
            x = int(np.argmin(arr))
            if not arr[x] > 0:
                bad = bad or {"x": x, "e": e, "param": name, "value": float(arr[x])}
    out.append(Verdict("H.i", FAIL if bad else PASS, bad or {"min_f": float(f.min()), "min_s": float(s.min())}))

    # ii) stochastic monotonicity: declared parameters, then a numeric CDF grid
    w = monotonicity_violation(spec)
    if w is None:
        w = _cdf_grid_witness(spec, ages, kmax)
    if w is not None:
        x, e, detail = w
        out.append(Verdict("H.ii", FAIL, {"x": x, "e": e, "k": detail}))
    else:
        out.append(Verdict("H.ii", PASS, {"ages_scanned": int(len(ages)), "kmax": kmax}))

    # iii) E log f_0 < inf
    envs = _active_envs(spec)
    f0 = {e: float(f[spec.env_index(e), 0]) for e, _ in envs}
    if any(not math.isfinite(v) for v in f0.values()):
        out.append(Verdict("H.iii", FAIL, {"f0": f0}))
    else:
        with np.errstate(divide="ignore"):
            val = sum(wt * math.log(f0[e]) if f0[e] > 0 else -math.inf for e, wt in envs)
        out.append(Verdict("H.iii", PASS, {"E_log_f0": val}))

    # iv) E |log sup s/f| < inf
    ratios = {}
    for e, _ in envs:
        i = spec.env_index(e)
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(s[i] > 0, s[i] / f[i], 0.0)
        x = int(np.argmax(r))
        ratios[e] = (float(r[x]), x)
    vals = [abs(math.log(r)) if 0 < r < math.inf else math.inf for r, _ in ratios.values()]
    total = sum(wt * v for (e, wt), v in zip(envs, vals))
    out.append(Verdict("H.iv", PASS if math.isfinite(total) else FAIL,
                       {"E_abs_log_sup_ratio": total, "sup_ratio": {e: r for e, (r, _) in ratios.items()},
                        "argmax_age": {e: x for e, (_, x) in ratios.items()}}))
    return AssumptionReport("H", out)


def _cdf_grid_witness(spec, ages, kmax):
    fam = spec.fertility
    k = np.arange(kmax + 1)
    for e in spec.environments:
        prev = fam.cdf_grid(int(ages[0]), e, kmax)
        sp = spec.survival_prob(ages, e)
        for x in ages[1:]:
            cur = fam.cdf_grid(int(x), e, kmax)
            bad = np.nonzero(cur > prev + 1e-14)[0]
            if len(bad):
                return (int(x) - 1, e, int(k[bad[0]]))
            if sp[x] > sp[x - 1] + 1e-15:
                return (int(x) - 1, e, "survival")
            prev = cur
    return None


# ---------------------------------------------------------------------------
# Certified series
# ---------------------------------------------------------------------------


@dataclass
class SeriesBound:
    partial: float
    remainder: float
    terms: int

    @property
    def upper(self) -> float:
        return self.partial + self.remainder

    @property
    def finite(self) -> bool:
        return self.upper < FINITE_GUARD


def _ratio_series(term, ratio_bound, start: int = 0, rel: float = 1e-14, max_terms: int = 10**6) -> SeriesBound:
    """Sum ``term(k)`` for ``k >= start`` with a geometric remainder bound.

    ``ratio_bound(k)`` must bound ``term(j+1)/term(j)`` for every ``j >= k`` and
    be nonincreasing in ``k``.
    """
    total, K = 0.0, start
    block = 256
    while K < max_terms:
        ks = np.arange(K, K + block)
        total += float(np.sum(term(ks)))
        K += block
        r = ratio_bound(K)
        if r < 1.0:
            rem = float(term(np.array([K]))[0]) / (1.0 - r)
            if rem <= rel * max(total, 1e-300):
                return SeriesBound(total, rem, K - start)
        block *= 2
    r = ratio_bound(K)
    rem = float(term(np.array([K]))[0]) / (1.0 - r) if r < 1.0 else math.inf
    return SeriesBound(total, rem, K - start)


def _log_power_tail(a: float, delta: float, K: int) -> float:
    """``sum_{k > K} log(k+1)^a k^-delta`` upper bound, for ``K+1 >= exp(a/delta)``."""
    if delta <= 1.0:
        return math.inf
    # (k+1)^delta / k^delta <= (1 + 1/(K+1))^delta, then compare with the decreasing integrand
    factor = (1.0 + 1.0 / (K + 1)) ** delta
    x = (delta - 1.0) * math.log(K + 1.0)
    integral = special.gammaincc(a + 1.0, x) * special.gamma(a + 1.0) / (delta - 1.0) ** (a + 1.0)
    return factor * float(integral)


def _polytail_series(a: float, delta: float, weight_age: bool, K: int = 20000) -> SeriesBound:
    k = np.arange(1, K + 1, dtype=float)
    lg = np.log1p(k) ** a
    if weight_age:
        terms = (k + 1.0) * lg * (k**-delta - (k + 1.0) ** -delta)
        # (k+1)(k^-d - (k+1)^-d) <= d (1 + 1/k) k^-d
        mult = delta * (1.0 + 1.0 / (K + 1))
    else:
        terms = lg * k**-delta
        mult = 1.0
    K_eff = max(K, int(math.ceil(math.exp(a / max(delta, 1e-12)))))
    if K_eff > K:
        extra = np.arange(K + 1, K_eff + 1, dtype=float)
        lg2 = np.log1p(extra) ** a
        if weight_age:
            terms = np.concatenate([terms, (extra + 1.0) * lg2 * (extra**-delta - (extra + 1.0) ** -delta)])
        else:
            terms = np.concatenate([terms, lg2 * extra**-delta])
    return SeriesBound(float(terms.sum()), mult * _log_power_tail(a, delta, K_eff), K_eff)


def _divergence_witness(a: float, delta: float, weight_age: bool) -> dict:
    """Partial sums at growing cutoffs, showing unbounded growth."""
    k = np.arange(1, 10**6 + 1, dtype=float)
    lg = np.log1p(k) ** a
    if weight_age:
        terms = (k + 1.0) * lg * (k**-delta - (k + 1.0) ** -delta)
    else:
        terms = lg * k**-delta
    cs = np.cumsum(terms)
    return {f"S_{10**j}": float(cs[10**j - 1]) for j in range(2, 7)}


def llogl_series(spec: LeslieSpec, x: int, e: str, eps: float, tail: bool) -> SeriesBound:
    """``sum_k w(k) P[F = k]`` (age form) or ``sum_k log+(k+1)^(1+eps) P[F >= k]`` (tail form)."""
    fam = spec.fertility
    a = 1.0 + eps
    if isinstance(fam, BoundedSupport):
        t = fam.table(x, e)
        k = np.arange(len(t) + 1)
        lg = np.log1p(k) ** a
        val = float(np.dot(lg[:-1] * k[1:], t)) if not tail else float(np.dot(lg, fam.sf(k, x, e)))
        return SeriesBound(val, 0.0, len(t))
    if isinstance(fam, GeometricTail):
        q = float(fam.q(x, e))
        if q == 0.0:
            return SeriesBound(0.0, 0.0, 1)
        if tail:
            term = lambda k: np.log1p(k) ** a * q**k
            ratio = lambda K: q * (math.log(K + 2.0) / math.log(K + 1.0)) ** a
        else:
            term = lambda k: (k + 1.0) * np.log1p(k) ** a * q**k * (1.0 - q)
            ratio = lambda K: q * (K + 2.0) / (K + 1.0) * (math.log(K + 2.0) / math.log(K + 1.0)) ** a
        return _ratio_series(term, ratio, start=1)
    if isinstance(fam, PoissonFamily):
        m = float(fam.mean(x, e))
        if tail:
            term = lambda k: np.log1p(k) ** a * fam.sf(k, x, e)
            ratio = lambda K: m / (K + 1.0) * (math.log(K + 2.0) / math.log(K + 1.0)) ** a
        else:
            term = lambda k: (k + 1.0) * np.log1p(k) ** a * fam.pmf(k, x, e)
            ratio = lambda K: m / (K + 1.0) * (K + 2.0) / (K + 1.0) * (math.log(K + 2.0) / math.log(K + 1.0)) ** a
        return _ratio_series(term, ratio, start=1)
    if isinstance(fam, PolyTail):
        return _polytail_series(a, float(fam.delta(x, e)), weight_age=not tail)
    raise TypeError(f"no series rule for {type(fam).__name__}")


def check_LlogL(spec: LeslieSpec, eps: float = 0.5) -> dict:
    """Both moment criteria; passes when either is certified finite."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    ages = scan_ages(spec)
    f, _ = spec.mean_tables(len(ages) - 1)
    result = {"eps": eps}
    for label, tail in (("criterion_age", False), ("criterion_tail", True)):
        total, upper, diverged, witness = 0.0, 0.0, False, {}
        for e, wt in _active_envs(spec):
            i = spec.env_index(e)
            best, best_up, best_x = 0.0, 0.0, 0
            for x in ages:
                fx = float(f[i, x])
                if isinstance(spec.fertility, PolyTail) and float(spec.fertility.delta(int(x), e)) <= 1.0:
                    diverged = True
                    witness = {"x": int(x), "e": e, "delta": float(spec.fertility.delta(int(x), e)),
                               "partial_sums": _divergence_witness(1.0 + eps, float(spec.fertility.delta(int(x), e)), not tail)}
                    break
                if fx <= 0:
                    continue
                sb = llogl_series(spec, int(x), e, eps, tail)
                if sb.upper / fx > best_up:
                    best, best_up, best_x = sb.partial / fx, sb.upper / fx, int(x)
            if diverged:
                break
            total += wt * best
            upper += wt * best_up
            witness[e] = {"sup_age": best_x, "value": best, "upper": best_up}
        finite = (not diverged) and upper < FINITE_GUARD
        result[label] = {"value": math.inf if diverged else total, "upper": math.inf if diverged else upper,
                         "finite": finite, "witness": witness}
    result["pass"] = result["criterion_age"]["finite"] or result["criterion_tail"]["finite"]
    return result


# ---------------------------------------------------------------------------
# Tail classes
# ---------------------------------------------------------------------------


def classify_offspring(spec: LeslieSpec, eps: float = 0.5) -> dict:
    fam = spec.fertility
    ages = scan_ages(spec)
    envs = _active_envs(spec)
    f, _ = spec.mean_tables(len(ages) - 1)
    if isinstance(fam, BoundedSupport):
        # A = 1 + max support, so that P[F >= A] = 0
        vals = {}
        for e, _ in envs:
            i = spec.env_index(e)
            vals[e] = max((fam.support_max(int(x), e) + 1) * math.log(fam.support_max(int(x), e) + 1) ** (1 + eps)
                          / f[i, x] if f[i, x] > 0 else math.inf for x in ages)
        integ = sum(wt * vals[e] for e, wt in envs)
        ok = integ < FINITE_GUARD
        return {"class": "BS" if ok else "none",
                "certificate": {"E_sup_A_logA_over_f": integ, "per_env": vals, "eps": eps}}
    if isinstance(fam, GeometricTail):
        supq = {e: float(max(fam.q(ages, e))) for e, _ in envs}
        integ = sum(wt / (1.0 - supq[e]) for e, wt in envs)
        ok = all(q < 1 for q in supq.values()) and integ < FINITE_GUARD
        return {"class": "ExpTail" if ok else "none",
                "certificate": {"alpha": 1.0, "beta": 1.0, "sup_q": supq, "E_beta2_over_1_minus_supq": integ}}
    if isinstance(fam, PolyTail):
        infd = {e: float(min(fam.delta(ages, e))) for e, _ in envs}
        ok = all(d > 1 for d in infd.values())
        i1 = sum(wt * infd[e] for e, wt in envs)
        i2 = sum(wt / (infd[e] - 1.0) ** (1 + eps) for e, wt in envs) if ok else math.inf
        ok = ok and i2 < FINITE_GUARD
        return {"class": "PolyTail" if ok else "none",
                "certificate": {"alpha": 1.0, "beta": 1.0, "inf_delta": infd, "E_beta2_inf_delta": i1,
                                "E_beta2_over_inf_delta_minus_1": i2, "eps": eps}}
    if isinstance(fam, PoissonFamily):
        e = envs[0][0]
        k = np.arange(1, 61)
        ratios = fam.sf(k + 1, 0, e) / fam.sf(k, 0, e)
        return {"class": "none",
                "certificate": {"note": "check the age-weighted criterion directly",
                                "successive_tail_ratio": {int(k[j]): float(ratios[j]) for j in (0, 9, 29, 59)}}}
    return {"class": "none", "certificate": {}}


# ---------------------------------------------------------------------------
# Second moments, extinction conditions, supercriticality
# ---------------------------------------------------------------------------


def second_moment_Z1(spec: LeslieSpec, x: int, e: str) -> float:
    """``E ||Z_1||^2`` from one age-``x`` parent: ``E F^2 + 2 f s + s``."""
    m2 = spec.fertility.second_moment(x, e)
    f = float(spec.fertility.mean(x, e))
    s = float(spec.survival_prob(x, e))
    return m2 + 2.0 * f * s + s


def check_L2(spec: LeslieSpec) -> AssumptionReport:
    ages = scan_ages(spec)
    sups, bad = {}, None
    for e, _ in _active_envs(spec):
        vals = [second_moment_Z1(spec, int(x), e) for x in ages]
        x = int(np.argmax(vals))
        sups[e] = (vals[x], x)
        if not math.isfinite(vals[x]) and bad is None:
            bad = {"x": x, "e": e, "value": math.inf}
            if isinstance(spec.fertility, PolyTail):
                d = float(spec.fertility.delta(x, e))
                k = np.arange(1, 10**6 + 1, dtype=float)
                cs = np.cumsum((2 * k - 1) * k**-d)
                bad["partial_sums"] = {f"S_{10**j}": float(cs[10**j - 1]) for j in range(2, 7)}
    if bad:
        return AssumptionReport("A6", [Verdict("second_moment", FAIL, bad)])
    elog = sum(wt * max(math.log(sups[e][0]), 0.0) for e, wt in _active_envs(spec))
    return AssumptionReport("A6", [Verdict("second_moment", PASS,
                                           {"sup_E_Z1_sq": {e: v for e, (v, _) in sups.items()},
                                            "argmax_age": {e: x for e, (_, x) in sups.items()},
                                            "E_log_plus": elog})])


def check_ext_expl_conditions(spec: LeslieSpec) -> AssumptionReport:
    ages = scan_ages(spec)
    a, a_at = math.inf, None
    s_sup, s_at = -math.inf, None
    for e in spec.environments:
        p0 = np.array([float(spec.fertility.pmf(0, int(x), e)) for x in ages])
        sv = spec.survival_prob(ages, e)
        if p0.min() < a:
            a, a_at = float(p0.min()), (int(np.argmin(p0)), e)
        if sv.max() > s_sup:
            s_sup, s_at = float(sv.max()), (int(np.argmax(sv)), e)
    out = [
        Verdict("no_offspring_prob", PASS if a > 0 else FAIL, {"inf_P_F0": a, "x": a_at[0], "e": a_at[1]}),
        Verdict("survival_below_one", PASS if s_sup < 1 else FAIL, {"sup_s": s_sup, "x": s_at[0], "e": s_at[1]}),
    ]
    if spec.is_iid:
        out.append(Verdict("iid_environment", PASS, {"process": spec.env_process.kind}))
    else:
        out.append(Verdict("iid_environment", NA, {"process": spec.env_process.kind},
                           "the extinction/non-explosion identity is stated for IID environments"))
    return AssumptionReport("ext-expl", out)


def check_supercritical(spec: LeslieSpec, n: int = 2000, seed: int = 0) -> AssumptionReport:
    """A4 via the Lyapunov exponent of one long realized environment."""
    from agebranch.semigroup import lyapunov_estimate

    f, _ = spec.mean_tables(spec.settle_age() + 1)
    if not np.isfinite(f).all():
        i, x = np.argwhere(~np.isfinite(f))[0]
        return AssumptionReport("A4", [Verdict("supercritical", FAIL,
                                               {"x": int(x), "e": spec.environments[i], "f": math.inf},
                                               "infinite mean offspring number; the mean operator is unbounded")])
    est = lyapunov_estimate(spec, n, seed)
    ll = est["log_lambda_hat"]
    return AssumptionReport("A4", [Verdict("supercritical", PASS if ll > 0 else FAIL,
                                           {"log_lambda": ll, "n": n, "seed": seed})])


def check_all(spec: LeslieSpec, eps: float = 0.5, seed: int = 0) -> dict:
    """Every report for one spec; ``pass`` is the conjunction."""
    reports = {
        "H": check_H(spec).to_dict(),
        "LlogL": _jsonable(check_LlogL(spec, eps)),
        "class": _jsonable(classify_offspring(spec, eps)),
        "L2": check_L2(spec).to_dict(),
        "ext_expl": check_ext_expl_conditions(spec).to_dict(),
    }
    try:
        reports["A4"] = check_supercritical(spec, seed=seed).to_dict()
    except Exception as exc:  # e.g. infinite means
        reports["A4"] = {"name": "A4", "pass": False, "error": str(exc)}
    reports["pass"] = all(bool(r["pass"]) for k, r in reports.items() if k != "class")
    return reports


# ---------------------------------------------------------------------------
# Auxiliary series inequalities
# ---------------------------------------------------------------------------


def u_series(a: float, s: float, K: int = 100_000) -> SeriesBound:
    """``u(a, s) = sum_{k>=1} (log k)^s k^-a`` with an integral remainder bound."""
    K = max(K, int(math.ceil(math.exp(s / a))) + 1)
    k = np.arange(2, K + 1, dtype=float)
    partial = float(np.sum(np.log(k) ** s * k**-a))
    # the summand decreases past exp(s/a), so the tail is below the integral from K
    x = (a - 1.0) * math.log(K)
    rem = float(special.gammaincc(s + 1.0, x) * special.gamma(s + 1.0) / (a - 1.0) ** (s + 1.0))
    return SeriesBound(partial, rem, K)


def u_bound(a: float, s: float) -> float:
    return math.gamma(s + 1.0) / (a - 1.0) ** (s + 1.0) + 2.0 * (s / math.e) ** s


def g_increment_check(eps: float, kmax: int = 10**6) -> dict:
    A = 1.0 + (1.0 + eps) / math.log(2.0)
    k = np.arange(1, kmax + 1, dtype=float)
    g = lambda t: t * np.log(t) ** (1.0 + eps)
    inc = g(k + 1.0) - g(k)
    rhs = A * np.log(k + 1.0) ** (1.0 + eps)
    ratio = inc / rhs
    j = int(np.argmax(ratio))
    return {"eps": eps, "A": A, "kmax": kmax, "max_ratio": float(ratio[j]), "argmax_k": int(k[j]),
            "pass": bool((inc <= rhs).all())}


def appendix_checks(a_grid=None, s_grid=None, eps_grid=(0.1, 0.5, 1.0, 2.0), kmax: int = 10**6) -> dict:
    a_grid = np.linspace(1.1, 6.0, 20) if a_grid is None else np.asarray(a_grid, dtype=float)
    s_grid = np.linspace(1.1, 6.0, 20) if s_grid is None else np.asarray(s_grid, dtype=float)
    if (a_grid <= 1).any() or (s_grid <= 1).any():
        raise ValueError("grid points need a > 1 and s > 1")
    violations, worst = [], 0.0
    for a in a_grid:
        for s in s_grid:
            u = u_series(float(a), float(s))
            b = u_bound(float(a), float(s))
            worst = max(worst, u.upper / b)
            if u.upper > b:
                violations.append({"a": float(a), "s": float(s), "u_upper": u.upper, "bound": b})
    ref = u_series(2.0, 2.0)
    g = [g_increment_check(float(e), kmax) for e in eps_grid]
    return {
        "u_grid_points": int(len(a_grid) * len(s_grid)),
        "u_violations": violations,
        "u_worst_ratio": worst,
        "u_2_2": {"partial": ref.partial, "upper": ref.upper, "bound": u_bound(2.0, 2.0)},
        "g_increments": g,
        "pass": not violations and all(x["pass"] for x in g),
    }
