"""Quenched mean operators of the Leslie process and their Perron-type data.

Ages advance by at most one per generation, so every finite-horizon quantity
is computed exactly on the reachable age window; no truncation of the age
axis ever happens.  Vectors carry a separate natural-log magnitude and are
renormalized at every step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from agebranch.model import (
    AgePopulation,
    EnvSequence,
    LeslieSpec,
    SpecError,
    monotonicity_violation,
)


class HorizonError(RuntimeError):
    """The environment sequence is too short for the requested horizon."""


@dataclass(frozen=True)
class MeanOperator:
    """``(M g)(x) = f(x) g(0) + s(x) g(x + 1)`` on the ages ``0..len(f)-1``."""

    f: np.ndarray
    s: np.ndarray

    def apply(self, g: np.ndarray) -> np.ndarray:
        g = np.asarray(g, dtype=float)
        if len(g) < len(self.f) + 1:
            raise ValueError(f"need g on {len(self.f) + 1} ages, got {len(g)}")
        return self.f * g[0] + self.s * g[1 : len(self.f) + 1]

    def apply_left(self, mu: np.ndarray) -> np.ndarray:
        """``mu M`` for a measure ``mu`` on the same window; result has one more age."""
        mu = np.asarray(mu, dtype=float)
        out = np.zeros(len(mu) + 1)
        out[0] = np.dot(mu, self.f[: len(mu)])
        out[1:] = mu * self.s[: len(mu)]
        return out

    def dense(self) -> np.ndarray:
        """Matrix on ages ``0..A`` with the last survival mass kept on the diagonal."""
        n = len(self.f)
        m = np.zeros((n, n))
        m[:, 0] = self.f
        m[np.arange(n - 1), np.arange(1, n)] = self.s[:-1]
        m[n - 1, n - 1] += self.s[-1]
        return m


def mean_operator(spec: LeslieSpec, e: str, max_age: int) -> MeanOperator:
    f, s = spec.mean_tables(max_age)
    i = spec.env_index(e)
    return MeanOperator(np.array(f[i]), np.array(s[i]))


@dataclass
class LogNormalizedVector:
    direction: np.ndarray
    log_scale: float

    @property
    def values(self) -> np.ndarray:
        return self.direction * math.exp(self.log_scale)


def _renormalize(v: np.ndarray) -> tuple[np.ndarray, float]:
    top = float(v.max()) if len(v) else 0.0
    if top <= 0.0:
        return np.zeros_like(v), -math.inf
    return v / top, math.log(top)


def _terminal_array(terminal, size: int) -> np.ndarray:
    if terminal is None:
        return np.ones(size)
    if callable(terminal):
        return np.asarray(terminal(np.arange(size)), dtype=float)
    arr = np.asarray(terminal, dtype=float)
    if len(arr) < size:
        raise ValueError(f"terminal function must be given on {size} ages, got {len(arr)}")
    return arr[:size]


def apply_backward(spec: LeslieSpec, envs: EnvSequence, k: int, n: int, terminal=None,
                   max_age: int = 0) -> LogNormalizedVector:
    """``M_{k,n} g`` on ages ``0..max_age``.

    ``terminal`` is ``g``: ``None`` for the constant 1, an array covering ages
    ``0..max_age + n - k``, or a callable of an age array.
    """
    if k > n:
        raise ValueError(f"need k <= n, got k={k}, n={n}")
    if n > len(envs):
        raise HorizonError(f"environment sequence has length {len(envs)}, need {n}")
    f, s = spec.mean_tables(max_age + n - k + 1)
    v = _terminal_array(terminal, max_age + n - k + 1)
    if (v < 0).any():
        raise ValueError("terminal function must be nonnegative")
    v, log_scale = _renormalize(v)
    idx = envs.indices
    for j in range(n - 1, k - 1, -1):
        size = max_age + j - k + 1
        e = idx[j]
        v = f[e, :size] * v[0] + s[e, :size] * v[1 : size + 1]
        v, lg = _renormalize(v)
        log_scale += lg
    return LogNormalizedVector(v[: max_age + 1], log_scale)


# ---------------------------------------------------------------------------
# Harmonic profiles
# ---------------------------------------------------------------------------


@dataclass
class HarmonicProfile:
    k: int
    h: np.ndarray
    lambda_k: float
    horizon_used: int
    err_bound: float


@dataclass
class HarmonicProfiles:
    """``h_k`` for ``k_min <= k <= k_max`` and the factors ``lambda_k``.

    ``h[k]`` covers ages ``0..min(max_age + k + 1, store_limit - 1)``.  All
    profiles come from one backward sweep, so the identity
    ``M_k h_{k+1} = lambda_k h_k`` holds to rounding.
    """

    k_min: int
    k_max: int
    h: dict
    lambdas: dict
    err: dict
    horizon: int
    max_age: int

    def __getitem__(self, k: int) -> np.ndarray:
        return self.h[k]

    def profile(self, k: int) -> HarmonicProfile:
        return HarmonicProfile(k, self.h[k], self.lambdas[k], self.horizon - k, self.err[k])

    def log_lambda_sum(self, k: int, n: int) -> float:
        """``log(lambda_k ... lambda_{n-1})``."""
        return float(sum(math.log(self.lambdas[j]) for j in range(k, n)))

    def lambda_array(self) -> np.ndarray:
        return np.array([self.lambdas[k] for k in range(self.k_min, self.k_max + 1)])

    def log_lambda_cumsum(self) -> np.ndarray:
        """``[0, log lambda_{0,1}, log lambda_{0,2}, ...]``, requires ``k_min == 0``."""
        return np.concatenate([[0.0], np.cumsum(np.log(self.lambda_array()))])

    def perturbed(self, k: int, age: int, delta: float) -> "HarmonicProfiles":
        """Copy with ``h_k(age)`` shifted by ``delta`` (for power checks)."""
        h = {j: v.copy() for j, v in self.h.items()}
        h[k][age] += delta
        return HarmonicProfiles(self.k_min, self.k_max, h, dict(self.lambdas), dict(self.err),
                                self.horizon, self.max_age)


def _sweep(spec, envs, T, k_min, k_max, max_age, store_limit):
    f, s = spec.mean_tables(max_age + T + 2)
    idx = envs.indices
    v = np.ones(max_age + T + 2)
    hs, lams = {}, {}
    for j in range(T - 1, k_min - 1, -1):
        size = max_age + j + 2
        e = idx[j]
        w = f[e, :size] * v[0] + s[e, :size] * v[1 : size + 1]
        top = float(w.max())
        if top <= 0.0:
            raise SpecError(f"mean operator vanishes at time {j}")
        v = w / top
        if j <= k_max:
            lams[j] = top
            hs[j] = v[: min(size, store_limit)].copy()
    return hs, lams


def harmonic_profiles(spec: LeslieSpec, envs: EnvSequence, k_max: int, tol: float = 1e-10,
                      max_age: int = 0, k_min: int = 0, store_limit: int | None = None,
                      start_horizon: int = 20) -> HarmonicProfiles:
    """Profiles ``h_k`` for ``k_min..k_max`` with an adaptively chosen horizon.

    The horizon beyond ``k_max`` is doubled until profiles from horizons ``N``
    and ``N + 10`` differ by less than ``tol`` in sup norm.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    store_limit = store_limit or (max_age + k_max + 2)
    N = start_horizon
    while True:
        T1 = k_max + 1 + N
        T2 = T1 + 10
        if T2 > len(envs):
            raise HorizonError(
                f"harmonic profiles up to k={k_max} need more than {len(envs)} environments "
                f"(horizon {N} not yet converged to tol={tol}); pre-generate a longer sequence")
        h1, _ = _sweep(spec, envs, T1, k_min, k_max, max_age, store_limit)
        h2, lam2 = _sweep(spec, envs, T2, k_min, k_max, max_age, store_limit)
        err = {k: float(np.abs(h1[k] - h2[k]).max()) for k in h2}
        if max(err.values()) < tol:
            return HarmonicProfiles(k_min, k_max, h2, lam2, err, T2, max_age)
        N *= 2


def harmonic_profile(spec: LeslieSpec, envs: EnvSequence, k: int, tol: float = 1e-10,
                     max_age: int = 0) -> HarmonicProfile:
    return harmonic_profiles(spec, envs, k, tol, max_age, k_min=k).profile(k)


def harmonic_residual(spec: LeslieSpec, envs: EnvSequence, profiles: HarmonicProfiles, k: int) -> float:
    """``sup_x |(M_k h_{k+1})(x) - lambda_k h_k(x)|`` on the stored window."""
    hk, hk1 = profiles[k], profiles[k + 1]
    size = min(len(hk), len(hk1) - 1)
    op = mean_operator(spec, envs[k], size - 1)
    return float(np.abs(op.apply(hk1) - profiles.lambdas[k] * hk[:size]).max())


# ---------------------------------------------------------------------------
# Coupling constants
# ---------------------------------------------------------------------------


@dataclass
class CouplingReport:
    """Doeblin data with ``nu = delta_0`` and ``d = 1``."""

    labels: tuple
    c: dict
    gamma: dict
    weights: dict
    eta_tilde: float
    d: float = 1.0
    nu_age: int = 0

    def gamma_sequence(self, envs: EnvSequence) -> np.ndarray:
        g = np.array([self.gamma[e] for e in self.labels])
        return g[envs.indices]

    def to_dict(self) -> dict:
        return {"nu_age": self.nu_age, "d": self.d, "c": self.c, "gamma": self.gamma,
                "weights": self.weights, "eta_tilde": self.eta_tilde}


def sup_ratio(spec: LeslieSpec, e: str) -> tuple[float, int]:
    """``sup_x s(x,e) / f(x,e)`` and an age attaining it (scan plus floor regime)."""
    top = spec.settle_age() + 1
    f, s = spec.mean_tables(top)
    i = spec.env_index(e)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(s[i] > 0, s[i] / f[i], 0.0)
    x = int(np.argmax(r))
    return float(r[x]), x


def coupling_constants(spec: LeslieSpec) -> CouplingReport:
    bad = monotonicity_violation(spec)
    if bad is not None:
        raise SpecError(f"offspring laws are not nonincreasing in age at {bad}; the d = 1 coupling does not apply")
    c = {}
    for e in spec.environments:
        ratio, _ = sup_ratio(spec, e)
        c[e] = 1.0 / (1.0 + ratio) if math.isfinite(ratio) else 0.0
    w = spec.env_marginal()
    weights = dict(zip(spec.environments, map(float, w)))
    with np.errstate(divide="ignore"):
        logs = np.log1p(-np.array([c[e] for e in spec.environments]))
    mask = w > 0
    total = float(np.dot(w[mask], logs[mask])) if np.isfinite(logs[mask]).all() else -math.inf
    eta = math.exp(total) if total > -math.inf else 0.0
    return CouplingReport(spec.environments, c, dict(c), weights, eta)


# ---------------------------------------------------------------------------
# Lyapunov exponent
# ---------------------------------------------------------------------------


def forward_norms(spec: LeslieSpec, envs: EnvSequence, z0: AgePopulation, n: int) -> np.ndarray:
    """``log ||Z_0 M_{0,j}||_TV`` for ``j = 0..n``."""
    return np.array([q.log_mass for q in quenched_mean(spec, envs, z0, n, path=True)])


def lyapunov_estimate(spec: LeslieSpec, n: int, seed: int, tol: float = 1e-10,
                      envs: EnvSequence | None = None) -> dict:
    """Two estimators of ``log lambda`` on one realized environment.

    ``log_lambda_hat`` is ``(1/n) log(lambda_0 ... lambda_{n-1})``; ``log_norm_hat`` is
    ``(1/n) log |||M_{0,n}|||``.  The per-step norm series uses the age-0 row,
    which is the sup whenever the offspring laws decrease with age.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if envs is None:
        envs = spec.generate_envs(n + 400, seed)
    prof = harmonic_profiles(spec, envs, n - 1, tol, store_limit=2)
    lam = prof.lambda_array()
    log_lambda_hat = float(np.log(lam).sum() / n)
    back = apply_backward(spec, envs, 0, n, max_age=spec.settle_age())
    log_norm_hat = back.log_scale / n
    coupling = None
    gamma = np.full(n, np.nan)
    if monotonicity_violation(spec) is None:
        coupling = coupling_constants(spec)
        gamma = coupling.gamma_sequence(envs)[:n]
    log_norms = forward_norms(spec, envs, AgePopulation.single(0), n)
    gmin = float(np.nanmin(gamma)) if coupling else math.nan
    bound = 2.0 * abs(math.log(gmin)) / n if coupling and gmin > 0 else math.inf
    return {
        "n": n,
        "seed": seed,
        "log_lambda_hat": log_lambda_hat,
        "log_norm_hat": log_norm_hat,
        "discrepancy": abs(log_lambda_hat - log_norm_hat),
        "discrepancy_bound": bound,
        "series": {
            "k": np.arange(n),
            "lambda_k": lam,
            "log_norm": log_norms[1:],
            "gamma_k": gamma,
        },
        "envs": envs,
    }


# ---------------------------------------------------------------------------
# Forward quantities
# ---------------------------------------------------------------------------


@dataclass
class QuenchedMean:
    n: int
    pi: np.ndarray
    log_mass: float

    def integrate(self, fn) -> float:
        fn = np.asarray(fn, dtype=float)
        return float(np.dot(self.pi, fn[: len(self.pi)]))


def quenched_mean(spec: LeslieSpec, envs: EnvSequence, z0: AgePopulation, n: int, path: bool = False):
    """``pi_n = Z_0 M_{0,n} / ||Z_0 M_{0,n}||`` and ``log ||Z_0 M_{0,n}||``.

    With ``path=True`` returns the list for every generation ``0..n``.
    """
    if not z0:
        raise ValueError("initial population must be nonempty")
    if n > len(envs):
        raise HorizonError(f"environment sequence has length {len(envs)}, need {n}")
    a0 = z0.max_age
    f, s = spec.mean_tables(a0 + n + 1)
    mu = z0.to_array().astype(float)
    mass = mu.sum()
    mu /= mass
    log_mass = math.log(mass)
    out = [QuenchedMean(0, mu.copy(), log_mass)] if path else None
    for j in range(n):
        e = envs.indices[j]
        size = len(mu)
        nxt = np.empty(size + 1)
        nxt[0] = np.dot(mu, f[e, :size])
        nxt[1:] = mu * s[e, :size]
        tot = nxt.sum()
        if tot <= 0:
            mu, log_mass = nxt, -math.inf
        else:
            mu, log_mass = nxt / tot, log_mass + math.log(tot)
        if path:
            out.append(QuenchedMean(j + 1, mu.copy(), log_mass))
    return out if path else QuenchedMean(n, mu, log_mass)


def _forward_point(f, s, idx, x, k, n):
    mu = np.zeros(x + 1)
    mu[x] = 1.0
    log_mass = 0.0
    for j in range(k, n):
        e = idx[j]
        size = len(mu)
        nxt = np.empty(size + 1)
        nxt[0] = np.dot(mu, f[e, :size])
        nxt[1:] = mu * s[e, :size]
        tot = nxt.sum()
        mu = nxt / tot
        log_mass += math.log(tot)
    return mu, log_mass


@dataclass
class GapReport:
    """Both sides of the contraction inequality, relative to ``||delta_x M_{k,n}||``."""

    lhs: float
    rhs: float
    log_norm: float

    @property
    def holds(self) -> bool:
        return self.lhs <= self.rhs * (1.0 + 1e-12) + 1e-12


def ergodicity_gap(spec: LeslieSpec, envs: EnvSequence, k: int, n: int, x: int, y: int,
                   profiles: HarmonicProfiles | None = None,
                   coupling: CouplingReport | None = None) -> GapReport:
    """``||delta_x M_{k,n} - h_k(x)/h_k(y) delta_y M_{k,n}||_TV`` against its bound."""
    if k > n:
        raise ValueError("need k <= n")
    if profiles is None:
        profiles = harmonic_profiles(spec, envs, k, max_age=max(x, y), k_min=k)
    coupling = coupling or coupling_constants(spec)
    hk = profiles[k]
    if max(x, y) >= len(hk):
        raise ValueError(f"profile h_{k} does not cover ages {x}, {y}")
    ratio = hk[x] / hk[y]
    f, s = spec.mean_tables(max(x, y) + n - k + 1)
    mux, lx = _forward_point(f, s, envs.indices, x, k, n)
    muy, ly = _forward_point(f, s, envs.indices, y, k, n)
    size = max(len(mux), len(muy))
    a = np.zeros(size)
    b = np.zeros(size)
    a[: len(mux)] = mux
    b[: len(muy)] = muy
    lhs = float(np.abs(a - ratio * math.exp(ly - lx) * b).sum())
    if n == k:
        rhs = math.inf
    else:
        gam = coupling.gamma_sequence(envs)
        g_last = gam[n - 1]
        rhs = 4.0 / g_last * float(np.prod(1.0 - gam[k:n])) if g_last > 0 else math.inf
    return GapReport(lhs, rhs, lx)


def sample_gap_grid(spec: LeslieSpec, envs: EnvSequence, count: int = 200, seed: int = 0,
                    k_max: int = 30, n_span: int = 30, max_age: int = 8) -> dict:
    """Contraction inequality on ``count`` random ``(k, n, x, y)`` tuples."""
    rng = np.random.default_rng(seed)
    profiles = harmonic_profiles(spec, envs, k_max, max_age=max_age)
    coupling = coupling_constants(spec)
    rows, violations = [], 0
    for _ in range(count):
        k = int(rng.integers(0, k_max + 1))
        n = k + int(rng.integers(1, n_span + 1))
        x, y = (int(v) for v in rng.integers(0, max_age + 1, size=2))
        g = ergodicity_gap(spec, envs, k, n, x, y, profiles, coupling)
        violations += not g.holds
        rows.append((k, n, x, y, g.lhs, g.rhs))
    return {"tuples": rows, "violations": violations, "eta_tilde": coupling.eta_tilde}


def gap_decay_rate(spec: LeslieSpec, envs: EnvSequence, x: int = 0, y: int = 1, n_max: int = 40,
                   floor: float = 1e-13) -> dict:
    """Geometric rate of ``n -> lhs(0, n, x, y)`` fitted by least squares in log scale.

    Points below ``floor`` are rounding noise and are dropped; a gap that is
    exactly zero gives rate 0.
    """
    profiles = harmonic_profiles(spec, envs, 0, max_age=max(x, y))
    coupling = coupling_constants(spec)
    lhs = np.array([ergodicity_gap(spec, envs, 0, n, x, y, profiles, coupling).lhs for n in range(1, n_max + 1)])
    ns = np.arange(1, n_max + 1)
    keep = lhs > floor
    if keep.sum() < 2:
        return {"rate": 0.0, "points": int(keep.sum()), "lhs": lhs, "eta_tilde": coupling.eta_tilde}
    slope = np.polyfit(ns[keep], np.log(lhs[keep]), 1)[0]
    return {"rate": float(math.exp(slope)), "points": int(keep.sum()), "lhs": lhs,
            "eta_tilde": coupling.eta_tilde}


SERIES_HEADER = ["k", "lambda_k", "log_norm", "gamma_k"]
PROFILE_HEADER = ["k", "age", "h"]


def series_rows(est: dict):
    s = est["series"]
    for i in range(len(s["k"])):
        yield [int(s["k"][i]), float(s["lambda_k"][i]), float(s["log_norm"][i]), float(s["gamma_k"][i])]


def profile_rows(profiles: HarmonicProfiles, ks):
    for k in ks:
        for age, v in enumerate(profiles[k]):
            yield [int(k), age, float(v)]
