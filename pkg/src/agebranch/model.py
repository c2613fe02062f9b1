"""Populations, environments and age-structured (Leslie) offspring laws.

An individual of age ``x`` living in environment ``e`` produces ``F`` newborns
of age 0 and, independently, survives to age ``x + 1`` with probability
``s(x, e)``.  Every age-dependent parameter is described by a geometric
relaxation profile ``p(x) = p_inf + (p0 - p_inf) * rho**x``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import special, stats

from agebranch.rng import ENV_STREAM, stream

# ages past which every bundled profile sits at its floor to double precision
MAX_SETTLE_AGE = 4000


class SpecError(ValueError):
    """Raised for malformed or inconsistent model descriptions."""


# ---------------------------------------------------------------------------
# Age profiles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Profile:
    p0: float
    p_inf: float
    rho: float = 0.0

    def __post_init__(self):
        for name in ("p0", "p_inf", "rho"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or not math.isfinite(v):
                raise SpecError(f"profile {name} must be a finite number, got {v!r}")
        if not 0.0 <= self.rho < 1.0:
            raise SpecError(f"profile rho must lie in [0, 1), got {self.rho}")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return self.p_inf + (self.p0 - self.p_inf) * self.rho**x

    @property
    def is_nonincreasing(self) -> bool:
        return self.p0 >= self.p_inf

    @property
    def is_nondecreasing(self) -> bool:
        return self.p0 <= self.p_inf

    def settle_age(self) -> int:
        """First age from which ``p(x)`` equals the floor to double precision."""
        if self.rho == 0.0 or self.p0 == self.p_inf:
            return 1
        gap = abs(self.p0 - self.p_inf)
        scale = max(abs(self.p_inf), 1e-300)
        ratio = 1e-17 * scale / gap
        if ratio >= 1.0:
            return 1
        return min(int(math.ceil(math.log(ratio) / math.log(self.rho))) + 1, MAX_SETTLE_AGE)

    def to_dict(self) -> dict:
        return {"p0": self.p0, "p_inf": self.p_inf, "rho": self.rho}

    @classmethod
    def from_dict(cls, d: Mapping, where: str = "profile") -> "Profile":
        _check_keys(d, {"p0", "p_inf"}, {"rho"}, where)
        return cls(float(d["p0"]), float(d["p_inf"]), float(d.get("rho", 0.0)))


def constant(value: float) -> Profile:
    return Profile(value, value, 0.0)


def _check_keys(d, required: set, optional: set, where: str):
    if not isinstance(d, Mapping):
        raise SpecError(f"{where}: expected a mapping, got {type(d).__name__}")
    missing = required - set(d)
    unknown = set(d) - required - optional
    if missing:
        raise SpecError(f"{where}: missing key(s) {sorted(missing)}")
    if unknown:
        raise SpecError(f"{where}: unknown key(s) {sorted(unknown)}")


# ---------------------------------------------------------------------------
# Fertility families
# ---------------------------------------------------------------------------


class OffspringFamily:
    """Law of the newborn count ``F(x, e)``, indexed by age and environment label.

    Subclasses provide exact pmf, survival function ``P[F >= k]``, first two
    moments, aggregated samplers and an exact size-biased sampler.
    """

    kind: str = ""

    def __init__(self, params: Mapping[str, object]):
        self.params = dict(params)

    @property
    def labels(self) -> tuple:
        return tuple(self.params)

    def _p(self, e: str):
        try:
            return self.params[e]
        except KeyError:
            raise SpecError(f"unknown environment label {e!r}") from None

    # --- to be provided by subclasses ---------------------------------------
    def mean(self, x, e: str):
        raise NotImplementedError

    def second_moment(self, x: int, e: str) -> float:
        raise NotImplementedError

    def pmf(self, k, x: int, e: str):
        raise NotImplementedError

    def sf(self, k, x: int, e: str):
        """``P[F >= k]``."""
        raise NotImplementedError

    def support_max(self, x: int, e: str) -> int | None:
        return None

    def sample_totals(self, counts: np.ndarray, ages: np.ndarray, e: str, rng) -> np.ndarray:
        """Total newborns of ``counts[i]`` independent parents of age ``ages[i]``."""
        raise NotImplementedError

    def sample_size_biased(self, x: int, e: str, rng) -> int:
        """Draw from ``k P[F=k] / E F``."""
        raise NotImplementedError

    def settle_age(self) -> int:
        raise NotImplementedError

    def monotonicity_witness(self) -> tuple | None:
        """A (x, e, parameter) triple breaking stochastic monotonicity, if any."""
        return None

    def params_to_dict(self) -> dict:
        raise NotImplementedError

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": self.params_to_dict()}

    # --- shared helpers -------------------------------------------------------
    def sample(self, x: int, e: str, rng) -> int:
        return int(self.sample_totals(np.array([1]), np.array([x]), e, rng)[0])

    def cdf_grid(self, x: int, e: str, kmax: int) -> np.ndarray:
        return self.sf(np.arange(kmax + 1), x, e)


def _profile_map(raw: Mapping, key: str, labels: Sequence[str], where: str) -> dict:
    if set(raw) != set(labels):
        raise SpecError(f"{where}: parameters must be given for exactly {sorted(labels)}, got {sorted(raw)}")
    out = {}
    for e in labels:
        _check_keys(raw[e], {key}, set(), f"{where}.{e}")
        out[e] = Profile.from_dict(raw[e][key], f"{where}.{e}.{key}")
    return out


class GeometricTail(OffspringFamily):
    """``P[F >= k] = q(x, e)**k``."""

    kind = "geometric"

    def __init__(self, q: Mapping[str, Profile]):
        super().__init__(q)
        for e, prof in q.items():
            if not (0.0 <= prof.p0 < 1.0 and 0.0 <= prof.p_inf < 1.0):
                raise SpecError(f"geometric q for {e!r} must lie in [0, 1)")

    def q(self, x, e):
        return self._p(e)(x)

    def mean(self, x, e):
        q = self.q(x, e)
        return q / (1.0 - q)

    def second_moment(self, x, e):
        q = float(self.q(x, e))
        return q * (1.0 + q) / (1.0 - q) ** 2

    def pmf(self, k, x, e):
        q = float(self.q(x, e))
        k = np.asarray(k)
        return np.where(k >= 0, q ** np.maximum(k, 0) * (1.0 - q), 0.0)

    def sf(self, k, x, e):
        q = float(self.q(x, e))
        k = np.asarray(k)
        return np.where(k <= 0, 1.0, q ** np.maximum(k, 0))

    def sample_totals(self, counts, ages, e, rng):
        counts = np.asarray(counts, dtype=np.int64)
        out = np.zeros(len(counts), dtype=np.int64)
        live = counts > 0
        if live.any():
            p = 1.0 - self.q(np.asarray(ages)[live], e)
            out[live] = rng.negative_binomial(counts[live], p)
        return out

    def sample_size_biased(self, x, e, rng):
        # k q^(k-1) (1-q)^2 is one plus a negative binomial(2, 1-q)
        return 1 + int(rng.negative_binomial(2, 1.0 - float(self.q(x, e))))

    def settle_age(self):
        return max(p.settle_age() for p in self.params.values())

    def monotonicity_witness(self):
        for e, p in self.params.items():
            if not p.is_nonincreasing:
                return (0, e, "q increases with age")
        return None

    def params_to_dict(self):
        return {e: {"q": p.to_dict()} for e, p in self.params.items()}

    @classmethod
    def from_params(cls, raw, labels):
        return cls(_profile_map(raw, "q", labels, "fertility.params"))


class PoissonFamily(OffspringFamily):
    kind = "poisson"

    def __init__(self, mean: Mapping[str, Profile]):
        super().__init__(mean)
        for e, prof in mean.items():
            if prof.p0 < 0 or prof.p_inf < 0:
                raise SpecError(f"poisson mean for {e!r} must be nonnegative")

    def mean(self, x, e):
        return self._p(e)(x)

    def second_moment(self, x, e):
        m = float(self.mean(x, e))
        return m + m * m

    def pmf(self, k, x, e):
        return stats.poisson.pmf(k, float(self.mean(x, e)))

    def sf(self, k, x, e):
        k = np.asarray(k)
        return np.where(k <= 0, 1.0, stats.poisson.sf(k - 1, float(self.mean(x, e))))

    def sample_totals(self, counts, ages, e, rng):
        # a sum of independent Poisson draws is Poisson with the summed mean
        lam = np.asarray(counts, dtype=float) * self.mean(np.asarray(ages), e)
        return rng.poisson(lam).astype(np.int64)

    def sample_size_biased(self, x, e, rng):
        return 1 + int(rng.poisson(float(self.mean(x, e))))

    def settle_age(self):
        return max(p.settle_age() for p in self.params.values())

    def monotonicity_witness(self):
        for e, p in self.params.items():
            if not p.is_nonincreasing:
                return (0, e, "mean increases with age")
        return None

    def params_to_dict(self):
        return {e: {"mean": p.to_dict()} for e, p in self.params.items()}

    @classmethod
    def from_params(cls, raw, labels):
        return cls(_profile_map(raw, "mean", labels, "fertility.params"))


class PolyTail(OffspringFamily):
    """``P[F >= k] = k**(-delta(x, e))`` for ``k >= 1``; ``F >= 1`` almost surely."""

    kind = "polytail"

    def __init__(self, delta: Mapping[str, Profile]):
        super().__init__(delta)
        for e, prof in delta.items():
            if prof.p0 <= 0 or prof.p_inf <= 0:
                raise SpecError(f"polytail delta for {e!r} must be positive")

    def delta(self, x, e):
        return self._p(e)(x)

    def mean(self, x, e):
        d = np.asarray(self.delta(x, e), dtype=float)
        with np.errstate(all="ignore"):
            return np.where(d > 1.0, special.zeta(np.maximum(d, 1.0 + 1e-300), 1.0), np.inf)

    def second_moment(self, x, e):
        d = float(self.delta(x, e))
        if d <= 2.0:
            return math.inf
        # sum_k (2k - 1) k^-d
        return 2.0 * special.zeta(d - 1.0, 1.0) - special.zeta(d, 1.0)

    def pmf(self, k, x, e):
        d = float(self.delta(x, e))
        k = np.asarray(k, dtype=float)
        kk = np.maximum(k, 1.0)
        return np.where(k >= 1, kk**-d - (kk + 1.0) ** -d, 0.0)

    def sf(self, k, x, e):
        d = float(self.delta(x, e))
        k = np.asarray(k, dtype=float)
        return np.where(k <= 1, 1.0, np.maximum(k, 1.0) ** -d)

    def sample_totals(self, counts, ages, e, rng):
        counts = np.asarray(counts, dtype=np.int64)
        out = np.zeros(len(counts), dtype=np.int64)
        n = int(counts.sum())
        if n == 0:
            return out
        d = np.repeat(self.delta(np.asarray(ages), e), counts)
        u = 1.0 - rng.random(n)  # in (0, 1]
        draws = np.floor(np.minimum(u ** (-1.0 / d), 2.0**62)).astype(np.int64)
        idx = np.repeat(np.arange(len(counts)), counts)
        np.add.at(out, idx, draws)
        return out

    def size_biased_sf(self, m, x, e) -> float:
        """``P*[F >= m]`` under the size-biased law, in closed form."""
        d = float(self.delta(x, e))
        if m <= 1:
            return 1.0
        return float((m ** (1.0 - d) + special.zeta(d, m + 1.0)) / special.zeta(d, 1.0))

    def sample_size_biased(self, x, e, rng):
        d = float(self.delta(x, e))
        if d <= 1.0:
            raise SpecError("size-biased law undefined for an infinite mean")
        u = 1.0 - rng.random()
        # largest m with P*[F >= m] >= u
        lo, hi = 1, 2
        while self.size_biased_sf(hi, x, e) >= u:
            lo, hi = hi, hi * 2
            if hi > 2**62:
                return lo
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if self.size_biased_sf(mid, x, e) >= u:
                lo = mid
            else:
                hi = mid
        return lo

    def settle_age(self):
        return max(p.settle_age() for p in self.params.values())

    def monotonicity_witness(self):
        for e, p in self.params.items():
            if not p.is_nondecreasing:
                return (0, e, "tail exponent decreases with age")
        return None

    def params_to_dict(self):
        return {e: {"delta": p.to_dict()} for e, p in self.params.items()}

    @classmethod
    def from_params(cls, raw, labels):
        return cls(_profile_map(raw, "delta", labels, "fertility.params"))


class BoundedSupport(OffspringFamily):
    """Finite-support newborn counts.

    Per environment either an age-indexed list of pmf tables (the last table
    applies to all older ages) or a binomial law with a fixed number of trials
    and an age profile for the success probability.
    """

    kind = "bounded"

    def __init__(self, params: Mapping[str, dict]):
        clean = {}
        for e, p in params.items():
            if "pmfs" in p:
                tables = [np.asarray(t, dtype=float) for t in p["pmfs"]]
                if not tables:
                    raise SpecError(f"bounded pmfs for {e!r} are empty")
                for t in tables:
                    if (t < 0).any() or abs(t.sum() - 1.0) > 1e-12:
                        raise SpecError(f"bounded pmf for {e!r} must be nonnegative and sum to 1")
                clean[e] = {"pmfs": tables}
            elif "binomial" in p:
                b = p["binomial"]
                trials, prof = int(b["trials"]), b["p"]
                if trials < 1 or not (0 <= prof.p0 <= 1 and 0 <= prof.p_inf <= 1):
                    raise SpecError(f"bad binomial parameters for {e!r}")
                clean[e] = {"binomial": {"trials": trials, "p": prof}}
            else:
                raise SpecError(f"bounded params for {e!r} need 'pmfs' or 'binomial'")
        super().__init__(clean)

    def table(self, x: int, e: str) -> np.ndarray:
        p = self._p(e)
        if "pmfs" in p:
            tabs = p["pmfs"]
            return tabs[min(int(x), len(tabs) - 1)]
        b = p["binomial"]
        return stats.binom.pmf(np.arange(b["trials"] + 1), b["trials"], float(b["p"](x)))

    def mean(self, x, e):
        p = self._p(e)
        if "binomial" in p:
            return p["binomial"]["trials"] * p["binomial"]["p"](x)
        xs = np.asarray(x)
        if xs.ndim == 0:
            t = self.table(int(xs), e)
            return float(np.dot(np.arange(len(t)), t))
        return np.array([self.mean(int(v), e) for v in xs])

    def second_moment(self, x, e):
        t = self.table(x, e)
        k = np.arange(len(t))
        return float(np.dot(k * k, t))

    def pmf(self, k, x, e):
        t = self.table(x, e)
        k = np.asarray(k)
        inside = (k >= 0) & (k < len(t))
        return np.where(inside, t[np.clip(k, 0, len(t) - 1)], 0.0)

    def sf(self, k, x, e):
        t = self.table(x, e)
        tail = np.concatenate([np.cumsum(t[::-1])[::-1], [0.0]])
        k = np.asarray(k)
        return np.where(k <= 0, 1.0, tail[np.clip(k, 0, len(t))])

    def support_max(self, x, e):
        t = self.table(x, e)
        return int(np.nonzero(t)[0].max())

    def sample_totals(self, counts, ages, e, rng):
        counts = np.asarray(counts, dtype=np.int64)
        ages = np.asarray(ages)
        out = np.zeros(len(counts), dtype=np.int64)
        live = counts > 0
        if not live.any():
            return out
        p = self._p(e)
        if "binomial" in p:
            b = p["binomial"]
            # sum of c binomial(N, p) draws is binomial(c N, p)
            out[live] = rng.binomial(counts[live] * b["trials"], b["p"](ages[live]))
            return out
        tabs = [self.table(int(a), e) for a in ages[live]]
        width = max(len(t) for t in tabs)
        pv = np.zeros((len(tabs), width))
        for i, t in enumerate(tabs):
            pv[i, : len(t)] = t
        pv /= pv.sum(axis=1, keepdims=True)
        draws = rng.multinomial(counts[live], pv)
        out[live] = draws @ np.arange(width)
        return out

    def sample_size_biased(self, x, e, rng):
        t = self.table(x, e)
        w = np.arange(len(t)) * t
        return int(rng.choice(len(t), p=w / w.sum()))

    def settle_age(self):
        ages = [1]
        for p in self.params.values():
            if "pmfs" in p:
                ages.append(len(p["pmfs"]))
            else:
                ages.append(p["binomial"]["p"].settle_age())
        return max(ages)

    def monotonicity_witness(self):
        for e, p in self.params.items():
            if "binomial" in p:
                if not p["binomial"]["p"].is_nonincreasing:
                    return (0, e, "binomial p increases with age")
                continue
            tabs = p["pmfs"]
            for x in range(len(tabs) - 1):
                kmax = max(len(tabs[x]), len(tabs[x + 1]))
                a, b = self.sf(np.arange(kmax + 1), x, e), self.sf(np.arange(kmax + 1), x + 1, e)
                bad = np.nonzero(b > a + 1e-15)[0]
                if len(bad):
                    return (x, e, int(bad[0]))
        return None

    def params_to_dict(self):
        out = {}
        for e, p in self.params.items():
            if "pmfs" in p:
                out[e] = {"pmfs": [t.tolist() for t in p["pmfs"]]}
            else:
                b = p["binomial"]
                out[e] = {"binomial": {"trials": b["trials"], "p": b["p"].to_dict()}}
        return out

    @classmethod
    def from_params(cls, raw, labels):
        if set(raw) != set(labels):
            raise SpecError(f"fertility.params: parameters must be given for exactly {sorted(labels)}")
        parsed = {}
        for e in labels:
            p = raw[e]
            where = f"fertility.params.{e}"
            if isinstance(p, Mapping) and "binomial" in p:
                _check_keys(p, {"binomial"}, set(), where)
                _check_keys(p["binomial"], {"trials", "p"}, set(), where + ".binomial")
                parsed[e] = {"binomial": {"trials": p["binomial"]["trials"],
                                          "p": Profile.from_dict(p["binomial"]["p"], where + ".binomial.p")}}
            else:
                _check_keys(p, {"pmfs"}, set(), where)
                parsed[e] = {"pmfs": p["pmfs"]}
        return cls(parsed)


FAMILIES = {cls.kind: cls for cls in (BoundedSupport, GeometricTail, PolyTail, PoissonFamily)}


# ---------------------------------------------------------------------------
# Environments
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConstantEnv:
    label: str
    kind = "constant"

    def marginal(self, labels) -> np.ndarray:
        return np.array([1.0 if e == self.label else 0.0 for e in labels])

    def to_dict(self):
        return {"kind": "constant", "label": self.label}


@dataclass(frozen=True)
class IIDEnv:
    weights: tuple  # ((label, weight), ...)
    kind = "iid"

    def __post_init__(self):
        w = np.array([v for _, v in self.weights], dtype=float)
        if (w < 0).any() or abs(w.sum() - 1.0) > 1e-12:
            raise SpecError("iid environment weights must be nonnegative and sum to 1")

    def marginal(self, labels) -> np.ndarray:
        d = dict(self.weights)
        return np.array([d.get(e, 0.0) for e in labels], dtype=float)

    def to_dict(self):
        return {"kind": "iid", "weights": dict(self.weights)}


@dataclass(frozen=True)
class MarkovEnv:
    """Stationary Markov chain on the environment labels, in declared order."""

    transition: tuple  # rows
    kind = "markov"

    def __post_init__(self):
        P = self.matrix
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise SpecError("markov transition must be a square matrix")
        if (P < 0).any() or np.abs(P.sum(axis=1) - 1.0).max() > 1e-12:
            raise SpecError("markov transition rows must be nonnegative and sum to 1")
        if not is_primitive(P):
            raise SpecError("markov transition must be irreducible and aperiodic")

    @property
    def matrix(self) -> np.ndarray:
        return np.array(self.transition, dtype=float)

    def stationary(self) -> np.ndarray:
        w, v = np.linalg.eig(self.matrix.T)
        vec = np.real(v[:, np.argmin(np.abs(w - 1.0))])
        vec = np.abs(vec)
        return vec / vec.sum()

    def marginal(self, labels) -> np.ndarray:
        return self.stationary()

    def to_dict(self):
        return {"kind": "markov", "transition": [list(r) for r in self.transition]}


def is_primitive(P: np.ndarray) -> bool:
    """Irreducible and aperiodic, via Wielandt's bound on the primitivity index."""
    n = P.shape[0]
    A = (P > 0).astype(float)
    Q = np.eye(n)
    for _ in range((n - 1) ** 2 + 1):
        Q = np.minimum(Q @ A, 1.0)
    return bool((Q > 0).all())


def env_process_from_dict(d: Mapping, labels: Sequence[str]):
    where = "env_process"
    if not isinstance(d, Mapping) or "kind" not in d:
        raise SpecError(f"{where}: expected a mapping with a 'kind'")
    kind = d["kind"]
    if kind == "constant":
        _check_keys(d, {"kind", "label"}, set(), where)
        if d["label"] not in labels:
            raise SpecError(f"{where}.label: unknown environment {d['label']!r}")
        return ConstantEnv(d["label"])
    if kind == "iid":
        _check_keys(d, {"kind", "weights"}, set(), where)
        if set(d["weights"]) != set(labels):
            raise SpecError(f"{where}.weights: need a weight for each of {sorted(labels)}")
        return IIDEnv(tuple((e, float(d["weights"][e])) for e in labels))
    if kind == "markov":
        _check_keys(d, {"kind", "transition"}, set(), where)
        rows = tuple(tuple(float(v) for v in r) for r in d["transition"])
        if len(rows) != len(labels):
            raise SpecError(f"{where}.transition: expected {len(labels)} rows")
        return MarkovEnv(rows)
    raise SpecError(f"{where}.kind: unknown kind {kind!r}")


@dataclass(frozen=True)
class EnvSequence:
    """A realized environment sequence; reproducible from (process, seed, length)."""

    labels: tuple  # all labels of the spec, in order
    indices: np.ndarray = field(repr=False)
    seed: int | None = None
    process: object = None

    def __len__(self):
        return len(self.indices)

    def __getitem__(self, n: int) -> str:
        return self.labels[int(self.indices[n])]

    @property
    def sequence(self) -> list:
        return [self.labels[i] for i in self.indices]

    @classmethod
    def from_labels(cls, all_labels: Sequence[str], seq: Sequence[str]) -> "EnvSequence":
        pos = {e: i for i, e in enumerate(all_labels)}
        try:
            idx = np.array([pos[e] for e in seq], dtype=np.int64)
        except KeyError as exc:
            raise SpecError(f"unknown environment label {exc.args[0]!r}") from None
        return cls(tuple(all_labels), idx)


def generate_env_sequence(process, labels: Sequence[str], length: int, seed: int) -> EnvSequence:
    if length < 1:
        raise ValueError("length must be >= 1")
    labels = tuple(labels)
    rng = stream(seed, ENV_STREAM)
    if isinstance(process, ConstantEnv):
        idx = np.full(length, labels.index(process.label), dtype=np.int64)
    elif isinstance(process, IIDEnv):
        idx = rng.choice(len(labels), size=length, p=process.marginal(labels)).astype(np.int64)
    elif isinstance(process, MarkovEnv):
        P = process.matrix
        cum = np.cumsum(P, axis=1)
        u = rng.random(length)
        idx = np.empty(length, dtype=np.int64)
        idx[0] = np.searchsorted(np.cumsum(process.stationary()), u[0], side="right")
        for n in range(1, length):
            idx[n] = np.searchsorted(cum[idx[n - 1]], u[n], side="right")
        np.minimum(idx, len(labels) - 1, out=idx)
    else:
        raise SpecError(f"unsupported environment process {process!r}")
    return EnvSequence(labels, idx, seed, process)


# ---------------------------------------------------------------------------
# Leslie specification
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LeslieSpec:
    environments: tuple
    fertility: OffspringFamily
    survival: Mapping[str, Profile]
    env_process: object
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        envs = tuple(self.environments)
        object.__setattr__(self, "environments", envs)
        if len(set(envs)) != len(envs) or not envs:
            raise SpecError("environments must be a nonempty list of distinct labels")
        if set(self.fertility.labels) != set(envs):
            raise SpecError("fertility parameters must cover exactly the declared environments")
        if set(self.survival) != set(envs):
            raise SpecError("survival parameters must cover exactly the declared environments")
        for e, prof in self.survival.items():
            if not (0.0 <= prof.p0 <= 1.0 and 0.0 <= prof.p_inf <= 1.0):
                raise SpecError(f"survival probabilities for {e!r} must lie in [0, 1]")

    def env_index(self, e: str) -> int:
        try:
            return self.environments.index(e)
        except ValueError:
            raise SpecError(f"unknown environment label {e!r}") from None

    def survival_prob(self, x, e: str):
        if e not in self.survival:
            raise SpecError(f"unknown environment label {e!r}")
        return self.survival[e](x)

    def settle_age(self) -> int:
        return max(self.fertility.settle_age(), *(p.settle_age() for p in self.survival.values()))

    def mean_tables(self, max_age: int) -> tuple[np.ndarray, np.ndarray]:
        """``(f, s)`` arrays of shape (n_env, max_age + 1)."""
        cached = self._cache.get("tables")
        if cached is None or cached[0].shape[1] <= max_age:
            size = max(max_age + 1, 2 * (cached[0].shape[1] if cached else 0), 64)
            ages = np.arange(size)
            f = np.vstack([np.broadcast_to(self.fertility.mean(ages, e), (size,)) for e in self.environments])
            s = np.vstack([np.broadcast_to(self.survival[e](ages), (size,)) for e in self.environments])
            f.setflags(write=False)
            s.setflags(write=False)
            cached = (f, s)
            self._cache["tables"] = cached
        return cached[0][:, : max_age + 1], cached[1][:, : max_age + 1]

    def env_marginal(self) -> np.ndarray:
        return self.env_process.marginal(self.environments)

    @property
    def is_iid(self) -> bool:
        return isinstance(self.env_process, (IIDEnv, ConstantEnv))

    def generate_envs(self, length: int, seed: int) -> EnvSequence:
        return generate_env_sequence(self.env_process, self.environments, length, seed)

    # --- serialization ----------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "environments": list(self.environments),
            "fertility": self.fertility.to_dict(),
            "survival": {e: self.survival[e].to_dict() for e in self.environments},
            "env_process": self.env_process.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "LeslieSpec":
        _check_keys(d, {"environments", "fertility", "survival", "env_process"}, set(), "spec")
        labels = tuple(d["environments"])
        fert = d["fertility"]
        _check_keys(fert, {"kind", "params"}, set(), "fertility")
        try:
            family_cls = FAMILIES[fert["kind"]]
        except KeyError:
            raise SpecError(f"fertility.kind: unknown kind {fert['kind']!r}; expected one of {sorted(FAMILIES)}") from None
        family = family_cls.from_params(fert["params"], labels)
        surv_raw = d["survival"]
        if not isinstance(surv_raw, Mapping) or set(surv_raw) != set(labels):
            raise SpecError(f"survival: need a profile for each of {sorted(labels)}")
        survival = {e: Profile.from_dict(surv_raw[e], f"survival.{e}") for e in labels}
        return cls(labels, family, survival, env_process_from_dict(d["env_process"], labels))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def load_spec(path) -> LeslieSpec:
    return LeslieSpec.from_dict(json.loads(Path(path).read_text()))


def dump_spec(spec: LeslieSpec, path) -> None:
    Path(path).write_text(spec.to_json() + "\n")


# ---------------------------------------------------------------------------
# Offspring law of one individual
# ---------------------------------------------------------------------------


def offspring_pmf(spec: LeslieSpec, x: int, e: str, k: int, sigma: int) -> float:
    """``P[F(x,e) = k] * P[S(x,e) = sigma]``."""
    if sigma not in (0, 1):
        raise ValueError("sigma must be 0 or 1")
    s = float(spec.survival_prob(x, e))
    return float(spec.fertility.pmf(k, x, e)) * (s if sigma else 1.0 - s)


def sample_offspring(spec: LeslieSpec, x: int, e: str, rng) -> tuple[int, int]:
    k = spec.fertility.sample(x, e, rng)
    sigma = int(rng.random() < float(spec.survival_prob(x, e)))
    return k, sigma


# ---------------------------------------------------------------------------
# Populations
# ---------------------------------------------------------------------------


class AgePopulation:
    """Finite point measure on ages, stored as ``{age: count}`` with positive counts."""

    __slots__ = ("_counts", "total")

    def __init__(self, counts: Mapping[int, int] | None = None):
        clean = {}
        for a, c in (counts or {}).items():
            a, c = int(a), int(c)
            if a < 0 or c < 0:
                raise ValueError("ages and counts must be nonnegative")
            if c:
                clean[a] = c
        self._counts = dict(sorted(clean.items()))
        self.total = sum(self._counts.values())

    @classmethod
    def single(cls, age: int = 0, count: int = 1) -> "AgePopulation":
        return cls({age: count})

    @classmethod
    def from_array(cls, arr) -> "AgePopulation":
        arr = np.asarray(arr)
        nz = np.nonzero(arr)[0]
        return cls({int(a): int(arr[a]) for a in nz})

    @property
    def counts(self) -> dict:
        return dict(self._counts)

    def __getitem__(self, age: int) -> int:
        return self._counts.get(age, 0)

    def __bool__(self):
        return self.total > 0

    def __eq__(self, other):
        return isinstance(other, AgePopulation) and self._counts == other._counts

    def __hash__(self):
        return hash(tuple(self._counts.items()))

    def __repr__(self):
        return f"AgePopulation({self._counts})"

    @property
    def max_age(self) -> int:
        return max(self._counts) if self._counts else -1

    def to_array(self, size: int | None = None) -> np.ndarray:
        size = self.max_age + 1 if size is None else size
        arr = np.zeros(max(size, 0), dtype=np.int64)
        for a, c in self._counts.items():
            arr[a] = c
        return arr

    def integrate(self, fn) -> float:
        """``Z(f)`` for ``f`` given as an array indexed by age."""
        fn = np.asarray(fn, dtype=float)
        return float(sum(c * fn[a] for a, c in self._counts.items()))


def monotonicity_violation(spec: LeslieSpec) -> tuple | None:
    """Witness ``(x, e, detail)`` that F or S fails to be nonincreasing in age.

    Parameter monotonicity of the declared profiles is checked here; the
    numeric CDF-grid check lives in :mod:`agebranch.verify`.
    """
    w = spec.fertility.monotonicity_witness()
    if w is not None:
        return w
    for e, p in spec.survival.items():
        if not p.is_nonincreasing:
            return (0, e, "survival increases with age")
    return None
