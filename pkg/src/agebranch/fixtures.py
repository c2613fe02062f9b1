"""Bundled model fixtures used by the tests, the acceptance suite and the CLI.

``l2toy`` and ``pure_birth`` have zero survival somewhere and so fail the
positivity part of assumption H; they are numeric fixtures only.
"""

from __future__ import annotations

from agebranch.model import (
    BoundedSupport,
    ConstantEnv,
    GeometricTail,
    IIDEnv,
    LeslieSpec,
    MarkovEnv,
    PoissonFamily,
    PolyTail,
    Profile,
    constant,
)


def l2toy() -> LeslieSpec:
    """Ages {0, 1}: F uniform on {1, 2} at age 0, F = 1 at age 1, s = (0.5, 0)."""
    fert = BoundedSupport({"a": {"pmfs": [[0.0, 0.5, 0.5], [0.0, 1.0]]}})
    return LeslieSpec(("a",), fert, {"a": Profile(0.5, 0.0, 0.0)}, ConstantEnv("a"))


def pure_birth() -> LeslieSpec:
    """No survival; F = 1 or F = 4 with equal probability on the environment."""
    fert = BoundedSupport({"lo": {"pmfs": [[0.0, 1.0]]}, "hi": {"pmfs": [[0.0, 0.0, 0.0, 0.0, 1.0]]}})
    return LeslieSpec(("lo", "hi"), fert, {"lo": constant(0.0), "hi": constant(0.0)},
                      IIDEnv((("lo", 0.5), ("hi", 0.5))))


def deterministic(sigma: float = 1.0) -> LeslieSpec:
    """F = 1 always and constant survival ``sigma``."""
    fert = BoundedSupport({"a": {"pmfs": [[0.0, 1.0]]}})
    return LeslieSpec(("a",), fert, {"a": constant(sigma)}, ConstantEnv("a"))


def geometric_supercritical() -> LeslieSpec:
    """Two IID environments, geometric newborn counts, all parameters decaying with age."""
    q = {"good": Profile(0.5, 0.3, 0.6), "bad": Profile(0.45, 0.25, 0.6)}
    s = {"good": Profile(0.5, 0.25, 0.7), "bad": Profile(0.45, 0.2, 0.7)}
    return LeslieSpec(("good", "bad"), GeometricTail(q), s, IIDEnv((("good", 0.5), ("bad", 0.5))))


def geometric_markov() -> LeslieSpec:
    """The geometric fixture driven by a sticky two-state Markov chain."""
    base = geometric_supercritical()
    return LeslieSpec(base.environments, base.fertility, base.survival,
                      MarkovEnv(((0.8, 0.2), (0.3, 0.7))))


def subcritical() -> LeslieSpec:
    q = {"a": Profile(0.3, 0.2, 0.5), "b": Profile(0.2, 0.1, 0.5)}
    s = {"a": Profile(0.3, 0.1, 0.5), "b": Profile(0.2, 0.1, 0.5)}
    return LeslieSpec(("a", "b"), GeometricTail(q), s, IIDEnv((("a", 0.5), ("b", 0.5))))


def polytail(delta0: float = 2.5, delta_inf: float = 3.0) -> LeslieSpec:
    """Power-law newborn counts ``P[F >= k] = k**-delta`` with delta rising with age."""
    d = {"a": Profile(delta0, delta_inf, 0.5), "b": Profile(delta0 + 0.3, delta_inf + 0.3, 0.5)}
    s = {"a": Profile(0.5, 0.2, 0.5), "b": Profile(0.4, 0.2, 0.5)}
    return LeslieSpec(("a", "b"), PolyTail(d), s, IIDEnv((("a", 0.5), ("b", 0.5))))


def poisson() -> LeslieSpec:
    m = {"a": Profile(1.2, 0.6, 0.5), "b": Profile(0.8, 0.4, 0.5)}
    s = {"a": Profile(0.5, 0.2, 0.5), "b": Profile(0.4, 0.2, 0.5)}
    return LeslieSpec(("a", "b"), PoissonFamily(m), s, IIDEnv((("a", 0.5), ("b", 0.5))))


def binomial() -> LeslieSpec:
    """Bounded support: binomial(2, p) newborns with p decaying in age."""
    fert = BoundedSupport({
        "a": {"binomial": {"trials": 2, "p": Profile(0.6, 0.3, 0.5)}},
        "b": {"binomial": {"trials": 2, "p": Profile(0.4, 0.2, 0.5)}},
    })
    s = {"a": Profile(0.5, 0.2, 0.5), "b": Profile(0.4, 0.2, 0.5)}
    return LeslieSpec(("a", "b"), fert, s, IIDEnv((("a", 0.5), ("b", 0.5))))


def increasing_fertility() -> LeslieSpec:
    """Counterexample for stochastic monotonicity: q grows with age."""
    q = {"a": Profile(0.2, 0.5, 0.5)}
    return LeslieSpec(("a",), GeometricTail(q), {"a": Profile(0.5, 0.2, 0.5)}, ConstantEnv("a"))


FIXTURES = {
    "l2toy": l2toy,
    "pure-birth": pure_birth,
    "deterministic": deterministic,
    "geometric": geometric_supercritical,
    "geometric-markov": geometric_markov,
    "subcritical": subcritical,
    "polytail": polytail,
    "poisson": poisson,
    "binomial": binomial,
    "increasing-fertility": increasing_fertility,
}


def get_fixture(name: str) -> LeslieSpec:
    try:
        return FIXTURES[name]()
    except KeyError:
        raise KeyError(f"unknown fixture {name!r}; available: {sorted(FIXTURES)}") from None
