"""Experiment configuration: strict schema, defaults and a stable hash."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

from agebranch.fixtures import FIXTURES, get_fixture
from agebranch.model import AgePopulation, LeslieSpec, SpecError, load_spec

EXPERIMENTS = ("semigroup", "simulate", "spine", "kesten-stigum", "type-freq", "ext-expl", "check", "appendix")

# default parameters per experiment; any other key is rejected
DEFAULTS = {
    "semigroup": {"n": 200, "tol": 1e-10, "profile_ks": [0, 1, 2], "gap_samples": 200, "gap_max_age": 8},
    "simulate": {"n_max": 50, "replicates": 100, "cap": 10_000_000, "z0": {"0": 1}, "w_floor": 1e-6},
    "spine": {"n": 200, "runs": 100, "x0": 0, "n_min": 100, "cap": 10_000_000},
    "kesten-stigum": {"n_max": 50, "replicates": 10_000, "cap": 10_000_000, "z0": {"0": 1}, "eps": 0.5},
    "type-freq": {"n_max": 30, "replicates": 3000, "cap": 10_000_000, "z0": {"0": 1}, "test_ages": [0]},
    "ext-expl": {"n_max": 100, "replicates": 10_000, "cap": 10_000_000, "z0": {"0": 1}, "w_floor": 1e-6},
    "check": {"eps": 0.5},
    "appendix": {"a_min": 1.1, "a_max": 6.0, "s_min": 1.1, "s_max": 6.0, "grid": 20,
                 "eps_grid": [0.1, 0.5, 1.0, 2.0], "kmax": 1_000_000},
}

TOP_KEYS = {"experiment", "spec", "seed", "params"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    spec_ref: object  # fixture name, path, or inline mapping; None for appendix
    seed: int
    params: dict

    def resolved(self) -> dict:
        spec = self.spec_ref
        if spec is not None:
            spec = self.load_spec().to_dict()
        return {"experiment": self.experiment, "spec": spec, "seed": self.seed, "params": self.params}

    def hash(self) -> str:
        text = json.dumps(self.resolved(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def load_spec(self) -> LeslieSpec:
        ref = self.spec_ref
        if isinstance(ref, Mapping):
            return LeslieSpec.from_dict(ref)
        if isinstance(ref, str) and ref.startswith("fixture:"):
            return get_fixture(ref.split(":", 1)[1])
        if isinstance(ref, str):
            return load_spec(ref)
        raise ConfigError("spec: required for this experiment")

    def z0(self) -> AgePopulation:
        return AgePopulation({int(a): int(c) for a, c in self.params["z0"].items()})


def _check_positive(value, where):
    if isinstance(value, bool):
        raise ConfigError(f"{where}: expected a number, got a boolean")
    if isinstance(value, (int, float)):
        if not value > 0:
            raise ConfigError(f"{where}: must be positive, got {value}")
    elif isinstance(value, list):
        for i, v in enumerate(value):
            _check_positive(v, f"{where}[{i}]")
    elif isinstance(value, Mapping):
        for k, v in value.items():
            _check_positive(v, f"{where}.{k}")
    else:
        raise ConfigError(f"{where}: unsupported value {value!r}")


def _nonneg_ints(value, where):
    if not isinstance(value, list) or not all(isinstance(v, int) and v >= 0 for v in value):
        raise ConfigError(f"{where}: expected a list of nonnegative integers")


def parse_config(raw: Mapping, experiment: str, seed: int | None = None) -> ExperimentConfig:
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"experiment: unknown kind {experiment!r}; expected one of {list(EXPERIMENTS)}")
    if not isinstance(raw, Mapping):
        raise ConfigError("config: expected a JSON object")
    unknown = set(raw) - TOP_KEYS
    if unknown:
        raise ConfigError(f"config: unknown key(s) {sorted(unknown)}")
    if "experiment" in raw and raw["experiment"] != experiment:
        raise ConfigError(f"experiment: config says {raw['experiment']!r} but subcommand is {experiment!r}")
    params_raw = raw.get("params", {})
    if not isinstance(params_raw, Mapping):
        raise ConfigError("params: expected an object")
    defaults = DEFAULTS[experiment]
    unknown = set(params_raw) - set(defaults)
    if unknown:
        raise ConfigError(f"params: unknown key(s) {sorted(unknown)} for {experiment}; allowed {sorted(defaults)}")
    params = {**defaults, **params_raw}
    for k, v in params.items():
        if k in ("profile_ks", "test_ages"):
            _nonneg_ints(v, f"params.{k}")
        elif k == "x0":
            if not isinstance(v, int) or v < 0:
                raise ConfigError("params.x0: expected a nonnegative integer")
        elif k == "z0":
            if not isinstance(v, Mapping) or not v:
                raise ConfigError("params.z0: expected a nonempty object {age: count}")
            for a, c in v.items():
                if not str(a).isdigit():
                    raise ConfigError(f"params.z0.{a}: ages must be nonnegative integers")
                _check_positive(c, f"params.z0.{a}")
        else:
            _check_positive(v, f"params.{k}")
    if experiment == "appendix":
        spec_ref = None
    else:
        spec_ref = raw.get("spec")
        if spec_ref is None:
            raise ConfigError("spec: required (fixture:NAME, a path, or an inline spec)")
        if isinstance(spec_ref, str) and spec_ref.startswith("fixture:") and spec_ref[8:] not in FIXTURES:
            raise ConfigError(f"spec: unknown fixture {spec_ref[8:]!r}; available {sorted(FIXTURES)}")
    if seed is None:
        seed = raw.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ConfigError(f"seed: expected an unsigned 64-bit integer, got {seed!r}")
    cfg = ExperimentConfig(experiment, spec_ref, seed, params)
    if spec_ref is not None:
        try:
            cfg.load_spec()
        except (SpecError, OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"spec: {exc}") from exc
    return cfg


def load_config(path, experiment: str, seed: int | None = None) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    spec_ref = raw.get("spec") if isinstance(raw, Mapping) else None
    if isinstance(spec_ref, str) and not spec_ref.startswith("fixture:"):
        # spec paths are relative to the config file
        raw = {**raw, "spec": str((Path(path).parent / spec_ref).resolve())}
    return parse_config(raw, experiment, seed)
