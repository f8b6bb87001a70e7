"""Experiment configuration files.

A configuration is a TOML document. Top-level keys describe the run; tables
describe the action grid, the coefficients, the cost, the reference control
and experiment-specific settings. Unknown keys are rejected so typos fail
loudly.

Example::

    experiment = "simulate"
    seed = 7
    scenarios = 10000
    steps = 64
    horizon = 1.0
    x0 = 1.0

    [grid]
    points = [0.0]

    [model.phi]
    kind = "constant"
    value = 0.05

    [model.psi]
    kind = "constant"
    value = 0.2

    [cost]
    kind = "mean-variance"
    kappa = 1.05
"""

from __future__ import annotations

import hashlib
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from relaxctl.errors import ConfigError

EXPERIMENTS = ("simulate", "adjoint", "optimize", "certify", "chatter-sweep", "bond-demo",
               "convergence")
COEFFICIENTS = ("upsilon", "phi", "chi", "psi")
COEFFICIENT_KINDS = ("constant", "time-poly", "table")

_TOP = {"experiment", "seed", "scenarios", "steps", "horizon", "x0", "threads", "antithetic",
        "scheme", "grid", "model", "market", "cost", "control", "simulate", "adjoint",
        "optimize", "certify", "chatter", "bond", "convergence"}
_SECTIONS = {
    "grid": {"points", "lo", "hi", "count"},
    "market": {"kind", "sigma", "c", "theta", "T_star", "initial_curve", "atoms"},
    "cost": {"kind", "kappa", "h2", "h1", "h0", "g2", "g1", "g0"},
    "control": {"kind", "index", "weights", "path"},
    "simulate": {"export_scenarios", "moments"},
    "adjoint": {"backend", "export_scenarios"},
    "optimize": {"max_iterations", "beta", "backtrack", "min_beta", "tolerance", "relative",
                 "mode", "control_class", "bins", "backend"},
    "certify": {"tolerance", "relative", "mode", "backend"},
    "chatter": {"ks", "backend"},
    "bond": {"maturities", "refinements", "track_steps"},
    "convergence": {"levels"},
}
_COEFFICIENT_KEYS = {"kind", "value", "coefficients", "times", "values"}


@dataclass(frozen=True)
class RunConfig:
    """Validated experiment settings plus the raw text hash."""

    experiment: str
    seed: int
    scenarios: int
    steps: int
    horizon: float
    x0: float
    threads: int
    antithetic: bool
    scheme: str
    sections: dict = field(repr=False)
    sha256: str = ""

    def section(self, name: str) -> dict:
        return self.sections.get(name, {})

    @property
    def time_grid(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.steps + 1)


def _positive_int(raw, key):
    v = raw.get(key)
    if not isinstance(v, int) or isinstance(v, bool) or v < 1:
        raise ConfigError(f"{key!r} must be a positive integer, got {v!r}")
    return v


def _check_keys(table: dict, allowed: set, where: str) -> None:
    unknown = sorted(set(table) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) {', '.join(unknown)} in {where}")


def parse_config(text: str) -> RunConfig:
    """Parse and validate configuration text."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config parse error: {exc}") from exc
    _check_keys(raw, _TOP, "the top level")
    experiment = raw.get("experiment")
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"'experiment' must be one of {', '.join(EXPERIMENTS)}")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0 or seed >= 2**64:
        raise ConfigError("'seed' must be an integer in [0, 2^64)")
    horizon = float(raw.get("horizon", 1.0))
    if not horizon > 0:
        raise ConfigError("'horizon' must be positive")
    scheme = raw.get("scheme", "exact")
    if scheme not in ("exact", "euler"):
        raise ConfigError("'scheme' must be 'exact' or 'euler'")
    sections = {}
    for name, allowed in _SECTIONS.items():
        if name in raw:
            if not isinstance(raw[name], dict):
                raise ConfigError(f"[{name}] must be a table")
            _check_keys(raw[name], allowed, f"[{name}]")
            sections[name] = raw[name]
    if "model" in raw:
        model = raw["model"]
        if not isinstance(model, dict):
            raise ConfigError("[model] must be a table")
        _check_keys(model, set(COEFFICIENTS) | {"kind"}, "[model]")
        for name in COEFFICIENTS:
            if name in model:
                _check_keys(model[name], _COEFFICIENT_KEYS, f"[model.{name}]")
                if model[name].get("kind", "constant") not in COEFFICIENT_KINDS:
                    raise ConfigError(f"[model.{name}] kind must be one of "
                                      f"{', '.join(COEFFICIENT_KINDS)}")
        if model.get("kind", "coefficients") not in ("coefficients", "bond-market"):
            raise ConfigError("[model] kind must be 'coefficients' or 'bond-market'")
        if model.get("kind") == "bond-market" and "market" not in raw:
            raise ConfigError("a bond-market model needs a [market] table")
        sections["model"] = model
    threads = raw.get("threads", 1)
    if not isinstance(threads, int) or threads < 1:
        raise ConfigError("'threads' must be a positive integer")
    return RunConfig(
        experiment=experiment, seed=seed, scenarios=_positive_int(raw, "scenarios"),
        steps=_positive_int(raw, "steps"), horizon=horizon, x0=float(raw.get("x0", 1.0)),
        threads=threads, antithetic=bool(raw.get("antithetic", False)), scheme=scheme,
        sections=sections, sha256=hashlib.sha256(text.encode()).hexdigest())


def load_config(path) -> RunConfig:
    """Read and validate a configuration file."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
