"""Experiment configuration: JSON in, validated :class:`ExperimentConfig` out.

A minimal file is ``{"benchmark": "bangbang"}``; every other field has a
default, some of them benchmark specific (see ``BENCHMARK_DEFAULTS``).
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

from .oracles import BENCHMARKS

__all__ = ["ConfigError", "ExperimentConfig", "MODES", "validate_config", "load_config", "BENCHMARK_DEFAULTS"]

MODES = ("brute", "randomized", "bsde", "oracle", "campaign")
ESTIMATORS = ("direct", "reweighted")
BASES = ("polynomial", "hat")


class ConfigError(ValueError):
    """Invalid configuration; ``path`` is the offending field."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


# Per-benchmark defaults for the sections below.  Tolerances combine as
# max(absolute, relative * |oracle|, 3 SE, 2 grid errors).
BENCHMARK_DEFAULTS = {
    "bangbang": {
        "brute": {"pieces": 4, "state_bins": None, "backward": False, "n_start": 2000, "cap": 4096},
        "randomized": {"family": "bangbang", "nu_min": 1e-3, "nu_max": 20.0},
        "bsde": {"basis": "hat", "degree": 3, "n_knots": 24},
        "oracle": {"fd_nx": 161, "fd_range": [-4.0, 4.0]},
        "tolerance": {"absolute": 0.1, "relative": 0.0},
    },
    "lqgrid": {
        "brute": {
            "pieces": 10,
            "state_bins": [-1.5 + 0.25 * k for k in range(13)],
            "backward": True,
            "n_start": 500,
            "cap": 4096,
        },
        "randomized": {"family": "lqgrid", "nu_min": 1e-3, "nu_max": 1000.0},
        "bsde": {"basis": "polynomial", "degree": 3, "n_knots": 24},
        "oracle": {"fd_nx": 401, "fd_range": [-5.0, 5.0]},
        "tolerance": {"absolute": 0.0, "relative": 0.05},
    },
    "gbm_terminal": {
        "brute": {"pieces": 1, "state_bins": None, "backward": False, "n_start": 2000, "cap": 4096},
        "randomized": {"family": "constant", "nu_min": 1e-3, "nu_max": 20.0},
        "bsde": {"basis": "polynomial", "degree": 3, "n_knots": 24},
        "oracle": {"fd_nx": 401, "fd_range": [0.0, 8.0]},
        "tolerance": {"absolute": 0.0, "relative": 0.0},
    },
}

COMMON_DEFAULTS = {
    "mode": "campaign",
    "seed": 0,
    "n_paths": 100_000,
    "n_steps": 100,
    "out": "results",
    "randomized": {"budget": 40, "search_paths": 20_000, "estimator": "direct", "sweeps": 3},
    "bsde": {"schedule": [1, 2, 4, 8, 16, 32, 64], "stop_tol": None},
}


@dataclass
class ExperimentConfig:
    benchmark: str
    parameters: dict
    mode: str
    seed: int
    n_paths: int
    n_steps: int
    out: str
    brute: dict
    randomized: dict
    bsde: dict
    oracle: dict
    tolerance: dict
    action_space: dict | None = None
    extras: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def canonical_json(self):
        """Sorted compact JSON of everything except the output directory."""
        d = self.to_dict()
        d.pop("out")
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    def config_hash(self):
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]

    def with_overrides(self, **kwargs):
        new = copy.deepcopy(self)
        for k, v in kwargs.items():
            if v is not None:
                setattr(new, k, v)
        return new


def _merge(base, override, path):
    out = copy.deepcopy(base)
    if override is None:
        return out
    if not isinstance(override, dict):
        raise ConfigError(path, "must be an object")
    for k, v in override.items():
        if k not in base:
            raise ConfigError(f"{path}.{k}", f"unknown field; expected one of {sorted(base)}")
        out[k] = v
    return out


def _positive_int(value, path, allow_zero=False):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(path, f"must be an integer, got {value!r}")
    if value < 0 or (value == 0 and not allow_zero):
        raise ConfigError(path, f"must be {'non-negative' if allow_zero else 'positive'}, got {value}")
    return value


def _number(value, path, positive=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ConfigError(path, f"must be a finite number, got {value!r}")
    if positive and value <= 0:
        raise ConfigError(path, f"must be positive, got {value}")
    return float(value)


def _check_action_space(raw, path="action_space"):
    if raw is None:
        return None
    if not isinstance(raw, dict) or raw.get("kind") != "finite":
        raise ConfigError(f"{path}.kind", 'only {"kind": "finite", ...} action spaces are configurable')
    marks, weights = raw.get("marks"), raw.get("weights")
    if not isinstance(marks, list) or not marks:
        raise ConfigError(f"{path}.marks", "must be a non-empty list")
    if not isinstance(weights, list) or len(weights) != len(marks):
        raise ConfigError(f"{path}.weights", "must be a list with one weight per mark")
    for k, w in enumerate(weights):
        _number(w, f"{path}.weights[{k}]", positive=True)
    for k, a in enumerate(marks):
        _number(a, f"{path}.marks[{k}]")
    if "a0" not in raw or raw["a0"] not in marks:
        raise ConfigError(f"{path}.a0", "must be one of the marks")
    return {"kind": "finite", "marks": [float(a) for a in marks], "weights": [float(w) for w in weights], "a0": float(raw["a0"])}


def validate_config(text):
    """Parse JSON ``text`` and return a validated :class:`ExperimentConfig`.

    Raises
    ------
    ConfigError
        With the dotted path of the first offending field.
    """
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"malformed JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("", "top level must be a JSON object")
    known = {
        "benchmark", "parameters", "mode", "seed", "n_paths", "n_steps", "out",
        "brute", "randomized", "bsde", "oracle", "tolerance", "action_space",
    }
    for k in raw:
        if k not in known:
            raise ConfigError(k, f"unknown field; expected one of {sorted(known)}")

    bench = raw.get("benchmark")
    if bench is None:
        raise ConfigError("benchmark", f"required; one of {sorted(BENCHMARKS)}")
    if bench not in BENCHMARKS:
        raise ConfigError("benchmark", f"unknown benchmark {bench!r}; registered: {sorted(BENCHMARKS)}")
    spec = BENCHMARKS[bench]
    params = _merge(spec.parameters, raw.get("parameters"), "parameters")
    for k, v in params.items():
        _number(v, f"parameters.{k}")
    if "horizon" in params:
        _number(params["horizon"], "parameters.horizon", positive=True)

    mode = raw.get("mode", COMMON_DEFAULTS["mode"])
    if mode not in MODES:
        raise ConfigError("mode", f"must be one of {list(MODES)}, got {mode!r}")
    seed = _positive_int(raw.get("seed", COMMON_DEFAULTS["seed"]), "seed", allow_zero=True)
    if seed >= 2**64:
        raise ConfigError("seed", "must fit in 64 bits")
    n_paths = _positive_int(raw.get("n_paths", COMMON_DEFAULTS["n_paths"]), "n_paths")
    n_steps = _positive_int(raw.get("n_steps", COMMON_DEFAULTS["n_steps"]), "n_steps")
    out = raw.get("out", COMMON_DEFAULTS["out"])
    if not isinstance(out, str) or not out:
        raise ConfigError("out", "must be a non-empty path string")

    defaults = BENCHMARK_DEFAULTS[bench]
    brute = _merge(defaults["brute"], raw.get("brute"), "brute")
    _positive_int(brute["pieces"], "brute.pieces")
    _positive_int(brute["n_start"], "brute.n_start")
    _positive_int(brute["cap"], "brute.cap")
    if brute["state_bins"] is not None:
        bins = brute["state_bins"]
        if not isinstance(bins, list) or any(b2 <= b1 for b1, b2 in zip(bins, bins[1:])):
            raise ConfigError("brute.state_bins", "must be an increasing list of bin edges")

    randomized = _merge({**COMMON_DEFAULTS["randomized"], **defaults["randomized"]}, raw.get("randomized"), "randomized")
    nu_min = _number(randomized["nu_min"], "randomized.nu_min", positive=True)
    nu_max = _number(randomized["nu_max"], "randomized.nu_max", positive=True)
    if nu_min >= nu_max:
        raise ConfigError(
            "randomized.nu_min",
            f"nu_min={nu_min:g} must be below nu_max={nu_max:g}: admissible intensities take values in (nu_min, nu_max] (V-bound invariant)",
        )
    if randomized["estimator"] not in ESTIMATORS:
        raise ConfigError("randomized.estimator", f"must be one of {list(ESTIMATORS)}")
    if randomized["family"] not in ("bangbang", "lqgrid", "constant"):
        raise ConfigError("randomized.family", "must be one of ['bangbang', 'constant', 'lqgrid']")
    _positive_int(randomized["budget"], "randomized.budget")
    _positive_int(randomized["search_paths"], "randomized.search_paths")
    _positive_int(randomized["sweeps"], "randomized.sweeps")

    bsde = _merge({**COMMON_DEFAULTS["bsde"], **defaults["bsde"]}, raw.get("bsde"), "bsde")
    sched = bsde["schedule"]
    if not isinstance(sched, list) or not sched:
        raise ConfigError("bsde.schedule", "must be a non-empty list of penalties")
    for k, n in enumerate(sched):
        _number(n, f"bsde.schedule[{k}]")
        if n < 0:
            raise ConfigError(f"bsde.schedule[{k}]", "penalties must be non-negative")
    if any(b2 <= b1 for b1, b2 in zip(sched, sched[1:])):
        raise ConfigError("bsde.schedule", "must be increasing")
    if bsde["stop_tol"] is not None:
        _number(bsde["stop_tol"], "bsde.stop_tol")
    if bsde["basis"] not in BASES:
        raise ConfigError("bsde.basis", f"must be one of {list(BASES)}")
    _positive_int(bsde["degree"], "bsde.degree")
    _positive_int(bsde["n_knots"], "bsde.n_knots")

    oracle = _merge(defaults["oracle"], raw.get("oracle"), "oracle")
    nx = _positive_int(oracle["fd_nx"], "oracle.fd_nx")
    if nx < 5 or nx % 2 == 0:
        raise ConfigError("oracle.fd_nx", "must be odd and at least 5 (the grid error halves it)")
    rng = oracle["fd_range"]
    if not isinstance(rng, list) or len(rng) != 2 or not rng[0] < rng[1]:
        raise ConfigError("oracle.fd_range", "must be [x_lo, x_hi] with x_lo < x_hi")

    tolerance = _merge(defaults["tolerance"], raw.get("tolerance"), "tolerance")
    _number(tolerance["absolute"], "tolerance.absolute")
    _number(tolerance["relative"], "tolerance.relative")

    action_space = _check_action_space(raw.get("action_space"))
    if action_space is not None and bench == "bangbang" and sorted(action_space["marks"]) != [-1.0, 1.0]:
        raise ConfigError("action_space.marks", "the bang-bang benchmark needs marks [-1, 1]")

    # the explicit penalty recursion is monotone only for n λ(A) Δ <= 1
    if action_space is not None:
        mass = sum(action_space["weights"])
    else:
        mass = spec.problem(**params).space.total_mass
    dt = params.get("horizon", 1.0) / n_steps
    if max(sched) * mass * dt > 1 + 1e-12:
        raise ConfigError(
            "bsde.schedule",
            f"largest penalty {max(sched):g} violates n*lambda(A)*dt <= 1 (lambda(A)={mass:g}, dt={dt:g}); raise n_steps",
        )
    return ExperimentConfig(
        benchmark=bench,
        parameters=params,
        mode=mode,
        seed=seed,
        n_paths=n_paths,
        n_steps=n_steps,
        out=out,
        brute=brute,
        randomized=randomized,
        bsde=bsde,
        oracle=oracle,
        tolerance=tolerance,
        action_space=action_space,
    )


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError("", f"cannot read config file {path}: {exc}") from None
    return validate_config(text)
