"""Command line: ``randcontrol <mode> --config <path> --seed <u64> --out <dir>``.

Modes ``brute``, ``randomized``, ``bsde`` and ``oracle`` run one estimator
and write its CSV; ``campaign`` runs all four on one benchmark and checks
the three value estimates against the oracle.

Exit codes: 0 pass, 1 tolerance failure, 2 configuration error,
3 numerical error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .bsde import RegressionBasis, RegressionError, solve_constrained
from .config import MODES, ConfigError, ExperimentConfig, load_config, validate_config
from .control import value_brute_force
from .oracles import (
    FdGrid,
    bangbang_closed_form,
    fd_value,
    get_benchmark,
    hjb_fd_solve,
    linear_expectation_oracle,
)
from .point_process import ActionSpace, IntensityField
from .randomized import IntensityFamily, optimize_intensity

__all__ = ["CampaignRow", "CampaignReport", "build_problem", "run_mode", "run_campaign", "build_id", "main"]

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3
NUMERICAL_ERRORS = (RegressionError, FloatingPointError, OverflowError, ZeroDivisionError, np.linalg.LinAlgError, ValueError)


def build_id():
    """Git-style identifier of the installed sources.

    Each module is hashed as a git blob; the identifier is the first 12 hex
    digits of the SHA-1 over the sorted ``(name, blob hash)`` list.
    """
    root = Path(__file__).resolve().parent
    outer = hashlib.sha1()
    for path in sorted(root.glob("*.py")):
        data = path.read_bytes()
        blob = hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()
        outer.update(f"{path.name} {blob}\n".encode())
    return f"{__version__}+{outer.hexdigest()[:12]}"


# ----------------------------------------------------------------------
# Building blocks from a config


def build_problem(config: ExperimentConfig):
    spec = get_benchmark(config.benchmark).problem(**config.parameters)
    if config.action_space is not None:
        a = config.action_space
        spec = dataclasses.replace(spec, space=ActionSpace.finite(a["marks"], a["weights"], a["a0"]))
    return spec


def build_family(config, spec):
    r = config.randomized
    if r["family"] == "constant":
        # ν ≡ 1: the base measure, the only member needed when control plays no role
        m = spec.space.size
        return IntensityFamily("constant", lambda theta: IntensityField.constant(theta[0], m), [1.0], [[1.0]], min(r["nu_min"], 1.0), max(r["nu_max"], 1.0))
    return get_benchmark(r["family"]).family(spec.space, nu_max=r["nu_max"], nu_min=r["nu_min"])


def build_basis(config):
    b = config.bsde
    return RegressionBasis(b["basis"], degree=b["degree"], n_knots=b["n_knots"])


# ----------------------------------------------------------------------
# CSV output


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(path, header, rows, config):
    """CSV with a provenance comment line and a header row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# seed={config.seed} build={build_id()} config={config.config_hash()}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


# ----------------------------------------------------------------------
# Single modes


def run_oracle(config, spec):
    """Oracle value at ``(0, x0)`` with its uncertainty and an FD surface."""
    kind = get_benchmark(config.benchmark).oracle_kind
    lo, hi = config.oracle["fd_range"]
    nx = config.oracle["fd_nx"]
    surface = hjb_fd_solve(spec, FdGrid(lo, hi, nx))
    x0 = float(spec.x0[0])
    if kind == "closed_form":
        value, se, grid_error = float(bangbang_closed_form(x0, 0.0, spec.horizon)), 0.0, 0.0
    elif kind == "fd_pde":
        value, grid_error = fd_value(spec, (lo, hi), nx)
        se = 0.0
    else:
        est = linear_expectation_oracle(spec, config.n_paths, config.seed, config.n_steps)
        value, se, grid_error = est.value, est.se, 0.0
    return {"kind": kind, "value": value, "se": se, "grid_error": grid_error, "surface": surface}


def _surface_rows(surface, n_times=11):
    ks = np.unique(np.round(np.linspace(0, surface.t.size - 1, n_times)).astype(int))
    for k in ks:
        for x, v in zip(surface.x, surface.v[k]):
            yield (surface.t[k], x, v)


def run_brute(config, spec):
    b = config.brute
    return value_brute_force(
        spec,
        b["pieces"],
        state_bins=b["state_bins"],
        n_paths=config.n_paths,
        seed=config.seed,
        n_steps=config.n_steps,
        cap=b["cap"],
        backward=b["backward"],
        n_start=b["n_start"],
    )


def run_randomized(config, spec):
    r = config.randomized
    return optimize_intensity(
        spec,
        build_family(config, spec),
        budget=r["budget"],
        n_paths=r["search_paths"],
        seed=config.seed,
        estimator=r["estimator"],
        n_steps=config.n_steps,
        sweeps=r["sweeps"],
        final_paths=config.n_paths,
    )


def run_bsde(config, spec):
    b = config.bsde
    return solve_constrained(
        spec,
        b["schedule"],
        stop_tol=b["stop_tol"],
        basis=build_basis(config),
        n_paths=config.n_paths,
        seed=config.seed,
        n_steps=config.n_steps,
    )


def _write_brute(config, out, res):
    return write_csv(out / "brute.csv", ["policy_id", "gain", "se"], [(pid, e.value, e.se) for pid, e in res.evaluated], config)


def _write_randomized(config, out, res):
    k = res.theta.size
    header = [f"theta_{j}" for j in range(k)] + ["gain", "se", "estimator", "stage"]
    rows = [(*theta, e.value, e.se, res.estimator, "search") for theta, e in res.trace]
    rows.append((*res.theta, res.value.value, res.value.se, res.estimator, "final"))
    return write_csv(out / "randomized.csv", header, rows, config)


def _write_bsde(config, out, rep):
    write_csv(
        out / "bsde.csv",
        ["n_penalty", "Y0", "se", "G_n"],
        zip(rep.n_values, rep.Y0, rep.se, rep.G_n),
        config,
    )
    # wall-clock times differ between runs, so they live in their own file
    write_csv(out / "bsde_timing.csv", ["n_penalty", "runtime_s"], zip(rep.n_values, rep.runtime_s), config)


def _write_oracle(config, out, orc):
    write_csv(out / "oracle.csv", ["t", "x", "v"], _surface_rows(orc["surface"]), config)


def run_mode(config: ExperimentConfig, mode=None, out=None):
    """Run one estimator, write its CSV into ``out`` and return its result."""
    mode = mode or config.mode
    out = Path(out or config.out)
    spec = build_problem(config)
    if mode == "brute":
        res = run_brute(config, spec)
        _write_brute(config, out, res)
        print(f"brute: v0 = {res.value.value:.6g} +- {res.value.se:.2g} (policy {res.policy.policy_id()})")
    elif mode == "randomized":
        res = run_randomized(config, spec)
        _write_randomized(config, out, res)
        print(f"randomized: v0R = {res.value.value:.6g} +- {res.value.se:.2g} at theta={list(res.theta)}")
    elif mode == "bsde":
        res = run_bsde(config, spec)
        _write_bsde(config, out, res[1])
        print(f"bsde: Y0 = {res[0].Y0:.6g} +- {res[0].se:.2g} at n={res[0].n_penalty:g}")
    elif mode == "oracle":
        res = run_oracle(config, spec)
        _write_oracle(config, out, res)
        print(f"oracle ({res['kind']}): v = {res['value']:.6g}")
    elif mode == "campaign":
        res = run_campaign(config, out)
    else:
        raise ConfigError("mode", f"must be one of {list(MODES)}")
    return res


# ----------------------------------------------------------------------
# Campaign


@dataclass
class CampaignRow:
    benchmark: str
    estimate: str
    value: float
    se: float
    oracle: float
    oracle_se: float
    grid_error: float
    tolerance: float
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = bool(abs(self.value - self.oracle) <= self.tolerance)

    @property
    def error(self):
        return abs(self.value - self.oracle)


@dataclass
class CampaignReport:
    rows: list
    config_hash: str
    seed: int

    @property
    def passed(self):
        return all(r.passed for r in self.rows)

    def row(self, estimate):
        return next(r for r in self.rows if r.estimate == estimate)

    def summary(self):
        return {
            "benchmark": self.rows[0].benchmark if self.rows else None,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "passed": self.passed,
            "rows": [
                {
                    "estimate": r.estimate,
                    "value": r.value,
                    "se": r.se,
                    "oracle": r.oracle,
                    "error": r.error,
                    "tolerance": r.tolerance,
                    "passed": r.passed,
                }
                for r in self.rows
            ],
        }


def tolerance_for(config, oracle_value, se, oracle_se, grid_error):
    """``max(absolute, relative |v|, 3 combined SE, 2 grid errors)``."""
    tol = config.tolerance
    return max(
        tol["absolute"],
        tol["relative"] * abs(oracle_value),
        3.0 * float(np.hypot(se, oracle_se)),
        2.0 * grid_error,
    )


def run_campaign(config: ExperimentConfig, out=None):
    """Brute force, randomized search, constrained BSDE and oracle on one
    benchmark with one seed; writes every stage's CSV plus ``campaign.csv``
    and ``summary.json`` when ``out`` is given."""
    spec = build_problem(config)
    orc = run_oracle(config, spec)
    brute = run_brute(config, spec)
    rand = run_randomized(config, spec)
    sol, rep = run_bsde(config, spec)
    v, ose, gerr = orc["value"], orc["se"], orc["grid_error"]
    rows = []
    for name, val, se in (
        ("v0_brute", brute.value.value, brute.value.se),
        ("v0R", rand.value.value, rand.value.se),
        ("Y0_final", sol.Y0, sol.se),
    ):
        rows.append(CampaignRow(config.benchmark, name, val, se, v, ose, gerr, tolerance_for(config, v, se, ose, gerr)))
    report = CampaignReport(rows, config.config_hash(), config.seed)
    if out is not None:
        out = Path(out)
        _write_oracle(config, out, orc)
        _write_brute(config, out, brute)
        _write_randomized(config, out, rand)
        _write_bsde(config, out, rep)
        write_csv(
            out / "campaign.csv",
            ["benchmark", "estimate", "value", "se", "oracle", "oracle_se", "grid_error", "tolerance", "error", "pass"],
            [
                (r.benchmark, r.estimate, r.value, r.se, r.oracle, r.oracle_se, r.grid_error, r.tolerance, r.error, r.passed)
                for r in rows
            ],
            config,
        )
        with open(out / "summary.json", "w", encoding="utf-8") as fh:
            json.dump(report.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    for r in rows:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.benchmark} {r.estimate}: {r.value:.5f} +- {r.se:.1g} vs oracle {r.oracle:.5f} (tol {r.tolerance:.3g})")
    return report


# ----------------------------------------------------------------------
# Entry point


def _parser():
    p = argparse.ArgumentParser(prog="randcontrol", description=__doc__.split("\n\n")[1])
    p.add_argument("mode", choices=MODES)
    p.add_argument("--config", help="JSON experiment file (default: the bang-bang benchmark)")
    p.add_argument("--benchmark", help="benchmark to use when no --config is given")
    p.add_argument("--seed", type=int, help="master seed, overrides the config")
    p.add_argument("--out", help="output directory, overrides the config")
    return p


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        if args.config:
            config = load_config(args.config)
        else:
            config = validate_config(json.dumps({"benchmark": args.benchmark or "bangbang"}))
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise ConfigError("seed", "must be an unsigned 64-bit integer")
        config = config.with_overrides(mode=args.mode, seed=args.seed, out=args.out)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    t0 = time.perf_counter()
    try:
        res = run_mode(config)
        if args.mode == "campaign" and not all(np.isfinite([r.value for r in res.rows])):
            raise FloatingPointError("non-finite value estimate")
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERICAL_ERRORS as exc:
        print(f"numerical error in {args.mode}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(f"done in {time.perf_counter() - t0:.1f}s; output in {config.out}", file=sys.stderr)
    if args.mode == "campaign":
        return EXIT_PASS if res.passed else EXIT_FAIL
    return EXIT_PASS


if __name__ == "__main__":
    sys.exit(main())
