"""Command-line interface: experiment sweeps, PTC search, oracle checks.

Configs are flat YAML key-value documents whose keys mirror the
ScenarioConfig / ExperimentSpec / PtcSpec field names; presets cover the
standard figure configurations.  Exit codes: 0 success, 1 usage error,
2 runtime error.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np
import yaml

from .channel import ImpairmentPrior, ParameterRanges, ScenarioConfig
from .experiments import (
    PRESETS,
    ExperimentSpec,
    PtcSpec,
    default_workers,
    emit,
    oracle_check,
    preset,
    ptc_search,
    run_experiment,
)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; route through our own codes
    def error(self, message):
        raise _UsageError(f"{message}\n{self.format_usage()}")


_SCENARIO_KEYS = (
    "K", "L", "p_a", "snr_db", "n_in", "n_out", "eta_th",
    "em_variant", "full_message_approx", "n_groups",
)


def _split_prior_ranges(doc: dict) -> tuple[ImpairmentPrior, ParameterRanges]:
    prior_kwargs = {}
    for key in ("mu_r", "sigma_r", "sigma_delta", "h_bar_r"):
        if key in doc:
            prior_kwargs[key] = doc.pop(key)
    prior = ImpairmentPrior(**{"mu_r": 0.13, "sigma_r": 1.0, "sigma_delta": np.pi / 8, **prior_kwargs})
    range_kwargs = {}
    for key in ("h_los_sq", "v_ray"):
        if key in doc:
            range_kwargs[key] = tuple(doc.pop(key))
    return prior, ParameterRanges(**range_kwargs)


def load_experiment_config(path: str) -> ExperimentSpec:
    """Build an ExperimentSpec from a flat YAML document."""
    with open(path) as fh:
        doc = yaml.safe_load(fh) or {}
    if not isinstance(doc, dict):
        raise ValueError(f"config {path!r} must be a mapping of flat keys")
    doc = dict(doc)
    prior, ranges = _split_prior_ranges(doc)
    base_kwargs = {k: doc.pop(k) for k in list(doc) if k in _SCENARIO_KEYS}
    spec_kwargs = {}
    for key in ("sweep", "values", "trials", "estimators", "seed"):
        if key in doc:
            spec_kwargs[key] = doc.pop(key)
    if doc:
        raise ValueError(f"unknown config keys: {sorted(doc)}")
    if "sweep" not in spec_kwargs or "values" not in spec_kwargs:
        raise ValueError("experiment config needs 'sweep' and 'values'")
    base_kwargs.setdefault("snr_db", 10.0)
    base = ScenarioConfig(**base_kwargs)
    return ExperimentSpec(base=base, ranges=ranges, prior=prior, **spec_kwargs)


def load_ptc_config(path: str) -> PtcSpec:
    with open(path) as fh:
        doc = yaml.safe_load(fh) or {}
    if not isinstance(doc, dict):
        raise ValueError(f"config {path!r} must be a mapping of flat keys")
    doc = dict(doc)
    prior, ranges = _split_prior_ranges(doc)
    if "L_min" in doc or "L_max" in doc:
        doc["L_bounds"] = (int(doc.pop("L_min", 1)), int(doc.pop("L_max", 400)))
    allowed = {
        "K", "snr_db", "p_a_grid", "L_bounds", "trials",
        "n_in", "n_out", "eta_th", "em_variant", "seed",
    }
    unknown = set(doc) - allowed
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    if "L_bounds" in doc:
        doc["L_bounds"] = tuple(int(v) for v in doc["L_bounds"])
    if "p_a_grid" in doc:
        doc["p_a_grid"] = tuple(float(v) for v in doc["p_a_grid"])
    return PtcSpec(prior=prior, ranges=ranges, **doc)


def build_parser() -> _Parser:
    parser = _Parser(prog="gfra", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a Monte-Carlo sweep")
    run_p.add_argument("--config", help="flat YAML experiment config")
    run_p.add_argument("--preset", choices=PRESETS, help="named standard configuration")
    run_p.add_argument("--out", required=True, help="output file path")
    run_p.add_argument("--format", choices=("csv", "json"), default="csv")
    run_p.add_argument("--seed", type=int, default=None, help="override root seed")
    run_p.add_argument("--trials", type=int, default=None, help="override trials per sweep value")
    run_p.add_argument("--threads", type=int, default=None,
                       help="trial-level workers (default: $GFRA_WORKERS or 1)")

    ptc_p = sub.add_parser("ptc", help="phase-transition search over pilot length")
    ptc_p.add_argument("--config", help="flat YAML PTC config")
    ptc_p.add_argument("--out", required=True)
    ptc_p.add_argument("--format", choices=("csv", "json"), default="csv")
    ptc_p.add_argument("--seed", type=int, default=None)
    ptc_p.add_argument("--trials", type=int, default=None)
    ptc_p.add_argument("--threads", type=int, default=None)

    oc = sub.add_parser("oracle-check", help="solver vs. exact-enumeration agreement")
    oc.add_argument("--k", type=int, default=8, help="device count (<= 12)")
    oc.add_argument("--l", type=int, default=16, help="pilot length")
    oc.add_argument("--trials", type=int, default=1000)
    oc.add_argument("--seed", type=int, default=0)
    oc.add_argument("--p-a", type=float, default=0.2, dest="p_a")
    oc.add_argument("--snr", type=float, default=30.0)
    return parser


def _cmd_run(args) -> int:
    if bool(args.config) == bool(args.preset):
        raise _UsageError("run needs exactly one of --config or --preset")
    if args.preset:
        spec = preset(args.preset, trials=args.trials, seed=args.seed or 0)
    else:
        spec = load_experiment_config(args.config)
        from dataclasses import replace

        if args.seed is not None:
            spec = replace(spec, seed=args.seed)
        if args.trials is not None:
            spec = replace(spec, trials=args.trials)
    workers = args.threads if args.threads is not None else default_workers()
    table = run_experiment(spec, workers=workers)
    emit(table, args.format, args.out)
    print(f"wrote {len(table.rows)} result rows to {args.out}")
    return 0


def _cmd_ptc(args) -> int:
    from dataclasses import replace

    spec = load_ptc_config(args.config) if args.config else PtcSpec()
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    if args.trials is not None:
        spec = replace(spec, trials=args.trials)
    points = ptc_search(spec)
    emit(points, args.format, args.out)
    attained = sum(1 for p in points if p.L_min is not None)
    print(f"wrote {len(points)} PTC points ({attained} attained) to {args.out}")
    return 0


def _cmd_oracle_check(args) -> int:
    res = oracle_check(
        K=args.k, L=args.l, trials=args.trials, seed=args.seed, p_a=args.p_a, snr_db=args.snr
    )
    print(
        f"oracle-check: {res.trials} trials, support agreement {res.agreement:.4f}, "
        f"solver NMSE {res.nmse_solver:.6g}, oracle NMSE {res.nmse_oracle:.6g}, "
        f"ratio {res.nmse_ratio:.4f}"
    )
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "ptc":
            return _cmd_ptc(args)
        if args.command == "oracle-check":
            return _cmd_oracle_check(args)
        raise _UsageError(f"unknown command {args.command!r}")
    except _UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ValueError, OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
