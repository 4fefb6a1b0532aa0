"""Monte-Carlo experiment harness: sweeps, presets, PTC search, emission.

An experiment sweeps one scenario axis over a list of values and runs a
set of estimators on freshly drawn trials per value.  Every trial derives
its own seed from (root seed, sweep index, trial index, resample count),
so results are bit-identical for a given spec at any worker count; rows
are reduced in (value, trial) order regardless of completion order.
Tables serialize to CSV (aggregates only) or JSON (with per-trial
arrays); aggregates are always recomputed from the per-trial arrays.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import baselines, metrics
from .channel import (
    ImpairmentPrior,
    ParameterRanges,
    Scenario,
    ScenarioConfig,
    generate_scenario,
    noise_var_from_snr,
)
from .em import brmpem
from .message_passing import HyperEstimate, prior_moments

log = logging.getLogger(__name__)

WORKERS_ENV = "GFRA_WORKERS"

SWEEP_AXES = ("snr_db", "p_a", "L", "sigma_r", "sigma_delta")
ESTIMATORS = ("brmpem", "ls", "lmmse", "omp", "gammse", "oracle")

CSV_COLUMNS = (
    "sweep_axis",
    "sweep_value",
    "estimator",
    "trials",
    "nmse_mean",
    "nmse_std",
    "uad_err_mean",
    "uad_err_std",
    "hyper_mse_mean",
    "iters_to_converge_mean",
    "seed",
)

_MAX_RESAMPLES = 1000


@dataclass(frozen=True)
class ExperimentSpec:
    """One sweep: base scenario, sweep axis and values, estimators, trials."""

    base: ScenarioConfig
    sweep: str
    values: tuple
    trials: int = 200
    estimators: tuple[str, ...] = ("brmpem",)
    ranges: ParameterRanges = ParameterRanges()
    prior: ImpairmentPrior = ImpairmentPrior(mu_r=0.13, sigma_r=1.0, sigma_delta=np.pi / 8)
    seed: int = 0

    def __post_init__(self):
        if self.sweep not in SWEEP_AXES:
            raise ValueError(f"sweep axis must be one of {SWEEP_AXES}")
        object.__setattr__(self, "values", tuple(self.values))
        object.__setattr__(self, "estimators", tuple(self.estimators))
        if len(self.values) == 0:
            raise ValueError("sweep value list must be nonempty")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        unknown = [e for e in self.estimators if e not in ESTIMATORS]
        if unknown:
            raise ValueError(f"unknown estimators {unknown}; choose from {ESTIMATORS}")
        if "oracle" in self.estimators:
            max_k = self.base.K
            if max_k > baselines.ORACLE_MAX_K:
                raise ValueError(
                    f"oracle estimator requires K <= {baselines.ORACLE_MAX_K}, got K={max_k}"
                )
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")


@dataclass
class ResultRow:
    """Per (sweep value, estimator) record with per-trial metric arrays.

    Arrays that an estimator does not produce (e.g. hyper_mse for ls) are
    None; resamples counts trials redrawn because of all-inactive truth.
    """

    sweep_axis: str
    sweep_value: float
    estimator: str
    trials: int
    seed: int
    nmse: list
    uad_err: list | None
    hyper_mse: list | None
    iters_to_converge: list | None
    resamples: int = 0


@dataclass
class ResultTable:
    rows: list = field(default_factory=list)


def _mean(values):
    return float(np.mean(values)) if values else None


def _std(values):
    if not values:
        return None
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def row_aggregates(row: ResultRow) -> dict:
    """CSV-facing aggregates, recomputed from the per-trial arrays."""
    return {
        "sweep_axis": row.sweep_axis,
        "sweep_value": row.sweep_value,
        "estimator": row.estimator,
        "trials": row.trials,
        "nmse_mean": _mean(row.nmse),
        "nmse_std": _std(row.nmse),
        "uad_err_mean": _mean(row.uad_err) if row.uad_err is not None else None,
        "uad_err_std": _std(row.uad_err) if row.uad_err is not None else None,
        "hyper_mse_mean": _mean(row.hyper_mse) if row.hyper_mse is not None else None,
        "iters_to_converge_mean": _mean(row.iters_to_converge)
        if row.iters_to_converge is not None
        else None,
        "seed": row.seed,
    }


def _with_impairment_sigma(prior: ImpairmentPrior, sigma_r=None, sigma_delta=None) -> ImpairmentPrior:
    # rebuild rather than replace() so h_bar_r is rederived from the moments
    return ImpairmentPrior(
        mu_r=prior.mu_r,
        sigma_r=prior.sigma_r if sigma_r is None else float(sigma_r),
        sigma_delta=prior.sigma_delta if sigma_delta is None else float(sigma_delta),
    )


def apply_sweep(spec: ExperimentSpec, value) -> tuple[ScenarioConfig, ImpairmentPrior]:
    """Scenario config and impairment prior at one sweep value."""
    cfg, prior = spec.base, spec.prior
    if spec.sweep == "snr_db":
        cfg = replace(cfg, snr_db=float(value))
    elif spec.sweep == "p_a":
        cfg = replace(cfg, p_a=float(value))
    elif spec.sweep == "L":
        cfg = replace(cfg, L=int(value))
    elif spec.sweep == "sigma_r":
        prior = _with_impairment_sigma(prior, sigma_r=value)
    elif spec.sweep == "sigma_delta":
        prior = _with_impairment_sigma(prior, sigma_delta=value)
    return cfg, prior


def trial_seed(root_seed: int, value_index: int, trial_index: int, resample: int = 0) -> int:
    """Deterministic per-trial scenario seed, independent of worker layout."""
    ss = np.random.SeedSequence([root_seed, value_index, trial_index, resample])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def draw_trial_scenario(
    cfg: ScenarioConfig,
    ranges: ParameterRanges,
    prior: ImpairmentPrior,
    root_seed: int,
    value_index: int,
    trial_index: int,
) -> tuple[Scenario, int]:
    """Scenario for one trial, redrawn while the truth has no active device."""
    for resample in range(_MAX_RESAMPLES):
        seed = trial_seed(root_seed, value_index, trial_index, resample)
        scenario = generate_scenario(replace(cfg, seed=seed), ranges, prior)
        if scenario.realization.activity.any():
            if resample:
                log.info(
                    "resampled trial %d at sweep index %d %d time(s): all-inactive truth",
                    trial_index,
                    value_index,
                    resample,
                )
            return scenario, resample
    raise RuntimeError("could not draw a trial with at least one active device")


def _run_estimator(name: str, scenario: Scenario, prior: ImpairmentPrior) -> metrics.TrialMetrics:
    cfg = scenario.cfg
    real = scenario.realization
    truth_eff = real.effective
    y, P = scenario.y, scenario.pilots
    noise_var = real.noise_var
    a_hat = None
    hyper_err = None
    iters = None

    if name == "brmpem":
        res = brmpem(y, P, cfg, scenario.profiles, prior, truth=real)
        a_hat = res.active_hat
        estimate = res.h_hat
        errs = [
            metrics.hyper_mse(real.impairments[g], res.hyper_hat[g])
            for g in range(len(res.hyper_hat))
        ]
        hyper_err = float(np.mean(errs))
        seq = [r.nmse for r in res.trace.rows if r.nmse is not None]
        iters = metrics.iterations_to_converge(seq) if seq else None
    elif name == "ls":
        estimate = baselines.ls_estimate(y, P)
    elif name == "lmmse":
        pm = prior_moments(
            scenario.profiles, HyperEstimate(prior.h_bar_r, 0.0), cfg.em_variant
        )
        estimate = baselines.lmmse_estimate(y, P, pm, cfg.p_a, noise_var)
    elif name == "omp":
        support, estimate = baselines.omp_estimate(y, P, int(real.activity.sum()))
        a_hat = np.zeros(cfg.K, dtype=np.int8)
        a_hat[support] = 1
    elif name == "gammse":
        estimate = baselines.gammse_estimate(
            y, P, real.activity, real.impairments, scenario.profiles, noise_var, cfg.em_variant
        )
        a_hat = real.activity
    elif name == "oracle":
        pm = prior_moments(
            scenario.profiles, real.impairments, cfg.em_variant
        )
        post = baselines.exact_posterior_oracle(y, P, pm, cfg.p_a, noise_var)
        estimate = post.mmse_estimate
        a_hat = post.map_support
    else:
        raise ValueError(f"unknown estimator {name!r}")

    nm = metrics.nmse(estimate, truth_eff)
    if a_hat is not None:
        uad = metrics.uad_error_rate(a_hat, real.activity)
        missed, fa = metrics.detection_rates(a_hat, real.activity)
    else:
        uad = missed = fa = None
    return metrics.TrialMetrics(
        nmse=nm,
        uad_error_rate=uad,
        hyper_mse=hyper_err,
        iterations_to_converge=iters,
        missed_rate=missed,
        false_alarm_rate=fa,
    )


def run_trial(spec: ExperimentSpec, value_index: int, trial_index: int):
    """All requested estimators on one freshly drawn trial."""
    cfg, prior = apply_sweep(spec, spec.values[value_index])
    scenario, resamples = draw_trial_scenario(
        cfg, spec.ranges, prior, spec.seed, value_index, trial_index
    )
    out = {name: _run_estimator(name, scenario, prior) for name in spec.estimators}
    return out, resamples


def _trial_task(args):
    spec, i, j = args
    return i, j, run_trial(spec, i, j)


def default_workers() -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            n = int(env)
            if n >= 1:
                return n
        except ValueError:
            pass
        log.warning("ignoring invalid %s=%r", WORKERS_ENV, env)
    return 1


def run_experiment(spec: ExperimentSpec, workers: int = None) -> ResultTable:
    """Run the sweep and return one row per (sweep value, estimator).

    Trials may execute in parallel (workers > 1) but are reduced in
    deterministic (value, trial) order, so the table depends only on the
    spec.
    """
    if workers is None:
        workers = default_workers()
    tasks = [(spec, i, j) for i in range(len(spec.values)) for j in range(spec.trials)]
    results = {}
    if workers <= 1 or len(tasks) <= 1:
        for args in tasks:
            i, j, payload = _trial_task(args)
            results[(i, j)] = payload
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for i, j, payload in pool.map(_trial_task, tasks, chunksize=8):
                results[(i, j)] = payload

    table = ResultTable()
    for i, value in enumerate(spec.values):
        per_est = {name: {"nmse": [], "uad": [], "hyp": [], "it": []} for name in spec.estimators}
        resamples = 0
        for j in range(spec.trials):
            trial_out, res_count = results[(i, j)]
            resamples += res_count
            for name in spec.estimators:
                tm = trial_out[name]
                acc = per_est[name]
                acc["nmse"].append(tm.nmse)
                acc["uad"].append(tm.uad_error_rate)
                acc["hyp"].append(tm.hyper_mse)
                acc["it"].append(tm.iterations_to_converge)
        for name in spec.estimators:
            acc = per_est[name]

            def present(xs):
                return None if all(x is None for x in xs) else [x for x in xs if x is not None]

            table.rows.append(
                ResultRow(
                    sweep_axis=spec.sweep,
                    sweep_value=value,
                    estimator=name,
                    trials=spec.trials,
                    seed=spec.seed,
                    nmse=acc["nmse"],
                    uad_err=present(acc["uad"]),
                    hyper_mse=present(acc["hyp"]),
                    iters_to_converge=present(acc["it"]),
                    resamples=resamples,
                )
            )
    return table


# --- presets mirroring the reference experiment configurations --------------


def _common_base(**overrides) -> ScenarioConfig:
    base = dict(K=500, L=200, p_a=0.1, snr_db=10.0, n_in=10, n_out=5, eta_th=0.2)
    base.update(overrides)
    return ScenarioConfig(**base)


def preset(name: str, trials: int = None, seed: int = 0) -> ExperimentSpec:
    """Named sweep configurations for the standard experiment set."""
    if name == "fig3":
        spec = ExperimentSpec(
            base=_common_base(),
            sweep="snr_db",
            values=tuple(float(v) for v in range(0, 41, 5)),
            estimators=("brmpem",),
            seed=seed,
        )
    elif name == "fig4":
        spec = ExperimentSpec(
            base=_common_base(),
            sweep="p_a",
            values=(0.1, 0.13, 0.16, 0.19, 0.22, 0.25),
            estimators=("brmpem",),
            seed=seed,
        )
    elif name == "fig5":
        spec = ExperimentSpec(
            base=_common_base(p_a=0.25, n_out=6),
            sweep="L",
            values=(150, 175, 200, 225, 250, 275),
            estimators=("brmpem",),
            seed=seed,
        )
    elif name == "fig6":
        spec = ExperimentSpec(
            base=_common_base(n_out=8),
            sweep="sigma_r",
            values=(1.0, 3.0, 5.0, 7.0),
            estimators=("brmpem",),
            seed=seed,
        )
    elif name == "fig7":
        spec = ExperimentSpec(
            base=_common_base(n_out=2),
            sweep="snr_db",
            values=tuple(float(v) for v in range(0, 41, 5)),
            estimators=("brmpem", "ls", "lmmse", "omp", "gammse"),
            seed=seed,
        )
    else:
        raise ValueError(f"unknown preset {name!r}; choose fig3..fig7")
    if trials is not None:
        spec = replace(spec, trials=trials)
    return spec


PRESETS = ("fig3", "fig4", "fig5", "fig6", "fig7")


# --- phase-transition search ------------------------------------------------


@dataclass(frozen=True)
class PtcSpec:
    """Grid of activity rates and the pilot-length search window."""

    K: int = 500
    snr_db: float = 40.0
    p_a_grid: tuple[float, ...] = (0.05, 0.1, 0.15, 0.2, 0.25)
    L_bounds: tuple[int, int] = (25, 400)
    trials: int = 50
    n_in: int = 10
    n_out: int = 15
    eta_th: float = 0.2
    em_variant: str = "both-components"
    ranges: ParameterRanges = ParameterRanges()
    prior: ImpairmentPrior = ImpairmentPrior(mu_r=0.13, sigma_r=1.0, sigma_delta=np.pi / 8)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "p_a_grid", tuple(self.p_a_grid))
        object.__setattr__(self, "L_bounds", tuple(self.L_bounds))
        if len(self.p_a_grid) == 0:
            raise ValueError("p_a grid must be nonempty")
        lo, hi = self.L_bounds
        if not (1 <= lo <= hi):
            raise ValueError("L bounds must satisfy 1 <= lo <= hi")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")


@dataclass(frozen=True)
class PtcPoint:
    """Minimal pilot length at one activity rate; L_min None when unattained."""

    p_a: float
    L_min: int | None
    ratio: float | None  # L_min / K


def _ptc_default_trial(spec: PtcSpec, p_a: float, L: int, seed: int) -> float:
    cfg = ScenarioConfig(
        K=spec.K,
        L=L,
        p_a=p_a,
        snr_db=spec.snr_db,
        n_in=spec.n_in,
        n_out=spec.n_out,
        eta_th=spec.eta_th,
        em_variant=spec.em_variant,
        seed=seed,
    )
    scenario = generate_scenario(cfg, spec.ranges, spec.prior)
    res = brmpem(scenario.y, scenario.pilots, cfg, scenario.profiles, spec.prior)
    return metrics.uad_error_rate(res.active_hat, scenario.realization.activity)


def ptc_search(spec: PtcSpec, trial_fn=None) -> list[PtcPoint]:
    """Smallest successful pilot length per activity rate, by bisection.

    Success at (p_a, L) means the trial-averaged UAD error rate over
    spec.trials runs is strictly below 1/K.  Recovery is assumed monotone
    in L (more pilots never hurt); grid points are emitted as found, with
    no curve fitting.  trial_fn(p_a, L, seed) -> error rate can be
    injected for testing.
    """
    if trial_fn is None:
        trial_fn = lambda p_a, L, seed: _ptc_default_trial(spec, p_a, L, seed)  # noqa: E731

    def success(i: int, p_a: float, L: int) -> bool:
        # L rides in the last seed slot so every probe length draws fresh trials
        rates = [
            trial_fn(p_a, L, trial_seed(spec.seed, i, j, resample=L)) for j in range(spec.trials)
        ]
        return metrics.successful_recovery(rates, spec.K)

    points = []
    lo_bound, hi_bound = spec.L_bounds
    for i, p_a in enumerate(spec.p_a_grid):
        if not success(i, p_a, hi_bound):
            points.append(PtcPoint(p_a=p_a, L_min=None, ratio=None))
            continue
        if success(i, p_a, lo_bound):
            points.append(PtcPoint(p_a=p_a, L_min=lo_bound, ratio=lo_bound / spec.K))
            continue
        lo, hi = lo_bound, hi_bound  # fail at lo, success at hi
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if success(i, p_a, mid):
                hi = mid
            else:
                lo = mid
        points.append(PtcPoint(p_a=p_a, L_min=hi, ratio=hi / spec.K))
    return points


# --- solver-versus-oracle verification --------------------------------------


@dataclass(frozen=True)
class OracleCheckResult:
    trials: int
    agreement: float  # fraction of trials with exact support match
    nmse_solver: float
    nmse_oracle: float

    @property
    def nmse_ratio(self) -> float:
        return self.nmse_solver / self.nmse_oracle


def oracle_check(
    K: int = 8,
    L: int = 16,
    trials: int = 1000,
    seed: int = 0,
    p_a: float = 0.2,
    snr_db: float = 30.0,
    n_in: int = 15,
    n_out: int = 1,
) -> OracleCheckResult:
    """Compare the message-passing solver against exact enumeration.

    Trials use a deterministic impairment (sigma_r = sigma_delta = 0), so
    the Gaussian channel priors the oracle conditions on are exactly the
    generative ones and both methods address the same model.  Reports the
    fraction of trials whose detected support equals the oracle MAP
    support, plus both mean NMSEs.
    """
    prior = ImpairmentPrior(mu_r=0.13, sigma_r=0.0, sigma_delta=0.0)
    hyper = HyperEstimate(prior.h_bar_r, 0.0)
    matches = 0
    nm_solver = []
    nm_oracle = []
    cfg = ScenarioConfig(K=K, L=L, p_a=p_a, snr_db=snr_db, n_in=n_in, n_out=n_out)
    for j in range(trials):
        scenario, _ = draw_trial_scenario(cfg, ParameterRanges(), prior, seed, 0, j)
        res = brmpem(scenario.y, scenario.pilots, scenario.cfg, scenario.profiles, prior)
        pm = prior_moments(scenario.profiles, hyper, cfg.em_variant)
        post = baselines.exact_posterior_oracle(
            scenario.y, scenario.pilots, pm, p_a, scenario.realization.noise_var
        )
        if np.array_equal(res.active_hat, post.map_support):
            matches += 1
        truth_eff = scenario.realization.effective
        nm_solver.append(metrics.nmse(res.h_hat, truth_eff))
        nm_oracle.append(metrics.nmse(post.mmse_estimate, truth_eff))
    return OracleCheckResult(
        trials=trials,
        agreement=matches / trials,
        nmse_solver=float(np.mean(nm_solver)),
        nmse_oracle=float(np.mean(nm_oracle)),
    )


# --- emission ---------------------------------------------------------------


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value)
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))  # shortest round-trip decimal
    return str(value)


def table_to_csv(table: ResultTable) -> str:
    lines = [",".join(CSV_COLUMNS)]
    for row in table.rows:
        agg = row_aggregates(row)
        lines.append(",".join(_fmt(agg[c]) for c in CSV_COLUMNS))
    return "\n".join(lines) + "\n"


def table_to_json(table: ResultTable) -> str:
    return json.dumps({"rows": [dataclasses.asdict(r) for r in table.rows]}, indent=2)


def table_from_json(text: str) -> ResultTable:
    doc = json.loads(text)
    return ResultTable(rows=[ResultRow(**r) for r in doc["rows"]])


def ptc_to_csv(points: list[PtcPoint]) -> str:
    lines = ["p_a,L_min,ratio"]
    for p in points:
        lines.append(",".join((_fmt(p.p_a), _fmt(p.L_min), _fmt(p.ratio))))
    return "\n".join(lines) + "\n"


def emit(table, fmt: str, path: str) -> None:
    """Write a result table (or PTC point list) to path as csv or json."""
    if isinstance(table, list) and (not table or isinstance(table[0], PtcPoint)):
        if fmt == "csv":
            text = ptc_to_csv(table)
        elif fmt == "json":
            text = json.dumps({"points": [dataclasses.asdict(p) for p in table]}, indent=2)
        else:
            raise ValueError(f"unknown format {fmt!r}")
    elif fmt == "csv":
        text = table_to_csv(table)
    elif fmt == "json":
        text = table_to_json(table)
    else:
        raise ValueError(f"unknown format {fmt!r}")
    try:
        with open(path, "w", newline="\n") as fh:
            fh.write(text)
    except OSError as e:
        raise OSError(f"cannot write results to {path!r}: {e}") from e
