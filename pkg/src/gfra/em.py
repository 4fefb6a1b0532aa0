"""Outer EM loop around the message-passing engine.

After each block of inner iterations, the devices that look active and
whose posterior means have stopped moving (relative change below eta_th)
form the EM set.  Their posterior moments drive a closed-form update of
the shared impairment estimate (h_r, phi_delta); devices in different
geographic groups update their group's impairment independently.  The
refreshed estimates rebuild the channel priors for the next block, while
the edge messages themselves carry over untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .channel import ChannelRealization, DeviceArrays, ImpairmentPrior, noise_var_from_snr
from .message_passing import (
    DecisionState,
    HyperEstimate,
    init_messages,
    prior_llr,
    prior_moments,
    run_inner,
)

H_R_FLOOR = 1e-12


@dataclass(frozen=True)
class EmStatistics:
    """Sufficient statistics of one group's EM update."""

    m_stat: complex
    n_stat: float
    set_size: int


@dataclass(frozen=True)
class IterationRow:
    """One inner iteration's diagnostics (truth-dependent fields may be None)."""

    outer: int
    inner: int
    total: int
    nmse: float | None
    uad_errors: int | None
    mean_abs_delta: float


@dataclass(frozen=True)
class OuterRecord:
    """State after one outer round: updated hypers and EM-set statistics."""

    outer: int
    hyper: tuple[HyperEstimate, ...]
    em_set_sizes: tuple[int, ...]
    statistics: tuple[EmStatistics, ...]


@dataclass
class RunTrace:
    rows: list[IterationRow] = field(default_factory=list)
    outer: list[OuterRecord] = field(default_factory=list)


@dataclass(frozen=True)
class EstimationResult:
    """Final output of one detector run."""

    active_hat: np.ndarray  # (K,) 0/1
    h_hat: np.ndarray  # (K,) complex, zero wherever inactive
    hyper_hat: tuple[HyperEstimate, ...]  # per group
    trace: RunTrace


def select_em_set(
    decision: DecisionState, eta_th: float, group: np.ndarray = None, n_groups: int = 1
) -> list[np.ndarray]:
    """Device indices passing both EM gates, partitioned by group.

    A device enters when it is currently detected active (llr_dec > 0) and
    its posterior mean has settled (delta_k < eta_th).  The same LLR that
    drives the final activity decision drives this gate.
    """
    mask = (decision.llr_dec > 0) & (decision.delta_k < eta_th)
    if group is None:
        group = np.zeros(mask.shape, dtype=int)
    return [np.flatnonzero(mask & (group == g)) for g in range(n_groups)]


def em_statistics(decision: DecisionState, profiles, em_set: np.ndarray) -> EmStatistics:
    """Posterior moment averages over the EM set.

    m_stat correlates the posterior means against the known LoS rays
    (normalized by the scattering variance); n_stat averages the posterior
    second moments on the same scale.
    """
    dev = DeviceArrays.coerce(profiles)
    idx = np.asarray(em_set, dtype=int)
    if idx.size == 0:
        return EmStatistics(m_stat=0j, n_stat=0.0, set_size=0)
    mu = decision.mu_dec[idx]
    v = decision.v_dec[idx]
    h_los = dev.h_los[idx]
    phi_los = dev.phi_los[idx]
    v_ray = dev.v_ray[idx]
    m = np.mean(mu * h_los * np.exp(-1j * phi_los) / v_ray)
    n = np.mean((v + np.abs(mu) ** 2) / v_ray)
    return EmStatistics(m_stat=complex(m), n_stat=float(n), set_size=int(idx.size))


def em_root(abs_m, n):
    """Positive root of h^2 + h*|M| - N = 0.

    Written as 2N / (|M| + sqrt(|M|^2 + 4N)) instead of the textbook
    (-|M| + sqrt(|M|^2 + 4N)) / 2, which cancels catastrophically when
    |M|^2 >> N.  Vectorized over array inputs.
    """
    abs_m = np.asarray(abs_m, dtype=float)
    n = np.asarray(n, dtype=float)
    return 2.0 * n / (abs_m + np.sqrt(abs_m**2 + 4.0 * n))


def em_update(decision: DecisionState, profiles, em_set: np.ndarray) -> HyperEstimate | None:
    """Closed-form impairment update for the both-components variant.

    The estimate pairs the positive root of h_r^2 + h_r*|M| - N = 0 with
    the angle of M; the negative root is discarded.  Returns None on an
    empty set (caller keeps its estimate).
    """
    stats = em_statistics(decision, profiles, em_set)
    if stats.set_size == 0:
        return None
    h_r = float(em_root(abs(stats.m_stat), stats.n_stat))
    phi = float(np.angle(stats.m_stat))
    return HyperEstimate(h_r=max(h_r, H_R_FLOOR), phi_delta=phi)


def em_update_los_only(decision: DecisionState, profiles, em_set: np.ndarray) -> HyperEstimate | None:
    """Impairment update when only the LoS ray is impaired.

    Here the estimate is linear: h_r = |M| / <h_los^2 / v_ray> with the
    same angle extraction; posterior variances drop out entirely.
    """
    stats = em_statistics(decision, profiles, em_set)
    if stats.set_size == 0:
        return None
    dev = DeviceArrays.coerce(profiles)
    idx = np.asarray(em_set, dtype=int)
    denom = float(np.mean(dev.h_los[idx] ** 2 / dev.v_ray[idx]))
    h_r = abs(stats.m_stat) / denom
    phi = float(np.angle(stats.m_stat))
    return HyperEstimate(h_r=max(float(h_r), H_R_FLOOR), phi_delta=phi)


def _trace_row(outer, inner, total, decision, truth_eff, truth_act, truth_norm2):
    finite = np.isfinite(decision.delta_k)
    mean_delta = float(decision.delta_k[finite].mean()) if finite.any() else float("inf")
    nmse = None
    uad = None
    if truth_eff is not None:
        est = decision.active_hat * decision.mu_dec
        if truth_norm2 > 0:
            nmse = float(np.sum(np.abs(est - truth_eff) ** 2) / truth_norm2)
        uad = int(np.count_nonzero(decision.active_hat != truth_act))
    return IterationRow(outer, inner, total, nmse, uad, mean_delta)


def brmpem(
    y: np.ndarray,
    pilots: np.ndarray,
    cfg,
    profiles,
    prior: ImpairmentPrior,
    truth: ChannelRealization = None,
) -> EstimationResult:
    """Full detector: n_out rounds of message passing plus EM refinement.

    Impairment estimates start at the prior mean with zero phase.  Each
    round rebuilds the channel priors from the current estimates, runs
    n_in inner iterations on the carried-over message state, and refreshes
    each group's estimate from its EM set (keeping the old estimate when
    the set is empty).  Pass the ground-truth realization to get per
    iteration NMSE and detection-error rows in the trace.
    """
    dev = DeviceArrays.coerce(profiles)
    if len(dev) != cfg.K or pilots.shape != (cfg.L, cfg.K) or y.shape != (cfg.L,):
        raise ValueError("inconsistent dimensions between y, pilots and profiles")
    n_groups = max(cfg.n_groups, dev.n_groups)
    l0 = prior_llr(cfg.p_a)
    noise_var = noise_var_from_snr(cfg.snr_db)
    update = em_update if cfg.em_variant == "both-components" else em_update_los_only

    truth_eff = truth_act = None
    truth_norm2 = 0.0
    if truth is not None:
        truth_eff = truth.effective
        truth_act = truth.activity
        truth_norm2 = float(np.sum(np.abs(truth_eff) ** 2))

    hyper: list[HyperEstimate] = [HyperEstimate(prior.h_bar_r, 0.0)] * n_groups
    state = init_messages(cfg, dev, hyper)
    trace = RunTrace()
    decision = None

    for tau in range(1, cfg.n_out + 1):
        pm = prior_moments(dev, hyper, cfg.em_variant)

        def record(t, dec, _tau=tau):
            total = (_tau - 1) * cfg.n_in + t
            trace.rows.append(_trace_row(_tau, t, total, dec, truth_eff, truth_act, truth_norm2))

        state, decision = run_inner(
            y,
            pilots,
            noise_var,
            pm,
            l0,
            cfg.n_in,
            state,
            full_messages=cfg.full_message_approx,
            on_decision=record,
        )
        sets = select_em_set(decision, cfg.eta_th, dev.group, n_groups)
        stats = tuple(em_statistics(decision, dev, s) for s in sets)
        for g in range(n_groups):
            upd = update(decision, dev, sets[g])
            if upd is not None:
                hyper[g] = upd
        trace.outer.append(
            OuterRecord(
                outer=tau,
                hyper=tuple(hyper),
                em_set_sizes=tuple(len(s) for s in sets),
                statistics=stats,
            )
        )

    h_hat = np.where(decision.active_hat.astype(bool), decision.mu_dec, 0.0 + 0.0j)
    return EstimationResult(
        active_hat=decision.active_hat.copy(),
        h_hat=h_hat,
        hyper_hat=tuple(hyper),
        trace=trace,
    )
