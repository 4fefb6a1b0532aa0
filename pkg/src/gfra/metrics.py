"""Evaluation metrics for activity detection and channel estimation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class TrialMetrics:
    """Per-trial summary.  Fields that need a solver trace or an impairment
    estimate (hyper_mse, iterations_to_converge) are None for estimators
    that do not produce them; missed/false-alarm rates are diagnostics on
    top of the combined UAD error rate."""

    nmse: float
    uad_error_rate: float | None
    hyper_mse: float | None
    iterations_to_converge: int | None
    missed_rate: float | None
    false_alarm_rate: float | None


def nmse(estimate: np.ndarray, truth: np.ndarray) -> float:
    """Squared error of the masked channel estimate, normalized by the truth.

    Both arguments are the length-K activity-masked channel vectors.  An
    all-inactive truth makes the ratio undefined and raises; the harness
    resamples such trials instead of scoring them.
    """
    estimate = np.asarray(estimate)
    truth = np.asarray(truth)
    if estimate.shape != truth.shape:
        raise ValueError("estimate and truth must have equal shapes")
    denom = float(np.sum(np.abs(truth) ** 2))
    if denom == 0.0:
        raise ValueError("NMSE undefined: ground truth has no active device")
    return float(np.sum(np.abs(estimate - truth) ** 2) / denom)


def uad_error_rate(a_hat: np.ndarray, a: np.ndarray) -> float:
    """Fraction of devices whose activity decision is wrong (miss or false alarm)."""
    a_hat = np.asarray(a_hat)
    a = np.asarray(a)
    if a_hat.shape != a.shape:
        raise ValueError("activity vectors must have equal lengths")
    return float(np.mean(a_hat.astype(bool) != a.astype(bool)))


def detection_rates(a_hat: np.ndarray, a: np.ndarray) -> tuple[float, float]:
    """(missed_rate, false_alarm_rate) over all K devices."""
    a_hat = np.asarray(a_hat).astype(bool)
    a = np.asarray(a).astype(bool)
    K = a.size
    missed = np.count_nonzero(a & ~a_hat) / K
    false_alarm = np.count_nonzero(~a & a_hat) / K
    return float(missed), float(false_alarm)


def hyper_mse(true_imp, est) -> float:
    """Squared modulus of the complex impairment error.

    Both arguments just need h_r / phi_delta attributes, so truth and
    estimate types are interchangeable (the metric is symmetric).
    """
    d = true_imp.h_r * np.exp(1j * true_imp.phi_delta) - est.h_r * np.exp(1j * est.phi_delta)
    return float(np.abs(d) ** 2)


def successful_recovery(rates: Sequence[float], K: int) -> bool:
    """True when the trial-averaged UAD error rate is strictly below 1/K."""
    rates = np.asarray(list(rates), dtype=float)
    if rates.size == 0:
        raise ValueError("need at least one trial")
    return bool(rates.mean() < 1.0 / K)


def iterations_to_converge(nmse_seq: Sequence[float], rel_tol: float = 0.01) -> int:
    """First iteration index (1-based) after which the NMSE trace has settled.

    Settled means every later iteration changes the NMSE by less than
    rel_tol relative to its predecessor.  A trace that never settles
    returns its final index; a length-1 trace returns 1.
    """
    x = np.asarray(list(nmse_seq), dtype=float)
    if x.size == 0:
        raise ValueError("empty NMSE trace")
    if x.size == 1:
        return 1
    prev = x[:-1]
    cur = x[1:]
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.abs(cur - prev) / np.abs(prev)
    # a zero-NMSE predecessor counts as settled only if the value stays zero
    rel = np.where(prev == 0.0, np.where(cur == 0.0, 0.0, np.inf), rel)
    bad = np.flatnonzero(rel >= rel_tol)
    if bad.size == 0:
        return 1
    return int(bad[-1]) + 2  # 1-based index of the last violating iteration
