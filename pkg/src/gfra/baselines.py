"""Reference estimators and an exact enumeration oracle.

The four baselines mirror the usual comparison set for sparse channel
estimation: plain least squares, linear MMSE under spike-and-slab
moments, orthogonal matching pursuit with known cardinality, and the
genie-aided MMSE that conditions on the true support and impairments
(the performance lower bound).  The enumeration oracle computes the
exact Bernoulli-Gaussian posterior for small K by summing over all 2^K
activity patterns in the log domain; it is the correctness reference for
the message-passing solver.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import logsumexp

from .message_passing import PriorMoments, prior_moments

ORACLE_MAX_K = 12


def ls_estimate(y: np.ndarray, pilots: np.ndarray, rcond: float = None) -> np.ndarray:
    """Minimum-norm least-squares solution of y = P x.

    rcond is the relative singular-value cutoff of the pseudo-inverse;
    None keeps numpy's default max(L, K) * machine epsilon.
    """
    x, *_ = np.linalg.lstsq(pilots, y, rcond=rcond)
    return x


def lmmse_estimate(
    y: np.ndarray, pilots: np.ndarray, priors: PriorMoments, p_a: float, noise_var: float
) -> np.ndarray:
    """Linear MMSE for the masked channel x = h ⊙ a.

    The Bernoulli mask enters only through the first two moments of the
    spike-and-slab marginal: E[x] = p_a mu and
    Var[x] = p_a (v + |mu|^2) - p_a^2 |mu|^2.
    """
    if noise_var <= 0:
        raise ValueError("lmmse_estimate needs noise_var > 0")
    mx = p_a * priors.mu
    var = p_a * (priors.v + np.abs(priors.mu) ** 2) - p_a**2 * np.abs(priors.mu) ** 2
    L = pilots.shape[0]
    S = (pilots * var) @ pilots.conj().T + noise_var * np.eye(L)
    z = cho_solve(cho_factor(S, lower=True), y - pilots @ mx)
    return mx + var * (pilots.conj().T @ z)


def omp_estimate(y: np.ndarray, pilots: np.ndarray, active_count: int) -> tuple[np.ndarray, np.ndarray]:
    """Greedy support recovery with known active-device count.

    Each step picks the column with the largest norm-weighted residual
    correlation and refits by least squares on the grown support.  Returns
    the sorted support indices and the length-K coefficient vector (zeros
    off support).
    """
    L, K = pilots.shape
    if not 0 <= active_count <= min(K, L):
        raise ValueError("active_count must lie in [0, min(K, L)]")
    x = np.zeros(K, dtype=complex)
    if active_count == 0:
        return np.array([], dtype=int), x
    col_norm = np.linalg.norm(pilots, axis=0)
    safe_norm = np.where(col_norm > 0, col_norm, 1.0)
    resid = y.astype(complex)
    support: list[int] = []
    sol = np.zeros(0, dtype=complex)
    for _ in range(active_count):
        corr = np.abs(pilots.conj().T @ resid) / safe_norm
        corr[col_norm == 0] = -1.0
        corr[support] = -1.0  # no reselection
        support.append(int(np.argmax(corr)))
        sol, *_ = np.linalg.lstsq(pilots[:, support], y, rcond=None)
        resid = y - pilots[:, support] @ sol
    idx = np.array(support, dtype=int)
    x[idx] = sol
    order = np.argsort(idx)
    return idx[order], x


def gammse_estimate(
    y: np.ndarray,
    pilots: np.ndarray,
    true_support: np.ndarray,
    true_hyper,
    profiles,
    noise_var: float,
    em_variant: str = "both-components",
) -> np.ndarray:
    """Genie-aided MMSE: Gaussian conditioning on the true support.

    true_support is the length-K 0/1 activity vector; true_hyper the true
    per-group impairment(s), from which the exact Gaussian channel priors
    are built.  Inactive devices get exact zeros.
    """
    active = np.asarray(true_support).astype(bool)
    x = np.zeros(active.size, dtype=complex)
    idx = np.flatnonzero(active)
    if idx.size == 0:
        return x
    if noise_var <= 0:
        raise ValueError("gammse_estimate needs noise_var > 0")
    pm = prior_moments(profiles, true_hyper, em_variant)
    Ps = pilots[:, idx]
    mus = pm.mu[idx]
    vs = pm.v[idx]
    S = (Ps * vs) @ Ps.conj().T + noise_var * np.eye(pilots.shape[0])
    z = cho_solve(cho_factor(S, lower=True), y - Ps @ mus)
    x[idx] = mus + vs * (Ps.conj().T @ z)
    return x


@dataclass(frozen=True)
class OraclePosterior:
    """Exact posterior summary from full activity-pattern enumeration."""

    support_probs: np.ndarray  # (K,) marginal activity probabilities
    mmse_estimate: np.ndarray  # (K,) posterior-mixture mean of h ⊙ a
    map_support: np.ndarray  # (K,) 0/1 highest-posterior pattern
    log_evidence: float


def exact_posterior_oracle(
    y: np.ndarray, pilots: np.ndarray, priors: PriorMoments, p_a: float, noise_var: float
) -> OraclePosterior:
    """Exact Bernoulli-Gaussian posterior by enumerating all 2^K patterns.

    Per pattern the observation is Gaussian with mean P_a mu_a and
    covariance P_a diag(v_a) P_a^H + noise_var I; evidences accumulate in
    the log domain and are normalized with log-sum-exp.  Enumeration is
    chunked so large L stays within memory.
    """
    L, K = pilots.shape
    if K > ORACLE_MAX_K:
        raise ValueError(f"enumeration oracle supports K <= {ORACLE_MAX_K}, got {K}")
    if not 0.0 <= p_a <= 1.0:
        raise ValueError("p_a must lie in [0, 1]")
    if noise_var <= 0:
        raise ValueError("oracle needs noise_var > 0")

    n_pat = 1 << K
    masks = ((np.arange(n_pat)[:, None] >> np.arange(K)[None, :]) & 1).astype(float)
    sizes = masks.sum(axis=1)
    log_pa = np.log(p_a) if p_a > 0 else -np.inf
    log_qa = np.log1p(-p_a) if p_a < 1 else -np.inf
    with np.errstate(invalid="ignore"):  # 0 * -inf in the discarded branch
        log_prior = np.where(sizes > 0, sizes * log_pa, 0.0) + np.where(
            sizes < K, (K - sizes) * log_qa, 0.0
        )

    # per-device covariance contribution v_k p_k p_k^H
    outer = priors.v[:, None, None] * (pilots.T[:, :, None] * pilots.conj().T[:, None, :])
    eye = np.eye(L)

    log_like = np.empty(n_pat)
    post_mean = np.empty((n_pat, K), dtype=complex)
    chunk = max(1, int(4_000_000 // (L * L)))
    for lo in range(0, n_pat, chunk):
        hi = min(lo + chunk, n_pat)
        m = masks[lo:hi]
        Sig = np.tensordot(m, outer, axes=(1, 0)) + noise_var * eye
        mean_y = (m * priors.mu[None, :]) @ pilots.T
        resid = y[None, :] - mean_y
        chol = np.linalg.cholesky(Sig)
        logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2).real), axis=1)
        z = np.linalg.solve(Sig, resid[..., None])[..., 0]
        quad = np.sum(resid.conj() * z, axis=1).real
        log_like[lo:hi] = -L * np.log(np.pi) - logdet - quad
        post_mean[lo:hi] = m * (priors.mu[None, :] + priors.v[None, :] * (z @ pilots.conj()))

    log_w = log_like + log_prior
    log_z = float(logsumexp(log_w))
    w = np.exp(log_w - log_z)
    support_probs = w @ masks
    mmse = w @ post_mean
    map_support = masks[int(np.argmax(log_w))].astype(np.int8)
    return OraclePosterior(
        support_probs=support_probs,
        mmse_estimate=mmse,
        map_support=map_support,
        log_evidence=log_z,
    )
