"""Bernoulli-Rician message passing for joint activity detection and CE.

The factor graph has one variable node (VN) per device and one sum node
(SN) per pilot symbol.  Each directed edge carries a Rician message (a
complex mean and a variance for the channel coefficient) and a Bernoulli
message (an activity log-likelihood ratio).  One inner iteration is a
flooding schedule: every SN→VN message is refreshed from the current
VN→SN messages, then every VN→SN message from the new SN→VN ones.
Per-device decisions combine all incoming SN messages with the prior.

LLRs are the canonical Bernoulli representation; probabilities are only
materialized right before exponentiation, under a +/-40 clamp.  Every
computed variance is floored at 1e-12, and pilot entries with
|P_kl|^2 < 1e-12 contribute neutral messages on their edge.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .channel import DeviceArrays

LLR_CLAMP = 40.0
VAR_FLOOR = 1e-12
PILOT_FLOOR = 1e-12  # on |P_kl|^2
NEUTRAL_VAR = 1.0 / VAR_FLOOR


def llr_to_prob(llr: np.ndarray) -> np.ndarray:
    """Activity probability from LLR, clamped to +/-LLR_CLAMP before exp."""
    x = np.clip(llr, -LLR_CLAMP, LLR_CLAMP)
    return 1.0 / (1.0 + np.exp(-x))


def prob_to_llr(p: np.ndarray) -> np.ndarray:
    """LLR from activity probability; inverse of llr_to_prob inside the clamp.

    1 - lo is not representable in double precision, so the upper tail is
    handled by clamping the resulting LLR instead of the probability.
    """
    lo = 1.0 / (1.0 + np.exp(LLR_CLAMP))  # prob at llr = -LLR_CLAMP
    q = np.clip(p, lo, np.nextafter(1.0, 0.0))
    return np.clip(np.log(q) - np.log1p(-q), -LLR_CLAMP, LLR_CLAMP)


def prior_llr(p_a: float) -> float:
    """l0 = ln(p_a / (1 - p_a))."""
    if not 0.0 < p_a < 1.0:
        raise ValueError("p_a must lie strictly in (0, 1) for a finite prior LLR")
    return float(np.log(p_a) - np.log1p(-p_a))


@dataclass(frozen=True)
class HyperEstimate:
    """Current estimate of one group's shared impairment (h_r, phi_delta)."""

    h_r: float
    phi_delta: float

    def __post_init__(self):
        if not self.h_r > 0:
            raise ValueError("h_r estimate must be positive")


@dataclass(frozen=True)
class PriorMoments:
    """Per-device prior mean/variance of the channel under current hypers."""

    mu: np.ndarray  # (K,) complex
    v: np.ndarray  # (K,) positive real


def prior_moments(
    profiles, hyper: Sequence[HyperEstimate] | HyperEstimate, em_variant: str = "both-components"
) -> PriorMoments:
    """Prior channel moments implied by the impairment estimates.

    Under "both-components" the impairment scales the whole channel, so
    mu = h_r * h_los * exp(j(phi_los + phi_delta)) and v = h_r^2 * v_ray.
    Under "los-only" the scattering is unimpaired: same mean, v = v_ray.
    """
    dev = DeviceArrays.coerce(profiles)
    if hasattr(hyper, "h_r"):  # single estimate (or true impairment) for group 0
        hyper = [hyper]
    h_r = np.array([h.h_r for h in hyper])[dev.group]
    phi = np.array([h.phi_delta for h in hyper])[dev.group]
    mu = h_r * dev.h_los * np.exp(1j * (dev.phi_los + phi))
    if em_variant == "both-components":
        v = h_r**2 * dev.v_ray
    elif em_variant == "los-only":
        v = dev.v_ray.copy()
    else:
        raise ValueError(f"unknown em_variant {em_variant!r}")
    return PriorMoments(mu=mu, v=np.maximum(v, VAR_FLOOR))


@dataclass
class MessageState:
    """All edge messages.  vn_* are (K, L) device-to-pilot, sn_* are (L, K)."""

    vn_mu: np.ndarray
    vn_v: np.ndarray
    vn_llr: np.ndarray
    sn_mu: np.ndarray
    sn_v: np.ndarray
    sn_llr: np.ndarray


@dataclass
class DecisionState:
    """Per-device posterior summary after an inner iteration."""

    mu_dec: np.ndarray  # (K,) complex posterior means
    mu_dec_prev: np.ndarray | None  # previous call's mu_dec (None on first)
    v_dec: np.ndarray  # (K,) posterior variances
    llr_dec: np.ndarray  # (K,) activity LLRs including the CE refinement term
    delta_k: np.ndarray  # (K,) relative change of mu_dec; +inf without history
    active_hat: np.ndarray  # (K,) 0/1 decisions, strict llr_dec > 0


def init_messages(cfg, profiles, hyper: Sequence[HyperEstimate] | HyperEstimate) -> MessageState:
    """Fresh message state: VN messages at the prior, SN messages neutral."""
    prior = prior_moments(profiles, hyper, cfg.em_variant)
    K, L = cfg.K, cfg.L
    l0 = prior_llr(cfg.p_a)
    return MessageState(
        vn_mu=np.tile(prior.mu[:, None], (1, L)),
        vn_v=np.tile(prior.v[:, None], (1, L)),
        vn_llr=np.full((K, L), l0),
        sn_mu=np.zeros((L, K), dtype=complex),
        sn_v=np.full((L, K), NEUTRAL_VAR),
        sn_llr=np.zeros((L, K)),
    )


def sn_update(state: MessageState, y: np.ndarray, pilots: np.ndarray, noise_var: float) -> MessageState:
    """Refresh all SN→VN messages from the current VN→SN messages.

    Each sum node treats the other devices' contributions as an equivalent
    Gaussian interference with mean mu_star and variance v_star (the
    Bernoulli weight enters through p*(v + (1-p)|mu|^2)), then inverts its
    own observation around that interference.  The activity LLR compares
    the observation likelihood with the device absent (moments mu_star,
    v_star) against present (moments mu1, v1).
    """
    P = pilots
    absP2 = np.abs(P) ** 2
    # vn arrays are (K, L); work in (L, K) to align with sn arrays
    pvn = llr_to_prob(state.vn_llr).T
    mu_vn = state.vn_mu.T
    v_vn = state.vn_v.T

    m = P * (pvn * mu_vn)
    s = absP2 * (pvn * (v_vn + (1.0 - pvn) * np.abs(mu_vn) ** 2))
    mu_star = m.sum(axis=1, keepdims=True) - m
    v_star = noise_var + s.sum(axis=1, keepdims=True) - s
    v_star = np.maximum(v_star, VAR_FLOOR)

    ok = absP2 >= PILOT_FLOOR
    safe_P = np.where(ok, P, 1.0)
    safe_absP2 = np.where(ok, absP2, 1.0)

    resid = y[:, None] - mu_star
    sn_mu = np.where(ok, resid / safe_P, 0.0)
    sn_v = np.where(ok, np.maximum(v_star / safe_absP2, VAR_FLOOR), NEUTRAL_VAR)

    mu1 = P * mu_vn + mu_star
    v1 = np.maximum(v_star + absP2 * v_vn, VAR_FLOOR)
    llr = (
        np.log(v_star / v1)
        + np.abs(resid) ** 2 / v_star
        - np.abs(y[:, None] - mu1) ** 2 / v1
    )
    sn_llr = np.where(ok, llr, 0.0)

    state.sn_mu, state.sn_v, state.sn_llr = sn_mu, sn_v, sn_llr
    return state


def vn_update(
    state: MessageState,
    prior: PriorMoments,
    l0: float,
    full_messages: bool = False,
    damping: float = 0.0,
) -> MessageState:
    """Refresh all VN→SN messages from the current SN→VN messages.

    Gaussian messages combine in precision form with the prior; the LLR is
    the prior LLR plus the incoming SN LLRs.  By default the combination is
    extrinsic (the destination edge's own contribution is excluded); with
    full_messages every outgoing edge carries the full combination, which
    is cheaper and loses little at realistic sizes.
    """
    inv_v = 1.0 / state.sn_v  # (L, K)
    wmu = state.sn_mu * inv_v
    sum_inv = inv_v.sum(axis=0)  # (K,)
    sum_wmu = wmu.sum(axis=0)
    sum_llr = state.sn_llr.sum(axis=0)

    prior_prec = 1.0 / prior.v
    prior_wmu = prior.mu * prior_prec

    if full_messages:
        prec = prior_prec + sum_inv  # (K,)
        v = 1.0 / prec
        mu = v * (prior_wmu + sum_wmu)
        L = state.sn_v.shape[0]
        vn_v = np.tile(v[:, None], (1, L))
        vn_mu = np.tile(mu[:, None], (1, L))
        vn_llr = np.tile((l0 + sum_llr)[:, None], (1, L))
    else:
        prec = (prior_prec + sum_inv)[None, :] - inv_v  # (L, K), extrinsic
        vn_v = np.maximum(1.0 / np.maximum(prec, 1.0 / NEUTRAL_VAR), VAR_FLOOR).T
        vn_mu = (((prior_wmu + sum_wmu)[None, :] - wmu) / np.maximum(prec, 1.0 / NEUTRAL_VAR)).T
        vn_llr = ((l0 + sum_llr)[None, :] - state.sn_llr).T

    if damping > 0.0:
        vn_mu = (1.0 - damping) * vn_mu + damping * state.vn_mu

    state.vn_mu, state.vn_v, state.vn_llr = vn_mu, vn_v, vn_llr
    return state


def decide(
    state: MessageState, prior: PriorMoments, l0: float, prev: DecisionState | None = None
) -> DecisionState:
    """Per-device posterior moments and activity decision from all SN messages.

    The activity LLR adds a channel-estimation refinement term l_ce that
    rewards posterior means that are large relative to their uncertainty.
    delta_k tracks the relative change of mu_dec against the previous
    decision (infinite when there is no usable history), feeding the
    EM-set gate.
    """
    inv_v = 1.0 / state.sn_v
    sum_inv = inv_v.sum(axis=0)
    sum_wmu = (state.sn_mu * inv_v).sum(axis=0)
    sum_llr = state.sn_llr.sum(axis=0)

    # no floor here: prior.v and sn_v are themselves floored, so the
    # combined precision is finite and v_dec strictly positive; clamping
    # v_dec up would silently scale mu_dec at very high effective SNR
    v_dec = 1.0 / (1.0 / prior.v + sum_inv)
    mu_dec = v_dec * (prior.mu / prior.v + sum_wmu)

    v_tot = prior.v + v_dec
    l_ce = (
        np.log(v_dec / v_tot)
        + np.abs(mu_dec) ** 2 / v_dec
        - np.abs(mu_dec - prior.mu) ** 2 / v_tot
    )
    llr_dec = l0 + sum_llr + l_ce
    active = (llr_dec > 0).astype(np.int8)

    if prev is None:
        mu_prev = None
        delta = np.full(mu_dec.shape, np.inf)
    else:
        mu_prev = prev.mu_dec
        denom = np.abs(mu_prev)
        with np.errstate(divide="ignore", invalid="ignore"):
            delta = np.abs(mu_dec - mu_prev) / denom
        delta = np.where(denom > 0, delta, np.inf)
    return DecisionState(
        mu_dec=mu_dec,
        mu_dec_prev=mu_prev,
        v_dec=v_dec,
        llr_dec=llr_dec,
        delta_k=delta,
        active_hat=active,
    )


def run_inner(
    y: np.ndarray,
    pilots: np.ndarray,
    noise_var: float,
    prior: PriorMoments,
    l0: float,
    n_in: int,
    state: MessageState,
    full_messages: bool = False,
    damping: float = 0.0,
    on_decision: Callable[[int, DecisionState], None] = None,
) -> tuple[MessageState, DecisionState]:
    """n_in flooding iterations of sn_update/vn_update on the given state.

    A decision is evaluated after every SN phase, so by the last iteration
    the returned DecisionState holds mu_dec at n_in with mu_dec_prev at
    n_in - 1, which is what the EM-set gate needs.  With n_in = 0 the state
    is untouched and the decision reflects the prior alone.  The state is
    updated in place and returned together with the final decision.
    """
    decision = None
    if n_in == 0:
        decision = decide(state, prior, l0, prev=None)
        if on_decision is not None:
            on_decision(0, decision)
        return state, decision
    for t in range(1, n_in + 1):
        sn_update(state, y, pilots, noise_var)
        decision = decide(state, prior, l0, prev=decision)
        if on_decision is not None:
            on_decision(t, decision)
        vn_update(state, prior, l0, full_messages=full_messages, damping=damping)
    return state, decision
