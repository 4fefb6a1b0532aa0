"""Land-mobile-satellite channel model and scenario generation.

Each device sees a Rician channel built from a deterministic line-of-sight
ray and a zero-mean complex-Gaussian scattering term.  On top of that, all
devices in a geographic group share a multiplicative impairment
``h_r * exp(1j * phi_delta)``: a log-normal fading amplitude and a common
phase rotation, both unknown to the receiver.  Two composition variants are
supported:

* ``"both-components"``: the impairment multiplies LoS and scattering alike,
  ``h_k = h_r * exp(1j*phi_delta) * (s_k + h_los_k * exp(1j*phi_los_k))``
* ``"los-only"``: only the LoS ray is impaired,
  ``h_k = s_k + h_r * exp(1j*phi_delta) * h_los_k * exp(1j*phi_los_k)``

with ``s_k ~ CN(0, v_ray_k)``.  Devices are active independently with
probability ``p_a``; the receiver observes ``y = P (h ⊙ a) + n`` over L
pilot symbols with i.i.d. ``CN(0, 1)`` pilot entries and noise variance
``sigma_n^2 = 10**(-snr_db / 10)``.

All randomness is driven by named sub-streams derived from one root seed,
so any component (pilots, activity, scattering, noise, impairment, device
profiles) can be regenerated independently and reproducibly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np

# dB-domain log-normal spread -> natural-log sigma
DB_SCALE = np.log(10.0) / 20.0

EM_VARIANTS = ("both-components", "los-only")

# stable role -> spawn-key mapping for per-component RNG sub-streams
_RNG_ROLES = {
    "devices": 0,
    "pilots": 1,
    "activity": 2,
    "scattering": 3,
    "noise": 4,
    "impairment": 5,
}


def sub_rng(seed: int, role: str) -> np.random.Generator:
    """Deterministic per-role generator derived from one root seed."""
    if role not in _RNG_ROLES:
        raise ValueError(f"unknown rng role {role!r}")
    ss = np.random.SeedSequence(seed, spawn_key=(_RNG_ROLES[role],))
    return np.random.default_rng(ss)


@dataclass(frozen=True)
class DeviceProfile:
    """Static per-device channel statistics.

    h_los is the LoS amplitude (so the LoS power is h_los**2), phi_los the
    LoS phase, v_ray the scattering variance, and group the index of the
    geographic group whose impairment the device shares.
    """

    h_los: float
    phi_los: float
    v_ray: float
    group: int = 0

    def __post_init__(self):
        if self.h_los < 0:
            raise ValueError("h_los must be nonnegative")
        if not -np.pi <= self.phi_los <= np.pi:
            raise ValueError("phi_los must lie in [-pi, pi]")
        if self.v_ray <= 0:
            raise ValueError("v_ray must be positive")
        if self.group < 0:
            raise ValueError("group must be nonnegative")


@dataclass(frozen=True)
class ImpairmentPrior:
    """Hyper-prior of the shared impairment.

    ln h_r ~ N(mu_r, (DB_SCALE * sigma_r)**2) with sigma_r given in dB, and
    phi_delta ~ N(0, sigma_delta**2).  h_bar_r is the prior mean E[h_r] used
    to initialize the detector; when not supplied it is derived from the
    log-normal moments.
    """

    mu_r: float
    sigma_r: float
    sigma_delta: float
    h_bar_r: float = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.sigma_r < 0:
            raise ValueError("sigma_r must be nonnegative")
        if self.sigma_delta < 0:
            raise ValueError("sigma_delta must be nonnegative")
        if self.h_bar_r is None:
            s = DB_SCALE * self.sigma_r
            object.__setattr__(self, "h_bar_r", float(np.exp(self.mu_r + 0.5 * s * s)))
        if self.h_bar_r <= 0:
            raise ValueError("h_bar_r must be positive")

    def effective_moments(self) -> tuple[float, float]:
        """Mean and variance of the complex impairment h_r * exp(1j*phi_delta)."""
        s = DB_SCALE * self.sigma_r
        m1 = np.exp(self.mu_r + 0.5 * s * s)
        m2 = np.exp(2.0 * self.mu_r + 2.0 * s * s)  # E[h_r^2]
        mean = m1 * np.exp(-0.5 * self.sigma_delta**2)
        return float(mean), float(m2 - mean**2)


@dataclass(frozen=True)
class Impairment:
    """One realization of a group's shared impairment."""

    h_r: float
    phi_delta: float

    def __post_init__(self):
        if self.h_r <= 0:
            raise ValueError("h_r must be positive")


@dataclass(frozen=True)
class ParameterRanges:
    """Uniform sampling intervals for per-device statistics."""

    h_los_sq: tuple[float, float] = (0.6, 0.7)
    v_ray: tuple[float, float] = (0.2, 0.25)

    def __post_init__(self):
        for name, (lo, hi) in (("h_los_sq", self.h_los_sq), ("v_ray", self.v_ray)):
            if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
                raise ValueError(f"{name} interval must be finite with lo <= hi")
        if self.h_los_sq[0] < 0:
            raise ValueError("h_los_sq must be nonnegative")
        if self.v_ray[0] <= 0:
            raise ValueError("v_ray must be positive")


@dataclass(frozen=True)
class ScenarioConfig:
    """Dimensions and knobs of one Monte-Carlo scenario.

    K devices, L pilot symbols, activity probability p_a, SNR in dB,
    n_in inner message-passing iterations per outer round, n_out outer
    rounds, eta_th the relative-change threshold for the EM set,
    em_variant the channel composition variant, full_message_approx the
    cheaper non-extrinsic message option, and seed the root RNG seed.
    """

    K: int
    L: int
    p_a: float
    snr_db: float
    n_in: int = 10
    n_out: int = 5
    eta_th: float = 0.2
    em_variant: str = "both-components"
    full_message_approx: bool = False
    n_groups: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.K < 1 or self.L < 1:
            raise ValueError("K and L must be positive")
        if not 0.0 < self.p_a < 1.0:
            raise ValueError("p_a must lie strictly in (0, 1)")
        if self.n_in < 1 or self.n_out < 1:
            raise ValueError("iteration counts must be positive")
        if not 0.0 < self.eta_th <= 1.0:
            raise ValueError("eta_th must lie in (0, 1]")
        if self.em_variant not in EM_VARIANTS:
            raise ValueError(f"em_variant must be one of {EM_VARIANTS}")
        if self.n_groups < 1 or self.n_groups > self.K:
            raise ValueError("n_groups must lie in [1, K]")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")


@dataclass(frozen=True)
class ChannelRealization:
    """Ground truth of one trial: activity, channels, impairments, noise level."""

    activity: np.ndarray  # (K,) 0/1 ints
    channel: np.ndarray  # (K,) complex, all K channels (inactive ones too)
    scattering: np.ndarray  # (K,) complex scattering components
    impairments: tuple[Impairment, ...]  # one per group
    noise_var: float

    @property
    def effective(self) -> np.ndarray:
        """The channel-activity product h ⊙ a the receiver has to recover."""
        return self.channel * self.activity


@dataclass(frozen=True)
class Scenario:
    """A fully realized trial: config, devices, pilots, truth, observation."""

    cfg: ScenarioConfig
    profiles: tuple[DeviceProfile, ...]
    pilots: np.ndarray  # (L, K) complex
    realization: ChannelRealization
    y: np.ndarray  # (L,) complex


class DeviceArrays:
    """Column view of a batch of DeviceProfile objects for vectorized math."""

    __slots__ = ("h_los", "phi_los", "v_ray", "group", "n_groups")

    def __init__(self, h_los, phi_los, v_ray, group):
        self.h_los = np.asarray(h_los, dtype=float)
        self.phi_los = np.asarray(phi_los, dtype=float)
        self.v_ray = np.asarray(v_ray, dtype=float)
        self.group = np.asarray(group, dtype=int)
        self.n_groups = int(self.group.max()) + 1 if self.group.size else 0

    @classmethod
    def from_profiles(cls, profiles: Sequence[DeviceProfile]) -> "DeviceArrays":
        return cls(
            [p.h_los for p in profiles],
            [p.phi_los for p in profiles],
            [p.v_ray for p in profiles],
            [p.group for p in profiles],
        )

    @classmethod
    def coerce(cls, obj) -> "DeviceArrays":
        return obj if isinstance(obj, DeviceArrays) else cls.from_profiles(obj)

    def __len__(self):
        return self.h_los.size


def noise_var_from_snr(snr_db: float) -> float:
    """Noise variance for unit-power pilots: sigma_n^2 = 10**(-snr_db/10)."""
    return float(10.0 ** (-snr_db / 10.0))


def sample_devices(
    cfg: ScenarioConfig,
    ranges: ParameterRanges,
    rng: np.random.Generator = None,
    groups: Sequence[int] = None,
) -> tuple[DeviceProfile, ...]:
    """Draw K device profiles.

    LoS phases are uniform on [-pi, pi); LoS powers and scattering variances
    are uniform on the configured intervals.  Groups follow the explicit map
    when given, otherwise devices are assigned round-robin over
    cfg.n_groups (all group 0 by default).
    """
    if rng is None:
        rng = sub_rng(cfg.seed, "devices")
    if groups is None:
        group_ids = np.arange(cfg.K) % cfg.n_groups
    else:
        group_ids = np.asarray(list(groups), dtype=int)
        if group_ids.shape != (cfg.K,):
            raise ValueError("groups must assign exactly K devices")
        if group_ids.min() < 0 or group_ids.max() >= cfg.n_groups:
            raise ValueError("group ids must lie in [0, n_groups)")
    phi = rng.uniform(-np.pi, np.pi, size=cfg.K)
    h_los = np.sqrt(rng.uniform(*ranges.h_los_sq, size=cfg.K))
    v_ray = rng.uniform(*ranges.v_ray, size=cfg.K)
    return tuple(
        DeviceProfile(float(h_los[k]), float(phi[k]), float(v_ray[k]), int(group_ids[k]))
        for k in range(cfg.K)
    )


def sample_impairment(prior: ImpairmentPrior, rng: np.random.Generator) -> Impairment:
    """Draw one impairment: log-normal amplitude, Gaussian phase."""
    h_r = rng.lognormal(mean=prior.mu_r, sigma=DB_SCALE * prior.sigma_r)
    phi = rng.normal(0.0, prior.sigma_delta) if prior.sigma_delta > 0 else 0.0
    return Impairment(float(h_r), float(phi))


def sample_activity(K: int, p_a: float, rng: np.random.Generator) -> np.ndarray:
    """Independent Bernoulli(p_a) activity indicators."""
    if not 0.0 <= p_a <= 1.0:
        raise ValueError("p_a must lie in [0, 1]")
    return (rng.random(K) < p_a).astype(np.int8)


def generate_pilots(K: int, L: int, rng: np.random.Generator) -> np.ndarray:
    """(L, K) pilot matrix with i.i.d. CN(0, 1) entries (E|P|^2 = 1)."""
    return (rng.standard_normal((L, K)) + 1j * rng.standard_normal((L, K))) / np.sqrt(2.0)


def _complex_normal(rng: np.random.Generator, var, size) -> np.ndarray:
    std = np.sqrt(np.asarray(var, dtype=float) / 2.0)
    return std * (rng.standard_normal(size) + 1j * rng.standard_normal(size))


def realize(
    cfg: ScenarioConfig,
    profiles: Sequence[DeviceProfile],
    prior: ImpairmentPrior,
    rng_activity: np.random.Generator,
    rng_scatter: np.random.Generator,
    rng_impairment: np.random.Generator,
    impairments: Sequence[Impairment] = None,
) -> ChannelRealization:
    """Draw activity, scattering and impairments; compose the channels.

    Pass ``impairments`` to pin the shared impairment of each group (for
    controlled tests); otherwise one impairment per group is drawn from the
    prior.
    """
    dev = DeviceArrays.from_profiles(profiles)
    if len(dev) != cfg.K:
        raise ValueError("profile count must match cfg.K")
    n_groups = max(cfg.n_groups, dev.n_groups)
    if impairments is None:
        impairments = tuple(sample_impairment(prior, rng_impairment) for _ in range(n_groups))
    else:
        impairments = tuple(impairments)
        if len(impairments) < n_groups:
            raise ValueError("need one impairment per group")
    activity = sample_activity(cfg.K, cfg.p_a, rng_activity)
    scatter = _complex_normal(rng_scatter, dev.v_ray, cfg.K)
    g_amp = np.array([im.h_r for im in impairments])[dev.group]
    g_phase = np.array([im.phi_delta for im in impairments])[dev.group]
    los = dev.h_los * np.exp(1j * dev.phi_los)
    rot = g_amp * np.exp(1j * g_phase)
    if cfg.em_variant == "both-components":
        channel = rot * (scatter + los)
    else:  # los-only: scattering bypasses the impairment
        channel = scatter + rot * los
    return ChannelRealization(
        activity=activity,
        channel=channel,
        scattering=scatter,
        impairments=impairments,
        noise_var=noise_var_from_snr(cfg.snr_db),
    )


def synthesize(
    pilots: np.ndarray, realization: ChannelRealization, rng_noise: np.random.Generator
) -> np.ndarray:
    """Received pilot block y = P (h ⊙ a) + n."""
    L = pilots.shape[0]
    noise = _complex_normal(rng_noise, realization.noise_var, L)
    return pilots @ realization.effective + noise


def generate_scenario(
    cfg: ScenarioConfig,
    ranges: ParameterRanges = ParameterRanges(),
    prior: ImpairmentPrior = None,
    impairments: Sequence[Impairment] = None,
) -> Scenario:
    """Draw one complete trial from the root seed in cfg.

    Every component uses its own named sub-stream, so e.g. the pilots of a
    scenario can be regenerated without touching the noise draw.
    """
    if prior is None:
        prior = ImpairmentPrior(mu_r=0.13, sigma_r=1.0, sigma_delta=np.pi / 8)
    profiles = sample_devices(cfg, ranges, sub_rng(cfg.seed, "devices"))
    pilots = generate_pilots(cfg.K, cfg.L, sub_rng(cfg.seed, "pilots"))
    realization = realize(
        cfg,
        profiles,
        prior,
        rng_activity=sub_rng(cfg.seed, "activity"),
        rng_scatter=sub_rng(cfg.seed, "scattering"),
        rng_impairment=sub_rng(cfg.seed, "impairment"),
        impairments=impairments,
    )
    y = synthesize(pilots, realization, sub_rng(cfg.seed, "noise"))
    return Scenario(cfg=cfg, profiles=profiles, pilots=pilots, realization=realization, y=y)


# --- JSON replay format -----------------------------------------------------
#
# Complex vectors are stored as [[re, im], ...] pairs.  Pilots and noise are
# not stored: they regenerate deterministically from cfg.seed, so a document
# plus rebuild_observation() reproduces the exact received block.


def _cvec_to_json(z: np.ndarray) -> list:
    return [[float(v.real), float(v.imag)] for v in z]


def _cvec_from_json(pairs) -> np.ndarray:
    arr = np.asarray(pairs, dtype=float)
    return arr[:, 0] + 1j * arr[:, 1]


def scenario_to_json(scenario: Scenario) -> str:
    r = scenario.realization
    doc = {
        "config": asdict(scenario.cfg),
        "profiles": [asdict(p) for p in scenario.profiles],
        "realization": {
            "activity": [int(a) for a in r.activity],
            "channel": _cvec_to_json(r.channel),
            "scattering": _cvec_to_json(r.scattering),
            "impairments": [asdict(im) for im in r.impairments],
            "noise_var": float(r.noise_var),
        },
    }
    return json.dumps(doc, indent=2)


def scenario_from_json(text: str) -> Scenario:
    """Rebuild a scenario from its JSON document.

    The stored truth is taken verbatim; pilots and the received block are
    regenerated from the stored seed.
    """
    doc = json.loads(text)
    cfg = ScenarioConfig(**doc["config"])
    profiles = tuple(DeviceProfile(**p) for p in doc["profiles"])
    r = doc["realization"]
    realization = ChannelRealization(
        activity=np.asarray(r["activity"], dtype=np.int8),
        channel=_cvec_from_json(r["channel"]),
        scattering=_cvec_from_json(r["scattering"]),
        impairments=tuple(Impairment(**im) for im in r["impairments"]),
        noise_var=float(r["noise_var"]),
    )
    pilots = generate_pilots(cfg.K, cfg.L, sub_rng(cfg.seed, "pilots"))
    y = synthesize(pilots, realization, sub_rng(cfg.seed, "noise"))
    return Scenario(cfg=cfg, profiles=profiles, pilots=pilots, realization=realization, y=y)
