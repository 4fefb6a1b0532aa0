"""Joint user-activity detection and channel estimation for grant-free
random access over land-mobile-satellite channels.

Core pieces: a Rician channel/scenario model with shared multiplicative
impairments (channel), a Bernoulli-Rician message-passing engine
(message_passing), an outer EM loop estimating the impairments (em),
reference estimators plus an exact enumeration oracle (baselines),
evaluation metrics (metrics), and a config-driven Monte-Carlo harness
with a CLI (experiments, cli).
"""

from .channel import (
    ChannelRealization,
    DeviceProfile,
    Impairment,
    ImpairmentPrior,
    ParameterRanges,
    Scenario,
    ScenarioConfig,
    generate_pilots,
    generate_scenario,
    noise_var_from_snr,
    sample_activity,
    sample_devices,
    sample_impairment,
    scenario_from_json,
    scenario_to_json,
    synthesize,
)
from .message_passing import (
    DecisionState,
    HyperEstimate,
    MessageState,
    PriorMoments,
    decide,
    init_messages,
    llr_to_prob,
    prior_llr,
    prior_moments,
    prob_to_llr,
    run_inner,
    sn_update,
    vn_update,
)
from .em import (
    EmStatistics,
    EstimationResult,
    RunTrace,
    brmpem,
    em_root,
    em_statistics,
    em_update,
    em_update_los_only,
    select_em_set,
)
from .baselines import (
    OraclePosterior,
    exact_posterior_oracle,
    gammse_estimate,
    lmmse_estimate,
    ls_estimate,
    omp_estimate,
)
from .metrics import (
    TrialMetrics,
    hyper_mse,
    iterations_to_converge,
    nmse,
    successful_recovery,
    uad_error_rate,
)
from .experiments import (
    ExperimentSpec,
    PtcPoint,
    PtcSpec,
    ResultRow,
    ResultTable,
    emit,
    oracle_check,
    preset,
    ptc_search,
    run_experiment,
    table_from_json,
    table_to_csv,
    table_to_json,
)

__version__ = "0.1.0"
