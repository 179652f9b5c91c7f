"""Interaction-aware trajectory prediction and stochastic TTC analysis."""

__version__ = "0.1.0"

from .dynamics import (  # noqa: F401
    ControlInput,
    ControlLimits,
    GradeProfile,
    Trajectory,
    VehicleState,
    behavior_controls,
    estimate_controls,
    extrapolate_beyond_horizon,
    rk4_step,
    rollout,
)
from .model import (  # noqa: F401
    HostHypothesis,
    ModeSet,
    PredictorConfig,
    init_params,
    load_model,
    predict,
    save_model,
)
from .safety import (  # noqa: F401
    PairRisk,
    SafetyThresholds,
    TtcDistribution,
    hf_ttc_mode,
    scenario_risk,
    traditional_ttc,
    ttc_distribution,
)
from .training import (  # noqa: F401
    MetricsReport,
    TrainConfig,
    compute_metrics,
    evaluate,
    select_best_mode,
    train,
)
