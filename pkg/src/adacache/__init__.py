"""Runtime-adaptive reuse of transformation vectors in Euler flow samplers."""

from .core import (
    ConfigError,
    ContractError,
    LatentState,
    NumericError,
    PhiloxStream,
    Schedule,
    euler_step,
    l1_mean,
    uniform_schedule,
)
from .engine import RunConfig, TrajectoryTrace, run_cached, run_full, sample, step_speedup
from .fields import AffineField, MixtureFlowField, VelocityOracle, load_field_json, load_preset, sample_initial
from .harness import RunReport, SweepSpec, execute, match_speedup, run_sweep
from .metrics import FidelityReport, fidelity, mae, psnr, ssim, trace_stats
from .policies import (
    Action,
    CacheState,
    KUpdate,
    PolicyConfig,
    Reason,
    StepDecision,
    StepProbe,
    accumulate,
    easycache_decide,
    local_stability_indicator,
    make_policy,
    replay_skip_set,
    transform_rate,
    update_k,
)

__version__ = "0.1.0"
