"""The sampling loop.

One loop serves every policy: at each step the policy decides, and the loop
either calls the oracle (refreshing the cache) or applies the cached
transformation vector ``v_hat = x_t + delta_i``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    DEFAULT_DELTA_END,
    ConfigError,
    ContractError,
    NumericError,
    Schedule,
    as_tensor,
    euler_step,
    initial_state,
    l1_mean,
    uniform_schedule,
)
from .fields import VelocityOracle, load_field_json, load_preset, sample_initial
from .policies import (
    Action,
    CacheState,
    FullPolicy,
    PolicyConfig,
    Reason,
    StepPolicy,
    StepProbe,
    make_policy,
)

TRACE_HEADER = ("t", "s", "decision", "reason", "x_norm", "v_norm", "k", "epsilon", "E", "approx")


def fmt(value) -> str:
    """Numeric formatting used for every file the package writes."""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return "%.12g" % value


@dataclass
class StepRecord:
    t: int
    s: float
    action: Action
    reason: Reason
    x_norm: float
    v_norm: float
    k: float
    epsilon: float
    E: float
    approx: bool
    # the held delta used on reuse steps / refreshed on full steps
    delta: np.ndarray = field(repr=False, default=None)
    v: np.ndarray = field(repr=False, default=None)
    x: np.ndarray = field(repr=False, default=None)


@dataclass
class TrajectoryTrace:
    steps: list[StepRecord]
    final_x: np.ndarray
    eval_count: int
    nominal_steps: int
    # full-compute steps whose rate sample used a cached velocity for v_{t-1}
    k_from_approx: list[int] = field(default_factory=list)

    def __len__(self):
        return len(self.steps)

    @property
    def decisions(self) -> list[Action]:
        return [r.action for r in self.steps]

    @property
    def full_steps(self) -> list[int]:
        return [r.t for r in self.steps if r.action is Action.FULL]

    @property
    def reuse_steps(self) -> list[int]:
        return [r.t for r in self.steps if r.action is Action.REUSE]

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.steps], dtype=np.float64)

    def rows(self):
        for r in self.steps:
            yield (r.t, r.s, r.action.value, r.reason.value, r.x_norm, r.v_norm, r.k, r.epsilon, r.E, r.approx)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TRACE_HEADER)
        for row in self.rows():
            writer.writerow([v if isinstance(v, str) else fmt(v) for v in row])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8", newline="\n")


def sample(field: VelocityOracle, x0, schedule: Schedule, policy: StepPolicy,
           seed: int = 0, keep_tensors: bool = False) -> tuple[np.ndarray, TrajectoryTrace]:
    """Integrate from ``x0`` over ``schedule`` under ``policy``.

    Raises :class:`NumericError` if the state or an output becomes non-finite.
    """
    T = schedule.T
    state = initial_state(x0, schedule)
    if state.x.shape[0] != field.dim:
        raise ContractError(f"x0 has length {state.x.shape[0]}, field expects {field.dim}")
    policy.reset(seed)
    cache = CacheState()
    start = field.eval_count
    records: list[StepRecord] = []
    k_from_approx: list[int] = []

    for t in range(T):
        x = state.x
        probe = None
        if t > 0 and policy.uses_probe:
            probe = StepProbe(x, l1_mean(x - cache.prev_x), l1_mean(cache.prev_v))
        decision = policy.decide(t, T, cache, probe)
        if decision.action is Action.REUSE and (cache.delta is None or cache.ref_step >= t):
            raise ContractError(f"policy asked to reuse at step {t} with no earlier full computation")

        if decision.action is Action.REUSE:
            v = x + cache.delta
            approx = True
            policy.on_reuse(t, cache, decision)
        else:
            v = field.evaluate(x, state.s)
            approx = False
            policy.on_full_compute(t, cache, x, v)
            if cache.k_sample is not None and cache.k_sample_approx:
                k_from_approx.append(t)
            cache.delta = v - x
            cache.ref_step = t
            cache.E = 0.0
            cache.prev_full_x, cache.prev_full_v = x, v
            cache.full_count += 1

        if not np.all(np.isfinite(v)):
            raise NumericError(f"non-finite velocity at step {t}")
        records.append(StepRecord(
            t=t, s=state.s, action=decision.action, reason=decision.reason,
            x_norm=l1_mean(x), v_norm=l1_mean(v), k=cache.k,
            epsilon=decision.epsilon if math.isfinite(decision.epsilon) else float("nan"),
            E=cache.E, approx=approx, delta=cache.delta,
            v=v if keep_tensors else None, x=x if keep_tensors else None,
        ))
        cache.prev_prev_v = cache.prev_v
        cache.prev_x, cache.prev_v, cache.prev_v_approx = x, v, approx
        state = euler_step(state, v, schedule)
        if not np.all(np.isfinite(state.x)):
            raise NumericError(f"non-finite state after step {t}")

    trace = TrajectoryTrace(records, state.x, field.eval_count - start, T, k_from_approx)
    return state.x, trace


def step_speedup(trace: TrajectoryTrace) -> float:
    if trace.eval_count <= 0:
        raise ContractError("trace has no oracle evaluations")
    return trace.nominal_steps / trace.eval_count


# ---------------------------------------------------------------------------
# configured runs
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    """Everything that determines a run. Identical configs give identical bits."""

    preset: str | None = "two-point-1d"
    field_json: str | None = None
    dim: int | None = None
    T: int = 50
    delta_end: float = DEFAULT_DELTA_END
    seed: int = 0
    policy: PolicyConfig = field(default_factory=PolicyConfig)

    def __post_init__(self):
        if isinstance(self.policy, dict):
            self.policy = PolicyConfig.from_dict(self.policy)
        if (self.preset is None) == (self.field_json is None):
            raise ConfigError("exactly one of preset and field_json must be set")
        if int(self.T) != self.T or self.T < 2:
            raise ConfigError(f"T must be an integer >= 2, got {self.T!r}")
        if int(self.seed) != self.seed or self.seed < 0:
            raise ConfigError(f"seed must be a nonnegative integer, got {self.seed!r}")
        self.T = int(self.T)
        self.seed = int(self.seed)

    def build_field(self) -> VelocityOracle:
        if self.field_json is not None:
            f = load_field_json(self.field_json)
            if self.dim is not None and self.dim != f.dim:
                raise ConfigError(f"field file has dim {f.dim}, not {self.dim}")
            return f
        return load_preset(self.preset, self.dim)

    def schedule(self) -> Schedule:
        return uniform_schedule(self.T, self.delta_end)

    def to_dict(self) -> dict:
        return {
            "preset": self.preset,
            "field_json": self.field_json,
            "dim": self.dim,
            "T": self.T,
            "delta_end": self.delta_end,
            "seed": self.seed,
            "policy": self.policy.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {"preset", "field_json", "dim", "T", "delta_end", "seed", "policy"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown run config keys: {', '.join(sorted(unknown))}")
        kw = dict(data)
        if "field_json" in kw and kw.get("field_json") is not None and "preset" not in kw:
            kw["preset"] = None
        kw["policy"] = PolicyConfig.from_dict(kw.get("policy", {}))
        return cls(**kw)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _start(config: RunConfig, field: VelocityOracle) -> np.ndarray:
    return sample_initial(field.dim, config.seed)


def run_full(config: RunConfig, keep_tensors: bool = False) -> tuple[np.ndarray, TrajectoryTrace]:
    """Reference run: the oracle is evaluated at every step."""
    field = config.build_field()
    return sample(field, _start(config, field), config.schedule(), FullPolicy(PolicyConfig()),
                  config.seed, keep_tensors)


def run_cached(config: RunConfig, keep_tensors: bool = False) -> tuple[np.ndarray, TrajectoryTrace]:
    """Run under ``config.policy``.

    The step-reduction baseline integrates a shorter uniform schedule with the
    same end time and full computation everywhere.
    """
    field = config.build_field()
    x0 = _start(config, field)
    if config.policy.variant == "step-reduction":
        n = max(2, math.ceil(config.policy.fraction * config.T - 1e-9))
        x, trace = sample(field, x0, uniform_schedule(n, config.delta_end), FullPolicy(config.policy),
                          config.seed, keep_tensors)
        trace.nominal_steps = config.T
        return x, trace
    return sample(field, x0, config.schedule(), make_policy(config.policy), config.seed, keep_tensors)
