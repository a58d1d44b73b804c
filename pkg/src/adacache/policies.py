"""Step policies: the adaptive caching controller and the ablation baselines.

A policy only *decides* whether step ``t`` runs the oracle. The sampler in
:mod:`adacache.engine` owns the cache refresh and the cached-output update
``v_hat = x_t + delta_i``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from .core import ConfigError, PhiloxStream, as_tensor, check_same_length, l1_mean

NORM_FLOOR = 1e-12
EMA_DECAY = 0.9


class Action(str, Enum):
    FULL = "full"
    REUSE = "reuse"


class Reason(str, Enum):
    WARMUP = "warmup"
    FINAL = "final"
    THRESHOLD = "threshold"
    STABLE = "stable"


class KUpdate(str, Enum):
    LOCAL = "local"
    EMA = "ema"
    AVERAGE = "avg"


VARIANTS = ("easycache", "static", "probabilistic", "output-relative", "no-recompute", "step-reduction")
_K_ALIASES = {"local": KUpdate.LOCAL, "ema": KUpdate.EMA, "avg": KUpdate.AVERAGE, "average": KUpdate.AVERAGE,
              "history-average": KUpdate.AVERAGE}


@dataclass
class StepDecision:
    action: Action
    epsilon: float = 0.0
    E_after: float = 0.0
    reason: Reason = Reason.STABLE

    @property
    def reuse(self) -> bool:
        return self.action is Action.REUSE


@dataclass
class StepProbe:
    """Runtime-available inputs to the decision at step ``t``."""

    x: np.ndarray
    dx_norm: float
    v_prev_norm: float


@dataclass
class CacheState:
    delta: np.ndarray | None = None
    ref_step: int = -1
    k: float = 0.0
    E: float = 0.0
    prev_x: np.ndarray | None = None
    prev_v: np.ndarray | None = None
    prev_v_approx: bool = False
    prev_prev_v: np.ndarray | None = None
    prev_full_x: np.ndarray | None = None
    prev_full_v: np.ndarray | None = None
    full_count: int = 0
    k_samples: list[float] = field(default_factory=list)
    # last local rate sample and whether its older velocity was an approximation
    k_sample: float | None = None
    k_sample_approx: bool = False


@dataclass
class PolicyConfig:
    """Which policy to run and its knobs. ``tau`` is in percent."""

    variant: str = "easycache"
    tau: float = 5.0
    R: int = 10
    k_update: KUpdate = KUpdate.LOCAL
    interval: float = 2.0
    p: float = 0.5
    seed: int | None = None
    warm: int = 20
    fraction: float = 0.5

    def __post_init__(self):
        if isinstance(self.k_update, str) and not isinstance(self.k_update, KUpdate):
            try:
                self.k_update = _K_ALIASES[self.k_update.lower()]
            except KeyError:
                raise ConfigError(f"unknown k_update {self.k_update!r}") from None
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {', '.join(VARIANTS)}")
        if not self.tau >= 0:
            raise ConfigError(f"tau must be a nonnegative percentage, got {self.tau!r}")
        if int(self.R) != self.R or self.R < 1:
            raise ConfigError(f"R must be an integer >= 1, got {self.R!r}")
        if self.variant == "static" and not self.interval >= 1:
            raise ConfigError(f"static interval must be >= 1, got {self.interval!r}")
        if self.variant == "probabilistic" and not 0.0 <= self.p <= 1.0:
            raise ConfigError(f"reuse probability must lie in [0, 1], got {self.p!r}")
        if self.variant == "no-recompute" and (int(self.warm) != self.warm or self.warm < 1):
            raise ConfigError(f"no-recompute warm-up must be an integer >= 1, got {self.warm!r}")
        if self.variant == "step-reduction" and not 0.0 < self.fraction <= 1.0:
            raise ConfigError(f"step fraction must lie in (0, 1], got {self.fraction!r}")

    # only the knobs relevant to the variant go to JSON
    _KNOBS = {
        "easycache": ("tau", "R", "k_update"),
        "static": ("interval", "R"),
        "probabilistic": ("p", "seed", "R"),
        "output-relative": ("tau", "R"),
        "no-recompute": ("warm",),
        "step-reduction": ("fraction",),
    }

    def to_dict(self) -> dict:
        raw = asdict(self)
        out = {"variant": self.variant}
        for key in self._KNOBS[self.variant]:
            value = raw[key]
            out[key] = value.value if isinstance(value, Enum) else value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "PolicyConfig":
        known = {"variant", "tau", "R", "k_update", "interval", "p", "seed", "warm", "fraction"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown policy keys: {', '.join(sorted(unknown))}")
        kw = dict(data)
        for key in ("tau", "interval", "p", "fraction"):
            if key in kw:
                kw[key] = float(kw[key])
        for key in ("R", "warm"):
            if key in kw:
                if float(kw[key]) != int(kw[key]):
                    raise ConfigError(f"{key} must be an integer")
                kw[key] = int(kw[key])
        return cls(**kw)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "PolicyConfig":
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# scalar pieces of the criterion
# ---------------------------------------------------------------------------

def transform_rate(v_a, v_b, x_a, x_b, previous: float = 0.0) -> float:
    """Output change over input change, both as mean absolute values.

    Returns ``previous`` when the inputs did not move (rate undefined).
    """
    v_a, v_b, x_a, x_b = (as_tensor(a) for a in (v_a, v_b, x_a, x_b))
    check_same_length(v_a, v_b, "velocities")
    check_same_length(x_a, x_b, "inputs")
    check_same_length(v_a, x_a, "velocity and input")
    dx = l1_mean(x_a - x_b)
    if dx < NORM_FLOOR:
        return previous
    return l1_mean(v_a - v_b) / dx


def local_stability_indicator(k: float, dx_norm: float, v_prev_norm: float) -> float:
    """Estimated output change at this step, in percent of the latest output.

    Returns ``inf`` when the latest output is (numerically) zero, which any
    finite threshold turns into a full computation.
    """
    if k == 0.0 or dx_norm == 0.0:
        return 0.0
    if v_prev_norm < NORM_FLOOR:
        return math.inf
    return 100.0 * k * dx_norm / v_prev_norm


def accumulate(E: float, epsilon: float) -> float:
    return E + epsilon


def update_k(config: PolicyConfig, cache: CacheState, new_full_x, new_full_v, t: int) -> float:
    """Refresh the held rate after a full computation at step ``t``.

    The new sample uses the consecutive pair ``(x_t, v_t)``, ``(x_{t-1}, v_{t-1})``
    where ``v_{t-1}`` is whatever output step ``t-1`` produced (possibly cached).
    """
    if cache.prev_x is None or cache.prev_v is None:
        cache.k_sample = None
        return cache.k
    sample = transform_rate(new_full_v, cache.prev_v, new_full_x, cache.prev_x, previous=cache.k)
    cache.k_sample = sample
    cache.k_sample_approx = cache.prev_v_approx
    mode = config.k_update
    if mode is KUpdate.LOCAL:
        cache.k = sample
    elif mode is KUpdate.EMA:
        # seeded with the first sample rather than with 0
        cache.k = sample if not cache.k_samples else EMA_DECAY * cache.k + (1.0 - EMA_DECAY) * sample
        cache.k_samples.append(sample)
    else:
        # history covers the rate available at the end of warm-up and later
        if t >= max(1, config.R - 1):
            cache.k_samples.append(sample)
            cache.k = float(np.mean(cache.k_samples))
        else:
            cache.k = sample
    return cache.k


def ema(k_old: float, k_new: float) -> float:
    return EMA_DECAY * k_old + (1.0 - EMA_DECAY) * k_new


def history_average(samples) -> float:
    return float(np.mean(samples))


# ---------------------------------------------------------------------------
# decision functions
# ---------------------------------------------------------------------------

def _forced(t: int, T: int, warmup: int) -> StepDecision | None:
    if t < warmup:
        return StepDecision(Action.FULL, reason=Reason.WARMUP)
    if t == T - 1:
        return StepDecision(Action.FULL, reason=Reason.FINAL)
    return None


def easycache_decide(t: int, T: int, config: PolicyConfig, cache: CacheState, probe: StepProbe | None) -> StepDecision:
    forced = _forced(t, T, config.R)
    if forced is not None:
        return forced
    eps = local_stability_indicator(cache.k, probe.dx_norm, probe.v_prev_norm)
    E = accumulate(cache.E, eps)
    # a NaN indicator means the norms degenerated; never treat that as stable
    if not E < config.tau:
        return StepDecision(Action.FULL, eps, 0.0, Reason.THRESHOLD)
    return StepDecision(Action.REUSE, eps, E, Reason.STABLE)


def replay_skip_set(epsilon_trace, tau: float, R: int, T: int) -> set[int]:
    """Steps the accumulated criterion would reuse if every epsilon were frozen."""
    if len(epsilon_trace) != T:
        raise ConfigError(f"epsilon trace has {len(epsilon_trace)} entries, expected T={T}")
    skipped = set()
    E = 0.0
    for t in range(R, T - 1):
        E = accumulate(E, epsilon_trace[t])
        if E >= tau:
            E = 0.0
        else:
            skipped.add(t)
    return skipped


class StepPolicy:
    """Base class; subclasses implement :meth:`decide`."""

    uses_probe = False

    def __init__(self, config: PolicyConfig):
        self.config = config

    def reset(self, run_seed: int = 0) -> None:
        pass

    def decide(self, t: int, T: int, cache: CacheState, probe: StepProbe | None) -> StepDecision:
        raise NotImplementedError

    def on_full_compute(self, t: int, cache: CacheState, x: np.ndarray, v: np.ndarray) -> None:
        update_k(self.config, cache, x, v, t)

    def on_reuse(self, t: int, cache: CacheState, decision: StepDecision) -> None:
        cache.E = decision.E_after


class FullPolicy(StepPolicy):
    """Runs the oracle at every step."""

    def decide(self, t, T, cache, probe):
        return StepDecision(Action.FULL, reason=Reason.WARMUP if t < T - 1 else Reason.FINAL)


class EasyCachePolicy(StepPolicy):
    uses_probe = True

    def decide(self, t, T, cache, probe):
        return easycache_decide(t, T, self.config, cache, probe)


class StaticPolicy(StepPolicy):
    """Full computation whenever a multiple of ``interval`` falls in ``(t-1, t]``.

    For an integer interval this is ``t % interval == 0``; a fractional
    interval lets the compute budget be matched continuously.
    """

    def decide(self, t, T, cache, probe):
        forced = _forced(t, T, self.config.R)
        if forced is not None:
            return forced
        n = self.config.interval
        if math.floor(t / n) > math.floor((t - 1) / n):
            return StepDecision(Action.FULL, reason=Reason.THRESHOLD)
        return StepDecision(Action.REUSE, reason=Reason.STABLE)


class ProbabilisticPolicy(StepPolicy):
    # separate from stream 0, which draws the initial latent for the same seed
    RNG_STREAM = 1

    def reset(self, run_seed: int = 0):
        seed = self.config.seed if self.config.seed is not None else run_seed
        self._rng = PhiloxStream(seed, self.RNG_STREAM)

    def decide(self, t, T, cache, probe):
        forced = _forced(t, T, self.config.R)
        if forced is not None:
            return forced
        if self._rng.uniform(1)[0] < self.config.p:
            return StepDecision(Action.REUSE, reason=Reason.STABLE)
        return StepDecision(Action.FULL, reason=Reason.THRESHOLD)


class OutputRelativePolicy(StepPolicy):
    """Accumulates the relative change between the two latest outputs."""

    uses_probe = True

    def decide(self, t, T, cache, probe):
        forced = _forced(t, T, self.config.R)
        if forced is not None:
            return forced
        if cache.prev_prev_v is None:
            return StepDecision(Action.FULL, reason=Reason.THRESHOLD)
        denom = l1_mean(cache.prev_v)
        eps = math.inf if denom < NORM_FLOOR else 100.0 * l1_mean(cache.prev_v - cache.prev_prev_v) / denom
        E = accumulate(cache.E, eps)
        if not E < self.config.tau:
            return StepDecision(Action.FULL, eps, 0.0, Reason.THRESHOLD)
        return StepDecision(Action.REUSE, eps, E, Reason.STABLE)


class NoRecomputePolicy(StepPolicy):
    def decide(self, t, T, cache, probe):
        forced = _forced(t, T, self.config.warm)
        if forced is not None:
            return forced
        return StepDecision(Action.REUSE, reason=Reason.STABLE)


def baseline_decide(config: PolicyConfig, t: int, T: int, rng: PhiloxStream | None = None,
                    cache: CacheState | None = None) -> StepDecision:
    """Stateless entry point for the non-adaptive baselines."""
    if config.variant == "easycache":
        raise ConfigError("baseline_decide does not handle the adaptive policy")
    if config.variant == "step-reduction":
        return StepDecision(Action.FULL, reason=Reason.WARMUP if t < T - 1 else Reason.FINAL)
    policy = make_policy(config)
    if isinstance(policy, ProbabilisticPolicy):
        policy._rng = rng if rng is not None else PhiloxStream(config.seed or 0, ProbabilisticPolicy.RNG_STREAM)
    return policy.decide(t, T, cache if cache is not None else CacheState(), None)


_POLICIES = {
    "easycache": EasyCachePolicy,
    "static": StaticPolicy,
    "probabilistic": ProbabilisticPolicy,
    "output-relative": OutputRelativePolicy,
    "no-recompute": NoRecomputePolicy,
    "step-reduction": FullPolicy,
}


def make_policy(config: PolicyConfig) -> StepPolicy:
    return _POLICIES[config.variant](config)
