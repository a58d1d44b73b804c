"""Shared types, the time schedule and small numeric primitives.

Samples are dense float64 numpy vectors. A W x H grid is kept flat in
row-major order; only the metrics module ever reshapes it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_DELTA_END = 0.02


class ContractError(ValueError):
    """An operation was called with inputs that violate its contract."""


class ConfigError(ValueError):
    """A configuration value is out of range or unknown."""


class NumericError(FloatingPointError):
    """The sampler produced a non-finite state."""


def as_tensor(a) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 1:
        arr = arr.reshape(-1)
    return arr


def check_same_length(a: np.ndarray, b: np.ndarray, what: str = "tensors") -> None:
    if a.shape != b.shape:
        raise ContractError(f"{what} differ in length: {a.shape[0]} vs {b.shape[0]}")


def l1_mean(a) -> float:
    """Mean absolute value, i.e. the L1 norm divided by the element count."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.size == 0:
        raise ContractError("l1_mean of an empty tensor")
    return float(np.abs(arr).mean())


@dataclass(frozen=True)
class Schedule:
    """Integration times ``s_0 = 0 < s_1 < ... < s_T <= 1 - delta_end``."""

    times: tuple[float, ...]
    delta_end: float = DEFAULT_DELTA_END

    def __post_init__(self):
        if len(self.times) < 3:
            raise ConfigError("a schedule needs at least 2 steps")
        if self.delta_end <= 0:
            raise ConfigError("delta_end must be positive")
        diffs = np.diff(np.asarray(self.times))
        if np.any(diffs <= 0):
            raise ConfigError("schedule times must be strictly increasing")
        if self.times[-1] > 1.0 - self.delta_end + 1e-15:
            raise ConfigError("final time exceeds 1 - delta_end")

    @property
    def T(self) -> int:
        return len(self.times) - 1

    def dt(self, t: int) -> float:
        """Width of step ``t``, i.e. ``s_t - s_{t-1}`` for ``1 <= t <= T``."""
        return self.times[t] - self.times[t - 1]


def uniform_schedule(T: int, delta_end: float = DEFAULT_DELTA_END) -> Schedule:
    if not isinstance(T, (int, np.integer)) or T < 2:
        raise ConfigError(f"T must be an integer >= 2, got {T!r}")
    if not 0.0 < delta_end < 0.5:
        raise ConfigError(f"delta_end must lie in (0, 0.5), got {delta_end!r}")
    span = 1.0 - delta_end
    times = tuple(j * span / T for j in range(T + 1))
    return Schedule(times=times, delta_end=delta_end)


@dataclass(frozen=True)
class LatentState:
    x: np.ndarray
    t: int
    s: float


def initial_state(x0, schedule: Schedule) -> LatentState:
    return LatentState(x=as_tensor(x0).copy(), t=0, s=schedule.times[0])


def euler_step(state: LatentState, v, schedule: Schedule) -> LatentState:
    """Advance one explicit Euler step: ``x + v * (s_{t+1} - s_t)``."""
    if state.t >= schedule.T:
        raise ContractError(f"step index {state.t} is already at T={schedule.T}")
    v = as_tensor(v)
    check_same_length(state.x, v, "state and velocity")
    t_next = state.t + 1
    x_next = state.x + v * schedule.dt(t_next)
    return LatentState(x=x_next, t=t_next, s=schedule.times[t_next])


class PhiloxStream:
    """Reproducible random stream on the Philox4x64-10 counter-based generator.

    Only the raw 64-bit words of the bit generator are used; the conversion to
    uniforms (top 53 bits) and to normals (Box-Muller) is done here, so the
    output depends on nothing but the Philox algorithm and numpy's documented
    ``SeedSequence`` key derivation.
    """

    def __init__(self, seed: int, stream: int = 0):
        if seed < 0 or stream < 0:
            raise ConfigError("seed and stream must be nonnegative")
        self.seed, self.stream = int(seed), int(stream)
        # stream 0 is the plain key; others get an independent spawned key
        key = self.seed if self.stream == 0 else np.random.SeedSequence(self.seed, spawn_key=(self.stream,))
        self._bits = np.random.Philox(key)

    def raw(self, n: int) -> np.ndarray:
        return np.asarray(self._bits.random_raw(n), dtype=np.uint64)

    def uniform(self, n: int) -> np.ndarray:
        """Uniform draws on the open interval (0, 1)."""
        words = self.raw(n) >> np.uint64(11)
        return (words.astype(np.float64) + 0.5) * 2.0**-53

    def normal(self, n: int) -> np.ndarray:
        m = (n + 1) // 2
        u1 = self.uniform(m)
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.empty(2 * m)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]
