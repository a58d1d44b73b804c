"""Closed-form velocity fields that stand in for the expensive network.

``MixtureFlowField`` is the exact marginal velocity of rectified flow
``x_s = (1 - s) z + s y`` with ``z ~ N(0, I)`` and ``y`` drawn from a finite
set of anchors. ``AffineField`` is a degenerate field ``A x + b`` whose
transformation vector ``v - x`` is constant when ``A == 1``.
"""

from __future__ import annotations

import json
import threading
from abc import ABC, abstractmethod
from pathlib import Path

import numpy as np

from .core import ConfigError, ContractError, PhiloxStream, as_tensor, check_same_length


class VelocityOracle(ABC):
    """Deterministic velocity model with a thread-safe evaluation counter."""

    width: int | None = None
    height: int | None = None

    def __init__(self):
        self._count = 0
        self._lock = threading.Lock()

    @property
    def dim(self) -> int:
        raise NotImplementedError

    @property
    def eval_count(self) -> int:
        return self._count

    def evaluate(self, x, s: float) -> np.ndarray:
        v = self.velocity(as_tensor(x), float(s))
        with self._lock:
            self._count += 1
        return v

    @abstractmethod
    def velocity(self, x: np.ndarray, s: float) -> np.ndarray:
        """Pure velocity computation; does not touch the counter."""


class MixtureFlowField(VelocityOracle):
    def __init__(self, anchors, priors=None, width=None, height=None, name="mixture"):
        super().__init__()
        anchors = np.atleast_2d(np.asarray(anchors, dtype=np.float64))
        if anchors.shape[0] < 1 or anchors.shape[1] < 1:
            raise ConfigError("a mixture field needs at least one nonempty anchor")
        if not np.all(np.isfinite(anchors)):
            raise ConfigError("anchors must be finite")
        K, d = anchors.shape
        if priors is None:
            priors = np.full(K, 1.0 / K)
        priors = np.asarray(priors, dtype=np.float64)
        if priors.shape != (K,) or np.any(priors < 0) or not np.isclose(priors.sum(), 1.0, atol=1e-9):
            raise ConfigError("priors must be K nonnegative weights summing to 1")
        if (width is None) != (height is None):
            raise ConfigError("width and height must be given together")
        if width is not None and width * height != d:
            raise ConfigError(f"grid {width}x{height} does not match dim {d}")
        self.anchors = anchors
        self.priors = priors / priors.sum()
        self.width = width
        self.height = height
        self.name = name
        with np.errstate(divide="ignore"):
            self._log_priors = np.log(self.priors)

    @property
    def dim(self) -> int:
        return self.anchors.shape[1]

    def posterior(self, x: np.ndarray, s: float) -> np.ndarray:
        """Posterior anchor weights given ``x`` at time ``s``."""
        if not 0.0 <= s < 1.0:
            raise ContractError(f"mixture field is undefined at s={s!r}")
        x = as_tensor(x)
        if x.shape[0] != self.dim:
            raise ContractError(f"x has length {x.shape[0]}, anchors have {self.dim}")
        # overflow surfaces as non-finite output; the engine reports it
        with np.errstate(over="ignore", invalid="ignore"):
            sq = np.sum((x[None, :] - s * self.anchors) ** 2, axis=1)
            logw = self._log_priors - sq / (2.0 * (1.0 - s) ** 2)
            logw -= logw.max()
            w = np.exp(logw)
            return w / w.sum()

    def velocity(self, x: np.ndarray, s: float) -> np.ndarray:
        w = self.posterior(x, s)
        y_bar = w @ self.anchors
        return (y_bar - x) / (1.0 - s)

    def to_json(self) -> dict:
        return {
            "dim": self.dim,
            "width": self.width,
            "height": self.height,
            "anchors": self.anchors.tolist(),
            "priors": self.priors.tolist(),
        }


class AffineField(VelocityOracle):
    def __init__(self, A: float, b, name="affine"):
        super().__init__()
        self.A = float(A)
        self.b = as_tensor(b).copy()
        self.name = name

    @property
    def dim(self) -> int:
        return self.b.shape[0]

    def velocity(self, x: np.ndarray, s: float) -> np.ndarray:
        check_same_length(x, self.b, "x and bias")
        return self.A * x + self.b


def mixture_velocity(field: MixtureFlowField, x, s: float) -> np.ndarray:
    return field.velocity(as_tensor(x), float(s))


def affine_velocity(field: AffineField, x, s: float = 0.0) -> np.ndarray:
    return field.velocity(as_tensor(x), float(s))


def sample_initial(dim: int, seed: int) -> np.ndarray:
    """Standard-normal starting latent from :class:`PhiloxStream`."""
    if not isinstance(dim, (int, np.integer)) or dim < 1:
        raise ConfigError(f"dim must be a positive integer, got {dim!r}")
    return PhiloxStream(seed).normal(int(dim))


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

PRESET_SEED = 20240601


def _two_point_1d() -> MixtureFlowField:
    return MixtureFlowField([[1.0], [-1.0]], name="two-point-1d")


def _gauss_grid_2d() -> MixtureFlowField:
    angles = 2.0 * np.pi * np.arange(8) / 8
    pts = 3.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return MixtureFlowField(pts, name="gauss-grid-2d")


def _smooth_pattern(rng: PhiloxStream, size: int, width: float, bumps: int = 6) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.zeros((size, size))
    for _ in range(bumps):
        cx, cy = rng.uniform(2) * size
        sign = 2.0 * rng.uniform(1)[0] - 1.0
        img += sign * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * width**2))
    img -= img.mean()
    img /= np.sqrt((img**2).mean())
    return img.reshape(-1)


# (bump width in pixels, amplitude) per level, coarse to fine
GLYPH_LEVELS = ((4.0, 0.2), (2.5, 0.08), (1.6, 0.035), (1.0, 0.015))
GLYPH_BASE_WIDTH = 5.0
GLYPH_BASE_AMPLITUDE = 2.0


def glyph_set(size: int = 16, seed: int = PRESET_SEED) -> np.ndarray:
    """Sixteen multi-scale grayscale glyphs, one per 4-bit code.

    Every glyph is a shared base image plus, at each of four levels, a
    smooth pattern added with sign given by one bit of the glyph index.
    Coarse levels have the largest amplitude, so under the flow the coarse
    bits are resolved early and the fine ones late.
    """
    rng = PhiloxStream(seed)
    base = GLYPH_BASE_AMPLITUDE * _smooth_pattern(rng, size, GLYPH_BASE_WIDTH)
    patterns = [(amp, _smooth_pattern(rng, size, width)) for width, amp in GLYPH_LEVELS]
    glyphs = np.empty((1 << len(patterns), size * size))
    for code in range(glyphs.shape[0]):
        img = base.copy()
        for level, (amp, pattern) in enumerate(patterns):
            img += (amp if (code >> level) & 1 else -amp) * pattern
        glyphs[code] = img
    return glyphs


def _digits_16x16() -> MixtureFlowField:
    return MixtureFlowField(glyph_set(), width=16, height=16, name="digits-16x16")


MIXTURE_PRESETS = {
    "two-point-1d": _two_point_1d,
    "gauss-grid-2d": _gauss_grid_2d,
    "digits-16x16": _digits_16x16,
}

AFFINE_PRESETS = {
    # v = x + 0.5: transformation vector is constant.
    "affine-identity": (1.0, 0.5),
    # v = 1: constant field.
    "affine-constant": (0.0, 1.0),
}

DEFAULT_AFFINE_DIM = 16


def preset_names() -> list[str]:
    return list(MIXTURE_PRESETS) + list(AFFINE_PRESETS)


def load_preset(name: str, dim: int | None = None) -> VelocityOracle:
    if name in MIXTURE_PRESETS:
        field = MIXTURE_PRESETS[name]()
        if dim is not None and dim != field.dim:
            raise ConfigError(f"preset {name!r} has dim {field.dim}, not {dim}")
        return field
    if name in AFFINE_PRESETS:
        A, b = AFFINE_PRESETS[name]
        d = DEFAULT_AFFINE_DIM if dim is None else dim
        if d < 1:
            raise ConfigError("dim must be >= 1")
        return AffineField(A, np.full(d, b), name=name)
    raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")


def load_field_json(path) -> MixtureFlowField:
    """Load an anchor set: ``{"dim", "width", "height", "anchors", "priors"}``."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read field file {path}: {exc}") from exc
    try:
        anchors = np.asarray(data["anchors"], dtype=np.float64)
        dim = int(data["dim"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed field file {path}: {exc}") from exc
    if anchors.ndim != 2 or anchors.shape[1] != dim:
        raise ConfigError(f"anchors in {path} do not have length dim={dim}")
    return MixtureFlowField(
        anchors,
        data.get("priors"),
        width=data.get("width"),
        height=data.get("height"),
        name=Path(path).stem,
    )


def save_field_json(field: MixtureFlowField, path) -> None:
    Path(path).write_text(json.dumps(field.to_json()) + "\n", encoding="utf-8")
