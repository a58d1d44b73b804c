"""Fidelity of a cached sample against the full-computation sample."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import ConfigError, as_tensor, check_same_length
from .policies import Action

PSNR_CAP_DB = 99.0
SSIM_WINDOW = 8
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def mae(ref, test) -> float:
    ref, test = as_tensor(ref), as_tensor(test)
    check_same_length(ref, test, "reference and test")
    return float(np.abs(ref - test).mean())


def psnr(ref, test) -> float:
    """PSNR in dB with the peak taken as the reference's dynamic range.

    Identical inputs give the cap of 99 dB. A constant reference has no
    dynamic range; a peak of 1 is used instead.
    """
    ref, test = as_tensor(ref), as_tensor(test)
    check_same_length(ref, test, "reference and test")
    mse = float(np.mean((ref - test) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    peak = float(ref.max() - ref.min()) or 1.0
    return min(PSNR_CAP_DB, 10.0 * math.log10(peak * peak / mse))


def _as_grid(a, width, height) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        return a
    if width is None or height is None:
        raise ConfigError("flat tensors need width and height for SSIM")
    return a.reshape(height, width)


def ssim(ref, test, width: int | None = None, height: int | None = None, window: int = SSIM_WINDOW,
         k1: float = SSIM_K1, k2: float = SSIM_K2) -> float:
    """Mean SSIM over all ``window x window`` patches (stride 1, uniform weights).

    Local statistics use population (1/N) moments. ``L`` is the dynamic range
    of ``ref``.
    """
    a, b = _as_grid(ref, width, height), _as_grid(test, width, height)
    if a.shape != b.shape:
        raise ConfigError(f"grid shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape) < window:
        raise ConfigError(f"grid {a.shape} is smaller than the {window}x{window} window")
    L = float(a.max() - a.min()) or 1.0
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    pa = sliding_window_view(a, (window, window)).reshape(-1, window * window)
    pb = sliding_window_view(b, (window, window)).reshape(-1, window * window)
    mu_a, mu_b = pa.mean(axis=1), pb.mean(axis=1)
    da, db = pa - mu_a[:, None], pb - mu_b[:, None]
    var_a, var_b = (da * da).mean(axis=1), (db * db).mean(axis=1)
    cov = (da * db).mean(axis=1)
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class FidelityReport:
    psnr_db: float
    ssim: float | None
    mae: float
    dynamic_range: float

    def to_dict(self) -> dict:
        return asdict(self)


def fidelity(ref, test, width: int | None = None, height: int | None = None) -> FidelityReport:
    ref, test = as_tensor(ref), as_tensor(test)
    grid_ok = width is not None and height is not None and min(width, height) >= SSIM_WINDOW
    return FidelityReport(
        psnr_db=psnr(ref, test),
        ssim=ssim(ref, test, width, height) if grid_ok else None,
        mae=mae(ref, test),
        dynamic_range=float(ref.max() - ref.min()),
    )


def coefficient_of_variation(values) -> float:
    """Population std over |mean|; 0 for a constant series, inf for zero mean."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return float("nan")
    sd = float(v.std())
    if sd == 0.0:
        return 0.0
    m = abs(float(v.mean()))
    return sd / m if m > 0 else math.inf


def phase_windows(T: int, early: float = 0.2, late: float = 0.5) -> tuple[range, range]:
    """Early window ``t in [1, ceil(early*T))`` and late window (last ``late*T`` steps).

    The early window starts at 1 because the rate needs two steps.
    """
    n_early = max(2, math.ceil(early * T))
    n_late = max(1, math.floor(late * T))
    return range(1, n_early), range(T - n_late, T)


def reuse_runs(trace) -> list[int]:
    """Number of reused steps between each pair of consecutive full computations."""
    runs, current = [], None
    for action in trace.decisions:
        if action is Action.FULL:
            if current is not None:
                runs.append(current)
            current = 0
        elif current is not None:
            current += 1
    return runs


def trace_stats(trace, bins=(0.0, 0.5, 1.0, 2.0, 5.0, 10.0, math.inf)) -> dict:
    """Summary of a trace: rate statistics per phase, epsilon histogram, reuse runs."""
    k = trace.column("k")
    T = len(trace)
    early, late = phase_windows(T)
    eps = trace.column("epsilon")
    eps = eps[np.isfinite(eps)]
    hist, _ = np.histogram(eps, bins=np.asarray(bins))
    return {
        "steps": T,
        "eval_count": trace.eval_count,
        "k_mean_early": float(np.mean(k[list(early)])),
        "k_cv_early": coefficient_of_variation(k[list(early)]),
        "k_mean_late": float(np.mean(k[list(late)])),
        "k_cv_late": coefficient_of_variation(k[list(late)]),
        "epsilon_hist": hist.tolist(),
        "epsilon_bins": list(bins),
        "reuse_runs": reuse_runs(trace),
    }
