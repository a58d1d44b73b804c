import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from adacache.core import ContractError, ConfigError, PhiloxStream
from adacache.engine import RunConfig, run_cached, run_full
from adacache.fields import glyph_set
from adacache.metrics import (
    PSNR_CAP_DB,
    coefficient_of_variation,
    fidelity,
    mae,
    phase_windows,
    psnr,
    reuse_runs,
    ssim,
    trace_stats,
)
from adacache.policies import PolicyConfig
from oracles import ssim_mp

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


class TestPsnr:
    def test_identical_is_capped(self):
        assert psnr([0.0, 1.0, 3.0], [0.0, 1.0, 3.0]) == PSNR_CAP_DB == 99.0

    def test_unit_offset(self):
        ref = np.array([0.0, 1.0, 1.0, 0.0])
        assert psnr(ref, ref + 1.0) == pytest.approx(0.0, abs=1e-12)

    def test_peak_from_reference(self):
        assert psnr([0.0, 2.0], [0.0, 1.0]) == pytest.approx(10 * math.log10(8), abs=1e-12)
        assert psnr([0.0, 2.0], [0.0, 1.0]) == pytest.approx(9.0309, abs=1e-4)

    def test_not_symmetric_in_peak(self):
        assert psnr([0.0, 2.0], [0.0, 1.0]) != psnr([0.0, 1.0], [0.0, 2.0])

    def test_constant_reference_uses_unit_peak(self):
        assert psnr([1.0, 1.0], [1.5, 1.5]) == pytest.approx(10 * math.log10(4))

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            psnr([1.0], [1.0, 2.0])


def _grid(seed, shape=(16, 16)):
    return np.asarray(PhiloxStream(seed).normal(shape[0] * shape[1])).reshape(shape)


class TestSsim:
    def test_self_is_one(self):
        a = _grid(1)
        assert ssim(a, a) == pytest.approx(1.0, abs=1e-15)

    def test_anticorrelated(self):
        # a checkerboard is zero-mean in every even-sized window
        a = np.indices((16, 16)).sum(axis=0) % 2 * 2.0 - 1.0
        assert ssim(a, -a + 0.5) <= 0.0
        assert ssim(a, -a) < -0.99

    def test_preset_glyph_with_noise(self):
        # frozen from the extended-precision direct summation in oracles.ssim_mp
        ref = glyph_set()[0]
        noisy = ref + 0.1 * np.asarray(PhiloxStream(123).normal(256))
        got = ssim(ref, noisy, width=16, height=16)
        assert got == pytest.approx(0.99574010169866438469, abs=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_against_direct_summation(self, seed):
        a = _grid(100 + seed, (10, 12))
        b = a + 0.3 * _grid(200 + seed, (10, 12))
        assert ssim(a, b) == pytest.approx(float(ssim_mp(a.tolist(), b.tolist())), abs=1e-12)

    def test_small_grid_rejected(self):
        with pytest.raises(ConfigError):
            ssim(np.zeros((7, 16)), np.zeros((7, 16)))

    def test_flat_needs_shape(self):
        with pytest.raises(ConfigError):
            ssim(np.zeros(256), np.zeros(256))

    def test_window_knob(self):
        a, b = _grid(3), _grid(4)
        assert ssim(a, b, window=4) != ssim(a, b)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1), st.floats(0.01, 100.0))
    def test_bounded(self, s1, s2, scale):
        a, b = _grid(s1), scale * _grid(s2)
        assert -1.0 - 1e-12 <= ssim(a, b) <= 1.0 + 1e-12

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_self_similarity_property(self, seed):
        a = _grid(seed)
        assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


class TestMae:
    def test_value(self):
        assert mae([1.0, -1.0], [0.0, 1.0]) == 1.5

    @settings(max_examples=100)
    @given(arrays(np.float64, 6, elements=finite), arrays(np.float64, 6, elements=finite),
           arrays(np.float64, 6, elements=finite))
    def test_triangle(self, a, b, c):
        assert mae(a, c) <= mae(a, b) + mae(b, c) + 1e-12


class TestFidelity:
    def test_identical_inputs(self):
        a = glyph_set()[3]
        rep = fidelity(a, a, 16, 16)
        assert rep.psnr_db == 99.0 and rep.ssim == pytest.approx(1.0) and rep.mae == 0.0
        assert rep.dynamic_range == pytest.approx(float(a.max() - a.min()))

    def test_ssim_absent_without_grid(self):
        rep = fidelity([0.0, 1.0], [0.0, 0.5])
        assert rep.ssim is None
        assert set(rep.to_dict()) == {"psnr_db", "ssim", "mae", "dynamic_range"}


class TestTraceStats:
    def test_all_full_trace(self):
        _, trace = run_full(RunConfig(preset="gauss-grid-2d", T=20))
        runs = trace_stats(trace)["reuse_runs"]
        assert len(runs) == 19 and all(r == 0 for r in runs)

    def test_constant_series(self):
        assert coefficient_of_variation([0.7] * 9) == 0.0
        _, trace = run_full(RunConfig(preset="affine-identity", T=30))
        assert trace_stats(trace)["k_cv_late"] == pytest.approx(0.0, abs=1e-12)

    def test_two_point_late_cv(self):
        # frozen from the full-computation run of the same configuration
        _, trace = run_full(RunConfig(preset="two-point-1d", T=50, seed=0))
        assert trace_stats(trace)["k_cv_late"] == pytest.approx(1.1606310501508472, rel=1e-9)

    def test_windows(self):
        early, late = phase_windows(50)
        assert list(early) == list(range(1, 10)) and list(late) == list(range(25, 50))

    def test_reuse_runs_and_histogram(self):
        cfg = RunConfig(preset="digits-16x16", policy=PolicyConfig(tau=5.0, R=10))
        _, trace = run_cached(cfg)
        stats = trace_stats(trace)
        assert sum(reuse_runs(trace)) == len(trace.reuse_steps)
        assert sum(stats["epsilon_hist"]) == 50
        assert stats == trace_stats(trace)
