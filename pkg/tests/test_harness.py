import csv
import io
import json

import numpy as np
import pytest

from adacache.engine import RunConfig, run_cached
from adacache.harness import (
    EXIT_CONFIG,
    EXIT_NUMERIC,
    SWEEP_HEADER,
    SweepSpec,
    execute,
    main,
    match_speedup,
    mean_speedup,
    rows_to_csv,
    rows_to_json,
    run_sweep,
)
from adacache.core import ConfigError
from adacache.policies import PolicyConfig

GOLDEN = ["--preset", "two-point-1d", "--T", "50", "--tau", "5", "--R", "10", "--seed", "0"]


def _run(tmp_path, *argv):
    code = main(["run", *argv, "--out-dir", str(tmp_path)])
    reports = sorted(tmp_path.glob("*.json"))
    return code, json.loads(reports[-1].read_text()) if reports else None


class TestRunCommand:
    def test_golden(self, tmp_path, capsys):
        code, report = _run(tmp_path, *GOLDEN)
        assert code == 0
        assert report["eval_count"] == 38 and report["eval_count"] < 50
        assert report["fidelity"]["psnr_db"] == pytest.approx(31.6925467612, rel=1e-10)
        assert report["fidelity"]["ssim"] is None
        out = capsys.readouterr().out.strip().splitlines()
        assert len(out) == 1 and "evals=38/50" in out[0]
        assert (tmp_path / report["trace_path"]).exists()

    def test_zero_tau(self, tmp_path):
        code, report = _run(tmp_path, "--preset", "digits-16x16", "--tau", "0")
        assert code == 0
        assert report["fidelity"]["psnr_db"] == 99.0 and report["step_speedup"] == 1.0
        assert report["fidelity"]["ssim"] == 1.0

    def test_unknown_preset(self, tmp_path, capsys):
        assert main(["run", "--preset", "no-such-field", "--out-dir", str(tmp_path)]) == EXIT_CONFIG
        assert "no-such-field" in capsys.readouterr().err

    def test_bad_policy_value(self, tmp_path):
        assert main(["run", "--tau", "-1", "--out-dir", str(tmp_path)]) == EXIT_CONFIG

    def test_unreadable_config(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "missing.json"), "--out-dir", str(tmp_path)]) == EXIT_CONFIG

    def test_numeric_blowup(self, tmp_path, capsys):
        path = tmp_path / "big.json"
        path.write_text(json.dumps({"dim": 1, "width": None, "height": None, "anchors": [[1e300]], "priors": [1.0]}))
        assert main(["run", "--field-json", str(path), "--out-dir", str(tmp_path / "o")]) == EXIT_NUMERIC
        assert "non-finite" in capsys.readouterr().err

    def test_config_file_with_overrides(self, tmp_path):
        cfg = RunConfig(preset="gauss-grid-2d", T=30, seed=3, policy=PolicyConfig(tau=7.0, R=4))
        path = tmp_path / "cfg.json"
        path.write_text(cfg.to_json())
        code, report = _run(tmp_path / "o", "--config", str(path), "--seed", "4")
        assert code == 0
        assert report["config"]["seed"] == 4 and report["config"]["policy"]["tau"] == 7.0

    def test_repeat_is_byte_identical(self, tmp_path):
        for d in ("a", "b"):
            assert main(["run", *GOLDEN, "--out-dir", str(tmp_path / d)]) == 0
        for fa in sorted((tmp_path / "a").iterdir()):
            fb = tmp_path / "b" / fa.name
            if fa.suffix == ".csv":
                assert fa.read_bytes() == fb.read_bytes()
            else:
                a, b = json.loads(fa.read_text()), json.loads(fb.read_text())
                a.pop("wall_clock_ms"), b.pop("wall_clock_ms")
                assert a == b


class TestTraceCommand:
    def _column(self, tmp_path, *argv, name="k"):
        assert main(["trace", *argv, "--out-dir", str(tmp_path)]) == 0
        (path,) = tmp_path.glob("*.trace.csv")
        rows = list(csv.DictReader(io.StringIO(path.read_text())))
        return np.array([float(r[name]) for r in rows])

    def test_identity_field(self, tmp_path):
        k = self._column(tmp_path, "--preset", "affine-identity")
        np.testing.assert_allclose(k[1:], 1.0, rtol=1e-11)

    def test_constant_field(self, tmp_path):
        k = self._column(tmp_path, "--preset", "affine-constant")
        assert np.all(k[1:] == 0.0)

    def test_cached_trace(self, tmp_path):
        assert main(["trace", "--cached", *GOLDEN, "--out-dir", str(tmp_path)]) == 0
        (path,) = tmp_path.glob("*.cached.trace.csv")
        assert path.read_text().count(",reuse,") == 12


def test_presets_listing(capsys):
    assert main(["presets"]) == 0
    out = capsys.readouterr().out
    for name in ("two-point-1d", "gauss-grid-2d", "digits-16x16", "affine-identity"):
        assert name in out


class TestSweep:
    def _spec(self, **kw):
        data = {"base": {"preset": "digits-16x16", "T": 50, "policy": {"R": 10}},
                "axis": {"tau": [2, 5, 10]}, "seeds": [0, 1]}
        data.update(kw)
        return SweepSpec.from_dict(data)

    def test_row_count_and_order(self):
        rows = run_sweep(self._spec(), jobs=3)
        assert len(rows) == 3 * 2 + 3
        assert [r["seed"] for r in rows] == [0, 1, "mean"] * 3
        assert [r["tau"] for r in rows] == [2.0] * 3 + [5.0] * 3 + [10.0] * 3
        speedups = [r["speedup"] for r in rows if r["seed"] == "mean"]
        assert speedups == sorted(speedups)

    def test_jobs_do_not_change_output(self):
        assert rows_to_csv(run_sweep(self._spec(), jobs=1)) == rows_to_csv(run_sweep(self._spec(), jobs=4))

    def test_single_point_matches_run(self):
        spec = self._spec(axis={"tau": [5]}, seeds=[0])
        row = run_sweep(spec)[0]
        report, _ = execute(RunConfig(preset="digits-16x16", policy=PolicyConfig(tau=5.0, R=10)))
        assert row["speedup"] == report.step_speedup and row["psnr"] == report.fidelity.psnr_db
        assert row["ssim"] == report.fidelity.ssim

    def test_failing_cell_is_recorded(self):
        spec = SweepSpec.from_dict({"base": {"preset": "digits-16x16", "T": 20}, "axis": {"R": [5, 0]}, "seeds": [0]})
        rows = run_sweep(spec)
        assert rows[0]["status"] == "ok"
        assert rows[2]["status"].startswith("error") and rows[3]["status"] == "1 failed"

    def test_csv_and_json(self):
        rows = run_sweep(self._spec(axis={"tau": [5]}, seeds=[0]))
        text = rows_to_csv(rows)
        assert text.splitlines()[0] == ",".join(SWEEP_HEADER) and "\r" not in text
        assert json.loads(rows_to_json(rows))[0]["variant"] == "easycache"

    def test_bad_axis(self):
        with pytest.raises(ConfigError):
            self._spec(axis={"gamma": [1]})

    def test_cli(self, tmp_path, capsys):
        path = tmp_path / "spec.json"
        path.write_text(json.dumps({"base": {"preset": "gauss-grid-2d"}, "axis": {"k_update": ["local", "ema"]},
                                    "seeds": [0]}))
        assert main(["sweep", str(path), "--out-dir", str(tmp_path), "--format", "json"]) == 0
        assert len(json.loads((tmp_path / "sweep.json").read_text())) == 4


class TestMatchedSpeedup:
    def test_static_interval_hits_target(self):
        base = RunConfig(preset="digits-16x16", T=50)
        seeds = [0, 1, 2]
        target = mean_speedup(base, PolicyConfig(tau=5.0, R=10), seeds)
        pol, sp = match_speedup(base, PolicyConfig("static", R=10), target, seeds)
        assert abs(sp - target) <= 0.05 * target
        assert pol.interval > 1

    def test_no_recompute_is_integer(self):
        base = RunConfig(preset="digits-16x16", T=50)
        pol, sp = match_speedup(base, PolicyConfig("no-recompute"), 50 / 21, [0])
        assert pol.warm == 20 and sp == pytest.approx(50 / 21)

    def test_variant_sweep(self):
        spec = SweepSpec.from_dict({
            "base": {"preset": "digits-16x16", "policy": {"R": 10}},
            "axis": {"variant": ["easycache", "static", "probabilistic", "output-relative", "no-recompute"]},
            "seeds": [0, 1], "match_speedup": True,
        })
        means = [r for r in run_sweep(spec, jobs=4) if r["seed"] == "mean"]
        target = means[0]["speedup"]
        for row in means[1:4]:
            assert abs(row["speedup"] - target) <= 0.05 * target, row
        assert [r["variant"] for r in means] == ["easycache", "static", "probabilistic", "output-relative",
                                                 "no-recompute"]

    def test_needs_easycache_cell(self):
        spec = SweepSpec.from_dict({"base": {}, "axis": {"variant": ["static"]}, "match_speedup": True})
        with pytest.raises(ConfigError):
            run_sweep(spec)


def test_cached_run_helper_equivalence():
    cfg = RunConfig(preset="two-point-1d")
    assert execute(cfg)[1].to_csv() == run_cached(cfg)[1].to_csv()
