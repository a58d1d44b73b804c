"""Command-line harness: single runs, sweeps, traces and preset listing.

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import DEFAULT_DELTA_END, ConfigError, NumericError
from .engine import RunConfig, TrajectoryTrace, fmt, run_cached, run_full, step_speedup
from .fields import MIXTURE_PRESETS, load_preset, preset_names
from .metrics import FidelityReport, fidelity
from .policies import VARIANTS, PolicyConfig

log = logging.getLogger("adacache")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
AXES = ("tau", "R", "variant", "k_update")


def _num(value):
    """Round a float through ``%.12g`` so JSON output matches the CSV text."""
    if isinstance(value, float):
        if not math.isfinite(value):
            return None
        return float(fmt(value))
    if isinstance(value, dict):
        return {k: _num(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_num(v) for v in value]
    return value


def run_id(config: RunConfig) -> str:
    return hashlib.sha1(config.to_json().encode()).hexdigest()[:12]


@dataclass
class RunReport:
    run_id: str
    config: RunConfig
    step_speedup: float
    eval_count: int
    fidelity: FidelityReport
    trace_path: str | None = None
    wall_clock_ms: float = 0.0
    # full-compute steps whose local rate used a cached v_{t-1}
    k_from_approx: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return _num({
            "run_id": self.run_id,
            "config": self.config.to_dict(),
            "step_speedup": self.step_speedup,
            "eval_count": self.eval_count,
            "fidelity": self.fidelity.to_dict(),
            "trace_path": self.trace_path,
            "k_from_approx": self.k_from_approx,
            "wall_clock_ms": self.wall_clock_ms,
        })


def execute(config: RunConfig) -> tuple[RunReport, TrajectoryTrace]:
    """Cached run plus the matching full run it is scored against."""
    t0 = time.perf_counter()
    x_cached, trace = run_cached(config)
    x_full, _ = run_full(config)
    elapsed = (time.perf_counter() - t0) * 1e3
    f = config.build_field()
    report = RunReport(
        run_id=run_id(config),
        config=config,
        step_speedup=step_speedup(trace),
        eval_count=trace.eval_count,
        fidelity=fidelity(x_full, x_cached, f.width, f.height),
        wall_clock_ms=elapsed,
        k_from_approx=list(trace.k_from_approx),
    )
    return report, trace


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

@dataclass
class SweepSpec:
    base: RunConfig
    axis: str
    values: list
    seeds: list[int] = field(default_factory=lambda: [0])
    match_speedup: bool = False
    tolerance: float = 0.05

    @classmethod
    def from_dict(cls, data: dict) -> "SweepSpec":
        try:
            base = RunConfig.from_dict(data.get("base", {}))
            axis_spec = data["axis"]
        except KeyError as exc:
            raise ConfigError(f"sweep spec is missing {exc}") from None
        if not isinstance(axis_spec, dict) or len(axis_spec) != 1:
            raise ConfigError("sweep axis must be an object with exactly one key")
        (axis, values), = axis_spec.items()
        if axis not in AXES:
            raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {', '.join(AXES)}")
        if not isinstance(values, list) or not values:
            raise ConfigError("sweep axis values must be a nonempty list")
        seeds = data.get("seeds", [base.seed])
        return cls(base, axis, values, [int(s) for s in seeds],
                   bool(data.get("match_speedup", False)), float(data.get("tolerance", 0.05)))

    def cell_policy(self, value) -> PolicyConfig:
        pol = self.base.policy
        if self.axis == "tau":
            return replace(pol, tau=float(value))
        if self.axis == "R":
            return replace(pol, R=int(value))
        if self.axis == "k_update":
            return replace(pol, k_update=value)
        if isinstance(value, dict):
            merged = {"R": pol.R, **value}
            return PolicyConfig.from_dict(merged)
        return replace(pol, variant=str(value))

    def cells(self) -> list[tuple[int, str, PolicyConfig | ConfigError]]:
        """Cells in axis order; a value that does not make a valid policy yields its error."""
        out = []
        for i, value in enumerate(self.values):
            label = value.get("variant", json.dumps(value)) if isinstance(value, dict) else str(value)
            try:
                out.append((i, label, self.cell_policy(value)))
            except (ConfigError, TypeError, ValueError) as exc:
                out.append((i, label, exc if isinstance(exc, ConfigError) else ConfigError(str(exc))))
        return out


def _seed_runs(base: RunConfig, policy: PolicyConfig, seeds) -> list[RunReport]:
    return [execute(replace(base, seed=s, policy=policy))[0] for s in seeds]


def mean_speedup(base: RunConfig, policy: PolicyConfig, seeds) -> float:
    return float(np.mean([step_speedup(run_cached(replace(base, seed=s, policy=policy))[1]) for s in seeds]))


# knob name, search range, integer?, does speedup grow with the knob?
_KNOBS = {
    "static": ("interval", 1.0, None, False, True),
    "probabilistic": ("p", 0.0, 1.0, False, True),
    "output-relative": ("tau", 0.0, None, False, True),
    "no-recompute": ("warm", 1, None, True, False),
    "step-reduction": ("fraction", None, 1.0, False, False),
    "easycache": ("tau", 0.0, None, False, True),
}


def match_speedup(base: RunConfig, policy: PolicyConfig, target: float, seeds,
                  tolerance: float = 0.05, iterations: int = 40) -> tuple[PolicyConfig, float]:
    """Tune the variant's single knob so its mean step speedup approaches ``target``.

    Bisection for continuous knobs, exhaustive search for the integer
    warm-up of ``no-recompute``. Returns the best policy found and its mean
    speedup; the caller checks whether it landed inside ``tolerance``.
    """
    name, lo, hi, integer, increasing = _KNOBS[policy.variant]
    T = base.T
    if lo is None:
        lo = 2.0 / T
    if hi is None:
        hi = float(T - 1) if name in ("interval", "warm") else 1000.0

    def at(value):
        pol = replace(policy, **{name: int(value) if integer else value})
        return pol, mean_speedup(base, pol, seeds)

    if integer:
        best = min((at(w) for w in range(int(lo), int(hi) + 1)), key=lambda r: abs(r[1] - target))
        return best
    best = at(lo)
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        pol, sp = at(mid)
        if abs(sp - target) < abs(best[1] - target):
            best = (pol, sp)
        if abs(sp - target) <= 0.25 * tolerance * target:
            break
        if (sp < target) == increasing:
            lo = mid
        else:
            hi = mid
    return best


SWEEP_HEADER = ("cell", "label", "seed", "variant", "tau", "R", "k_update", "knob", "speedup",
                "eval_count", "psnr", "ssim", "mae", "status")


def _knob(policy: PolicyConfig):
    name = _KNOBS.get(policy.variant, ("tau",))[0]
    return getattr(policy, name)


def _row(cell, label, seed, policy, report: RunReport | None, status="ok") -> dict:
    row = {
        "cell": cell, "label": label, "seed": seed, "variant": policy.variant,
        "tau": policy.tau, "R": policy.R, "k_update": policy.k_update.value, "knob": _knob(policy),
        "speedup": None, "eval_count": None, "psnr": None, "ssim": None, "mae": None, "status": status,
    }
    if report is not None:
        row.update(speedup=report.step_speedup, eval_count=report.eval_count, psnr=report.fidelity.psnr_db,
                   ssim=report.fidelity.ssim, mae=report.fidelity.mae)
    return row


def _mean_row(cell, label, policy, rows) -> dict:
    good = [r for r in rows if r["status"] == "ok"]
    out = _row(cell, label, "mean", policy, None, "ok" if len(good) == len(rows) else f"{len(rows) - len(good)} failed")
    for key in ("speedup", "eval_count", "psnr", "ssim", "mae"):
        vals = [r[key] for r in good if r[key] is not None]
        out[key] = float(np.mean(vals)) if vals else None
    return out


def run_sweep(spec: SweepSpec, jobs: int = 1) -> list[dict]:
    """One row per (cell, seed) followed by each cell's mean row, in cell order."""
    cells = spec.cells()
    if spec.match_speedup:
        anchor = next((c for c in cells if isinstance(c[2], PolicyConfig) and c[2].variant == "easycache"), None)
        if anchor is None:
            raise ConfigError("match_speedup needs an easycache cell to match against")
        target = mean_speedup(spec.base, anchor[2], spec.seeds)
        cells = [(i, label, pol if not isinstance(pol, PolicyConfig) or pol.variant == "easycache"
                  else match_speedup(spec.base, pol, target, spec.seeds, spec.tolerance)[0])
                 for i, label, pol in cells]

    tasks = [(i, label, pol, seed) for i, label, pol in cells for seed in spec.seeds]

    def work(task):
        i, label, pol, seed = task
        if isinstance(pol, ConfigError):
            return _row(i, label, seed, spec.base.policy, None, f"error: {pol}")
        try:
            report, _ = execute(replace(spec.base, seed=seed, policy=pol))
            return _row(i, label, seed, pol, report)
        except (ConfigError, NumericError, ValueError) as exc:
            log.warning("cell %d seed %d failed: %s", i, seed, exc)
            return _row(i, label, seed, pol, None, f"error: {exc}")

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        results = list(pool.map(work, tasks))

    rows = []
    per_cell = len(spec.seeds)
    for n, (i, label, pol) in enumerate(cells):
        chunk = results[n * per_cell:(n + 1) * per_cell]
        rows.extend(chunk)
        rows.append(_mean_row(i, label, pol if isinstance(pol, PolicyConfig) else spec.base.policy, chunk))
    return rows


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_HEADER)
    for row in rows:
        writer.writerow(["" if row[k] is None else row[k] if isinstance(row[k], str) else fmt(row[k])
                         for k in SWEEP_HEADER])
    return buf.getvalue()


def rows_to_json(rows) -> str:
    return json.dumps([_num(r) for r in rows], indent=2) + "\n"


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="\n")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="RunConfig JSON file; flags override its values")
    p.add_argument("--preset")
    p.add_argument("--field-json")
    p.add_argument("--dim", type=int)
    p.add_argument("--T", type=int)
    p.add_argument("--delta-end", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--tau", type=float, help="threshold in percent")
    p.add_argument("--R", type=int, help="warm-up steps")
    p.add_argument("--k-update", choices=("local", "ema", "avg"))
    p.add_argument("--interval", type=float, help="static baseline interval")
    p.add_argument("--p", type=float, help="probabilistic baseline reuse probability")
    p.add_argument("--warm", type=int, help="no-recompute warm-up")
    p.add_argument("--fraction", type=float, help="step-reduction fraction")
    p.add_argument("--out-dir", default="runs")


def config_from_args(args) -> RunConfig:
    data: dict = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    policy = dict(data.get("policy", {}))
    if args.preset is not None:
        data["preset"], data["field_json"] = args.preset, None
    if args.field_json is not None:
        data["field_json"], data["preset"] = args.field_json, None
    for flag, key in (("dim", "dim"), ("T", "T"), ("delta_end", "delta_end"), ("seed", "seed")):
        if getattr(args, flag) is not None:
            data[key] = getattr(args, flag)
    for key in ("variant", "tau", "R", "k_update", "interval", "p", "warm", "fraction"):
        if getattr(args, key, None) is not None:
            policy[key] = getattr(args, key)
    data["policy"] = policy
    if data.get("preset") is None and data.get("field_json") is None:
        data["preset"] = "two-point-1d"
    return RunConfig.from_dict(data)


def cmd_run(args) -> int:
    config = config_from_args(args)
    report, trace = execute(config)
    out = Path(args.out_dir)
    trace_path = out / f"{report.run_id}.trace.csv"
    report.trace_path = trace_path.name
    _write(trace_path, trace.to_csv())
    _write(out / f"{report.run_id}.json", json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    f = report.fidelity
    ssim_txt = "n/a" if f.ssim is None else "%.4f" % f.ssim
    print(f"{report.run_id} {config.policy.variant} speedup={report.step_speedup:.3f} "
          f"evals={report.eval_count}/{config.T} psnr={f.psnr_db:.2f}dB ssim={ssim_txt} mae={f.mae:.3g}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    try:
        data = json.loads(Path(args.spec).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read sweep spec {args.spec}: {exc}") from exc
    spec = SweepSpec.from_dict(data)
    rows = run_sweep(spec, jobs=args.jobs)
    text = rows_to_csv(rows) if args.format == "csv" else rows_to_json(rows)
    out = Path(args.out_dir) / f"sweep.{args.format}"
    _write(out, text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_trace(args) -> int:
    config = config_from_args(args)
    _, trace = run_cached(config) if args.cached else run_full(config)
    out = Path(args.out_dir) / f"{run_id(config)}.{'cached' if args.cached else 'full'}.trace.csv"
    _write(out, trace.to_csv())
    print(out)
    return EXIT_OK


def cmd_presets(args) -> int:
    for name in preset_names():
        f = load_preset(name)
        kind = f"K={f.anchors.shape[0]}" if name in MIXTURE_PRESETS else f"A={f.A:g}"
        grid = f" grid={f.width}x{f.height}" if f.width else ""
        print(f"{name}\tdim={f.dim}\t{kind}{grid}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adacache", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="cached run scored against the full run")
    _add_run_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a SweepSpec JSON and print the table")
    p.add_argument("spec")
    p.add_argument("--out-dir", default="runs")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("trace", help="per-step trace CSV (full run unless --cached)")
    _add_run_flags(p)
    p.add_argument("--cached", action="store_true")
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("presets", help="list built-in fields")
    p.set_defaults(func=cmd_presets)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
