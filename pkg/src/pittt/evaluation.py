"""Accuracy, constraint-violation and runtime metrics, and report emission.

Conventions used throughout (also written into every report header):

* RMSE_P runs over non-slack buses and RMSE_Q over PQ buses; the divisor is the
  size of the respective index set.
* Aggregate RMSE is the mean of per-sample RMSEs, not a pooled value.
* A violation is the distance outside the element's interval (0 inside).
  Category means average over all elements and samples, violated or not.
* All quantities are per-unit on the system base.
"""
from __future__ import annotations

import csv
import json
import os
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from .errors import DimensionError, InvalidDataError
from .grid import GridCase, build_ybus
from .pf import branch_flows, compute_mismatch, recover_generation
from .ttt import refine_batch

CATEGORIES = ("voltage", "branch_flow", "gen_reactive", "slack_active")
TABLE_FILES = {"accuracy": "accuracy.csv", "violations": "violations.csv", "runtime": "runtime.csv"}

CONVENTIONS = (
    "RMSE_P over non-slack buses, RMSE_Q over PQ buses; divisor = size of the index set",
    "aggregate RMSE = mean of per-sample RMSEs",
    "violation = distance outside the element interval; mean over all elements and samples",
    "voltage: all buses; branch_flow: rated branches (max of both ends); "
    "gen_reactive: per generator bus, units aggregated; slack_active: slack machine P limits",
    "units: per-unit on system base",
)


@dataclass(frozen=True)
class Metrics:
    rmse_p: float
    rmse_q: float

    def __post_init__(self):
        if self.rmse_p < 0 or self.rmse_q < 0:
            raise ValueError("RMSE values are nonnegative")


@dataclass(frozen=True)
class CategoryStats:
    mean: float
    max: float
    n_elements: int


@dataclass(frozen=True)
class ViolationReport:
    categories: Dict[str, CategoryStats]

    def __getitem__(self, key):
        return self.categories[key]

    def means(self):
        return {k: self.categories[k].mean for k in CATEGORIES}


def _aligned(states, conditions):
    if len(states) != len(conditions):
        raise DimensionError(f"{len(states)} states but {len(conditions)} conditions")
    if not states:
        raise InvalidDataError("no samples to evaluate")


def _rms(a):
    return float(np.sqrt(np.mean(a * a))) if a.size else 0.0


def mismatch_rmse(states: Sequence, conditions: Sequence, case: GridCase, ybus=None):
    """Per-sample ``(S, 2)`` array of (RMSE_P, RMSE_Q) and the aggregate :class:`Metrics`."""
    _aligned(states, conditions)
    ybus = build_ybus(case) if ybus is None else ybus
    per = np.array([[_rms(m.dp), _rms(m.dq)]
                    for m in (compute_mismatch(s, c, ybus, case) for s, c in zip(states, conditions))])
    return per, Metrics(rmse_p=float(per[:, 0].mean()), rmse_q=float(per[:, 1].mean()))


def squared_mismatch(states, conditions, case, ybus=None) -> np.ndarray:
    """``||dP||^2 + ||dQ||^2`` per sample."""
    _aligned(states, conditions)
    ybus = build_ybus(case) if ybus is None else ybus
    out = []
    for s, c in zip(states, conditions):
        m = compute_mismatch(s, c, ybus, case)
        out.append(float(m.dp @ m.dp + m.dq @ m.dq))
    return np.array(out)


def _outside(x, lo, hi):
    return np.maximum(x - hi, 0.0) + np.maximum(lo - x, 0.0)


def element_violations(state, condition, case: GridCase, ybus=None) -> Dict[str, np.ndarray]:
    """Violation magnitude of every element, per category, for one state."""
    ybus = build_ybus(case) if ybus is None else ybus
    rated = np.flatnonzero(~np.isnan(case.ratings))
    flow = np.zeros(0)
    if rated.size:
        flow = np.maximum(branch_flows(state, case).s_mag[rated] - case.ratings[rated], 0.0)
    q_g, p_slack = recover_generation(state, case, condition, ybus)
    agg = case.gen_aggregate
    slack_row = int(np.searchsorted(case.gen_buses, case.slack_index))
    return {
        "voltage": _outside(state.v, case.v_min, case.v_max),
        "branch_flow": flow,
        "gen_reactive": _outside(q_g, agg[:, 0], agg[:, 1]),
        "slack_active": _outside(np.array([p_slack]), agg[slack_row, 2], agg[slack_row, 3]),
    }


def violations(states: Sequence, conditions: Sequence, case: GridCase, ybus=None):
    """Per-sample reports and the aggregate :class:`ViolationReport`."""
    _aligned(states, conditions)
    ybus = build_ybus(case) if ybus is None else ybus
    per_sample = [element_violations(s, c, case, ybus) for s, c in zip(states, conditions)]
    reports = []
    for ev in per_sample:
        reports.append(ViolationReport({k: CategoryStats(float(ev[k].mean()) if ev[k].size else 0.0,
                                                         float(ev[k].max()) if ev[k].size else 0.0,
                                                         int(ev[k].size)) for k in CATEGORIES}))
    agg = {}
    for k in CATEGORIES:
        stacked = np.concatenate([ev[k] for ev in per_sample])
        agg[k] = CategoryStats(float(stacked.mean()) if stacked.size else 0.0,
                               float(stacked.max()) if stacked.size else 0.0,
                               int(per_sample[0][k].size))
    return reports, ViolationReport(agg)


# ---------------------------------------------------------------- runtime

def machine_descriptor() -> str:
    return (f"{platform.machine()} {platform.processor() or 'cpu'}, {os.cpu_count()} cores, "
            f"{platform.system()} {platform.release()}, python {platform.python_version()}, "
            f"numpy {np.__version__}")


@dataclass(frozen=True)
class BenchRow:
    label: str
    ms_per_sample: float
    n_samples: int
    repetition_ms: tuple  # per-sample ms of each kept repetition


@dataclass
class BenchTable:
    rows: List[BenchRow]
    machine: str = field(default_factory=machine_descriptor)

    def by_label(self):
        return {r.label: r for r in self.rows}


def bench(procedures: Mapping[str, Callable], samples: Sequence, repetitions: int = 3) -> BenchTable:
    """Time each procedure over all samples ``repetitions`` times; the first pass is warm-up."""
    if repetitions < 2:
        raise ValueError("need at least 2 repetitions (the first one is discarded)")
    if not samples:
        raise InvalidDataError("no samples to benchmark")
    rows = []
    for label, proc in procedures.items():
        kept = []
        for rep in range(repetitions):
            t0 = time.perf_counter()
            for s in samples:
                proc(s)
            dt = (time.perf_counter() - t0) * 1e3 / len(samples)
            if rep:
                kept.append(dt)
        rows.append(BenchRow(label, float(np.mean(kept)), len(samples), tuple(kept)))
    return BenchTable(rows)


# ---------------------------------------------------------------- reports

def _fmt(x):
    return repr(float(x))


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def emit_report(out_dir, metrics: Optional[Mapping[str, Metrics]],
                violation_reports: Optional[Mapping[str, ViolationReport]],
                bench_table: Optional[BenchTable], config: Mapping, extra: Optional[Mapping] = None) -> Path:
    """Write one CSV per table plus ``report.txt``; returns the directory.

    A table passed as None (or empty) is omitted entirely, file and section. Floats are
    written with ``repr`` so the CSVs parse back to identical numbers.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics = metrics or {}
    violation_reports = violation_reports or {}
    tables = {
        "accuracy": (["method", "rmse_p", "rmse_q"],
                     [[m, _fmt(v.rmse_p), _fmt(v.rmse_q)] for m, v in metrics.items()]),
        "violations": (["method"] + [f"{c}_{s}" for c in CATEGORIES for s in ("mean", "max")],
                       [[m] + [_fmt(getattr(r[c], s)) for c in CATEGORIES for s in ("mean", "max")]
                        for m, r in violation_reports.items()]),
        "runtime": (["method", "ms_per_sample", "n_samples"],
                    [[r.label, _fmt(r.ms_per_sample), r.n_samples] for r in bench_table.rows]
                    if bench_table is not None else []),
    }
    present = {"accuracy": bool(metrics), "violations": bool(violation_reports),
               "runtime": bench_table is not None}
    for name, (header, rows) in tables.items():
        path = out / TABLE_FILES[name]
        if present[name]:
            _write_csv(path, header, rows)
        elif path.exists():
            path.unlink()

    lines = ["# Power-flow surrogate evaluation report", "", "## Conventions"]
    lines += [f"- {c}" for c in CONVENTIONS]
    if metrics:
        lines += ["", "## Mismatch accuracy (per-unit)", f"{'method':<28}{'RMSE_P':>14}{'RMSE_Q':>14}"]
        lines += [f"{m:<28}{v.rmse_p:>14.6g}{v.rmse_q:>14.6g}" for m, v in metrics.items()]
    if violation_reports:
        lines += ["", "## Operational constraint violations (per-unit, mean / max)",
                  f"{'method':<28}" + "".join(f"{c:>26}" for c in CATEGORIES)]
        for m, r in violation_reports.items():
            lines.append(f"{m:<28}" + "".join(f"{r[c].mean:>12.4g} / {r[c].max:<11.4g}" for c in CATEGORIES))
        first = next(iter(violation_reports.values()))
        lines.append("elements per sample: " + ", ".join(f"{c}={first[c].n_elements}" for c in CATEGORIES))
    if bench_table is not None:
        lines += ["", "## Average per-sample runtime (ms)", f"machine: {bench_table.machine}",
                  f"{'method':<28}{'ms/sample':>14}{'samples':>10}"]
        lines += [f"{r.label:<28}{r.ms_per_sample:>14.4g}{r.n_samples:>10d}" for r in bench_table.rows]
    if extra:
        lines += ["", "## Details"] + [f"{k}: {v}" for k, v in extra.items()]
    lines += ["", "## Configuration", json.dumps(config, indent=2, sort_keys=True, default=str), ""]
    (out / "report.txt").write_text("\n".join(lines))
    return out


def _read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def parse_report(out_dir) -> dict:
    """Read the CSV tables written by :func:`emit_report` back into numbers.

    Tables that were omitted are absent from the result.
    """
    out = Path(out_dir)
    doc = {}
    if (out / TABLE_FILES["accuracy"]).exists():
        _, acc = _read_csv(out / TABLE_FILES["accuracy"])
        doc["accuracy"] = {r[0]: Metrics(float(r[1]), float(r[2])) for r in acc}
    if (out / TABLE_FILES["violations"]).exists():
        header, vio = _read_csv(out / TABLE_FILES["violations"])
        doc["violations"] = {r[0]: {k: float(x) for k, x in zip(header[1:], r[1:])} for r in vio}
    if (out / TABLE_FILES["runtime"]).exists():
        _, rt = _read_csv(out / TABLE_FILES["runtime"])
        doc["runtime"] = {r[0]: (float(r[1]), int(r[2])) for r in rt}
    return doc


def config_dict(*configs, **extra) -> dict:
    """Flatten dataclass configs into one echo dictionary."""
    out = {}
    for c in configs:
        out[type(c).__name__] = asdict(c)
    out.update(extra)
    return out


# ---------------------------------------------------------------- pipeline

BASELINE = "surrogate"
REFINED = "surrogate+pi-ttt"
REFERENCE = "newton-raphson (labels)"


@dataclass
class EvalOutcome:
    metrics: Dict[str, Metrics]
    violations: Dict[str, ViolationReport]
    sq_before: np.ndarray
    sq_after: np.ndarray
    results: list  # RefineResult per test sample

    @property
    def median_sq_ratio(self) -> float:
        with np.errstate(divide="ignore", invalid="ignore"):
            return float(np.median(self.sq_after / self.sq_before))


def evaluate_model(params, records, case: GridCase, ttt_config, jobs: int = 1,
                   include_reference: bool = True) -> EvalOutcome:
    """Refine every test record and score predictions before and after refinement.

    Metrics of the surrogate rows use predicted states only; the optional
    reference row scores the stored labels for context.
    """
    test = [r for r in records if r.split == "test"]
    if not test:
        raise InvalidDataError("test split is empty")
    params.check_case(case)
    ybus = build_ybus(case)
    conds = [r.condition for r in test]
    results = refine_batch(params, conds, case, ybus, ttt_config, jobs=jobs)
    rows = {BASELINE: [r.initial_state for r in results], REFINED: [r.state for r in results]}
    if include_reference:
        rows[REFERENCE] = [r.label for r in test]
    metrics = {k: mismatch_rmse(s, conds, case, ybus)[1] for k, s in rows.items()}
    vio = {k: violations(s, conds, case, ybus)[1] for k, s in rows.items()}
    return EvalOutcome(metrics, vio, squared_mismatch(rows[BASELINE], conds, case, ybus),
                       squared_mismatch(rows[REFINED], conds, case, ybus), results)
