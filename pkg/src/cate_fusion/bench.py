"""
Seeded simulation sweeps over the two-source design.

An :class:`ExperimentSpec` names a sweep, its grid and the base DGP and
estimator settings. :func:`run_experiment` fits every requested method on
identical data for each (grid point, replicate) and writes

``records.csv``
    one row per (grid point, method, replicate); deterministic given the spec.
``aggregate.csv``
    mean and SD of RMSE per (grid point, method) over successful replicates.
``timings.csv``
    wall-clock milliseconds per record (kept apart so reruns of the same spec
    produce byte-identical record files).
``metadata.json``
    spec echo, package version and wall time.

Config files are flat ``key = value`` lines with dotted sections, e.g.::

    experiment = v_effect_sweep
    grid = 0.3,0.5,0.7
    dgp.rho = 0.4
    estimator.stage_rules.final = min
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import tempfile
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from concurrent.futures.process import BrokenProcessPool
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .dgp import DgpConfig, generate, generate_r2_controlled, true_cate_rmse
from .estimators import METHODS, EstimatorConfig, cate_confidence_intervals, fit_method, preliminary_cate
from .exceptions import ConfigParse, WorkerPanic

logger = logging.getLogger(__name__)

EXPERIMENTS = ("v_effect_sweep", "nr_sweep", "mismatch_heatmap", "r2_sweep", "custom")
DEFAULT_GRIDS = {
    "v_effect_sweep": (0.3, 0.5, 0.7, 0.9, 1.1, 1.3),
    "nr_sweep": (200.0, 400.0, 600.0, 800.0, 1000.0),
    "mismatch_heatmap": (0.0, 0.1, 0.2, 0.3, 0.4, 0.5),
    "r2_sweep": (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9),
}
DEFAULT_METHODS = ("racer", "sr_oscar", "mr_oscar")
MAX_MISMATCH = 0.8
WORKERS_ENV = "CATE_FUSION_WORKERS"

RECORD_FIELDS = (
    "experiment", "grid_index", "grid_value", "f1", "f2", "method", "replicate", "seed",
    "rmse", "lambda_final", "support_final", "ci_width", "ci_coverage", "ci_coverage_selected",
    "n_warnings", "error",
)
AGGREGATE_FIELDS = ("experiment", "grid_index", "grid_value", "method", "n_ok", "n_failed", "mean_rmse", "sd_rmse")


@dataclass
class ExperimentSpec:
    experiment: str = "v_effect_sweep"
    grid: tuple = ()
    parameter: str = ""
    n_replicates: int = 50
    methods: tuple = DEFAULT_METHODS
    seed: int = 20240601
    workers: int = 0
    out: str = "results"
    compute_ci: bool = False
    dgp: DgpConfig = field(default_factory=DgpConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigParse(f"unknown experiment {self.experiment!r}", field="experiment")
        if not self.grid:
            if self.experiment == "custom":
                raise ConfigParse("custom experiments need an explicit grid", field="grid")
            self.grid = DEFAULT_GRIDS[self.experiment]
        self.grid = tuple(float(g) for g in self.grid)
        self.methods = tuple(self.methods)
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise ConfigParse(f"methods must be a nonempty subset of {METHODS}, got {bad}", field="methods")
        if self.n_replicates < 1:
            raise ConfigParse("n_replicates must be at least 1", field="n_replicates")
        if self.experiment == "custom":
            if not self.parameter.startswith("dgp.") or self.parameter[4:] not in DgpConfig.field_names():
                raise ConfigParse(f"custom parameter must name a dgp field, got {self.parameter!r}",
                                  field="parameter")

    @property
    def points(self):
        """Grid points in declaration order: floats, or (f1, f2) pairs for the heatmap."""
        if self.experiment == "mismatch_heatmap":
            return [(f1, f2) for f1 in self.grid for f2 in self.grid]
        return list(self.grid)

    def resolved_workers(self):
        if self.workers > 0:
            return self.workers
        env = os.environ.get(WORKERS_ENV)
        return max(1, int(env)) if env and env.strip().isdigit() else 1


# ---------------------------------------------------------------------------
# config files


def _parse_scalar(raw, kind, key, line):
    text = raw.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if kind == "optional_float":
            return None if text.lower() in ("none", "") else float(text)
        if kind == "optional_int":
            return None if text.lower() in ("none", "") else int(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigParse(f"cannot parse {text!r} as {getattr(kind, '__name__', kind)}", field=key,
                          line=line) from None


def _field_kind(cls, name):
    default = next(f for f in fields(cls) if f.name == name)
    ann = str(default.type)
    if "None" in ann:
        return "optional_float" if "float" in ann else "optional_int"
    for kind in (bool, int, float, str, dict):
        if ann == kind.__name__:
            return kind
    return str


def _split_list(text):
    return [t.strip() for t in text.split(",") if t.strip()]


_TOP_LEVEL = {
    "experiment": str,
    "parameter": str,
    "n_replicates": int,
    "seed": int,
    "workers": int,
    "out": str,
    "compute_ci": bool,
}


def parse_spec(text, source="<string>") -> ExperimentSpec:
    top, dgp, est = {}, {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigParse(f"{source}: expected 'key = value'", line=lineno)
        key, value = (s.strip() for s in stripped.split("=", 1))
        parts = key.split(".")
        if parts[0] == "dgp" and len(parts) == 2:
            if parts[1] not in DgpConfig.field_names():
                raise ConfigParse(f"{source}: unknown field", field=key, line=lineno)
            dgp[parts[1]] = _parse_scalar(value, _field_kind(DgpConfig, parts[1]), key, lineno)
        elif parts[0] == "estimator" and len(parts) in (2, 3):
            names = [f.name for f in fields(EstimatorConfig)]
            if parts[1] not in names:
                raise ConfigParse(f"{source}: unknown field", field=key, line=lineno)
            kind = _field_kind(EstimatorConfig, parts[1])
            if kind is dict:
                if len(parts) != 3:
                    raise ConfigParse(f"{source}: expected {parts[1]}.<stage>", field=key, line=lineno)
                val = _parse_scalar(value, float if parts[1] == "fixed_lambdas" else str, key, lineno)
                est.setdefault(parts[1], {})[parts[2]] = val
            elif len(parts) == 2:
                est[parts[1]] = _parse_scalar(value, kind, key, lineno)
            else:
                raise ConfigParse(f"{source}: unknown field", field=key, line=lineno)
        elif len(parts) == 1 and key == "grid":
            top["grid"] = tuple(_parse_scalar(v, float, key, lineno) for v in _split_list(value))
        elif len(parts) == 1 and key == "methods":
            top["methods"] = tuple(_split_list(value))
        elif len(parts) == 1 and key in _TOP_LEVEL:
            top[key] = _parse_scalar(value, _TOP_LEVEL[key], key, lineno)
        else:
            raise ConfigParse(f"{source}: unknown field", field=key, line=lineno)
    try:
        dgp_cfg = DgpConfig(**dgp)
        est_cfg = EstimatorConfig(**est)
    except ConfigParse:
        raise
    except ValueError as exc:
        raise ConfigParse(f"{source}: {exc}") from None
    return ExperimentSpec(dgp=dgp_cfg, estimator=est_cfg, **top)


def load_spec(path) -> ExperimentSpec:
    path = Path(path)
    return parse_spec(path.read_text(), source=str(path))


def _fmt(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def emit(spec: ExperimentSpec) -> str:
    """Config text that :func:`parse_spec` maps back to ``spec``."""
    lines = [
        f"experiment = {spec.experiment}",
        f"grid = {','.join(repr(g) for g in spec.grid)}",
    ]
    if spec.parameter:
        lines.append(f"parameter = {spec.parameter}")
    lines += [
        f"n_replicates = {spec.n_replicates}",
        f"methods = {','.join(spec.methods)}",
        f"seed = {spec.seed}",
        f"workers = {spec.workers}",
        f"out = {spec.out}",
        f"compute_ci = {_fmt(spec.compute_ci)}",
    ]
    for f in fields(DgpConfig):
        lines.append(f"dgp.{f.name} = {_fmt(getattr(spec.dgp, f.name))}")
    for f in fields(EstimatorConfig):
        value = getattr(spec.estimator, f.name)
        if isinstance(value, dict):
            lines += [f"estimator.{f.name}.{k} = {_fmt(v)}" for k, v in sorted(value.items())]
        else:
            lines.append(f"estimator.{f.name} = {_fmt(value)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# running


def child_seeds(master, replicate):
    """Data and estimator seeds for one replicate.

    Seeds depend on the replicate only, so every grid point of a sweep reuses
    the same random streams (common random numbers across the grid).
    """
    ss = np.random.SeedSequence(int(master), spawn_key=(int(replicate),))
    data, est = ss.generate_state(2)
    return int(data), int(est)


def point_config(spec: ExperimentSpec, point, data_seed) -> DgpConfig:
    base = spec.dgp
    exp = spec.experiment
    if exp == "v_effect_sweep":
        return replace(base, p=100, f1=0.3, f2=0.3, v_coef_mag=float(point), seed=data_seed)
    if exp == "nr_sweep":
        return replace(base, n_r=int(round(point)), seed=data_seed)
    if exp == "mismatch_heatmap":
        f1, f2 = point
        return replace(base, f1=f1, f2=f2, seed=data_seed)
    if exp == "r2_sweep":
        lam_seed = spec.seed if base.lambda_seed is None else base.lambda_seed
        return replace(base, r2_target=float(point), lambda_seed=lam_seed, seed=data_seed)
    name = spec.parameter[4:]
    kind = _field_kind(DgpConfig, name)
    value = int(round(point)) if kind in (int, "optional_int") else float(point)
    return replace(base, **{name: value, "seed": data_seed})


def _feasible(point):
    return not isinstance(point, tuple) or point[0] + point[1] <= MAX_MISMATCH + 1e-12


def _point_label(point):
    return f"{point[0]:g};{point[1]:g}" if isinstance(point, tuple) else f"{point:g}"


def _error_tag(exc):
    return f"{type(exc).__name__}: {exc}".replace("\n", " ")


def run_task(spec: ExperimentSpec, grid_index, replicate):
    """Fit every method on one (grid point, replicate); returns (records, timings)."""
    point = spec.points[grid_index]
    data_seed, est_seed = child_seeds(spec.seed, replicate)
    base = {
        "experiment": spec.experiment,
        "grid_index": grid_index,
        "grid_value": _point_label(point),
        "f1": point[0] if isinstance(point, tuple) else "",
        "f2": point[1] if isinstance(point, tuple) else "",
        "replicate": replicate,
        "seed": data_seed,
    }
    records, timings = [], []
    try:
        cfg = point_config(spec, point, data_seed)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            gen = generate_r2_controlled if cfg.r2_target is not None else generate
            fused, truth, evaluation = gen(cfg)
    except Exception as exc:  # noqa: BLE001 - tagged and excluded, never fatal
        for m in spec.methods:
            rec = dict(base, method=m, error=_error_tag(exc))
            records.append(_blank(rec))
            timings.append(0.0)
        return records, timings

    for m in spec.methods:
        rec = dict(base, method=m)
        t0 = time.perf_counter()
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            try:
                est = fit_method(m, fused, replace(spec.estimator, method=m, seed=est_seed))
                rec["rmse"] = true_cate_rmse(est, evaluation, truth)
                rec["lambda_final"] = est.final_fit.lambda_used
                rec["support_final"] = int(est.final_fit.support.size)
                if spec.compute_ci:
                    rec.update(_ci_summary(est, evaluation))
                rec["error"] = ""
            except Exception as exc:  # noqa: BLE001
                rec["error"] = _error_tag(exc)
        rec["n_warnings"] = len(caught)
        timings.append((time.perf_counter() - t0) * 1000.0)
        records.append(_blank(rec))
    return records, timings


def _ci_summary(est, evaluation):
    """Mean width plus two coverages on the evaluation rows.

    ``ci_coverage`` targets the true CATE. ``ci_coverage_selected`` targets
    what the post-selection refit estimates: the preliminary CATE plus the
    best linear approximation of the remaining truth on the selected
    columns.
    """
    _, lo, hi = cate_confidence_intervals(est, evaluation.X_r, evaluation.V)
    tau = evaluation.tau
    prelim = preliminary_cate(est, evaluation.X_r, evaluation.V)
    S = est.final_fit.support
    design = np.column_stack([np.ones(tau.size), evaluation.X_r[:, S]])
    coef = np.linalg.lstsq(design, tau - prelim, rcond=None)[0]
    target = prelim + design @ coef
    return {
        "ci_width": float(np.mean(hi - lo)),
        "ci_coverage": float(np.mean((lo <= tau) & (tau <= hi))),
        "ci_coverage_selected": float(np.mean((lo <= target) & (target <= hi))),
    }


def _blank(rec):
    for key in RECORD_FIELDS:
        rec.setdefault(key, "" if key != "rmse" else float("nan"))
    if rec.get("n_warnings", "") == "":
        rec["n_warnings"] = 0
    return rec


def _task_worker(args):
    spec, gi, rep = args
    return gi, rep, run_task(spec, gi, rep)


@dataclass
class ExperimentResult:
    records: list
    aggregates: list
    metadata: dict
    timings: list = field(default_factory=list)

    @property
    def n_failed(self):
        return sum(1 for r in self.records if r["error"])

    @classmethod
    def load(cls, directory) -> "ExperimentResult":
        directory = Path(directory)
        records = _read_csv(directory / "records.csv")
        for r in records:
            r["rmse"] = float(r["rmse"]) if r["rmse"] not in ("", "nan") else float("nan")
            r["grid_index"] = int(r["grid_index"])
            r["replicate"] = int(r["replicate"])
        aggregates = _read_csv(directory / "aggregate.csv")
        meta_path = directory / "metadata.json"
        metadata = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        return cls(records, aggregates, metadata)


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def aggregate(records, spec_experiment=None):
    """Mean and SD (ddof=1) of RMSE per (grid point, method) over successful rows."""
    groups = {}
    for r in records:
        key = (int(r["grid_index"]), r["grid_value"], r["method"])
        groups.setdefault(key, {"ok": [], "failed": 0, "experiment": r["experiment"]})
        if r["error"]:
            groups[key]["failed"] += 1
        else:
            groups[key]["ok"].append(float(r["rmse"]))
    rows = []
    for (gi, gv, m), g in sorted(groups.items(), key=lambda kv: (kv[0][0], METHODS.index(kv[0][2]))):
        vals = np.asarray(g["ok"])
        rows.append({
            "experiment": g["experiment"],
            "grid_index": gi,
            "grid_value": gv,
            "method": m,
            "n_ok": int(vals.size),
            "n_failed": g["failed"],
            "mean_rmse": float(vals.mean()) if vals.size else float("nan"),
            "sd_rmse": float(vals.std(ddof=1)) if vals.size > 1 else float("nan"),
        })
    return rows


def _csv_text(rows, header):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(header), lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _cell(row.get(k, "")) for k in header})
    return buf.getvalue()


def _cell(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return v


def _atomic_write(path, text):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_outputs(out, records, timings, spec, wall, complete):
    out = Path(out)
    records = sorted(records, key=lambda r: (r["grid_index"], r["replicate"], METHODS.index(r["method"])))
    _atomic_write(out / "records.csv", _csv_text(records, RECORD_FIELDS))
    _atomic_write(out / "aggregate.csv", _csv_text(aggregate(records), AGGREGATE_FIELDS))
    _atomic_write(
        out / "timings.csv",
        _csv_text(timings, ("grid_index", "replicate", "method", "runtime_ms")),
    )
    meta = {
        "spec": emit(spec),
        "version": __version__,
        "wall_seconds": wall,
        "n_records": len(records),
        "n_failed": sum(1 for r in records if r["error"]),
        "complete": complete,
    }
    _atomic_write(out / "metadata.json", json.dumps(meta, indent=2) + "\n")
    return records, meta


def run_experiment(spec: ExperimentSpec, out=None, workers=None, progress=None) -> ExperimentResult:
    """Run every feasible (grid point, replicate) task and write the outputs.

    Interrupting the run leaves the completed records on disk together with
    a ``.incomplete`` marker.
    """
    out = Path(out or spec.out)
    out.mkdir(parents=True, exist_ok=True)
    marker = out / ".incomplete"
    marker.write_text("run in progress\n")
    n_workers = workers or spec.resolved_workers()
    tasks = [
        (gi, rep)
        for gi, point in enumerate(spec.points)
        if _feasible(point)
        for rep in range(spec.n_replicates)
    ]
    records, timings = [], []
    t0 = time.perf_counter()

    def collect(gi, rep, result):
        recs, times = result
        records.extend(recs)
        timings.extend(
            {"grid_index": gi, "replicate": rep, "method": r["method"], "runtime_ms": t}
            for r, t in zip(recs, times)
        )
        if progress:
            progress(gi, rep)

    try:
        if n_workers <= 1:
            for gi, rep in tasks:
                collect(gi, rep, run_task(spec, gi, rep))
        else:
            with ProcessPoolExecutor(max_workers=n_workers) as pool:
                futures = {pool.submit(_task_worker, (spec, gi, rep)): (gi, rep) for gi, rep in tasks}
                for fut, task in futures.items():
                    try:
                        gi, rep, result = fut.result()
                    except BrokenProcessPool as exc:
                        raise WorkerPanic("worker process died", task=task) from exc
                    collect(gi, rep, result)
    except BaseException:
        _write_outputs(out, records, timings, spec, time.perf_counter() - t0, complete=False)
        raise
    records, meta = _write_outputs(out, records, timings, spec, time.perf_counter() - t0, complete=True)
    marker.unlink()
    return ExperimentResult(records, aggregate(records), meta, timings)


# ---------------------------------------------------------------------------
# reporting


def _means(result):
    table = {}
    for row in result.aggregates:
        table[(row["grid_value"], row["method"])] = float(row["mean_rmse"])
    return table


def emit_heatmap_table(result: ExperimentResult, grid=None):
    """Per-(f1, f2) gaps RMSE(MR)-RMSE(RACER) and RMSE(MR)-RMSE(SR).

    Infeasible cells (f1 + f2 above the bound) come back as NA rows. Returns
    ``(rows, matrices)`` where ``matrices`` maps each gap name to CSV text
    with f1 down the rows and f2 across the columns.
    """
    if grid is None:
        fs = sorted({float(r["f1"]) for r in result.records} | {float(r["f2"]) for r in result.records})
    else:
        fs = sorted(float(g) for g in grid)
    means = _means(result)
    rows = []
    for f1 in fs:
        for f2 in fs:
            label = _point_label((f1, f2))
            row = {"f1": f1, "f2": f2, "feasible": _feasible((f1, f2))}
            for name, other in (("gap_mr_racer", "racer"), ("gap_mr_sr", "sr_oscar")):
                mr, ot = means.get((label, "mr_oscar")), means.get((label, other))
                row[name] = mr - ot if row["feasible"] and mr is not None and ot is not None else None
            rows.append(row)
    matrices = {}
    for name in ("gap_mr_racer", "gap_mr_sr"):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["f1\\f2"] + [f"{f:g}" for f in fs])
        for f1 in fs:
            cells = []
            for f2 in fs:
                val = next(r[name] for r in rows if r["f1"] == f1 and r["f2"] == f2)
                cells.append("NA" if val is None else repr(float(val)))
            w.writerow([f"{f1:g}"] + cells)
        matrices[name] = buf.getvalue()
    return rows, matrices


def summarize(result: ExperimentResult) -> str:
    """Plain-text table of mean +- SD RMSE per grid point and method."""
    methods = [m for m in METHODS if any(r["method"] == m for r in result.aggregates)]
    points = []
    for r in result.aggregates:
        if r["grid_value"] not in points:
            points.append(r["grid_value"])
    cells = {(r["grid_value"], r["method"]): r for r in result.aggregates}
    width = max([10] + [len(p) for p in points])
    lines = ["grid".ljust(width) + "".join(m.rjust(18) for m in methods)]
    for p in points:
        parts = []
        for m in methods:
            row = cells.get((p, m))
            if row is None or row["n_ok"] in (0, "0"):
                parts.append("NA".rjust(18))
            else:
                mean, sd = float(row["mean_rmse"]), float(row["sd_rmse"])
                parts.append(f"{mean:.3f} +- {sd:.3f}".rjust(18))
        lines.append(p.ljust(width) + "".join(parts))
    failed = result.n_failed
    if failed:
        lines.append(f"{failed} record(s) failed and were excluded")
    return "\n".join(lines)


__all__ = [
    "ExperimentSpec",
    "ExperimentResult",
    "aggregate",
    "child_seeds",
    "emit",
    "emit_heatmap_table",
    "load_spec",
    "parse_spec",
    "run_experiment",
    "run_task",
    "summarize",
]
