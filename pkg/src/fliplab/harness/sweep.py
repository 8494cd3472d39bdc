"""Grid sweeps over seeds and method variants, aggregation and curve CSVs."""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, steps_for_ratio
from .runner import load_splits, run

log = logging.getLogger(__name__)

CURVE_COLUMNS = ["method", "compression_ratio", "sparsity", "mean_acc", "std_acc", "n_seeds"]
GRID_COLUMNS = ["method", "param", "value", "compression_ratio", "sparsity", "mean_acc", "std_acc",
                "n_seeds", "n_failed", "metric"]


@dataclass(frozen=True)
class Point:
    """One sweep point: a labelled config variant, run once per seed."""

    method: str
    label: str
    param: str
    value: float | None
    ratio: float | None
    overrides: dict

    def key(self) -> tuple:
        return (self.method, self.label, self.param, self.value, self.ratio)


def ratio_label(ratio) -> str:
    if ratio is None:
        return ""
    r = float(ratio)
    return str(int(r)) if r.is_integer() else f"{r:g}"


def plan(base: ExperimentConfig) -> list[Point]:
    """Expand the sweep section of ``base`` into points."""
    sw = base.sweep
    points: list[Point] = []
    rate = base.schedule.rate

    def iterative(kind, ratio, extra=None, label=None, param="", value=None):
        ov = {"method": {"kind": kind, **(extra or {})},
              "schedule": {"steps": steps_for_ratio(ratio, rate), "compression_ratio": None}}
        return Point(kind, label or kind, param, value, ratio, ov)

    def snip(ratio):
        ov = {"method": {"kind": "snip"},
              "schedule": {"steps": steps_for_ratio(ratio, rate), "compression_ratio": None}}
        return Point("snip", "snip", "", None, ratio, ov)

    if sw.kind in ("lambda_grid", "p_grid"):
        param = "lam" if sw.kind == "lambda_grid" else "p"
        for ratio in sw.ratio_list():
            for v in sw.grid():
                points.append(iterative("flipout", ratio, {param: v}, f"flipout[{param}={v:g}]", param, v))
    elif sw.kind == "noise_ablation":
        for ratio in sw.ratio_list():
            for kind in sw.method_list():
                extra = {"lam": 1.0} if kind in ("flipout", "noisy_global_magnitude") else {}
                points.append(iterative(kind, ratio, extra))
    else:
        for kind in sw.method_list():
            if kind == "hoyer_square":
                for a in sw.alpha_list():
                    points.append(Point("hoyer_square", f"hoyer_square[alpha={a:g}]", "alpha", a, None,
                                        {"method": {"kind": "hoyer_square", "alpha": a}}))
            elif kind == "snip":
                points.extend(snip(r) for r in sw.ratio_list())
            else:
                points.extend(iterative(kind, r) for r in sw.ratio_list())
    if sw.include_dense:
        points.append(Point("dense", "dense", "", None, 1.0, {"method": {"kind": "dense"}}))
    return points


def _job(args):
    base_doc, point, seed, out_dir = args
    cfg = ExperimentConfig.from_dict(base_doc)
    for section, changes in point.overrides.items():
        cfg = cfg.replace(**{section: changes})
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = run(cfg, seed, out_dir=out_dir)
    return point, res.final


def sweep(base: ExperimentConfig, out_dir=None, workers: int | None = None) -> list[dict]:
    """Run every (point, seed) pair and aggregate per point.

    Returns the aggregated rows; per-run final records are appended to
    ``out_dir/runs.jsonl`` and the table to ``out_dir/results.json``.
    """
    points = plan(base)
    workers = workers if workers is not None else base.sweep.workers
    out = Path(out_dir) if out_dir is not None else None
    runs_dir = out / "runs" if out is not None else None
    finals: list[tuple[Point, dict]] = []
    if workers > 1:
        doc = base.to_dict()
        jobs = [(doc, p, s, runs_dir) for p in points for s in base.seeds]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            finals = list(pool.map(_job, jobs))
    else:
        splits = load_splits(base)
        for p in points:
            cfg = base
            for section, changes in p.overrides.items():
                cfg = cfg.replace(**{section: changes})
            for s in base.seeds:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    res = run(cfg, s, out_dir=runs_dir, splits=splits)
                log.info("%s seed %d: %s acc=%s", p.label, s, res.status, res.final.get("test_acc"))
                finals.append((p, res.final))
    rows = aggregate(finals, base)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "runs.jsonl", "w") as fh:
            for p, f in finals:
                fh.write(json.dumps({"point": p.label, **f}, sort_keys=True) + "\n")
        (out / "results.json").write_text(json.dumps({"kind": base.sweep.kind, "rows": rows},
                                                     sort_keys=True, indent=1))
    return rows


def _std(xs: list[float]) -> float:
    return float(np.std(xs, ddof=1)) if len(xs) > 1 else 0.0


def aggregate(finals: list[tuple[Point, dict]], base: ExperimentConfig | None = None) -> list[dict]:
    """Mean and sample std of the final accuracy per point, over surviving seeds.

    Grid sweeps score on validation accuracy when a validation split exists.
    """
    grouped: dict[tuple, list[tuple[Point, dict]]] = {}
    for p, f in finals:
        grouped.setdefault(p.key(), []).append((p, f))
    rows = []
    for items in grouped.values():
        p = items[0][0]
        ok = [f for _, f in items if f.get("status") == "ok"]
        use_val = p.param in ("lam", "p") and ok and all(f.get("val_acc") is not None for f in ok)
        metric = "val_acc" if use_val else "test_acc"
        accs = [float(f[metric]) for f in ok]
        sparsities = [float(f["sparsity"]) for _, f in items]
        alive = [f["alive"] for _, f in items]
        total = items[0][1]["total"]
        if p.ratio is not None:
            ratio = ratio_label(p.ratio)
        else:
            mean_alive = float(np.mean(alive))
            ratio = f"{total / mean_alive:.4g}" if mean_alive > 0 else "inf"
        rows.append({
            "method": p.method,
            "label": p.label,
            "param": p.param,
            "value": p.value,
            "compression_ratio": ratio,
            "sparsity": float(np.mean(sparsities)),
            "mean_acc": float(np.mean(accs)) if accs else None,
            "std_acc": _std(accs),
            "n_seeds": len(accs),
            "n_failed": len(items) - len(ok),
            "partial": len(ok) < len(items),
            "metric": metric,
            "accs": accs,
            "collapsed_runs": sum(1 for _, f in items if f.get("collapsed_layers")),
        })
    return rows


def best_per_target(rows: list[dict]) -> list[dict]:
    """Arg-max grid value per sparsity target (grid sweeps)."""
    best: dict[str, dict] = {}
    for r in rows:
        if not r["param"] or r["mean_acc"] is None or r["param"] == "alpha":
            continue
        cur = best.get(r["compression_ratio"])
        if cur is None or r["mean_acc"] > cur["mean_acc"]:
            best[r["compression_ratio"]] = r
    return [{"compression_ratio": k, "param": v["param"], "best_value": v["value"],
             "mean_acc": v["mean_acc"], "sparsity": v["sparsity"]} for k, v in sorted(best.items(), key=lambda kv: float(kv[0]))]


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_plot_data(rows: list[dict], out_dir) -> list[Path]:
    """Write curve.csv (and grid.csv / best.csv for grid sweeps) with a fixed column order."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    curve_rows = [r for r in rows if r.get("param") in ("", None, "alpha")]
    curve_rows.sort(key=lambda r: (r["method"] != "dense", r["method"], float(r["compression_ratio"])
                                   if r["compression_ratio"] not in ("inf",) else math.inf))
    path = out / "curve.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for r in curve_rows:
            w.writerow([_fmt(r.get(c)) for c in CURVE_COLUMNS])
    written.append(path)
    grid_rows = [r for r in rows if r.get("param") in ("lam", "p")]
    if grid_rows:
        path = out / "grid.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(GRID_COLUMNS)
            for r in sorted(grid_rows, key=lambda r: (float(r["compression_ratio"]), r["value"])):
                w.writerow([_fmt(r.get(c)) for c in GRID_COLUMNS])
        written.append(path)
        path = out / "best.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            cols = ["compression_ratio", "param", "best_value", "mean_acc", "sparsity"]
            w.writerow(cols)
            for r in best_per_target(grid_rows):
                w.writerow([_fmt(r[c]) for c in cols])
        written.append(path)
    return written


def load_results(path) -> list[dict]:
    p = Path(path)
    if p.is_dir():
        p = p / "results.json"
    return json.loads(p.read_text())["rows"]
