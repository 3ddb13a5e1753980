"""Cross-run aggregation: per-method mean/std tables over seeds plus
per-run metric curves suitable for external plotting."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError

_CURVE_FIELDS = ("verifier_acc", "rm_score", "tok_loss", "dist_loss", "rm_loss",
                 "cand_avg_size", "cand_mass", "wall_ms")


def _read_run(run_dir: Path) -> dict:
    cfg_path = run_dir / "config.json"
    if not cfg_path.exists():
        raise ContractError(f"{run_dir} has no config.json; not a run directory")
    out = {"dir": run_dir, "config": json.loads(cfg_path.read_text())}
    summary = run_dir / "summary.json"
    out["summary"] = json.loads(summary.read_text()) if summary.exists() else {}
    metrics = run_dir / "metrics.jsonl"
    out["metrics"] = ([json.loads(line) for line in metrics.read_text().splitlines()]
                      if metrics.exists() else [])
    return out


def _check_shared_eval_settings(runs: Sequence[dict]) -> None:
    base = runs[0]["config"].get("eval", {})
    for run in runs[1:]:
        other = run["config"].get("eval", {})
        differing = sorted(k for k in set(base) | set(other)
                           if base.get(k) != other.get(k))
        if differing:
            raise ContractError(
                f"eval settings differ between {runs[0]['dir']} and {run['dir']}: "
                + ", ".join(differing))


def _scalar_metrics(run: dict) -> dict[str, float]:
    """Flatten one run's comparable numbers."""
    out = {}
    summary = run["summary"]
    for n, acc in summary.get("bon", {}).get("results", {}).items():
        out[f"bon_{n}"] = acc
    steps = summary.get("steps", {})
    for key in ("f1", "f1_process", "f1_prefix"):
        if key in steps:
            out[key] = steps[key]
    td = summary.get("td", {})
    for key in ("pearson_td_mc", "auc_value_exact", "auc_value_mc"):
        if td.get(key) is not None:
            out[key] = td[key]
    if run["metrics"]:
        final = run["metrics"][-1]
        out["final_verifier_acc"] = final["verifier_acc"]
        out["final_rm_score"] = final["rm_score"]
    return out


def emit_report(run_dirs: Sequence, out_dir) -> Path:
    """Aggregate runs into report.csv (per-method mean and population std over
    seeds) and one curve file per run (row count equals iteration count)."""
    if not run_dirs:
        raise ContractError("emit_report needs at least one run directory")
    runs = [_read_run(Path(d)) for d in run_dirs]
    _check_shared_eval_settings(runs)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    by_method: dict[tuple, dict[str, list]] = {}
    for run in runs:
        cfg = run["config"]
        key = (cfg.get("rm", {}).get("method", "?"), cfg.get("rl", {}).get("method", "?"))
        bucket = by_method.setdefault(key, {})
        for name, value in _scalar_metrics(run).items():
            bucket.setdefault(name, []).append(value)

    rows = []
    for (rm_method, rl_method), metrics in sorted(by_method.items()):
        for name, values in sorted(metrics.items()):
            arr = np.asarray(values, dtype=np.float64)
            rows.append({
                "rm_method": rm_method, "rl_method": rl_method, "metric": name,
                "mean": float(arr.mean()), "std": float(arr.std()), "n": len(arr),
            })
    report_path = out_dir / "report.csv"
    with open(report_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["rm_method", "rl_method", "metric",
                                                "mean", "std", "n"])
        writer.writeheader()
        writer.writerows(rows)

    curves_dir = out_dir / "curves"
    curves_dir.mkdir(exist_ok=True)
    for run in runs:
        if not run["metrics"]:
            continue
        path = curves_dir / f"{Path(run['dir']).name}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["iter", *_CURVE_FIELDS])
            writer.writeheader()
            for rec in run["metrics"]:
                writer.writerow({k: rec.get(k) for k in ("iter", *_CURVE_FIELDS)})
    return report_path
