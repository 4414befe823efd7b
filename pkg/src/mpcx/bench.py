"""Offline verification, timing study and report writers."""

from __future__ import annotations

import csv
import json
import os
import platform
import time
from fractions import Fraction
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .oracle import DatasetRecord, worker_count
from .pipeline import (
    PipelineConfig,
    aggregate_timing,
    pipeline_average,
    solve_with_prediction,
    verify_solution,
    warm_start_guess,
)
from .predictor.model import encode_inputs, forward
from .predictor.train import label_metrics
from .problem import assemble_sparse_qp, instance_from_dict, instance_to_dict
from .qpsolve import solve_full

MIN_BENCH_COUNT = 30
ROW_FIELDS = (
    "config_name", "baseline_avg_time", "pipeline_avg_time", "alpha", "speedup",
    "exact_set_accuracy", "mean_inactive_removed_fraction", "false_inactive_rate",
    "warm_start_iteration_ratio", "t_rmpc", "t_mpc", "t_predict", "measured_avg_time",
)


def environment_block() -> dict:
    clock = time.get_clock_info("perf_counter")
    import numba
    import scipy
    return {
        "clock": clock.implementation,
        "clock_resolution": clock.resolution,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
        "build_profile": "numba-jit" if not os.environ.get("NUMBA_DISABLE_JIT") else "interpreted",
        "platform": platform.platform(),
        "cpu_count": os.cpu_count(),
        "thread_count": worker_count(),
    }


# ---------------------------------------------------------------------------
# stored outputs


def output_entry(config: str, instance, y) -> dict:
    return {"config": config, "instance": instance_to_dict(instance),
            "y": [float(v) for v in y]}


def write_outputs(path, entries) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in entries:
            fh.write(json.dumps(e, separators=(",", ":")) + "\n")
            n += 1
    return n


def reverify_outputs(path, tol: float = 1e-6) -> dict:
    """Re-check every stored solution against its full problem."""
    checked, failures, worst = 0, [], 0.0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            e = json.loads(line)
            qp = assemble_sparse_qp(instance_from_dict(e["instance"]))
            check = verify_solution(qp, np.asarray(e["y"]), tol)
            checked += 1
            worst = max(worst, check.worst_violation)
            if not check.ok:
                failures.append({"line": lineno, "config": e["config"],
                                 "worst_violation": check.worst_violation})
    return {"checked": checked, "violations": len(failures), "worst_violation": worst,
            "failures": failures[:20]}


# ---------------------------------------------------------------------------
# offline verification


def _label_source(mode, n_ineq):
    if mode == "all-inactive":
        return lambda rec: np.zeros(n_ineq, dtype=np.int8)
    if mode == "all-active":
        return lambda rec: np.ones(n_ineq, dtype=np.int8)
    if mode == "oracle":
        return lambda rec: rec.label
    return lambda rec: None


def offline_verify(records: list[DatasetRecord], c_model=None, w_model=None,
                   cfg: PipelineConfig | None = None, mode: str = "model",
                   workers: int | None = None):
    """Run the pipeline on every record; returns (report, output entries)."""
    cfg = cfg or PipelineConfig()
    if not records:
        raise ValueError("no records to verify")
    if mode == "model" and c_model is None:
        raise ValueError("model mode needs a constraint model")
    labels_for = _label_source(mode, len(records[0].label))

    def run(rec):
        qp = assemble_sparse_qp(rec.instance)
        res = solve_with_prediction(rec.instance, c_model if mode == "model" else None, w_model,
                                    cfg, qp=qp, labels=labels_for(rec))
        return res, verify_solution(qp, res.final_y, cfg.verify_tol)

    workers = workers or worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(run, records))
    else:
        out = [run(r) for r in records]

    results = [r for r, _ in out]
    pre = [r.worst_violation for r in results if r.reduced_solution is not None]
    metrics = label_metrics(np.array([r.predicted_label for r in results]),
                            np.array([rec.label for rec in records]))
    report = {
        "mode": mode,
        "records": len(records),
        "alpha": sum(not r.fell_back for r in results) / len(results),
        "fallbacks": sum(r.fell_back for r in results),
        "reduced_solve_errors": sum(r.reduced_error is not None for r in results),
        "worst_violation_before_fallback": max(pre) if pre else None,
        "all_outputs_verified": all(c.ok for _, c in out),
        "worst_final_violation": max(c.worst_violation for _, c in out),
        **metrics,
    }
    entries = [output_entry(mode, rec.instance, r.final_y) for rec, r in zip(records, results)]
    return report, entries


# ---------------------------------------------------------------------------
# timing study


def best_of(fn, repeats: int = 3):
    """Run ``fn`` ``repeats`` times; keep the fastest (time, result)."""
    best_t, best_r = np.inf, None
    for _ in range(repeats):
        t0 = time.perf_counter()
        r = fn()
        dt = time.perf_counter() - t0
        if dt < best_t:
            best_t, best_r = dt, r
    return best_t, best_r


def _best_pipeline(fn, repeats):
    best = None
    for _ in range(repeats):
        r = fn()
        if best is None or r.timings["t_total"] < best.timings["t_total"]:
            best = r
    return best


def run_bench(records: list[DatasetRecord], c_model=None, w_model=None,
              cfg: PipelineConfig | None = None, repeats: int = 3, configs=None):
    """Head-to-head timing of the cold full solve against each pipeline config.

    Returns ``(report, per_instance, output_entries)``. Solves run
    sequentially on the calling thread; one warm-up pass is discarded.
    """
    cfg = cfg or PipelineConfig()
    if len(records) < MIN_BENCH_COUNT:
        raise ValueError(f"need at least {MIN_BENCH_COUNT} instances, got {len(records)}")
    if configs is None:
        configs = (["model"] if c_model is not None else []) + ["oracle", "all-inactive"]
    n_ineq = len(records[0].label)

    qps, assembly = [], []
    for rec in records:
        t0 = time.perf_counter()
        qps.append(assemble_sparse_qp(rec.instance))
        assembly.append(time.perf_counter() - t0)

    # warm-up: jit compilation and caches, excluded from every sample
    for name in configs:
        solve_with_prediction(records[0].instance, c_model if name == "model" else None, w_model,
                              cfg, qp=qps[0], labels=_label_source(name, n_ineq)(records[0]))
    solve_full(qps[0], None, cfg.solver)

    baseline, cold_iters = [], []
    for qp in qps:
        dt, sol = best_of(lambda: solve_full(qp, None, cfg.solver).check(), repeats)
        baseline.append(dt)
        cold_iters.append(sol.iterations)

    per_instance = {"assembly_time": assembly, "baseline_time": baseline,
                    "baseline_iterations": cold_iters}
    rows, entries = [], []
    true = np.array([rec.label for rec in records])
    for name in configs:
        labels_for = _label_source(name, n_ineq)
        model = c_model if name == "model" else None
        results = []
        for rec, qp in zip(records, qps):
            res = _best_pipeline(lambda: solve_with_prediction(
                rec.instance, model, w_model, cfg, qp=qp, labels=labels_for(rec)), repeats)
            results.append(res)
            entries.append(output_entry(name, rec.instance, res.final_y))
        timing = aggregate_timing(results, baseline)
        metrics = label_metrics(np.array([r.predicted_label for r in results]), true)
        ratio = None
        if w_model is not None:
            ratio = warm_start_iteration_ratio(
                [rec for rec, r in zip(records, results) if r.fell_back], w_model, cfg)
        rows.append({
            "config_name": name,
            "baseline_avg_time": timing.baseline_avg,
            "pipeline_avg_time": timing.pipeline_avg,
            "alpha": timing.alpha,
            "speedup": timing.speedup,
            "exact_set_accuracy": metrics["exact_set_accuracy"],
            "mean_inactive_removed_fraction": metrics["mean_inactive_removed_fraction"],
            "false_inactive_rate": metrics["false_inactive_rate"],
            "warm_start_iteration_ratio": ratio,
            "t_rmpc": timing.t_rmpc,
            "t_mpc": timing.t_mpc,
            "t_predict": timing.t_predict,
            "measured_avg_time": timing.measured_avg,
        })
        per_instance[name] = {
            "fell_back": [bool(r.fell_back) for r in results],
            "t_rmpc": [r.t_rmpc for r in results],
            "t_fallback": [r.timings["t_fallback"] for r in results],
            "t_total": [r.timings["t_total"] for r in results],
        }
    report = {
        "scenario": records[0].instance.scenario,
        "records": len(records),
        "repeats": repeats,
        "mean_assembly_time": float(np.mean(assembly)),
        "rows": rows,
        "environment": environment_block(),
    }
    return report, per_instance, entries


def warm_start_iteration_ratio(records, w_model, cfg: PipelineConfig | None = None):
    """Median warm-started over median cold iterations; None without samples."""
    cold, warm = iteration_pairs(records, w_model, cfg)
    if not cold:
        return None
    return float(np.median(warm) / np.median(cold))


def iteration_pairs(records, w_model, cfg: PipelineConfig | None = None):
    """Full-solve iteration counts, cold and warm-started, per record."""
    cfg = cfg or PipelineConfig()
    cold, warm = [], []
    for rec in records:
        qp = assemble_sparse_qp(rec.instance)
        guess = warm_start_guess(qp, rec.instance, forward(w_model, encode_inputs(rec.instance, w_model)))
        cold.append(solve_full(qp, None, cfg.solver).check().iterations)
        warm.append(solve_full(qp, guess, cfg.solver).check().iterations)
    return cold, warm


def recompute_timing_inputs(per_config: dict):
    """(alpha, mean t_rmpc, mean fallback time or None) from stored timings."""
    fell = np.asarray(per_config["fell_back"], dtype=bool)
    alpha = Fraction(int((~fell).sum()), fell.size)
    t_rmpc = float(np.mean(per_config["t_rmpc"]))
    t_fb = np.asarray(per_config["t_fallback"])[fell]
    return alpha, t_rmpc, (t_fb.mean() if t_fb.size else None)


def check_report_arithmetic(report: dict, per_instance: dict, tol: float = 1e-12) -> bool:
    for row in report["rows"]:
        alpha, t_rmpc, t_mpc = recompute_timing_inputs(per_instance[row["config_name"]])
        if t_mpc is None:
            t_mpc = row["t_mpc"]
        avg = pipeline_average(alpha, t_rmpc, t_mpc)
        if abs(avg - row["pipeline_avg_time"]) > tol * max(1.0, abs(avg)):
            return False
        if abs(row["speedup"] - row["baseline_avg_time"] / row["pipeline_avg_time"]) > 1e-9 * row["speedup"]:
            return False
    return True


# ---------------------------------------------------------------------------
# writers


def write_report_json(path, report: dict, per_instance: dict | None = None) -> None:
    doc = dict(report)
    if per_instance is not None:
        doc["per_instance"] = per_instance
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, allow_nan=False, default=_jsonable)
        fh.write("\n")


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def write_rows_csv(path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ROW_FIELDS, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: ("" if row.get(k) is None else repr(row[k]) if isinstance(row[k], float)
                            else row[k]) for k in ROW_FIELDS})


def read_rows_csv(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            parsed = {}
            for k, v in row.items():
                if k == "config_name":
                    parsed[k] = v
                else:
                    parsed[k] = None if v == "" else float(v)
            out.append(parsed)
    return out


# ---------------------------------------------------------------------------
# figures


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_bench(report: dict, per_instance: dict, stem) -> list[str]:
    """Bar chart of average times and per-instance time distributions."""
    plt = _pyplot()
    rows = report["rows"]
    names = [r["config_name"] for r in rows]
    paths = []

    fig, ax = plt.subplots(figsize=(6, 3.5))
    x = np.arange(len(rows))
    ax.bar(x - 0.2, [r["baseline_avg_time"] * 1e3 for r in rows], 0.4, label="full solve")
    ax.bar(x + 0.2, [r["pipeline_avg_time"] * 1e3 for r in rows], 0.4, label="pipeline")
    for xi, r in zip(x, rows):
        ax.text(xi + 0.2, r["pipeline_avg_time"] * 1e3, f"{r['speedup']:.1f}x",
                ha="center", va="bottom", fontsize=8)
    ax.set_xticks(x, names)
    ax.set_ylabel("average time [ms]")
    ax.set_title(f"{report['scenario']} ({report['records']} instances)")
    ax.legend()
    fig.tight_layout()
    paths.append(f"{stem}_times.png")
    fig.savefig(paths[-1], dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 3.5))
    data = [np.asarray(per_instance["baseline_time"]) * 1e3]
    data += [np.asarray(per_instance[n]["t_total"]) * 1e3 for n in names]
    ax.boxplot(data, showfliers=False)
    ax.set_xticks(np.arange(1, len(data) + 1), ["full solve"] + names)
    ax.set_yscale("log")
    ax.set_ylabel("per-instance time [ms]")
    fig.tight_layout()
    paths.append(f"{stem}_distribution.png")
    fig.savefig(paths[-1], dpi=120)
    plt.close(fig)
    return paths


def plot_training(report: dict, stem) -> list[str]:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    epochs = np.arange(1, len(report["train_loss"]) + 1)
    ax.plot(epochs, report["train_loss"], label="train")
    ax.plot(epochs, report["test_loss"], label="test")
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(f"{report['arch']} / {report['head']}")
    ax.legend()
    fig.tight_layout()
    path = f"{stem}_loss.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return [path]
