"""End-to-end acceptance checks, one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the lines are echoed as the
tests run and collected again in the terminal summary. The full run
generates a 5000-record dataset, trains four predictors and times the
pipeline, which takes roughly ten minutes on one core.
"""

import dataclasses
import json
import math
import os
import subprocess
import sys
import time

import numpy as np
import pytest
from oracles import gradient_check, naive_attention, tiny_model

from mpcx.bench import check_report_arithmetic, iteration_pairs, reverify_outputs
from mpcx.cli import EXIT_OK, main
from mpcx.oracle import label_active_set, read_dataset, split_dataset
from mpcx.pipeline import PipelineResult, aggregate_timing, solve_with_prediction
from mpcx.predictor import attention, load_model
from mpcx.predictor.nn import attention_weights
from mpcx.problem import SCENARIOS, assemble_sparse_qp, build_mpc_instance
from mpcx.qpsolve import SolverConfig, solve_full, solve_kkt_equality
from mpcx.smooth import disk_constraints, lse_combine, sandwich_check

SEED = 42
RECORDS = 5000
BENCH_COUNT = 500
EXACT = 4 * np.finfo(float).eps
CONSTRAINT_ARCHS = ("transformer", "mlp", "logreg")
# the polish step reuses the equality solver, so comparisons use the raw ADMM iterate
UNPOLISHED = SolverConfig(polish=False)


# ---------------------------------------------------------------------------
# shared artifacts


@pytest.fixture(scope="session")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="session")
def dataset(workdir):
    path = workdir / "data.jsonl"
    assert main(["gen", "--scenario", "double-integrator", "--count", str(RECORDS),
                 "--seed", str(SEED), "--out", str(path)]) == EXIT_OK
    return path


@pytest.fixture(scope="session")
def models(workdir, dataset):
    out = {}
    for arch, head in [(a, "constraint") for a in CONSTRAINT_ARCHS] + [("transformer", "warmstart")]:
        path = workdir / f"{arch}_{head}.json"
        assert main(["train", "--data", str(dataset), "--arch", arch, "--head", head,
                     "--out", str(path), "--no-figures"]) == EXIT_OK
        report = json.loads(path.with_suffix(".report.json").read_text())
        out[(arch, head)] = (path, report)
    return out


@pytest.fixture(scope="session")
def test_split(dataset):
    _, records = read_dataset(dataset)
    return split_dataset(records, 0.8, 0)[1]


@pytest.fixture(scope="session")
def bench_run(workdir, dataset, models):
    stem = workdir / "bench"
    outputs = workdir / "bench_outputs.jsonl"
    t0 = time.perf_counter()
    code = main(["bench", "--data", str(dataset), "--count", str(BENCH_COUNT),
                 "--model", str(models[("transformer", "constraint")][0]),
                 "--warm-model", str(models[("transformer", "warmstart")][0]),
                 "--out", str(stem), "--outputs", str(outputs)])
    elapsed = time.perf_counter() - t0
    assert code == EXIT_OK
    doc = json.loads((workdir / "bench.json").read_text())
    return doc, outputs, elapsed


# ---------------------------------------------------------------------------
# criteria


def test_c01_reduced_problem_reproduces_full_solution(verdict):
    t0 = time.perf_counter()
    worst, count, fell_back = 0.0, 0, 0
    for scenario in SCENARIOS:
        for seed in range(70):
            inst = build_mpc_instance(scenario, None, 10_000 + seed)
            qp = assemble_sparse_qp(inst)
            sol = solve_full(qp, cfg=UNPOLISHED).check()
            res = solve_with_prediction(inst, None, qp=qp, labels=label_active_set(qp, sol))
            fell_back += res.fell_back
            worst = max(worst, float(np.max(np.abs(res.final_y - sol.y_star))))
            count += 1
    elapsed = time.perf_counter() - t0
    ok = count >= 200 and fell_back == 0 and worst <= 1e-6 and elapsed < 120
    verdict(1, "oracle-label reduced solve equals full solve",
            ok, f"{count} instances, max |dy| {worst:.2e}, {fell_back} fallbacks, {elapsed:.1f} s")


def test_c02_analytical_equality_solver(verdict):
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(100):
        qp = assemble_sparse_qp(build_mpc_instance(SCENARIOS[i % 3], None, 20_000 + i))
        # bounds pushed out of reach: only the dynamics constrain the optimum
        qp = dataclasses.replace(qp, dvec=qp.dvec + 1e3)
        y, _ = solve_kkt_equality(qp.Qmat, qp.pvec, qp.Aeq, qp.beq)
        worst = max(worst, float(np.max(np.abs(solve_full(qp, cfg=UNPOLISHED).y_star - y))))
    y1, l1 = solve_kkt_equality(np.eye(2), np.zeros(2), np.array([[1.0, 0.0]]), np.array([1.0]))
    y2, l2 = solve_kkt_equality(np.diag([2.0, 2.0]), np.array([-2.0, -4.0]),
                                np.array([[1.0, 1.0]]), np.array([1.0]))
    first = np.array_equal(y1, [1.0, 0.0]) and np.array_equal(l1, [-1.0])
    second = (np.max(np.abs(y2 - [0.0, 1.0])) <= EXACT and np.max(np.abs(l2 - [2.0])) <= EXACT)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and first and second and elapsed < 10
    verdict(2, "equality solver vs full solver and worked examples", ok,
            f"max |dy| {worst:.2e} over 100, examples {first}/{second}, {elapsed:.1f} s")


def test_c03_attention_matches_naive_loop(verdict):
    rng = np.random.default_rng(3)
    worst_out, worst_rows = 0.0, 0.0
    for _ in range(1000):
        L, d = int(rng.integers(1, 17)), int(rng.integers(1, 33))
        Q, K, V = rng.normal(size=(L, d)), rng.normal(size=(L, d)), rng.normal(size=(L, d))
        worst_out = max(worst_out, float(np.max(np.abs(attention(Q, K, V) - naive_attention(Q, K, V)))))
        worst_rows = max(worst_rows, float(np.max(np.abs(attention_weights(Q, K).sum(axis=1) - 1.0))))
    ok = worst_out <= 1e-12 and worst_rows <= 1e-12
    verdict(3, "attention vs naive double loop", ok,
            f"max |diff| {worst_out:.2e}, max |row sum - 1| {worst_rows:.2e} over 1000 shapes")


def test_c04_backprop_matches_finite_differences(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst, where = 0.0, ""
    for arch in CONSTRAINT_ARCHS:
        for head in ("constraint", "warmstart"):
            model = tiny_model(arch, head, seed=7)
            X = rng.normal(size=(3, 3, 4))
            Y = ((rng.random((3, 5)) < 0.3).astype(float) if head == "constraint"
                 else rng.normal(size=(3, 5)))
            for name, err in gradient_check(model, X, Y).items():
                if err >= worst:
                    worst, where = err, f"{arch}/{head}/{name}"
    elapsed = time.perf_counter() - t0
    verdict(4, "analytic vs finite-difference gradients", worst <= 1e-4 and elapsed < 30,
            f"worst relative error {worst:.2e} ({where}), {elapsed:.1f} s")


def test_c05_predictor_quality_ordering(verdict, models):
    acc = {arch: models[(arch, "constraint")][1]["metrics"]["exact_set_accuracy"]
           for arch in CONSTRAINT_ARCHS}
    train_time = sum(models[(arch, "constraint")][1]["elapsed"] for arch in CONSTRAINT_ARCHS)
    ok = (acc["transformer"] >= 0.80 and acc["transformer"] >= acc["mlp"]
          and acc["transformer"] >= acc["logreg"] and train_time < 900)
    detail = ", ".join(f"{a} {acc[a]:.3f}" for a in CONSTRAINT_ARCHS)
    verdict(5, "exact-set test accuracy ordering", ok, f"{detail}; training {train_time:.0f} s")


def test_c06_every_emitted_output_verifies(verdict, workdir, dataset, models, bench_run):
    files = [bench_run[1]]
    c_path = str(models[("transformer", "constraint")][0])
    w_path = str(models[("transformer", "warmstart")][0])
    for mode in ("model", "oracle", "all-inactive", "all-active"):
        path = workdir / f"verify_{mode}.jsonl"
        argv = ["verify", "--data", str(dataset), "--mode", mode, "--warm-model", w_path,
                "--outputs", str(path)]
        if mode == "model":
            argv += ["--model", c_path]
        assert main(argv) == EXIT_OK
        files.append(path)
    checked, violations, worst = 0, 0, 0.0
    for path in files:
        r = reverify_outputs(path, 1e-6)
        checked += r["checked"]
        violations += r["violations"]
        worst = max(worst, r["worst_violation"])
    verdict(6, "stored outputs re-verified", violations == 0 and checked > 0,
            f"{checked} outputs from {len(files)} runs, {violations} violations, worst {worst:.2e}")


def test_c07_pipeline_speedup(verdict, bench_run):
    doc, _, elapsed = bench_run
    rows = {r["config_name"]: r for r in doc["rows"]}
    model, oracle = rows["model"], rows["oracle"]
    consistent = check_report_arithmetic(doc, doc["per_instance"])
    ok = (model["alpha"] >= 0.8 and model["speedup"] >= 1.2 and oracle["speedup"] >= 2.0
          and consistent and doc["records"] == BENCH_COUNT and elapsed < 300)
    verdict(7, "pipeline average beats full solve", ok,
            f"alpha {model['alpha']:.3f}, model {model['speedup']:.2f}x, "
            f"oracle {oracle['speedup']:.2f}x, baseline {model['baseline_avg_time'] * 1e3:.3f} ms, "
            f"{elapsed:.0f} s")


def test_c08_timing_formula(verdict):
    def result(fell_back):
        t = {"t_predict": 0.25, "t_reduced": 0.5, "t_verify": 0.25,
             "t_fallback": 10.0 if fell_back else 0.0}
        t["t_total"] = sum(t.values())
        return PipelineResult(np.zeros(1, np.int8), None, not fell_back, fell_back,
                              np.zeros(1), np.zeros(1), t)

    rep = aggregate_timing([result(i == 0) for i in range(10)], [5.0] * 10)
    ok = rep.alpha == 0.9 and rep.t_rmpc == 1.0 and rep.t_mpc == 10.0 and rep.pipeline_avg == 2.0
    verdict(8, "timing formula on injected times", ok,
            f"alpha {rep.alpha}, t_rmpc {rep.t_rmpc}, t_mpc {rep.t_mpc}, pipeline_avg {rep.pipeline_avg!r}")


def test_c09_log_sum_exp_properties(verdict):
    rng = np.random.default_rng(9)
    sandwich_fail = 0
    for _ in range(10_000):
        M = int(rng.integers(1, 65))
        beta = float(np.exp(rng.uniform(0.0, math.log(1e3))))
        v = rng.normal(size=M) * rng.choice([1e-3, 1.0, 10.0])
        sandwich_fail += not sandwich_check(v, beta).holds

    contain_fail, inside = 0, 0
    for _ in range(100):
        members = int(rng.integers(2, 12))
        centers = rng.uniform(-1, 1, size=(members, 2))
        radii = rng.uniform(0.8, 2.0, size=members)
        beta = float(rng.choice([1.0, 5.0, 50.0]))
        vals = disk_constraints(rng.uniform(-1.5, 1.5, size=(100, 2)), centers, radii)
        for v in vals:
            if lse_combine(v, beta) <= 0.0:
                inside += 1
                contain_fail += bool(np.any(v > 0.0))

    shift_err = 0.0
    for beta, c in ((1.0, 800.0), (50.0, 1e3), (1e3, 100.0), (1.0, -5e4)):
        v = rng.uniform(-1, 1, size=16)
        shift_err = max(shift_err, abs(lse_combine(v + c, beta) - (lse_combine(v, beta) + beta * c)))

    ok = sandwich_fail == 0 and contain_fail == 0 and inside > 0 and shift_err <= 1e-10
    verdict(9, "log-sum-exp sandwich, containment, translation", ok,
            f"{sandwich_fail} sandwich failures / 1e4, {contain_fail} containment failures "
            f"among {inside} inside of 1e4 points, translation error {shift_err:.1e}")


def test_c10_warm_start_reduces_iterations(verdict, models, test_split):
    c_model = load_model(models[("transformer", "constraint")][0])
    w_model = load_model(models[("transformer", "warmstart")][0])
    cold, warm = map(np.array, iteration_pairs(test_split, w_model))
    fell_back = np.array([solve_with_prediction(r.instance, c_model).fell_back for r in test_split])
    improved = float(np.mean(warm[fell_back] < cold[fell_back])) if fell_back.any() else 0.0
    ok = np.median(warm) <= np.median(cold) and improved >= 0.5
    verdict(10, "warm start vs cold start iterations", ok,
            f"test-split median warm {np.median(warm):.1f} vs cold {np.median(cold):.1f}; "
            f"strictly fewer on {improved:.1%} of {int(fell_back.sum())} fallback instances "
            f"(fallback-only medians {np.median(warm[fell_back]):.1f} vs {np.median(cold[fell_back]):.1f})")


def _cli(args, threads):
    env = dict(os.environ, MPCX_THREADS=str(threads))
    subprocess.run([sys.executable, "-m", "mpcx.cli", *args], check=True, env=env,
                   stdout=subprocess.DEVNULL)


def test_c11_gen_and_train_are_byte_identical(verdict, workdir, dataset):
    again = workdir / "data_again.jsonl"
    _cli(["gen", "--scenario", "double-integrator", "--count", str(RECORDS), "--seed", str(SEED),
          "--out", str(again)], threads=3)
    same_data = again.read_bytes() == dataset.read_bytes()
    same_models = True
    for arch in CONSTRAINT_ARCHS:
        blobs = []
        for threads in (1, 2):
            out = workdir / f"det_{arch}_{threads}.json"
            _cli(["train", "--data", str(dataset), "--arch", arch, "--epochs", "2",
                  "--out", str(out), "--no-figures"], threads=threads)
            blobs.append(out.read_bytes())
        same_models &= blobs[0] == blobs[1]
    verdict(11, "gen and train determinism", same_data and same_models,
            f"dataset identical {same_data}, models identical {same_models}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
