import json

import numpy as np
import pytest

from mpcx.oracle import (
    DatasetError,
    GenerationStats,
    catalog_digest_for,
    dataset_header,
    generate_dataset,
    label_active_set,
    read_dataset,
    reduced_solution,
    split_dataset,
    write_dataset,
)
from mpcx.problem import ScenarioParams, assemble_sparse_qp, build_mpc_instance
from mpcx.qpsolve import solve_full


def test_unconstrained_instance_is_all_inactive():
    # huge bounds: nothing binds
    params = ScenarioParams(x_bound=[100.0, 100.0], u_bound=[100.0], terminal_bound=[100.0, 100.0],
                            x0=[0.1, 0.0], ref_fraction=0.001)
    qp = assemble_sparse_qp(build_mpc_instance("double-integrator", params, 0))
    label = label_active_set(qp, solve_full(qp))
    assert label.sum() == 0


def test_saturating_instance_has_active_input_rows():
    params = ScenarioParams(u_bound=[0.05], x0=[2.5, 0.0])
    inst = build_mpc_instance("double-integrator", params, 0)
    qp = assemble_sparse_qp(inst)
    label = label_active_set(qp, solve_full(qp))
    input_rows = [j for j, r in enumerate(inst.catalog.rows) if r.kind == 1]
    assert label[input_rows].sum() > 0


def test_labels_are_sound():
    for seed in range(10):
        qp = assemble_sparse_qp(build_mpc_instance("double-integrator", None, seed))
        sol = solve_full(qp)
        y, _ = reduced_solution(qp, label_active_set(qp, sol))
        assert np.max(np.abs(y - sol.y_star)) < 1e-6


def test_degenerate_active_set_is_sound():
    # a velocity bound held over a saturated ramp makes some active rows redundant
    base = build_mpc_instance("double-integrator", None, 0)
    ref = np.zeros((21, 2))
    ref[:, 0] = -1.0
    qp = assemble_sparse_qp(base.with_state(np.array([2.0, -0.5]), ref))
    sol = solve_full(qp)
    label = label_active_set(qp, sol)
    E = np.vstack([qp.Aeq, qp.Cineq[label == 1]])
    assert np.linalg.matrix_rank(E) < E.shape[0]
    y, _ = reduced_solution(qp, label)
    assert np.max(np.abs(y - sol.y_star)) < 1e-6


def test_weakly_active_row_labeled_active():
    # a bound placed exactly at the unconstrained optimum binds with zero multiplier
    inst = build_mpc_instance("double-integrator", ScenarioParams(N=1, x0=[0.0, 0.0]), 0)
    qp = assemble_sparse_qp(inst)
    free = np.linalg.solve(qp.Qmat, -qp.pvec)
    sol = solve_full(qp)
    sol.y_star = free.copy()
    sol.mu_ineq = np.zeros(qp.n_ineq)
    qp.dvec[0] = qp.Cineq[0] @ free
    assert label_active_set(qp, sol)[0] == 1


def test_generation_count_and_determinism():
    a = list(generate_dataset("double-integrator", 12, 5, workers=1))
    b = list(generate_dataset("double-integrator", 12, 5, workers=3))
    assert len(a) == 12
    for ra, rb in zip(a, b):
        assert np.array_equal(ra.label, rb.label)
        assert np.array_equal(ra.u_star, rb.u_star)


def test_generation_stats():
    stats = GenerationStats()
    recs = list(generate_dataset("mass-spring-chain", 8, 1, stats=stats, workers=1))
    summary = stats.summary(recs)
    assert summary["records"] == 8
    assert summary["attempts"] >= 8
    assert 0.0 <= summary["inactive_fraction"] <= 1.0


def test_generation_rejects_bad_count():
    with pytest.raises(ValueError):
        next(generate_dataset("double-integrator", 0, 0))


def test_write_read_round_trip(tmp_path):
    recs = list(generate_dataset("double-integrator", 5, 2, workers=1))
    header = dataset_header("double-integrator", 2, 5, catalog_digest_for("double-integrator"))
    path = tmp_path / "d.jsonl"
    assert write_dataset(path, header, recs) == 5
    h, back = read_dataset(path)
    assert h == header
    for r, s in zip(recs, back):
        assert np.array_equal(r.label, s.label)
        assert np.array_equal(r.u_star, s.u_star)
        assert np.array_equal(r.instance.x_ref, s.instance.x_ref)


def test_read_rejects_digest_mismatch(tmp_path):
    recs = list(generate_dataset("double-integrator", 2, 2, workers=1))
    header = dataset_header("double-integrator", 2, 2, "0" * 16)
    path = tmp_path / "d.jsonl"
    with pytest.raises(DatasetError):
        write_dataset(path, header, recs)
    lines = [json.dumps(header)] + [json.dumps(r.to_json()) for r in recs]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetError, match="digest"):
        read_dataset(path)


def test_read_rejects_version_and_count(tmp_path):
    recs = list(generate_dataset("double-integrator", 2, 2, workers=1))
    digest = catalog_digest_for("double-integrator")
    path = tmp_path / "d.jsonl"
    bad = dict(dataset_header("double-integrator", 2, 2, digest), format_version=99)
    path.write_text(json.dumps(bad) + "\n")
    with pytest.raises(DatasetError, match="format_version"):
        read_dataset(path)
    write_dataset(path, dataset_header("double-integrator", 2, 3, digest), recs)
    with pytest.raises(DatasetError, match="header says"):
        read_dataset(path)


def test_split_sizes_and_determinism():
    recs = list(range(10))
    tr, te = split_dataset(recs, 0.8, 0)
    assert (len(tr), len(te)) == (8, 2)
    assert split_dataset(recs, 0.8, 0) == (tr, te)
    assert sorted(tr + te) == recs
    tr, te = split_dataset(list(range(7)), 0.8, 0)
    assert (len(tr), len(te)) == (5, 2)


def test_split_degenerate():
    with pytest.raises(ValueError, match="degenerate"):
        split_dataset([1], 0.8, 0)
