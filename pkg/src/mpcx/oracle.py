"""Ground-truth active sets and the JSONL training dataset."""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .problem import (
    MpcInstance,
    ScenarioParams,
    SparseQp,
    assemble_sparse_qp,
    build_mpc_instance,
    instance_from_dict,
    instance_to_dict,
    reduce_qp,
)
from .qpsolve import (
    QpSolution,
    RankDeficient,
    SolverConfig,
    independent_rows,
    solve_full,
    solve_kkt_equality,
)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
EPS_PRIMAL = 1e-6
EPS_DUAL = 1e-6
MAX_FAILURE_RATE = 0.2
SOUNDNESS_TOL = 1e-6


class DatasetError(RuntimeError):
    pass


def label_active_set(qp: SparseQp, sol: QpSolution, eps_primal: float = EPS_PRIMAL,
                     eps_dual: float = EPS_DUAL) -> np.ndarray:
    """Bit j is 1 when row j binds (small slack) or carries a multiplier.

    Weakly active rows (zero slack, zero multiplier) come out as active.
    """
    if not sol.solved:
        raise ValueError(f"cannot label an unsolved QP (status {sol.status.value})")
    slack = qp.dvec - qp.Cineq @ sol.y_star
    active = (slack <= eps_primal * (1.0 + np.abs(qp.dvec))) | (sol.mu_ineq >= eps_dual)
    return active.astype(np.int8)


def reduced_solution(qp: SparseQp, labels):
    """Solve the equality-only problem built from ``labels``.

    Active rows implied by the others are dropped when the full set is
    rank deficient; the multipliers then cover the kept rows only.
    """
    red = reduce_qp(qp, labels)
    try:
        return solve_kkt_equality(red.Qmat, red.pvec, red.Emat, red.fvec)
    except RankDeficient:
        active = np.flatnonzero(labels)
        keep = active[independent_rows(qp.Aeq, qp.Cineq[active])]
        E = np.vstack([qp.Aeq, qp.Cineq[keep]])
        f = np.concatenate([qp.beq, qp.dvec[keep]])
        return solve_kkt_equality(qp.Qmat, qp.pvec, E, f)


@dataclass
class DatasetRecord:
    instance: MpcInstance
    label: np.ndarray
    u_star: np.ndarray
    iterations: int
    solve_time: float | None = None

    def to_json(self, include_time: bool = False) -> dict:
        # wall-clock times would break byte-identical reruns, so they are opt-in
        meta = {"iterations": int(self.iterations)}
        if include_time and self.solve_time is not None:
            meta["solve_time"] = self.solve_time
        return {
            "instance": instance_to_dict(self.instance),
            "label": [int(b) for b in self.label],
            "u_star": [float(v) for v in self.u_star],
            "solve_meta": meta,
        }

    @classmethod
    def from_json(cls, d: dict) -> "DatasetRecord":
        meta = d.get("solve_meta", {})
        return cls(instance_from_dict(d["instance"]), np.asarray(d["label"], dtype=np.int8),
                   np.asarray(d["u_star"], dtype=float), int(meta.get("iterations", 0)),
                   meta.get("solve_time"))


@dataclass
class GenerationStats:
    attempts: int = 0
    failures: int = 0
    soundness_failures: int = 0
    relabel_checks: int = 0
    relabel_mismatches: int = 0
    solve_times: list = field(default_factory=list)

    def summary(self, records) -> dict:
        labels = np.array([r.label for r in records]) if records else np.zeros((0, 0))
        return {
            "records": len(records),
            "attempts": self.attempts,
            "skipped_instances": self.failures,
            "soundness_failures": self.soundness_failures,
            "relabel_checks": self.relabel_checks,
            "relabel_mismatches": self.relabel_mismatches,
            "inactive_fraction": float(1.0 - labels.mean()) if labels.size else float("nan"),
            "mean_solve_time": float(np.mean(self.solve_times)) if self.solve_times else float("nan"),
        }


def instance_seed(seed: int, index: int, attempt: int) -> int:
    return int(np.random.SeedSequence([seed, index, attempt]).generate_state(1, np.uint32)[0])


def worker_count() -> int:
    cap = os.environ.get("MPCX_THREADS")
    if cap:
        return max(1, int(cap))
    return max(1, min(4, os.cpu_count() or 1))


def _attempt(scenario, params, seed, index, attempt, cfg, relabel):
    """Build, solve and label one instance; None when the solve fails."""
    inst = build_mpc_instance(scenario, params, instance_seed(seed, index, attempt))
    qp = assemble_sparse_qp(inst)
    sol = solve_full(qp, cfg=cfg)
    if not sol.solved:
        return None, sol
    label = label_active_set(qp, sol)
    try:
        y_red, _ = reduced_solution(qp, label)
        sound = np.max(np.abs(y_red - sol.y_star)) <= SOUNDNESS_TOL
    except RankDeficient:
        sound = False
    if not sound:
        return "unsound", sol
    relabel_ok = None
    if relabel:
        again = solve_full(qp, cfg=cfg)
        relabel_ok = again.solved and np.array_equal(label_active_set(qp, again), label)
    u_star = qp.inputs(sol.y_star).ravel()
    return DatasetRecord(inst, label, u_star, sol.iterations, sol.solve_time), relabel_ok


def _generate_one(scenario, params, seed, index, cfg):
    out = []
    relabel = instance_seed(seed, index, 10**6) % 100 == 0
    for attempt in range(1000):
        rec, extra = _attempt(scenario, params, seed, index, attempt, cfg, relabel)
        out.append((rec, extra))
        if isinstance(rec, DatasetRecord):
            return out
    raise DatasetError(f"record {index}: no solvable instance after 1000 attempts")


def generate_dataset(scenario: str, count: int, seed: int, cfg: SolverConfig | None = None,
                     params: ScenarioParams | None = None, stats: GenerationStats | None = None,
                     workers: int | None = None):
    """Yield exactly ``count`` solved, labeled records in index order.

    Failed solves are replaced by fresh instances (new attempt seed) and
    counted in ``stats``. Every record is checked for label soundness: the
    equality-only problem built from its label must reproduce the optimum.
    About 1% of records are also re-solved and re-labeled.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    cfg = cfg or SolverConfig()
    stats = stats if stats is not None else GenerationStats()
    workers = workers or worker_count()
    build_mpc_instance(scenario, params, seed)  # surface scenario errors up front

    def job(i):
        return _generate_one(scenario, params, seed, i, cfg)

    def consume(i, attempts):
        for rec, extra in attempts:
            stats.attempts += 1
            if isinstance(rec, DatasetRecord):
                stats.solve_times.append(rec.solve_time)
                if extra is not None:
                    stats.relabel_checks += 1
                    stats.relabel_mismatches += int(not extra)
                return rec
            stats.failures += 1
            if rec == "unsound":
                stats.soundness_failures += 1
            if stats.attempts >= 10 and stats.failures > MAX_FAILURE_RATE * stats.attempts:
                raise DatasetError(
                    f"{stats.failures} of {stats.attempts} attempts failed; scenario config looks broken")
        raise AssertionError("unreachable")

    if workers <= 1:
        for i in range(count):
            yield consume(i, job(i))
        return
    chunk = 64 * workers
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for start in range(0, count, chunk):
            idx = range(start, min(count, start + chunk))
            for i, attempts in zip(idx, pool.map(job, idx)):
                yield consume(i, attempts)


# ---------------------------------------------------------------------------
# files


def catalog_digest_for(scenario: str, params: ScenarioParams | None = None) -> str:
    return build_mpc_instance(scenario, params, 0).catalog.digest()


def dataset_header(scenario, seed, count, digest) -> dict:
    return {"format_version": FORMAT_VERSION, "scenario": scenario, "seed": int(seed),
            "count": int(count), "catalog_digest": digest}


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def write_dataset(path, header: dict, records, include_times: bool = False) -> int:
    """Stream records to ``path`` as UTF-8 JSONL, header first."""
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_dumps(header) + "\n")
        for rec in records:
            if rec.instance.catalog.digest() != header["catalog_digest"]:
                raise DatasetError("record catalog digest differs from header")
            fh.write(_dumps(rec.to_json(include_times)) + "\n")
            n += 1
    return n


def read_dataset(path):
    """Return (header, records); checks format version and catalog digests."""
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        if not first:
            raise DatasetError(f"{path}: empty dataset file")
        header = json.loads(first)
        if header.get("format_version") != FORMAT_VERSION:
            raise DatasetError(f"{path}: unsupported format_version {header.get('format_version')}")
        records = []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            rec = DatasetRecord.from_json(json.loads(line))
            if rec.instance.catalog.digest() != header["catalog_digest"]:
                raise DatasetError(f"{path}:{lineno}: catalog digest mismatch")
            records.append(rec)
    if len(records) != header["count"]:
        raise DatasetError(f"{path}: header says {header['count']} records, found {len(records)}")
    return header, records


def split_dataset(records, train_fraction: float = 0.8, seed: int = 0):
    """Deterministic shuffled split; the train side gets floor(fraction * n)."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    records = list(records)
    n = len(records)
    n_train = math.floor(train_fraction * n + 1e-9)
    if n_train == 0 or n_train == n:
        raise ValueError(f"degenerate split: {n_train} train / {n - n_train} test")
    order = np.random.default_rng(seed).permutation(n)
    return [records[i] for i in order[:n_train]], [records[i] for i in order[n_train:]]
