"""Execution phase: predict the active set, solve the reduced problem, verify, fall back."""

from __future__ import annotations

import time
from fractions import Fraction
from dataclasses import dataclass, field

import numpy as np

from .predictor.model import PredictorModel, encode_inputs, forward
from .predictor.train import threshold_labels
from .problem import (
    MpcInstance,
    ScenarioParams,
    SparseQp,
    assemble_sparse_qp,
    build_mpc_instance,
    rollout,
    scenario_defaults,
    smooth_reference,
    stage_cost,
)
from .qpsolve import (
    RankDeficient,
    SolverConfig,
    SolverError,
    independent_rows,
    solve_full,
    solve_kkt_equality,
)

clock = time.perf_counter


@dataclass
class PipelineConfig:
    tau: float = 0.5
    verify_tol: float = 1e-6
    verify_duals: bool = True
    solver: SolverConfig = field(default_factory=SolverConfig)


@dataclass
class Verification:
    ok: bool
    worst_violation: float
    worst_row: int | None
    violating_rows: np.ndarray
    violating_eq_rows: np.ndarray


@dataclass
class PipelineResult:
    predicted_label: np.ndarray
    reduced_solution: tuple | None
    verified: bool
    fell_back: bool
    final_u: np.ndarray
    final_y: np.ndarray
    timings: dict
    worst_violation: float = 0.0
    reduced_error: str | None = None
    fallback_iterations: int | None = None

    @property
    def t_rmpc(self) -> float:
        t = self.timings
        return t["t_predict"] + t["t_reduced"] + t["t_verify"]


class ModelMismatch(ValueError):
    pass


def _row_norms(M):
    norms = np.linalg.norm(M, axis=1)
    norms[norms == 0.0] = 1.0
    return norms


def verify_solution(qp: SparseQp, y, tol: float = 1e-6) -> Verification:
    """Check ``y`` against every original constraint after row normalization."""
    y = np.asarray(y, dtype=float)
    if y.shape != (qp.n_var,):
        raise ValueError(f"y has shape {y.shape}, expected {(qp.n_var,)}")
    if not hasattr(qp, "_norms"):
        qp._norms = (_row_norms(qp.Aeq), _row_norms(qp.Cineq))
    eq_norm, in_norm = qp._norms
    eq = np.abs(qp.Aeq @ y - qp.beq) / eq_norm
    viol = (qp.Cineq @ y - qp.dvec) / in_norm
    worst_eq = float(eq.max()) if eq.size else 0.0
    worst_in = float(viol.max()) if viol.size else -np.inf
    worst = max(worst_eq, worst_in, 0.0)
    worst_row = int(np.argmax(viol)) if viol.size and worst_in > 0.0 else None
    bad = np.flatnonzero(viol > tol)
    bad = bad[np.argsort(-viol[bad], kind="stable")]
    return Verification(worst <= tol, worst, worst_row, bad, np.flatnonzero(eq > tol))


def warm_start_guess(qp: SparseQp, instance: MpcInstance, u_guess) -> dict:
    """Primal warm start from a predicted control sequence (states by rollout).

    The prediction is clipped to the input box first.
    """
    u = np.asarray(u_guess, dtype=float).reshape(instance.N, instance.m)
    u = np.clip(u, instance.bounds.u_lb, instance.bounds.u_ub)
    xs = rollout(instance.system, instance.x0, u)
    return {"y0": np.concatenate([xs[1:].ravel(), u.ravel()])}


def solve_with_prediction(instance: MpcInstance, c_model: PredictorModel | None,
                          w_model: PredictorModel | None = None, cfg: PipelineConfig | None = None,
                          qp: SparseQp | None = None, labels=None) -> PipelineResult:
    """Run predict -> reduced KKT solve -> verify -> (fallback) on one instance.

    ``labels`` injects a fixed active set instead of querying ``c_model``
    (oracle or adversarial runs). The returned input always passes
    ``verify_solution`` on the full problem at ``cfg.verify_tol``.
    """
    cfg = cfg or PipelineConfig()
    if qp is None:
        qp = assemble_sparse_qp(instance)
    digest = instance.catalog.digest()
    for model in (c_model, w_model):
        if model is not None and model.catalog_digest and model.catalog_digest != digest:
            raise ModelMismatch(f"{model.head} model was trained on catalog {model.catalog_digest}, "
                                f"instance has {digest}")
    if labels is None and c_model is None:
        raise ValueError("need a constraint model or injected labels")

    t = {"t_predict": 0.0, "t_reduced": 0.0, "t_verify": 0.0, "t_fallback": 0.0}
    t_start = clock()
    if labels is None:
        scores = forward(c_model, encode_inputs(instance, c_model))
        label = threshold_labels(scores, cfg.tau)
    else:
        label = np.asarray(labels, dtype=np.int8)
        if label.shape != (qp.n_ineq,):
            raise ValueError(f"injected labels have shape {label.shape}, expected {(qp.n_ineq,)}")
    t1 = clock()
    t["t_predict"] = t1 - t_start

    active = np.flatnonzero(label)
    E = np.vstack([qp.Aeq, qp.Cineq[active]])
    f = np.concatenate([qp.beq, qp.dvec[active]])
    reduced, error = None, None
    try:
        reduced = solve_kkt_equality(qp.Qmat, qp.pvec, E, f)
    except RankDeficient:
        keep = independent_rows(qp.Aeq, qp.Cineq[active])
        if keep.size < active.size:
            active = active[keep]
            E = np.vstack([qp.Aeq, qp.Cineq[active]])
            f = np.concatenate([qp.beq, qp.dvec[active]])
            try:
                reduced = solve_kkt_equality(qp.Qmat, qp.pvec, E, f)
            except RankDeficient as exc:
                error = str(exc)
        else:
            error = "rank deficient predicted active set"
    t2 = clock()
    t["t_reduced"] = t2 - t1

    verified, worst = False, float("inf")
    if reduced is not None:
        check = verify_solution(qp, reduced[0], cfg.verify_tol)
        verified, worst = check.ok, check.worst_violation
        if verified and cfg.verify_duals:
            # optimality certificate: predicted-active rows must have mu >= 0
            if active.size:
                verified = bool(reduced[1][qp.Aeq.shape[0]:].min() >= -cfg.verify_tol)
    t3 = clock()
    t["t_verify"] = t3 - t2

    iters = None
    if verified:
        y = reduced[0]
    else:
        warm = None
        if w_model is not None:
            u_guess = forward(w_model, encode_inputs(instance, w_model))
            warm = warm_start_guess(qp, instance, u_guess)
        sol = solve_full(qp, warm, cfg.solver).check()
        y, iters = sol.y_star, sol.iterations
        if not verify_solution(qp, y, cfg.verify_tol).ok:
            raise SolverError(sol)
    t4 = clock()
    t["t_fallback"] = t4 - t3 if not verified else 0.0
    t["t_total"] = t4 - t_start

    return PipelineResult(label, reduced, verified, not verified, qp.inputs(y)[0].copy(), y, t,
                          worst, error, iters)


# ---------------------------------------------------------------------------
# closed loop


@dataclass
class ClosedLoopTrace:
    states: list
    inputs: list
    results: list
    cost: float = 0.0
    full_solve_iterations: list = field(default_factory=list)


class ClosedLoopError(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


def reference_trajectory(scenario, length, seed=0, params: ScenarioParams | None = None):
    d = scenario_defaults(scenario)
    params = params or ScenarioParams()

    def pick(name):
        v = getattr(params, name)
        return d[name] if v is None else v

    n = d["A"].shape[0]
    rng = np.random.default_rng(seed)
    return smooth_reference(rng, length, n, d["tracked"], np.asarray(pick("x_bound"), float),
                            float(pick("ref_fraction")), float(pick("ref_noise")),
                            float(pick("ref_smoothing")))


def run_receding_horizon(scenario: str, x0, steps: int, models=None, cfg: PipelineConfig | None = None,
                         reference=None, params: ScenarioParams | None = None, seed: int = 0,
                         ) -> ClosedLoopTrace:
    """Closed-loop simulation applying the first input of each solve.

    ``models`` is ``None`` for plain full solves, or a dict with a
    ``"constraint"`` model and optionally a ``"warmstart"`` model.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    cfg = cfg or PipelineConfig()
    template = build_mpc_instance(scenario, params, seed)
    N = template.N
    if reference is None:
        reference = reference_trajectory(scenario, steps + N + 1, seed, params)
    reference = np.asarray(reference, dtype=float)
    if reference.shape != (steps + N + 1, template.n):
        raise ValueError(f"reference must have shape {(steps + N + 1, template.n)}")

    x = np.asarray(x0, dtype=float)
    trace = ClosedLoopTrace([x.copy()], [], [])
    for k in range(steps):
        inst = template.with_state(x, reference[k:k + N + 1])
        qp = assemble_sparse_qp(inst)
        try:
            if models is None:
                sol = solve_full(qp, None, cfg.solver).check()
                u = qp.inputs(sol.y_star)[0].copy()
                trace.full_solve_iterations.append(sol.iterations)
            else:
                res = solve_with_prediction(inst, models.get("constraint"), models.get("warmstart"),
                                            cfg, qp=qp)
                trace.results.append(res)
                u = res.final_u
        except SolverError as exc:
            raise ClosedLoopError(f"step {k}: {exc}", trace) from exc
        trace.cost += stage_cost(inst, x, u, 0)
        x = template.system.step(x, u)
        trace.inputs.append(u)
        trace.states.append(x.copy())
    return trace


# ---------------------------------------------------------------------------
# timing


def pipeline_average(alpha, t_rmpc: float, t_mpc: float) -> float:
    """Expected per-instance time: reduced solve always, full solve on a miss.

    Evaluated in exact rational arithmetic and rounded once, so the result
    is the correctly rounded value of the weighted average.
    """
    a, r, m = Fraction(alpha), Fraction(t_rmpc), Fraction(t_mpc)
    return float(a * r + (1 - a) * (r + m))


@dataclass
class TimingReport:
    n: int
    alpha: float
    t_rmpc: float
    t_mpc: float
    t_predict: float
    pipeline_avg: float
    baseline_avg: float
    speedup: float
    measured_avg: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def aggregate_timing(results, baseline_times) -> TimingReport:
    """Combine per-instance timings with the hit-rate-weighted average."""
    results = list(results)
    baseline_times = np.asarray(list(baseline_times), dtype=float)
    if not results:
        raise ValueError("no pipeline results to aggregate")
    if len(baseline_times) != len(results):
        raise ValueError(f"{len(results)} results but {len(baseline_times)} baseline times")
    hits = sum(1 for r in results if not r.fell_back)
    alpha = Fraction(hits, len(results))
    t_rmpc = float(np.mean([r.t_rmpc for r in results]))
    fallbacks = [r.timings["t_fallback"] for r in results if r.fell_back]
    baseline_avg = float(baseline_times.mean())
    t_mpc = float(np.mean(fallbacks)) if fallbacks else baseline_avg
    avg = pipeline_average(alpha, t_rmpc, t_mpc)
    return TimingReport(
        n=len(results), alpha=float(alpha), t_rmpc=t_rmpc, t_mpc=t_mpc,
        t_predict=float(np.mean([r.timings["t_predict"] for r in results])),
        pipeline_avg=avg, baseline_avg=baseline_avg, speedup=baseline_avg / avg,
        measured_avg=float(np.mean([r.timings["t_total"] for r in results])),
    )
