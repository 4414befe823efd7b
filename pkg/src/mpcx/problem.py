"""Linear MPC instances and their sparse QP form.

The decision vector is ``y = [x_1, ..., x_N, u_0, ..., u_{N-1}]``. Dynamics
enter as equality rows ``Aeq y = beq`` and box bounds as one-sided inequality
rows ``Cineq y <= dvec``, one row per catalog entry.
"""

from __future__ import annotations

import enum
import functools
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np
import scipy.linalg

SCENARIOS = ("double-integrator", "mass-spring-chain", "quadrotor-linear")

REGULARIZATION = 1e-9
RANK_TOL = 1e-8


class ScenarioError(ValueError):
    """Unknown scenario or parameters that cannot produce a valid instance."""


class ConstraintKind(enum.IntEnum):
    STATE = 0
    INPUT = 1
    TERMINAL = 2


@dataclass(frozen=True)
class ConstraintRow:
    kind: ConstraintKind
    stage: int
    coeff: tuple[float, ...]
    bound: float


@dataclass(frozen=True)
class ConstraintCatalog:
    rows: tuple[ConstraintRow, ...]

    def __len__(self) -> int:
        return len(self.rows)

    def layout(self) -> str:
        """Canonical text form of the row layout, used for digests."""
        parts = []
        for r in self.rows:
            coeff = ",".join(repr(float(c)) for c in r.coeff)
            parts.append(f"{int(r.kind)}|{r.stage}|{coeff}|{float(r.bound)!r}")
        return ";".join(parts)

    @functools.cached_property
    def _digest(self) -> str:
        return f"{fnv1a_64(self.layout().encode('utf-8')):016x}"

    def digest(self) -> str:
        """FNV-1a 64-bit hash of the layout, computed once per catalog."""
        return self._digest


def fnv1a_64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


@dataclass(frozen=True)
class LinearSystem:
    A_dyn: np.ndarray
    B_dyn: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.A_dyn, dtype=float)
        B = np.asarray(self.B_dyn, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError(f"A_dyn must be square, got {A.shape}")
        if B.ndim != 2 or B.shape[0] != A.shape[0]:
            raise ValueError(f"B_dyn must have {A.shape[0]} rows, got {B.shape}")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
            raise ValueError("dynamics contain non-finite entries")
        object.__setattr__(self, "A_dyn", A)
        object.__setattr__(self, "B_dyn", B)

    @property
    def n(self) -> int:
        return self.A_dyn.shape[0]

    @property
    def m(self) -> int:
        return self.B_dyn.shape[1]

    def step(self, x, u):
        return self.A_dyn @ x + self.B_dyn @ u


@dataclass(frozen=True)
class Bounds:
    x_lb: np.ndarray
    x_ub: np.ndarray
    u_lb: np.ndarray
    u_ub: np.ndarray
    xN_lb: np.ndarray
    xN_ub: np.ndarray

    def as_dict(self) -> dict:
        return {k: np.asarray(getattr(self, k), dtype=float).tolist() for k in BOUND_KEYS}


BOUND_KEYS = ("x_lb", "x_ub", "u_lb", "u_ub", "xN_lb", "xN_ub")


def box_catalog(n: int, m: int, N: int, bounds: Bounds) -> ConstraintCatalog:
    """Paired one-sided rows for every box bound, in canonical order.

    Order is (kind, stage, component, upper-before-lower). State rows cover
    stages 1..N-1 since x_0 is fixed data; the terminal box covers stage N.
    """
    rows = []

    def add(kind, stage, dim, lb, ub):
        for i in range(dim):
            e = [0.0] * dim
            e[i] = 1.0
            rows.append(ConstraintRow(kind, stage, tuple(e), float(ub[i])))
            e = [0.0] * dim
            e[i] = -1.0
            rows.append(ConstraintRow(kind, stage, tuple(e), -float(lb[i])))

    for k in range(1, N):
        add(ConstraintKind.STATE, k, n, bounds.x_lb, bounds.x_ub)
    for k in range(N):
        add(ConstraintKind.INPUT, k, m, bounds.u_lb, bounds.u_ub)
    add(ConstraintKind.TERMINAL, N, n, bounds.xN_lb, bounds.xN_ub)
    return ConstraintCatalog(tuple(rows))


@dataclass(frozen=True)
class MpcInstance:
    scenario: str
    seed: int
    system: LinearSystem
    N: int
    Q_stage: np.ndarray
    R_stage: np.ndarray
    Q_term: np.ndarray
    x0: np.ndarray
    x_ref: np.ndarray
    bounds: Bounds
    catalog: ConstraintCatalog = field(repr=False)

    @property
    def n(self) -> int:
        return self.system.n

    @property
    def m(self) -> int:
        return self.system.m

    def with_state(self, x0, x_ref=None) -> "MpcInstance":
        """Same problem re-parameterized at a new initial state (and reference)."""
        x_ref = self.x_ref if x_ref is None else np.asarray(x_ref, dtype=float)
        return replace(self, x0=np.asarray(x0, dtype=float), x_ref=x_ref)

    def validate(self) -> None:
        n, m, N = self.n, self.m, self.N
        if not isinstance(N, (int, np.integer)) or N < 1:
            raise ValueError(f"horizon N must be >= 1, got {N}")
        for name, M, dim in (("Q_stage", self.Q_stage, n), ("Q_term", self.Q_term, n),
                             ("R_stage", self.R_stage, m)):
            if M.shape != (dim, dim):
                raise ValueError(f"{name} has shape {M.shape}, expected {(dim, dim)}")
            if not np.allclose(M, M.T, atol=1e-12):
                raise ValueError(f"{name} is not symmetric")
        if np.linalg.eigvalsh(self.Q_stage).min() < -1e-10:
            raise ValueError("Q_stage is not PSD")
        if np.linalg.eigvalsh(self.Q_term).min() < -1e-10:
            raise ValueError("Q_term is not PSD")
        try:
            np.linalg.cholesky(self.R_stage)
        except np.linalg.LinAlgError as exc:
            raise ValueError("R_stage is not PD") from exc
        if self.x0.shape != (n,):
            raise ValueError(f"x0 has shape {self.x0.shape}, expected {(n,)}")
        if self.x_ref.shape != (N + 1, n):
            raise ValueError(f"x_ref has shape {self.x_ref.shape}, expected {(N + 1, n)}")
        for r in self.catalog.rows:
            if r.kind == ConstraintKind.INPUT and not 0 <= r.stage <= N - 1:
                raise ValueError(f"input row at invalid stage {r.stage}")
            if r.kind == ConstraintKind.TERMINAL and r.stage != N:
                raise ValueError(f"terminal row at stage {r.stage} != N")
            if r.kind == ConstraintKind.STATE and not 0 <= r.stage <= N:
                raise ValueError(f"state row at invalid stage {r.stage}")


# ---------------------------------------------------------------------------
# scenarios


@dataclass(frozen=True)
class ScenarioParams:
    """Overrides for a scenario's defaults. ``None`` keeps the default."""

    N: int | None = None
    x_bound: Sequence[float] | None = None
    u_bound: Sequence[float] | None = None
    terminal_bound: Sequence[float] | None = None
    x0: Sequence[float] | None = None
    x0_fraction: float | None = None
    ref_fraction: float | None = None
    ref_noise: float | None = None
    ref_smoothing: float | None = None


def _zoh(Ac, Bc, dt):
    n, m = Bc.shape
    M = np.zeros((n + m, n + m))
    M[:n, :n] = Ac
    M[:n, n:] = Bc
    E = scipy.linalg.expm(M * dt)
    return E[:n, :n], E[:n, n:]


def _double_integrator():
    dt = 0.1
    A = np.array([[1.0, dt], [0.0, 1.0]])
    B = np.array([[0.5 * dt * dt], [dt]])
    return dict(
        A=A, B=B, N=20,
        Q=np.diag([10.0, 1.0]), R=np.diag([0.1]), Qf=np.diag([10.0, 1.0]),
        x_bound=np.array([5.0, 2.0]), u_bound=np.array([3.0]),
        terminal_bound=np.array([5.0, 2.0]),
        tracked=[0], x0_fraction=0.6, ref_fraction=0.6, ref_noise=0.05, ref_smoothing=0.8,
    )


def _mass_spring_chain():
    masses, k_spring, dt = 4, 1.0, 0.5
    K = np.zeros((masses, masses))
    for i in range(masses):
        K[i, i] = 2.0 * k_spring
        if i > 0:
            K[i, i - 1] = -k_spring
        if i < masses - 1:
            K[i, i + 1] = -k_spring
    Ac = np.block([[np.zeros((masses, masses)), np.eye(masses)],
                   [-K, np.zeros((masses, masses))]])
    Bc = np.zeros((2 * masses, 2))
    Bc[masses, 0] = 1.0
    Bc[2 * masses - 1, 1] = 1.0
    A, B = _zoh(Ac, Bc, dt)
    n = 2 * masses
    return dict(
        A=A, B=B, N=15,
        Q=np.eye(n), R=0.1 * np.eye(2), Qf=np.eye(n),
        x_bound=np.full(n, 4.0), u_bound=np.full(2, 1.0),
        terminal_bound=np.full(n, 4.0),
        tracked=list(range(masses)), x0_fraction=0.5, ref_fraction=0.5,
        ref_noise=0.2, ref_smoothing=0.8,
    )


def _quadrotor_linear():
    # hover linearization; state = [pos(3), vel(3), roll/pitch/yaw(3), rates(3)]
    g, mass, dt = 9.81, 0.03, 0.1
    J = np.array([1.4e-5, 1.4e-5, 2.2e-5])
    Ac = np.zeros((12, 12))
    Ac[0:3, 3:6] = np.eye(3)
    Ac[3, 7] = g
    Ac[4, 6] = -g
    Ac[6:9, 9:12] = np.eye(3)
    Bc = np.zeros((12, 4))
    Bc[5, 0] = 1.0 / mass
    Bc[9:12, 1:4] = np.diag(1.0 / J)
    A, B = _zoh(Ac, Bc, dt)
    # inputs scaled so each channel is O(1): thrust in units of 0.1 m g, torques in 1e-6 N m
    B = B @ np.diag([0.1 * mass * g, 1e-6, 1e-6, 1e-6])
    Q = np.diag([10.0, 10.0, 10.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.1, 0.1, 0.1])
    return dict(
        A=A, B=B, N=10,
        Q=Q, R=0.1 * np.eye(4), Qf=Q,
        x_bound=np.array([3.0, 3.0, 3.0, 2.0, 2.0, 2.0, 0.5, 0.5, 1.0, 4.0, 4.0, 4.0]),
        u_bound=np.array([2.0, 2.0, 2.0, 2.0]),
        terminal_bound=np.array([3.0, 3.0, 3.0, 2.0, 2.0, 2.0, 0.5, 0.5, 1.0, 4.0, 4.0, 4.0]),
        tracked=[0, 1, 2], x0_fraction=0.3, ref_fraction=0.5, ref_noise=0.2, ref_smoothing=0.8,
    )


_SCENARIO_DEFAULTS = {
    "double-integrator": _double_integrator,
    "mass-spring-chain": _mass_spring_chain,
    "quadrotor-linear": _quadrotor_linear,
}


def scenario_defaults(scenario: str) -> dict:
    try:
        return _SCENARIO_DEFAULTS[scenario]()
    except KeyError:
        raise ScenarioError(
            f"unknown scenario {scenario!r}; expected one of {', '.join(SCENARIOS)}"
        ) from None


def smooth_reference(rng, length, n, tracked, x_bound, ref_fraction, ref_noise, smoothing):
    """Random setpoint plus low-pass filtered noise on the tracked components."""
    ref = np.zeros((length, n))
    for i in tracked:
        target = rng.uniform(-1.0, 1.0) * ref_fraction * x_bound[i]
        noise = rng.normal(0.0, ref_noise, size=length)
        level = 0.0
        for k in range(length):
            level = smoothing * level + (1.0 - smoothing) * noise[k]
            ref[k, i] = target + level
        ref[:, i] = np.clip(ref[:, i], -x_bound[i], x_bound[i])
    return ref


def build_mpc_instance(scenario: str, params: ScenarioParams | None = None,
                       rng_seed: int = 0) -> MpcInstance:
    """Sample one instance of ``scenario``; deterministic in ``rng_seed``."""
    d = scenario_defaults(scenario)
    params = params or ScenarioParams()

    def pick(name):
        v = getattr(params, name)
        return d[name] if v is None else v

    N = int(pick("N"))
    if N < 1:
        raise ScenarioError(f"horizon N must be >= 1, got {N}")
    A, B = d["A"], d["B"]
    n, m = A.shape[0], B.shape[1]
    x_bound = np.asarray(pick("x_bound"), dtype=float)
    u_bound = np.asarray(pick("u_bound"), dtype=float)
    t_bound = np.asarray(pick("terminal_bound"), dtype=float)
    for name, v, dim in (("x_bound", x_bound, n), ("u_bound", u_bound, m),
                         ("terminal_bound", t_bound, n)):
        if v.shape != (dim,):
            raise ScenarioError(f"{name} must have length {dim}, got {v.shape}")
        if np.any(v <= 0) or not np.all(np.isfinite(v)):
            raise ScenarioError(f"{name} must be finite and positive")

    rng = np.random.default_rng(rng_seed)
    if params.x0 is not None:
        x0 = np.asarray(params.x0, dtype=float)
        if x0.shape != (n,):
            raise ScenarioError(f"x0 must have length {n}, got {x0.shape}")
    else:
        frac = float(pick("x0_fraction"))
        x0 = np.zeros(n)
        for i in d["tracked"]:
            x0[i] = rng.uniform(-frac, frac) * x_bound[i]
    if np.any(np.abs(x0) >= x_bound):
        raise ScenarioError("infeasible parameters: state bounds exclude x0")

    x_ref = smooth_reference(rng, N + 1, n, d["tracked"], x_bound, float(pick("ref_fraction")),
                             float(pick("ref_noise")), float(pick("ref_smoothing")))
    bounds = Bounds(-x_bound, x_bound, -u_bound, u_bound, -t_bound, t_bound)
    return make_instance(scenario, rng_seed, LinearSystem(A, B), N, d["Q"], d["R"], d["Qf"],
                         x0, x_ref, bounds)


def make_instance(scenario, seed, system, N, Q_stage, R_stage, Q_term, x0, x_ref,
                  bounds: Bounds) -> MpcInstance:
    inst = MpcInstance(
        scenario=scenario, seed=int(seed), system=system, N=int(N),
        Q_stage=np.asarray(Q_stage, dtype=float), R_stage=np.asarray(R_stage, dtype=float),
        Q_term=np.asarray(Q_term, dtype=float), x0=np.asarray(x0, dtype=float),
        x_ref=np.asarray(x_ref, dtype=float), bounds=bounds,
        catalog=box_catalog(system.n, system.m, int(N), bounds) if N >= 1 else ConstraintCatalog(()),
    )
    inst.validate()
    return inst


# ---------------------------------------------------------------------------
# serialization


def instance_to_dict(inst: MpcInstance) -> dict:
    def flat(M):
        return np.asarray(M, dtype=float).ravel().tolist()

    return {
        "scenario": inst.scenario,
        "seed": inst.seed,
        "n": inst.n,
        "m": inst.m,
        "N": inst.N,
        "x0": flat(inst.x0),
        "x_ref": flat(inst.x_ref),
        "bounds": inst.bounds.as_dict(),
        "A_dyn": flat(inst.system.A_dyn),
        "B_dyn": flat(inst.system.B_dyn),
        "Q_stage": flat(inst.Q_stage),
        "R_stage": flat(inst.R_stage),
        "Q_term": flat(inst.Q_term),
    }


def instance_from_dict(d: dict) -> MpcInstance:
    n, m, N = int(d["n"]), int(d["m"]), int(d["N"])

    def mat(key, rows, cols):
        return np.asarray(d[key], dtype=float).reshape(rows, cols)

    bounds = Bounds(**{k: np.asarray(d["bounds"][k], dtype=float) for k in BOUND_KEYS})
    return make_instance(
        d["scenario"], d["seed"], LinearSystem(mat("A_dyn", n, n), mat("B_dyn", n, m)), N,
        mat("Q_stage", n, n), mat("R_stage", m, m), mat("Q_term", n, n),
        np.asarray(d["x0"], dtype=float), mat("x_ref", N + 1, n), bounds,
    )


# ---------------------------------------------------------------------------
# QP assembly


@dataclass
class SparseQp:
    Qmat: np.ndarray
    pvec: np.ndarray
    const: float
    Aeq: np.ndarray
    beq: np.ndarray
    Cineq: np.ndarray
    dvec: np.ndarray
    catalog: ConstraintCatalog
    n: int
    m: int
    N: int
    regularized: bool = False

    @property
    def n_var(self) -> int:
        return self.Qmat.shape[0]

    @property
    def n_ineq(self) -> int:
        return self.Cineq.shape[0]

    def objective(self, y) -> float:
        """Stage-cost sum of the MPC at ``y`` (constant terms included)."""
        y = np.asarray(y, dtype=float)
        return float(0.5 * y @ self.Qmat @ y + self.pvec @ y + self.const)

    def states(self, y) -> np.ndarray:
        return np.asarray(y)[: self.N * self.n].reshape(self.N, self.n)

    def inputs(self, y) -> np.ndarray:
        return np.asarray(y)[self.N * self.n:].reshape(self.N, self.m)


@dataclass
class ReducedQp:
    Qmat: np.ndarray
    pvec: np.ndarray
    Emat: np.ndarray
    fvec: np.ndarray
    active_rows: np.ndarray
    n_eq: int


def _is_pd(M) -> bool:
    try:
        np.linalg.cholesky(M)
        return True
    except np.linalg.LinAlgError:
        return False


def assemble_sparse_qp(instance: MpcInstance) -> SparseQp:
    instance.validate()
    sys_, N = instance.system, instance.N
    n, m = sys_.n, sys_.m
    nx, nu = N * n, N * m
    nv = nx + nu

    # cost: sum_{k<N} |x_k - r_k|_Q^2 + |u_k|_R^2 + |x_N - r_N|_Qf^2
    Qmat = np.zeros((nv, nv))
    pvec = np.zeros(nv)
    r = instance.x_ref
    for k in range(1, N + 1):
        W = instance.Q_term if k == N else instance.Q_stage
        s = slice((k - 1) * n, k * n)
        Qmat[s, s] = 2.0 * W
        pvec[s] = -2.0 * W @ r[k]
    for k in range(N):
        s = slice(nx + k * m, nx + (k + 1) * m)
        Qmat[s, s] = 2.0 * instance.R_stage
    e0 = instance.x0 - r[0]
    const = float(e0 @ instance.Q_stage @ e0)
    const += sum(float(r[k] @ instance.Q_stage @ r[k]) for k in range(1, N))
    const += float(r[N] @ instance.Q_term @ r[N])

    regularized = False
    if not _is_pd(Qmat):
        Qmat = Qmat + REGULARIZATION * np.eye(nv)
        regularized = True

    # dynamics: x_{k+1} - A x_k - B u_k = 0, with x_0 moved to the right-hand side
    Aeq = np.zeros((nx, nv))
    beq = np.zeros(nx)
    for k in range(N):
        rows = slice(k * n, (k + 1) * n)
        Aeq[rows, k * n:(k + 1) * n] = np.eye(n)
        Aeq[rows, nx + k * m: nx + (k + 1) * m] = -sys_.B_dyn
        if k == 0:
            beq[rows] = sys_.A_dyn @ instance.x0
        else:
            Aeq[rows, (k - 1) * n:k * n] = -sys_.A_dyn
    if np.linalg.matrix_rank(Aeq, tol=RANK_TOL) != nx:
        raise ValueError("dynamics block is rank deficient")

    rows = instance.catalog.rows
    Cineq = np.zeros((len(rows), nv))
    dvec = np.zeros(len(rows))
    for j, row in enumerate(rows):
        if row.kind == ConstraintKind.INPUT:
            start, dim = nx + row.stage * m, m
        else:
            if row.stage < 1:
                raise ValueError("state rows must reference stages >= 1 (x_0 is fixed)")
            start, dim = (row.stage - 1) * n, n
        if len(row.coeff) != dim:
            raise ValueError(f"catalog row {j} has {len(row.coeff)} coefficients, expected {dim}")
        Cineq[j, start:start + dim] = row.coeff
        dvec[j] = row.bound

    return SparseQp(Qmat, pvec, const, Aeq, beq, Cineq, dvec, instance.catalog, n, m, N,
                    regularized)


def reduce_qp(qp: SparseQp, labels) -> ReducedQp:
    """Keep the dynamics plus every row labeled active, all as equalities."""
    labels = np.asarray(labels)
    if labels.shape != (qp.n_ineq,):
        raise ValueError(f"label length {labels.shape} does not match {qp.n_ineq} inequality rows")
    active = np.flatnonzero(labels)
    Emat = np.vstack([qp.Aeq, qp.Cineq[active]])
    fvec = np.concatenate([qp.beq, qp.dvec[active]])
    return ReducedQp(qp.Qmat, qp.pvec, Emat, fvec, active, qp.Aeq.shape[0])


class Residuals(NamedTuple):
    eq_residual: np.ndarray
    ineq_slack: np.ndarray


def constraint_residuals(qp: SparseQp, y) -> Residuals:
    y = np.asarray(y, dtype=float)
    if y.shape != (qp.n_var,):
        raise ValueError(f"y has shape {y.shape}, expected {(qp.n_var,)}")
    return Residuals(qp.Aeq @ y - qp.beq, qp.dvec - qp.Cineq @ y)


def rollout(system: LinearSystem, x0, inputs) -> np.ndarray:
    """States x_0..x_N under the given input sequence."""
    xs = [np.asarray(x0, dtype=float)]
    for u in np.asarray(inputs, dtype=float).reshape(-1, system.m):
        xs.append(system.step(xs[-1], u))
    return np.array(xs)


def stack_solution(qp: SparseQp, states, inputs) -> np.ndarray:
    """Pack x_1..x_N and u_0..u_{N-1} into the QP decision vector."""
    return np.concatenate([np.asarray(states, dtype=float).ravel(),
                           np.asarray(inputs, dtype=float).ravel()])


def stage_cost(instance: MpcInstance, x, u, k: int) -> float:
    e = np.asarray(x) - instance.x_ref[k]
    return float(e @ instance.Q_stage @ e + np.asarray(u) @ instance.R_stage @ np.asarray(u))
