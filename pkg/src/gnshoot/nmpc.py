"""Real-time-iteration NMPC split into a feedback and a preparation phase.

Each control cycle performs exactly one Gauss-Newton iteration. The
feedback phase integrates only the first shooting interval from the new
measurement and finishes the Riccati and forward sweeps; all other intervals
are integrated and expanded in the preparation phase, after the policy has
been published. With ``M`` intervals the latency-critical work therefore
shrinks roughly by a factor ``M`` relative to single shooting.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from gnshoot.core import OcProblem, Trajectory
from gnshoot.cost import expand_running, expand_terminal
from gnshoot.dynamics import DynamicsModel, Integrator, rollout_intervals, step
from gnshoot.lq import LQSubproblem
from gnshoot.riccati import Regularization, backward_sweep
from gnshoot.solver import (
    Initialization,
    SolverSettings,
    SteadyStateInit,
    VariantConfig,
    initialize,
    solve,
)
from gnshoot.sweep import IntervalPartition, forward_arrays, partition

log = logging.getLogger(__name__)


class NmpcPolicy(NamedTuple):
    """Affine state feedback ``u_n(x) = U[n] + L[n] (x - X[n])`` around the plan."""

    X: np.ndarray
    U: np.ndarray
    L: np.ndarray
    l: np.ndarray

    def control(self, x: np.ndarray, n: int = 0) -> np.ndarray:
        return self.U[n] + self.L[n] @ (np.asarray(x, float) - self.X[n])


class FeedbackRecord(NamedTuple):
    cycle: int
    latency_ms: float
    ok: bool
    message: str = ""


@dataclass
class NmpcState:
    """Controller memory between cycles.

    ``X``, ``U``, ``L`` are the adopted plan and gains. ``A``, ``B``, ``D`` and
    the cost expansion arrays hold the LQ data of the adopted plan; the
    entries of intervals ``1..M-1`` and the terminal term are refreshed by
    :func:`preparation_step`, those of interval 0 by :func:`feedback_step`.
    """

    problem: OcProblem
    variant: VariantConfig
    part: IntervalPartition
    X: np.ndarray
    U: np.ndarray
    L: np.ndarray
    A: np.ndarray
    B: np.ndarray
    D: np.ndarray
    c: np.ndarray
    q: np.ndarray
    r: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    P: np.ndarray
    cN: float
    qN: np.ndarray
    QN: np.ndarray
    regularization: Regularization = field(default_factory=Regularization)
    shift: bool = False
    threads: int = 1
    cycle: int = 0
    published: NmpcPolicy | None = None
    last_ok: bool = True
    _pool: ThreadPoolExecutor | None = field(default=None, repr=False)

    def executor(self) -> ThreadPoolExecutor:
        if self._pool is None:
            self._pool = ThreadPoolExecutor(max_workers=self.threads)
        return self._pool

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    @property
    def policy(self) -> NmpcPolicy:
        return NmpcPolicy(self.X, self.U, self.L, np.zeros_like(self.U))

    def trajectory(self) -> Trajectory:
        return Trajectory(self.X, self.U, self.D)

    def lq(self) -> LQSubproblem:
        return LQSubproblem(self.A, self.B, self.D, self.Q, self.q, self.c, self.R, self.r,
                            self.P, self.QN, self.qN, self.cN)


def create_controller(problem: OcProblem, variant: VariantConfig, init=None, *,
                      presolve: bool = True, settings: SolverSettings | None = None,
                      shift: bool = False, threads: int = 1) -> NmpcState:
    """Controller warm-started from ``init`` (converged offline unless ``presolve`` is off)."""
    settings = settings or SolverSettings()
    init = init if init is not None else SteadyStateInit()
    N, m, p = problem.N, problem.m, problem.p
    L = np.zeros((N, p, m))
    if presolve:
        res = solve(problem, variant, settings, init)
        if not res.converged:
            log.warning("offline solve for the controller ended with status %s", res.status)
        X, U = res.traj.X, res.traj.U
        if res.policy is not None:
            L = res.policy.L
    else:
        if not isinstance(init, Initialization):
            init = initialize(problem, variant, init)
        X, U = init.traj.X, init.traj.U
    part = partition(N, variant.resolve_M(N))
    state = NmpcState(
        problem, variant, part, X.copy(), U.copy(), np.array(L, float),
        np.zeros((N, m, m)), np.zeros((N, m, p)), np.zeros((N, m)), np.zeros(N),
        np.zeros((N, m)), np.zeros((N, p)), np.zeros((N, m, m)), np.zeros((N, p, p)),
        np.zeros((N, p, m)), 0.0, np.zeros(m), np.zeros((m, m)),
        regularization=settings.regularization, shift=shift, threads=threads)
    _prepare(state, range(1, part.M))
    return state


def _roll(state: NmpcState, intervals, x_starts) -> tuple:
    """Lockstep rollout of the given intervals, split over the worker pool."""
    pb, part = state.problem, state.part
    intervals = list(intervals)
    kw = {}
    if state.variant.closed_loop:
        kw = dict(gains=state.L, X_ref=state.X, U_ref=state.U)

    def work(group):
        return rollout_intervals(pb.dynamics, pb.integrator,
                                 [part.starts[k] for k in group],
                                 [part.lengths[k] for k in group],
                                 x_starts[[intervals.index(k) for k in group]], state.U, **kw)

    n_workers = max(1, min(state.threads, len(intervals)))
    bounds = np.linspace(0, len(intervals), n_workers + 1).astype(int)
    groups = [intervals[a:b] for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    if len(groups) == 1:
        return [(groups[0], work(groups[0]))]
    return list(zip(groups, state.executor().map(work, groups)))


def _store_intervals(state: NmpcState, results) -> None:
    """Write rolled-out stages, sensitivities, defects and cost expansions."""
    pb, part, N = state.problem, state.part, state.problem.N
    for group, res in results:
        starts = np.array([part.starts[k] for k in group])
        ends = starts + np.array([part.lengths[k] for k in group])
        n = np.concatenate([np.arange(a, b) for a, b in zip(starts, ends)])
        state.X[n], state.U[n] = res.X[n], res.U[n]
        state.A[n], state.B[n] = res.A[n], res.B[n]
        state.D[n] = 0.0
        if part.M == 1:
            state.X[N] = res.X_end[0]
        else:
            state.D[ends - 1] = res.X_end - state.X[ends]
        e = expand_running(pb.cost, state.X[n], state.U[n], n)
        state.c[n], state.q[n], state.r[n], state.Q[n], state.R[n], state.P[n] = e


def _prepare(state: NmpcState, intervals) -> None:
    intervals = list(intervals)
    if intervals:
        x_starts = state.X[[state.part.starts[k] for k in intervals]]
        _store_intervals(state, _roll(state, intervals, x_starts))
    if state.part.M > 1 or not intervals:
        state.cN, state.qN, state.QN = expand_terminal(state.problem.cost, state.X[-1])


def feedback_step(state: NmpcState, x_meas) -> tuple[NmpcPolicy, FeedbackRecord]:
    """Re-anchor at ``x_meas``, integrate interval 0 and publish an updated policy.

    On a diverging rollout the previous policy is republished and the cycle
    is flagged; the stored plan is left untouched.
    """
    t0 = time.perf_counter()
    x_meas = np.asarray(x_meas, dtype=float).reshape(state.problem.m)
    saved = (state.X.copy(), state.U.copy())
    if state.variant.closed_loop:
        state.U[0] = state.U[0] + state.L[0] @ (x_meas - state.X[0])
    state.X[0] = x_meas
    try:
        results = _roll(state, [0], x_meas[None])
        if not np.all(np.isfinite(results[0][1].X_end)):
            raise FloatingPointError("non-finite end state")
        _store_intervals(state, results)
        if state.part.M == 1:
            state.cN, state.qN, state.QN = expand_terminal(state.problem.cost, state.X[-1])
        sol = backward_sweep(state.lq(), state.regularization)
        X_new, U_new = forward_arrays(state.A, state.B, state.D, sol.l, sol.L,
                                      state.X, state.U, x_meas)
        if not (np.all(np.isfinite(X_new)) and np.all(np.isfinite(U_new))):
            raise FloatingPointError("non-finite forward sweep")
    except Exception as exc:  # a controller must always output something
        state.X, state.U = saved
        state.last_ok = False
        fallback = state.published or state.policy
        state.published = fallback
        rec = FeedbackRecord(state.cycle, (time.perf_counter() - t0) * 1e3, False, str(exc))
        log.warning("cycle %d: feedback phase failed (%s); reusing previous policy",
                    state.cycle, exc)
        return fallback, rec
    state.last_ok = True
    state.published = NmpcPolicy(X_new, U_new, sol.L, sol.l)
    return state.published, FeedbackRecord(state.cycle, (time.perf_counter() - t0) * 1e3, True)


def preparation_step(state: NmpcState) -> NmpcState:
    """Adopt the published plan and prepare intervals ``1..M-1`` for the next cycle."""
    if state.published is not None and state.last_ok:
        pol = state.published
        state.X, state.U, state.L = pol.X.copy(), pol.U.copy(), pol.L.copy()
    if state.shift:
        _shift(state, 1)
    state.cycle += 1
    _prepare(state, range(1, state.part.M))
    return state


def _shift(state: NmpcState, k: int) -> None:
    """Advance the plan by ``k`` stages, duplicating the terminal entries."""
    for name in ("X", "U", "L"):
        a = getattr(state, name)
        setattr(state, name, np.concatenate([a[k:], np.repeat(a[-1:], k, axis=0)]))


# ---------------------------------------------------------------------------
# closed-loop simulation


@dataclass(frozen=True)
class PlantConfig:
    """Simulated plant; ``noise_std`` perturbs measurements with a seeded generator."""

    dynamics: DynamicsModel
    integrator: Integrator
    noise_std: float = 0.0
    seed: int = 0


CYCLE_COLUMNS = ("cycle", "t_sim", "x_meas", "cost_stage", "feedback_ms", "prep_ms")


@dataclass
class ClosedLoopResult:
    rows: list[dict]
    X: np.ndarray
    U: np.ndarray
    accumulated_cost: float
    status: str = "ok"  # ok | plant_diverged
    failed_cycles: int = 0

    @property
    def cycle_periods_ms(self) -> np.ndarray:
        return np.array([r["feedback_ms"] + r["prep_ms"] for r in self.rows])

    @property
    def mean_frequency_hz(self) -> float:
        periods = self.cycle_periods_ms
        return float(1e3 / periods.mean()) if len(periods) else float("nan")


def run_closed_loop(plant: PlantConfig, controller: NmpcState, duration: float,
                    x0=None) -> ClosedLoopResult:
    """Simulate measure, feedback, apply, prepare for ``duration`` seconds.

    One cycle lasts one controller stage; the plant integrates that stage with
    its own integrator (e.g. finer substeps). The executed running cost uses
    stage index 0 of the controller's cost.
    """
    pb = controller.problem
    dt = pb.dt
    if not np.isclose(plant.integrator.dt, dt):
        raise ValueError("plant integrator must advance one controller stage per step")
    n_cycles = int(round(duration / dt))
    rng = np.random.default_rng(plant.seed)
    x = np.array(pb.x_init if x0 is None else x0, dtype=float)
    xs, us, rows = [x.copy()], [], []
    total = 0.0
    status, failed = "ok", 0
    for k in range(n_cycles):
        x_meas = x + plant.noise_std * rng.normal(size=x.shape) if plant.noise_std else x.copy()
        policy, rec = feedback_step(controller, x_meas)
        failed += not rec.ok
        u = policy.control(x_meas, 0)
        stage_cost = float(pb.cost.running(x[None], u[None], np.zeros(1, dtype=int))[0])
        total += stage_cost
        t1 = time.perf_counter()
        preparation_step(controller)
        prep_ms = (time.perf_counter() - t1) * 1e3
        row = {"cycle": k, "t_sim": k * dt}
        row.update({f"x_meas_{i}": v for i, v in enumerate(x_meas)})
        row.update(cost_stage=stage_cost, feedback_ms=rec.latency_ms, prep_ms=prep_ms)
        rows.append(row)
        try:
            x = step(plant.dynamics, plant.integrator, x, u, stage=k)
        except Exception as exc:
            log.warning("plant diverged in cycle %d: %s", k, exc)
            status = "plant_diverged"
            us.append(u)
            break
        xs.append(x.copy())
        us.append(u)
    return ClosedLoopResult(rows, np.array(xs), np.array(us).reshape(-1, pb.p), total,
                            status, failed)
