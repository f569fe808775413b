"""Main Gauss-Newton shooting iteration, generalized over the variant family.

A variant is fixed by the number of shooting intervals ``M`` and by whether
interval rollouts are closed-loop:

==============  ======  ===========
name            M       closed loop
==============  ======  ===========
SS              1       no
iLQR            1       yes
GNMS            N       (no effect)
GNMS(M)         M       no
iLQR-GNMS(M)    M       yes
==============  ======  ===========
"""

from __future__ import annotations

import logging
import re
import time
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from gnshoot.core import (
    ConfigurationError,
    InsufficientDataError,
    IntegrationDivergenceError,
    IterationRecord,
    NonConvexityError,
    OcProblem,
    Trajectory,
)
from gnshoot.cost import evaluate, evaluate_many, quadratize_many
from gnshoot.dynamics import rollout_intervals
from gnshoot.lq import LQSubproblem
from gnshoot.riccati import Regularization, RiccatiSolution, backward_sweep, predicted_cost_change
from gnshoot.sweep import (
    IntervalPartition,
    StackedRollout,
    forward_arrays,
    partition,
    rollout_stack,
)

log = logging.getLogger(__name__)

_VARIANT_RE = re.compile(r"^\s*(SS|iLQR|GNMS|iLQR-GNMS)\s*(?:\(\s*(\d+|N)\s*\))?\s*$", re.I)


@dataclass(frozen=True)
class VariantConfig:
    """``M=None`` stands for one interval per stage (GNMS)."""

    M: int | None
    closed_loop: bool

    @classmethod
    def parse(cls, name: str) -> VariantConfig:
        """Parse ``SS``, ``iLQR``, ``GNMS``, ``GNMS(5)``, ``iLQR-GNMS(5)``, ``GNMS(N)``."""
        match = _VARIANT_RE.match(name)
        if not match:
            raise ConfigurationError(f"unknown variant {name!r}")
        kind, count = match.group(1).upper(), match.group(2)
        M = None if count is None or count.upper() == "N" else int(count)
        if kind == "SS":
            if count is not None:
                raise ConfigurationError("SS takes no interval count")
            return cls(1, False)
        if kind == "ILQR":
            if count is not None:
                raise ConfigurationError("iLQR takes no interval count")
            return cls(1, True)
        return cls(M, kind == "ILQR-GNMS")

    def resolve_M(self, N: int) -> int:
        M = N if self.M is None else self.M
        if not 1 <= M <= N:
            raise ConfigurationError(f"variant needs 1 <= M <= N, got M={M}, N={N}")
        return M

    @property
    def label(self) -> str:
        if self.M is None:
            return "GNMS"
        if self.M == 1:
            return "iLQR" if self.closed_loop else "SS"
        return f"iLQR-GNMS({self.M})" if self.closed_loop else f"GNMS({self.M})"

    def __str__(self) -> str:
        return self.label


SS = VariantConfig(1, False)
ILQR = VariantConfig(1, True)
GNMS = VariantConfig(None, False)


@dataclass(frozen=True)
class LineSearch:
    """Backtracking on the merit ``J + rho * sum|d|``; off means full steps."""

    enabled: bool = False
    alphas: tuple[float, ...] = tuple(0.5**k for k in range(8))
    rho: float = 10.0

    def __post_init__(self) -> None:
        if self.rho < 0:
            raise ConfigurationError("merit weight rho must be >= 0")
        if not self.alphas or any(not 0 < a <= 1 for a in self.alphas):
            raise ConfigurationError("line-search step sizes must lie in (0, 1]")


@dataclass(frozen=True)
class SolverSettings:
    d_max: float = 1e-6
    J_rel_min: float = 1e-6
    max_iters: int = 100
    line_search: LineSearch = field(default_factory=LineSearch)
    regularization: Regularization = field(default_factory=Regularization)
    divergence_factor: float = 1e6
    # optional extra test: |U_new - U_old| <= du_rel_max * |U_new|
    du_rel_max: float | None = None

    def __post_init__(self) -> None:
        if not (self.d_max > 0 and self.J_rel_min > 0):
            raise ConfigurationError("d_max and J_rel_min must be positive")
        if self.du_rel_max is not None and not self.du_rel_max > 0:
            raise ConfigurationError("du_rel_max must be positive when given")
        if self.max_iters < 1:
            raise ConfigurationError("max_iters must be >= 1")


# ---------------------------------------------------------------------------
# initialization strategies


@dataclass(frozen=True)
class SteadyStateInit:
    """Constant state (default ``x_init``) held by the control solving ``f(x, u) = 0``."""

    x: np.ndarray | None = None


@dataclass(frozen=True)
class InterpolateInit:
    """Linear state ramp from ``x_init`` to ``x_goal`` with zero controls."""

    x_goal: np.ndarray


@dataclass(frozen=True)
class ProvidedInit:
    """User trajectory, optionally with feedback gains ``L`` (N, p, m) around it."""

    X: np.ndarray
    U: np.ndarray
    L: np.ndarray | None = None


class Initialization(NamedTuple):
    traj: Trajectory
    sens: tuple[np.ndarray, np.ndarray]
    partition: IntervalPartition


class UnstableInitializationError(IntegrationDivergenceError):
    pass


def steady_state_control(problem: OcProblem, x: np.ndarray, tol: float = 1e-12,
                         max_iter: int = 50) -> np.ndarray:
    """Control holding ``x`` at rest, by Gauss-Newton on ``f(x, u) = 0``."""
    model = problem.dynamics
    u = np.zeros(problem.p)
    for _ in range(max_iter):
        r = model.f(x, u)
        if np.abs(r).max() <= tol:
            return u
        _, fu = model.jacobians(x, u)
        u = u - np.linalg.lstsq(fu, r, rcond=None)[0]
    if np.abs(model.f(x, u)).max() > 1e-8:
        raise ConfigurationError(f"state {x} is not an equilibrium for any control")
    return u


def initial_guess(problem: OcProblem, strategy) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    N, m, p = problem.N, problem.m, problem.p
    if isinstance(strategy, SteadyStateInit):
        x = problem.x_init if strategy.x is None else np.asarray(strategy.x, float)
        u = steady_state_control(problem, x)
        return np.tile(x, (N + 1, 1)), np.tile(u, (N, 1)), None
    if isinstance(strategy, InterpolateInit):
        goal = np.asarray(strategy.x_goal, float).reshape(m)
        w = np.linspace(0.0, 1.0, N + 1)[:, None]
        return (1 - w) * problem.x_init + w * goal, np.zeros((N, p)), None
    if isinstance(strategy, ProvidedInit):
        X = np.array(strategy.X, float).reshape(N + 1, m)
        U = np.array(strategy.U, float).reshape(N, p)
        L = None if strategy.L is None else np.asarray(strategy.L, float).reshape(N, p, m)
        return X, U, L
    raise ConfigurationError(f"unknown initialization strategy {strategy!r}")


def _check_family(problems: list[OcProblem]) -> OcProblem:
    if not problems:
        raise ConfigurationError("need at least one problem")
    ref = problems[0]
    for pb in problems[1:]:
        if (pb.dynamics is not ref.dynamics or pb.cost is not ref.cost
                or pb.N != ref.N or pb.integrator != ref.integrator):
            raise ConfigurationError(
                "batched problems must share dynamics, cost, horizon and integrator")
    return ref


def _initial_rollout(problems, variant, strategies):
    """Guess plus initial rollout for each problem; returns arrays and divergence flags."""
    ref = _check_family(problems)
    N, m, p = ref.N, ref.m, ref.p
    part = partition(N, variant.resolve_M(N))
    S = len(problems)
    X = np.empty((S, N + 1, m))
    U = np.empty((S, N, p))
    L = np.zeros((S, N, p, m))
    have_gains = False
    for i, (pb, strat) in enumerate(zip(problems, strategies)):
        Xi, Ui, Li = initial_guess(pb, strat if strat is not None else SteadyStateInit())
        if Li is not None:
            Ui[0] = Ui[0] + Li[0] @ (pb.x_init - Xi[0])
            L[i] = Li
            have_gains = True
        X[i], U[i] = Xi, Ui
    X_ref, U_ref = X.copy(), U.copy()
    X[:, 0] = [pb.x_init for pb in problems]
    kw = {}
    if variant.closed_loop and have_gains:
        # zero gains reproduce the open-loop rollout for guesses without a policy
        kw = dict(gains=L, X_ref=X_ref, U_ref=U_ref)
    return rollout_stack(ref, part, X, U, **kw), part


def initialize(problem: OcProblem, variant: VariantConfig, strategy) -> Initialization:
    """Initial guess followed by the initial multiple-shooting rollout.

    With feedback gains, closed-loop variants roll out under the initial
    policy; the start control is corrected for any mismatch between the
    guess's first state and ``x_init``.
    """
    roll, part = _initial_rollout([problem], variant, [strategy])
    if roll.diverged[0]:
        # repeat the single rollout to report where it diverged
        try:
            rollout_intervals(problem.dynamics, problem.integrator, part.starts,
                              part.lengths, roll.X[0, list(part.starts)], roll.U[0],
                              sensitivities=False)
        except IntegrationDivergenceError as exc:
            raise UnstableInitializationError(
                f"initial rollout diverged: {exc}", stage=exc.stage,
                interval=exc.interval) from exc
        raise UnstableInitializationError("initial rollout diverged")
    traj = Trajectory(roll.X[0], roll.U[0], roll.D[0])
    return Initialization(traj, (roll.A[0], roll.B[0]), part)


# ---------------------------------------------------------------------------
# main iteration


@dataclass
class SolveResult:
    traj: Trajectory
    policy: RiccatiSolution | None
    records: list[IterationRecord]
    status: str  # converged | max_iters | diverged | unstable_rollout | stalled | failed
    history: list[Trajectory]
    initial_cost: float
    initial_defect: float
    variant: VariantConfig
    partition: IntervalPartition
    message: str = ""

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    @property
    def iterations(self) -> int:
        return len(self.records)

    @property
    def cost(self) -> float:
        return self.records[-1].cost if self.records else self.initial_cost

    @property
    def U_history(self) -> list[np.ndarray]:
        return [t.U for t in self.history]


class IterationInfo(NamedTuple):
    """Passed to solve callbacks after every accepted iteration."""

    record: IterationRecord
    traj: Trajectory
    lq: LQSubproblem
    policy: RiccatiSolution
    sample: int = 0


def _rel_change(J_new: float, J_old: float) -> float:
    change = abs(J_new - J_old)
    if J_new == 0.0:
        return 0.0 if change == 0.0 else np.inf
    return change / abs(J_new)


def solve(problem: OcProblem, variant: VariantConfig, settings: SolverSettings | None = None,
          init=None, callback: Callable[[IterationInfo], None] | None = None) -> SolveResult:
    """Iterate LQ approximation, Riccati sweep, forward sweep and rollouts to convergence.

    ``init`` is an :class:`Initialization` or an initialization strategy
    (default: steady state at ``x_init``).
    """
    return solve_batch([problem], variant, settings, [init], callback)[0]


def solve_batch(problems: list[OcProblem], variant: VariantConfig,
                settings: SolverSettings | None = None, inits=None,
                callback: Callable[[IterationInfo], None] | None = None,
                isolate_failures: bool = False) -> list[SolveResult]:
    """Solve problems differing only in ``x_init`` in lockstep.

    Every iteration processes all unfinished problems with one stacked
    Riccati sweep, forward sweep and rollout, so each problem follows exactly
    the iterates :func:`solve` would produce for it alone. ``wall_ms`` in the
    records is the wall time of the shared iteration.

    With ``isolate_failures`` a problem whose initial rollout diverges or whose
    Riccati sweep fails finishes with status ``failed`` instead of raising.
    """
    settings = settings or SolverSettings()
    ls = settings.line_search
    ref = _check_family(problems)
    S, N = len(problems), ref.N
    inits = [None] * S if inits is None else list(inits)
    if len(inits) != S:
        raise ConfigurationError("need one initialization per problem")
    M = variant.resolve_M(N)
    status = ["max_iters"] * S
    message = [""] * S

    X = np.empty((S, N + 1, ref.m))
    U = np.empty((S, N, ref.p))
    D = np.empty((S, N, ref.m))
    A = np.empty((S, N, ref.m, ref.m))
    B = np.empty((S, N, ref.m, ref.p))
    given = [k for k, it in enumerate(inits) if isinstance(it, Initialization)]
    rest = [k for k in range(S) if k not in given]
    part = partition(N, M)
    for k in given:
        it = inits[k]
        if it.partition != part:
            raise ConfigurationError("initialization partition does not match the variant")
        X[k], U[k], D[k] = it.traj.X, it.traj.U, it.traj.D
        A[k], B[k] = it.sens
    alive = np.ones(S, dtype=bool)
    if rest:
        if len(rest) == 1 and not isolate_failures:
            it = initialize(problems[rest[0]], variant, inits[rest[0]])
            roll = StackedRollout(it.traj.X[None], it.traj.U[None], it.traj.D[None],
                                  it.sens[0][None], it.sens[1][None], np.zeros(1, bool))
        else:
            roll, _ = _initial_rollout([problems[k] for k in rest], variant,
                                       [inits[k] for k in rest])
        for i, k in enumerate(rest):
            if roll.diverged[i]:
                if not isolate_failures:
                    raise UnstableInitializationError(f"initial rollout of problem {k} diverged")
                alive[k] = False
                status[k], message[k] = "failed", "initial rollout diverged"
        X[rest], U[rest], D[rest], A[rest], B[rest] = roll.X, roll.U, roll.D, roll.A, roll.B

    x_init = np.array([pb.x_init for pb in problems])
    J = np.full(S, np.nan)
    J[alive] = evaluate_many(ref.cost, X[alive], U[alive])
    for k in np.nonzero(alive & ~np.isfinite(J))[0]:
        if not isolate_failures:
            evaluate(ref.cost, Trajectory(X[k], U[k]))  # raises with the stage
        alive[k] = False
        status[k], message[k] = "failed", "initial cost is not finite"
    dsum = np.abs(D).sum(axis=(1, 2))
    J0, d0 = J.copy(), dsum.copy()
    history = [[Trajectory(X[k], U[k], D[k])] for k in range(S)]
    records: list[list[IterationRecord]] = [[] for _ in range(S)]
    policies: list[RiccatiSolution | None] = [None] * S
    guard = settings.divergence_factor
    limit_J = guard * np.maximum(np.abs(J0), 1.0)
    limit_d = guard * np.maximum(d0, 1.0)

    active = np.nonzero(alive)[0]
    for it in range(1, settings.max_iters + 1):
        if len(active) == 0:
            break
        t0 = time.perf_counter()
        e = quadratize_many(ref.cost, X[active], U[active])
        lq = LQSubproblem(A[active], B[active], D[active], e.Q, e.q, e.c, e.R, e.r, e.P,
                          e.QN, e.qN, e.cN)
        try:
            sol = backward_sweep(lq, settings.regularization)
        except NonConvexityError:
            if not isolate_failures:
                raise
            ok = np.ones(len(active), dtype=bool)
            for i, k in enumerate(active):
                try:
                    backward_sweep(lq.take(i), settings.regularization)
                except NonConvexityError as exc:
                    ok[i] = False
                    status[k], message[k] = "failed", str(exc)
            active = active[ok]
            continue
        for i, k in enumerate(active):
            policies[k] = sol.take(i)

        n_act = len(active)
        alphas = ls.alphas if ls.enabled else (1.0,)
        merit0 = J[active] + ls.rho * dsum[active]
        pending = np.arange(n_act)
        step = np.zeros(n_act)
        failed = np.zeros(n_act, dtype=bool)
        new = {}
        for alpha in alphas:
            ka = active[pending]
            Xc, Uc = forward_arrays(lq.A[pending], lq.B[pending], lq.d[pending],
                                    sol.l[pending], sol.L[pending], X[ka], U[ka],
                                    x_init[ka], alpha)
            kw = {}
            if variant.closed_loop:
                kw = dict(gains=sol.L[pending], feedforward=alpha * sol.l[pending],
                          X_ref=X[ka], U_ref=U[ka])
            roll = rollout_stack(ref, part, Xc, Uc, **kw)
            Jc = np.full(len(pending), np.nan)
            ok = ~roll.diverged
            Jc[ok] = evaluate_many(ref.cost, roll.X[ok], roll.U[ok])
            ok &= np.isfinite(Jc)
            dc = np.abs(roll.D).sum(axis=(1, 2))
            failed[pending] = ~ok
            take = ok if not ls.enabled else ok & (Jc + ls.rho * dc < merit0[pending])
            for i in np.nonzero(take)[0]:
                new[int(pending[i])] = (roll.X[i], roll.U[i], roll.D[i], roll.A[i],
                                        roll.B[i], Jc[i], dc[i])
                step[pending[i]] = alpha
            pending = pending[~take]
            if len(pending) == 0:
                break
        wall_ms = (time.perf_counter() - t0) * 1e3

        keep = np.ones(n_act, dtype=bool)
        pred = np.atleast_1d(predicted_cost_change(sol, lq))
        for i, k in enumerate(active):
            if i not in new:
                keep[i] = False
                if failed[i] and not ls.enabled:
                    status[k], message[k] = "unstable_rollout", "rollout diverged"
                    log.warning("%s: rollout failed in iteration %d", variant, it)
                elif dsum[k] < settings.d_max and \
                        abs(pred[i]) <= settings.J_rel_min * abs(J[k]):
                    status[k] = "converged"
                elif failed[i]:
                    status[k], message[k] = "unstable_rollout", "rollouts diverged for every step size"
                else:
                    status[k], message[k] = "stalled", "no step size decreased the merit function"
                continue
            Xn, Un, Dn, An, Bn, Jn, dn = new[i]
            rec = IterationRecord(it, float(Jn), float(dn),
                                  float(np.linalg.norm((Un - U[k]).ravel())),
                                  float(step[i]), wall_ms)
            records[k].append(rec)
            if Jn > J[k]:
                log.debug("%s: cost increased in iteration %d (%g -> %g)", variant, it, J[k], Jn)
            rel = _rel_change(float(Jn), float(J[k]))
            X[k], U[k], D[k], A[k], B[k], J[k], dsum[k] = Xn, Un, Dn, An, Bn, Jn, dn
            traj = Trajectory(Xn, Un, Dn)
            history[k].append(traj)
            if callback is not None:
                callback(IterationInfo(rec, traj, lq.take(i), policies[k], int(k)))
            if Jn > limit_J[k] or dn > limit_d[k]:
                status[k], message[k] = "diverged", \
                    f"cost {Jn:g} / defect {dn:g} exceeded divergence guard"
                keep[i] = False
            elif rel < settings.J_rel_min and dn < settings.d_max and (
                    settings.du_rel_max is None
                    or rec.update_norm <= settings.du_rel_max * np.linalg.norm(Un)):
                status[k] = "converged"
                keep[i] = False
        active = active[keep]

    return [SolveResult(history[k][-1], policies[k], records[k], status[k], history[k],
                        float(J0[k]), float(d0[k]), variant, part, message[k])
            for k in range(S)]


def contraction_rate(U_iterates, U_star, K: int = 5, floor: float = 1e-12) -> float:
    """Geometric-mean contraction of ``|U_k - U*|`` over the last ``K`` usable iterates.

    Usable iterates are those farther than ``floor`` from ``U_star``; the rate
    is ``exp`` of the least-squares slope of ``log |U_k - U*|`` against ``k``.
    """
    U_star = np.asarray(U_star, dtype=float)
    errors = np.array([np.linalg.norm(np.asarray(U, float) - U_star) for U in U_iterates])
    ks = np.nonzero(errors > floor)[0][-K:]
    if len(ks) < 2:
        raise InsufficientDataError(
            f"need at least 2 iterates farther than {floor:g} from U*, got {len(ks)}")
    slope = np.polyfit(ks.astype(float), np.log(errors[ks]), 1)[0]
    return float(np.exp(slope))
