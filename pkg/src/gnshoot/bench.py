"""Built-in benchmark problems and the convergence and contraction experiments."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from gnshoot.core import ConfigurationError, InsufficientDataError, OcProblem
from gnshoot.cost import QuadraticTrackingCost
from gnshoot.dynamics import Integrator
from gnshoot.models import CartPole, LinearModel, Pendulum, ScalarUnstable
from gnshoot.solver import (
    ILQR,
    ProvidedInit,
    SolveResult,
    SolverSettings,
    SteadyStateInit,
    VariantConfig,
    contraction_rate,
    solve,
    solve_batch,
)

log = logging.getLogger(__name__)


def _weights(value, dim):
    a = np.asarray(value, dtype=float)
    if a.ndim == 0:
        return a * np.eye(dim)
    if a.ndim == 1:
        return np.diag(a)
    return a


def scalar_unstable(*, dt: float = 0.01, N: int = 300, x_init=(1.5,), Q=0.0, R=0.01,
                    QN=10.0, scheme: str = "rk4", substeps: int = 1) -> OcProblem:
    """``dx/dt = (1 + x) x + u`` steered from 1.5 to the origin in 3 s."""
    cost = QuadraticTrackingCost(_weights(Q, 1), _weights(R, 1), _weights(QN, 1))
    return OcProblem(ScalarUnstable(), cost, np.asarray(x_init, float), N, dt,
                     Integrator(dt, scheme, substeps), name="scalar_unstable")


def pendulum(*, dt: float = 0.05, N: int = 60, x_init=(0.0, 0.0), Q=(0.1, 0.01), R=0.1,
             QN=(100.0, 10.0), scheme: str = "rk4", substeps: int = 1) -> OcProblem:
    """Swing-up from hanging rest to the upright equilibrium ``theta = pi``."""
    goal = np.array([np.pi, 0.0])
    cost = QuadraticTrackingCost(_weights(Q, 2), _weights(R, 1), _weights(QN, 2),
                                 x_des=goal, xN_des=goal)
    return OcProblem(Pendulum(), cost, np.asarray(x_init, float), N, dt,
                     Integrator(dt, scheme, substeps), name="pendulum")


def cartpole(*, dt: float = 0.02, N: int = 100, x_init=(0.0, 0.3, 0.0, 0.0),
             Q=(1.0, 10.0, 0.1, 0.1), R=0.1, QN=(100.0, 100.0, 10.0, 10.0),
             scheme: str = "rk4", substeps: int = 1) -> OcProblem:
    """Stabilize the upright cart-pole from a tilted start."""
    cost = QuadraticTrackingCost(_weights(Q, 4), _weights(R, 1), _weights(QN, 4))
    return OcProblem(CartPole(), cost, np.asarray(x_init, float), N, dt,
                     Integrator(dt, scheme, substeps), name="cartpole")


def linear_random(*, seed: int = 0, m: int = 3, p: int = 2, N: int = 20, dt: float = 0.1,
                  scheme: str = "rk4", substeps: int = 1) -> OcProblem:
    """Random controllable LTI system with a random positive definite quadratic cost."""
    rng = np.random.default_rng(seed)
    while True:
        Ac = rng.normal(scale=0.5, size=(m, m))
        Bc = rng.normal(size=(m, p))
        ctrb = np.hstack([np.linalg.matrix_power(Ac, k) @ Bc for k in range(m)])
        if np.linalg.matrix_rank(ctrb) == m:
            break

    def spd(k, floor):
        W = rng.normal(size=(k, k))
        return W @ W.T / k + floor * np.eye(k)

    cost = QuadraticTrackingCost(spd(m, 0.1), spd(p, 0.1), spd(m, 1.0),
                                 x_des=rng.normal(size=m), u_des=rng.normal(size=p))
    return OcProblem(LinearModel(Ac, Bc), cost, rng.normal(size=m), N, dt,
                     Integrator(dt, scheme, substeps), name="linear_random")


PROBLEMS = {
    "scalar_unstable": scalar_unstable,
    "pendulum": pendulum,
    "cartpole": cartpole,
    "linear_random": linear_random,
}


def make_problem(name: str, **params) -> OcProblem:
    try:
        factory = PROBLEMS[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown system {name!r}; choose from {sorted(PROBLEMS)}") from None
    return factory(**params)


def _as_problem(problem) -> OcProblem:
    return make_problem(problem) if isinstance(problem, str) else problem


# ---------------------------------------------------------------------------
# convergence experiment


def run_convergence_experiment(problem, variants, init=None,
                               settings: SolverSettings | None = None) -> dict[str, SolveResult]:
    """Solve from one initialization with each variant; failures end up in the status."""
    problem = _as_problem(problem)
    init = init if init is not None else SteadyStateInit()
    out = {}
    for v in variants:
        v = VariantConfig.parse(v) if isinstance(v, str) else v
        out[v.label] = solve(problem, v, settings, init)
    return out


def first_iteration_within(result: SolveResult, J_opt: float, band: float = 0.01) -> int | None:
    """First iteration whose cost lies within ``band`` (relative) of ``J_opt``."""
    for rec in result.records:
        if abs(rec.cost - J_opt) <= band * abs(J_opt):
            return rec.iter
    return None


# ---------------------------------------------------------------------------
# contraction study

# References are iterated until the control update reaches rounding level; the
# study runs stop a little earlier but well inside the asymptotic regime.
REFERENCE_SETTINGS = SolverSettings(J_rel_min=1e-15, d_max=1e-13, du_rel_max=1e-14,
                                    max_iters=200)
STUDY_SETTINGS = SolverSettings(J_rel_min=1e-15, d_max=1e-12, du_rel_max=1e-11,
                                max_iters=200)
EXCLUDED_STATUSES = ("diverged", "unstable_rollout", "failed", "stalled")


@dataclass
class ContractionSummary:
    variant: str
    M: int
    mean_rate: float
    std_rate: float
    n_converged: int
    n_excluded: int
    rates: np.ndarray = field(repr=False)

    @property
    def degenerate(self) -> bool:
        """Every converged sample ended before a rate could be estimated."""
        return self.n_converged > 0 and len(self.rates) == 0


def sample_ball(rng: np.random.Generator, n: int, dim: int, scale: float) -> np.ndarray:
    """``n`` points drawn uniformly from the ``dim``-ball of radius ``scale``."""
    direction = rng.normal(size=(n, dim))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = scale * rng.uniform(size=(n, 1)) ** (1.0 / dim)
    return direction * radius


def _chunks(n: int, parts: int) -> list[range]:
    parts = max(1, min(parts, n))
    bounds = np.linspace(0, n, parts + 1).astype(int)
    return [range(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _solve_samples(problems, variant, settings, init, threads):
    """Lockstep solves over contiguous chunks of samples, one chunk per worker."""
    chunks = _chunks(len(problems), threads)

    def work(idx):
        return solve_batch([problems[i] for i in idx], variant, settings,
                           [init] * len(idx), isolate_failures=True)

    if len(chunks) == 1:
        results = [work(chunks[0])]
    else:
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            results = list(pool.map(work, chunks))
    return [r for part in results for r in part]


def run_contraction_study(problem, variants, n_samples: int = 100, scale: float = 0.1,
                          seed: int = 0, threads: int = 1, K: int = 5,
                          settings: SolverSettings | None = None) -> list[ContractionSummary]:
    """Asymptotic contraction rates of each variant around perturbed initial states.

    Every sample perturbs ``x_init`` inside a ball of radius ``scale`` and
    warm-starts from the nominal optimum and its iLQR feedback gains. Errors
    ``|U_k - U*|`` are taken against a per-sample reference converged to
    machine precision and normalized by the nominal iLQR optimum. Samples
    whose solve diverges are excluded and counted.
    """
    problem = _as_problem(problem)
    settings = settings or STUDY_SETTINGS
    nominal = solve(problem, ILQR, REFERENCE_SETTINGS, SteadyStateInit())
    if nominal.status not in ("converged", "max_iters") or not np.isfinite(nominal.cost):
        raise ConfigurationError(f"nominal iLQR solve did not converge ({nominal.status})")
    X_star, U_star = nominal.traj.X, nominal.traj.U
    init = ProvidedInit(X_star, U_star, nominal.policy.L)
    scale_norm = float(np.linalg.norm(U_star))
    if scale_norm == 0.0:
        scale_norm = 1.0

    rng = np.random.default_rng(seed)
    deltas = sample_ball(rng, n_samples, problem.m, scale)
    problems = [problem.with_x_init(problem.x_init + dx) for dx in deltas]
    references = _solve_samples(problems, ILQR, REFERENCE_SETTINGS, init, threads)

    summaries = []
    for v in variants:
        v = VariantConfig.parse(v) if isinstance(v, str) else v
        results = _solve_samples(problems, v, settings, init, threads)
        rates, n_conv, n_excl = [], 0, 0
        for i in range(n_samples):  # sample order fixes the aggregation order
            res, ref = results[i], references[i]
            if res.status in EXCLUDED_STATUSES or ref.status != "converged":
                n_excl += 1
                continue
            n_conv += 1
            U_ref = ref.traj.U / scale_norm
            try:
                rates.append(contraction_rate([U / scale_norm for U in res.U_history],
                                              U_ref, K=K))
            except InsufficientDataError:
                pass
        rates = np.asarray(rates)
        mean = float(rates.mean()) if len(rates) else float("nan")
        std = float(rates.std(ddof=1)) if len(rates) > 1 else float("nan")
        if n_excl:
            log.info("%s: %d of %d samples excluded", v.label, n_excl, n_samples)
        summaries.append(ContractionSummary(v.label, v.resolve_M(problem.N), mean, std,
                                            n_conv, n_excl, rates))
    return summaries
