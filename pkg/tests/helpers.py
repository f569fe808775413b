"""Shared generators for the test suite."""

from __future__ import annotations

import numpy as np

from gnshoot.dynamics import rollout_interval
from gnshoot.lq import LQSubproblem
from gnshoot.solver import ProvidedInit


def spd(rng: np.random.Generator, k: int, floor: float = 0.1) -> np.ndarray:
    W = rng.normal(size=(k, k))
    return W @ W.T + floor * np.eye(k)


def random_lq(rng: np.random.Generator, N: int | None = None, m: int | None = None,
              p: int | None = None, defects: bool = True) -> LQSubproblem:
    """Random LQ subproblem whose stage Hessians ``[[Q, P'], [P, R]]`` are PD."""
    N = int(rng.integers(1, 21)) if N is None else N
    m = int(rng.integers(1, 5)) if m is None else m
    p = int(rng.integers(1, 4)) if p is None else p
    d = rng.normal(size=(N, m)) if defects else np.zeros((N, m))
    Z = np.array([spd(rng, m + p) for _ in range(N)])
    return LQSubproblem(
        A=rng.normal(scale=0.7, size=(N, m, m)), B=rng.normal(size=(N, m, p)), d=d,
        Q=Z[:, :m, :m], q=rng.normal(size=(N, m)), c=rng.normal(size=N), R=Z[:, m:, m:],
        r=rng.normal(size=(N, p)), P=Z[:, m:, :m], QN=spd(rng, m), qN=rng.normal(size=m),
        cN=0.3)


def consistent_init(problem, U=None) -> ProvidedInit:
    """Open-loop rollout of ``U`` (zeros by default) as a dynamically consistent guess."""
    U = np.zeros((problem.N, problem.p)) if U is None else np.asarray(U, float)
    X, _ = rollout_interval(problem.dynamics, problem.integrator, problem.x_init, U)
    return ProvidedInit(X, U)


def interior_stages(part) -> np.ndarray:
    """Stages whose defect must vanish: all except each interval's last stage."""
    mask = np.ones(part.N, dtype=bool)
    mask[list(part.ends)] = False
    return np.nonzero(mask)[0]
