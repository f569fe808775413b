"""Forward sweeps, shooting-interval rollouts and defect computation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numba
import numpy as np

from gnshoot.core import ConfigurationError, OcProblem, Trajectory
from gnshoot.dynamics import rollout_intervals
from gnshoot.lq import LQSubproblem


@dataclass(frozen=True)
class IntervalPartition:
    N: int
    starts: tuple[int, ...]
    lengths: tuple[int, ...]

    @property
    def M(self) -> int:
        return len(self.starts)

    @property
    def ends(self) -> tuple[int, ...]:
        """Stage index of the last control stage in each interval."""
        return tuple(i + n - 1 for i, n in zip(self.starts, self.lengths))

    def interval_of(self, n: int) -> int:
        return int(np.searchsorted(self.starts, n, side="right") - 1)


def partition(N: int, M: int) -> IntervalPartition:
    """Split ``N`` stages into ``M`` intervals; the first ``N % M`` get one extra stage."""
    if not 1 <= M <= N:
        raise ConfigurationError(f"number of intervals M={M} must satisfy 1 <= M <= N={N}")
    base, extra = divmod(N, M)
    lengths = tuple(base + 1 if k < extra else base for k in range(M))
    starts = tuple(int(s) for s in np.concatenate([[0], np.cumsum(lengths)[:-1]]))
    return IntervalPartition(N, starts, lengths)


class FeedbackPolicy(NamedTuple):
    """Affine update ``du = l + L dx`` around a reference trajectory."""

    l: np.ndarray
    L: np.ndarray


@numba.njit(cache=True, nogil=True)
def _forward_kernel(A, B, d, l, L, X_old, U_old, x0, alpha, X, U):
    K, N, m, p = A.shape[0], A.shape[1], A.shape[2], B.shape[3]
    dx = np.empty(m)
    nxt = np.empty(m)
    du = np.empty(p)
    for b in range(K):
        for i in range(m):
            X[b, 0, i] = x0[b, i]
            dx[i] = x0[b, i] - X_old[b, 0, i]
        for n in range(N):
            for i in range(p):
                acc = alpha * l[b, n, i]
                for j in range(m):
                    acc += L[b, n, i, j] * dx[j]
                du[i] = acc
                U[b, n, i] = U_old[b, n, i] + acc
            for i in range(m):
                acc = alpha * d[b, n, i]
                for j in range(m):
                    acc += A[b, n, i, j] * dx[j]
                for j in range(p):
                    acc += B[b, n, i, j] * du[j]
                nxt[i] = acc
            for i in range(m):
                dx[i] = nxt[i]
                X[b, n + 1, i] = X_old[b, n + 1, i] + nxt[i]


def forward_arrays(A, B, d, l, L, X_old, U_old, x0, alpha: float = 1.0):
    """Batched forward sweep on raw arrays; see :func:`forward_sweep`."""
    batch = A.shape[:-3]
    N, m, p = A.shape[-3], A.shape[-1], B.shape[-1]

    def flat(a, core):
        return np.ascontiguousarray(np.broadcast_to(a, batch + core),
                                    dtype=float).reshape((-1,) + core)

    X_old = flat(X_old, (N + 1, m))
    U_old = flat(U_old, (N, p))
    X = np.empty_like(X_old)
    U = np.empty_like(U_old)
    _forward_kernel(flat(A, (N, m, m)), flat(B, (N, m, p)), flat(d, (N, m)),
                    flat(l, (N, p)), flat(L, (N, p, m)), X_old, U_old, flat(x0, (m,)),
                    float(alpha), X, U)
    return X.reshape(batch + (N + 1, m)), U.reshape(batch + (N, p))


def forward_sweep(lq: LQSubproblem, sol, traj_old: Trajectory, alpha: float = 1.0,
                  x_init: np.ndarray | None = None) -> Trajectory:
    """Candidate decision variables from the LQ solution.

    The feedforward ``l_n`` and the defect ``d_n`` are both scaled by
    ``alpha``; at ``alpha = 1`` the candidate satisfies the affine dynamics of
    ``lq`` exactly.
    """
    if not 0 < alpha <= 1:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    x0 = traj_old.X[0] if x_init is None else x_init
    X, U = forward_arrays(lq.A, lq.B, lq.d, sol.l, sol.L, traj_old.X, traj_old.U, x0, alpha)
    return Trajectory(X, U)


class StackedRollout(NamedTuple):
    """Rollout of ``S`` independent trajectories sharing dynamics and partition."""

    X: np.ndarray         # (S, N+1, m)
    U: np.ndarray         # (S, N, p)
    D: np.ndarray         # (S, N, m)
    A: np.ndarray         # (S, N, m, m)
    B: np.ndarray         # (S, N, m, p)
    diverged: np.ndarray  # (S,) bool


def rollout_stack(problem: OcProblem, part: IntervalPartition, X: np.ndarray, U: np.ndarray,
                  *, gains: np.ndarray | None = None, feedforward: np.ndarray | None = None,
                  X_ref: np.ndarray | None = None, U_ref: np.ndarray | None = None,
                  ) -> StackedRollout:
    """Multiple-shooting rollout of stacked candidates ``X`` (S, N+1, m), ``U`` (S, N, p).

    The ``S * M`` intervals are integrated together by laying the candidates
    end to end on one horizon of ``S * N`` stages. Passing ``gains`` makes the
    interior controls closed-loop around ``(X_ref, U_ref)``. Divergence is
    reported per candidate rather than raised.
    """
    S, N, m = X.shape[0], problem.N, problem.m
    starts = np.asarray(part.starts)
    lengths = np.asarray(part.lengths)
    all_starts = (np.arange(S)[:, None] * N + starts).reshape(-1)
    all_lengths = np.tile(lengths, S)
    kw = {}
    if gains is not None:
        kw = dict(gains=gains.reshape(S * N, *gains.shape[-2:]),
                  feedforward=None if feedforward is None else feedforward.reshape(S * N, -1),
                  X_ref=X_ref[:, :N].reshape(S * N, m), U_ref=U_ref.reshape(S * N, -1))
    res = rollout_intervals(problem.dynamics, problem.integrator, all_starts, all_lengths,
                            X[:, starts].reshape(-1, m), U.reshape(S * N, -1),
                            on_divergence="flag", **kw)
    X_new = X.copy()
    X_new[:, :N] = res.X.reshape(S, N, m)
    X_end = res.X_end.reshape(S, part.M, m)
    D = np.zeros((S, N, m))
    if part.M == 1:
        X_new[:, N] = X_end[:, 0]
    else:
        ends = starts + lengths
        D[:, ends - 1] = X_end - X[:, ends]
    diverged = res.diverged.reshape(S, part.M).any(axis=1)
    return StackedRollout(X_new, res.U.reshape(U.shape), D,
                          res.A.reshape(S, N, m, m), res.B.reshape(S, N, m, -1), diverged)


def rollout_and_defects(problem: OcProblem, part: IntervalPartition, cand: Trajectory,
                        policy=None, traj_ref: Trajectory | None = None,
                        closed_loop: bool = False, alpha: float = 1.0,
                        ) -> tuple[Trajectory, tuple[np.ndarray, np.ndarray]]:
    """Integrate every shooting interval from the candidate's start states.

    Interior states (and, in closed loop, interior controls) are overwritten
    by the integration; each interval's end state is compared with the next
    decision state to give the defect at the interval's last stage. With a
    single interval the terminal state is overwritten too, so the defects
    vanish; with ``M >= 2`` the terminal state stays a decision variable.

    Returns the new trajectory and the stage sensitivities ``(A, B)`` at the
    visited points.
    """
    N = problem.N
    if part.N != N:
        raise ConfigurationError(f"partition covers N={part.N}, problem has N={N}")
    starts = np.asarray(part.starts)
    lengths = np.asarray(part.lengths)
    kw = {}
    if closed_loop:
        if policy is None or traj_ref is None:
            raise ValueError("closed-loop rollout needs a policy and a reference trajectory")
        kw = dict(feedforward=alpha * policy.l, gains=policy.L,
                  X_ref=traj_ref.X, U_ref=traj_ref.U)
    res = rollout_intervals(problem.dynamics, problem.integrator, starts, lengths,
                            cand.X[starts], cand.U, **kw)
    X = cand.X.copy()
    X[:N] = res.X
    D = np.zeros((N, problem.m))
    if part.M == 1:
        X[N] = res.X_end[0]
    else:
        ends = starts + lengths
        D[ends - 1] = res.X_end - cand.X[ends]
    return Trajectory(X, res.U, D), (res.A, res.B)
