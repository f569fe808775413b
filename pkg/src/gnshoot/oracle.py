"""Dense KKT solution of an LQ subproblem, used to cross-check the Riccati path.

The initial increment ``dx_0`` is fixed to zero and eliminated. The primal
vector stacks ``(dx_1, ..., dx_N, du_0, ..., du_{N-1})`` and one multiplier
block per dynamics row ``dx_{n+1} - A_n dx_n - B_n du_n = d_n``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.linalg

from gnshoot.core import DegenerateProblemError
from gnshoot.lq import LQSubproblem


@dataclass(frozen=True)
class KktSystem:
    K: np.ndarray     # symmetric indefinite, (n_primal + N m) square
    rhs: np.ndarray
    H: np.ndarray     # primal Hessian block
    g: np.ndarray     # primal gradient
    C: np.ndarray     # dynamics rows
    n_primal: int


class KktSolution(NamedTuple):
    dX: np.ndarray            # (N+1, m), dX[0] = 0
    dU: np.ndarray            # (N, p)
    objective_change: float   # g'z + z'Hz/2, constants excluded
    multipliers: np.ndarray   # (N, m)


def kkt_system(lq: LQSubproblem) -> KktSystem:
    N, m, p = lq.N, lq.m, lq.p
    nx, nu = N * m, N * p
    n = nx + nu

    def xs(k):  # columns of dx_k, k = 1..N
        return slice((k - 1) * m, k * m)

    def us(k):  # columns of du_k, k = 0..N-1
        return slice(nx + k * p, nx + (k + 1) * p)

    H = np.zeros((n, n))
    g = np.zeros(n)
    for k in range(N):
        H[us(k), us(k)] = lq.R[k]
        g[us(k)] = lq.r[k]
        if k > 0:
            H[xs(k), xs(k)] = lq.Q[k]
            H[us(k), xs(k)] = lq.P[k]
            H[xs(k), us(k)] = lq.P[k].T
            g[xs(k)] = lq.q[k]
    H[xs(N), xs(N)] = lq.QN
    g[xs(N)] = lq.qN

    C = np.zeros((nx, n))
    for k in range(N):
        rows = slice(k * m, (k + 1) * m)
        C[rows, xs(k + 1)] = np.eye(m)
        if k > 0:
            C[rows, xs(k)] = -lq.A[k]
        C[rows, us(k)] = -lq.B[k]

    K = np.block([[H, C.T], [C, np.zeros((nx, nx))]])
    rhs = np.concatenate([-g, lq.d.reshape(-1)])
    return KktSystem(K, rhs, H, g, C, n)


def solve_kkt(lq: LQSubproblem) -> KktSolution:
    """Stationary point of the equality-constrained QP by one dense symmetric solve."""
    sysm = kkt_system(lq)
    N, m, p = lq.N, lq.m, lq.p
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", scipy.linalg.LinAlgWarning)
            sol = scipy.linalg.solve(sysm.K, sysm.rhs, assume_a="sym")
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgWarning) as exc:
        raise DegenerateProblemError(f"KKT matrix is singular: {exc}") from None
    z = sol[:sysm.n_primal]
    dX = np.zeros((N + 1, m))
    dX[1:] = z[:N * m].reshape(N, m)
    dU = z[N * m:].reshape(N, p)
    change = float(sysm.g @ z + 0.5 * z @ sysm.H @ z)
    return KktSolution(dX, dU, change, sol[sysm.n_primal:].reshape(N, m))
