"""Cost evaluation and second-order expansion along a trajectory."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from gnshoot.core import CostEvaluationError, DimensionError, ModelError, Trajectory


class CostExpansion(NamedTuple):
    """Stage-wise quadratic model ``c + q'dx + r'du + dx'Q dx/2 + du'R du/2 + du'P dx``.

    Shapes are given for a single trajectory; batched expansions prepend the
    batch shape to every field.
    """

    c: np.ndarray   # (N,)
    q: np.ndarray   # (N, m)
    r: np.ndarray   # (N, p)
    Q: np.ndarray   # (N, m, m)
    R: np.ndarray   # (N, p, p)
    P: np.ndarray   # (N, p, m)
    cN: float
    qN: np.ndarray  # (m,)
    QN: np.ndarray  # (m, m)


class CostModel:
    """Running cost ``L_n(x, u, n)`` plus terminal cost ``Phi(x_N)``.

    All stage methods are batched over the leading axis; ``n`` is the array of
    stage indices. The default expansions use central finite differences, so
    a subclass only has to provide :meth:`running` and :meth:`terminal`.
    """

    fd_step = 1e-4

    def running(self, x: np.ndarray, u: np.ndarray, n: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def terminal(self, x: np.ndarray) -> float:
        raise NotImplementedError

    def running_expansion(self, x, u, n):
        z = np.concatenate([x, u], axis=-1)
        m = x.shape[-1]

        def fun(zz):
            return self.running(zz[..., :m], zz[..., m:], n)

        c = self.running(x, u, n)
        g, H = _fd_grad_hess(fun, z, self.fd_step)
        return (c, g[:, :m], g[:, m:], H[:, :m, :m], H[:, m:, m:], H[:, m:, :m])

    def terminal_expansion(self, x):
        g, H = _fd_grad_hess(lambda zz: np.array([self.terminal(v) for v in zz]),
                             x[None], self.fd_step)
        return float(self.terminal(x)), g[0], H[0]


def _fd_grad_hess(fun, z, h):
    """Central-difference gradient and Hessian of a batched scalar function."""
    K, nz = z.shape
    g = np.empty((K, nz))
    H = np.empty((K, nz, nz))
    f0 = fun(z)
    E = np.eye(nz) * h
    for i in range(nz):
        fp, fm = fun(z + E[i]), fun(z - E[i])
        g[:, i] = (fp - fm) / (2 * h)
        H[:, i, i] = (fp - 2 * f0 + fm) / h**2
        for j in range(i):
            fpp = fun(z + E[i] + E[j])
            fpm = fun(z + E[i] - E[j])
            fmp = fun(z - E[i] + E[j])
            fmm = fun(z - E[i] - E[j])
            H[:, i, j] = H[:, j, i] = (fpp - fpm - fmp + fmm) / (4 * h * h)
    return g, H


class QuadraticTrackingCost(CostModel):
    """``(x - x_des)'Q(x - x_des)/2 + (u - u_des)'R(u - u_des)/2`` per stage.

    References may be constant vectors or per-stage arrays (``x_des`` with
    ``N + 1`` rows, its last row being the terminal target unless ``xN_des``
    is given).
    """

    def __init__(self, Q, R, QN, x_des=None, u_des=None, xN_des=None) -> None:
        self.Q = np.atleast_2d(np.asarray(Q, dtype=float))
        self.R = np.atleast_2d(np.asarray(R, dtype=float))
        self.QN = np.atleast_2d(np.asarray(QN, dtype=float))
        m, p = self.Q.shape[0], self.R.shape[0]
        if self.Q.shape != (m, m) or self.QN.shape != (m, m) or self.R.shape != (p, p):
            raise DimensionError("weight matrices must be square and consistent")
        self.x_des = np.zeros(m) if x_des is None else np.asarray(x_des, dtype=float)
        self.u_des = np.zeros(p) if u_des is None else np.asarray(u_des, dtype=float)
        if xN_des is None:
            xN_des = self.x_des[-1] if self.x_des.ndim == 2 else self.x_des
        self.xN_des = np.asarray(xN_des, dtype=float).reshape(m)
        _check_psd(self.Q, "Q")
        _check_psd(self.QN, "Q_N")
        try:
            np.linalg.cholesky(self.R)
        except np.linalg.LinAlgError:
            raise ModelError("R must be symmetric positive definite") from None

    def _refs(self, n):
        xd = self.x_des[n] if self.x_des.ndim == 2 else self.x_des
        ud = self.u_des[n] if self.u_des.ndim == 2 else self.u_des
        return xd, ud

    def running(self, x, u, n):
        xd, ud = self._refs(n)
        ex, eu = x - xd, u - ud
        return 0.5 * (np.einsum("...i,ij,...j->...", ex, self.Q, ex)
                      + np.einsum("...i,ij,...j->...", eu, self.R, eu))

    def terminal(self, x):
        e = np.asarray(x, dtype=float) - self.xN_des
        return float(0.5 * e @ self.QN @ e)

    def running_expansion(self, x, u, n):
        xd, ud = self._refs(n)
        ex, eu = x - xd, u - ud
        K, m, p = x.shape[0], x.shape[1], u.shape[1]
        c = self.running(x, u, n)
        q = ex @ self.Q.T
        r = eu @ self.R.T
        Q = np.broadcast_to(self.Q, (K, m, m))
        R = np.broadcast_to(self.R, (K, p, p))
        P = np.zeros((K, p, m))
        return c, q, r, Q, R, P

    def terminal_expansion(self, x):
        e = np.asarray(x, dtype=float) - self.xN_des
        return self.terminal(x), self.QN @ e, self.QN


def _check_psd(M, name, tol=1e-10):
    if not np.allclose(M, M.T, rtol=0, atol=tol * max(1.0, np.abs(M).max())):
        raise ModelError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(M).min() < -tol * max(1.0, np.abs(M).max()):
        raise ModelError(f"{name} must be positive semidefinite")


def stage_costs(cost: CostModel, X: np.ndarray, U: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Running costs ``(..., N)`` and terminal costs ``(...)`` of stacked trajectories."""
    N = U.shape[-2]
    batch = U.shape[:-2]
    n = np.broadcast_to(np.arange(N), batch + (N,)).reshape(-1)
    with np.errstate(all="ignore"):
        run = np.asarray(cost.running(X[..., :-1, :].reshape(-1, X.shape[-1]),
                                      U.reshape(-1, U.shape[-1]), n), dtype=float)
        xN = X[..., -1, :].reshape(-1, X.shape[-1])
        term = np.array([cost.terminal(x) for x in xN], dtype=float)
    return run.reshape(batch + (N,)), term.reshape(batch)


def evaluate_many(cost: CostModel, X: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Total cost of each stacked trajectory; NaN marks a failed evaluation."""
    run, term = stage_costs(cost, X, U)
    total = run.sum(axis=-1) + term
    return np.where(np.isfinite(total), total, np.nan)


def evaluate(cost: CostModel, traj: Trajectory) -> float:
    """Total cost ``Phi(x_N) + sum_n L_n(x_n, u_n, n)``."""
    run, term = stage_costs(cost, traj.X, traj.U)
    bad = ~np.isfinite(run)
    if bad.any():
        n = int(np.argmax(bad))
        raise CostEvaluationError(f"non-finite running cost at stage {n}", stage=n)
    if not np.isfinite(term):
        raise CostEvaluationError("non-finite terminal cost", stage=traj.N)
    return float(run.sum() + term)


def expand_running(cost: CostModel, x: np.ndarray, u: np.ndarray, n: np.ndarray):
    """Symmetrized running-cost expansion ``(c, q, r, Q, R, P)`` at flat stage points."""
    c, q, r, Q, R, P = cost.running_expansion(x, u, n)
    K, m, p = x.shape[0], x.shape[1], u.shape[1]
    Q = np.broadcast_to(np.asarray(Q, float), (K, m, m))
    R = np.broadcast_to(np.asarray(R, float), (K, p, p))
    Q = 0.5 * (Q + np.swapaxes(Q, -1, -2))
    R = 0.5 * (R + np.swapaxes(R, -1, -2))
    try:
        np.linalg.cholesky(R)
    except np.linalg.LinAlgError:
        bad = np.linalg.eigvalsh(R).min(axis=-1) <= 0
        raise ModelError(
            f"R_n not positive definite at stage {int(np.asarray(n)[bad][0])}") from None
    return (np.asarray(c, float).reshape(K), np.asarray(q, float).reshape(K, m),
            np.asarray(r, float).reshape(K, p), Q, R,
            np.broadcast_to(np.asarray(P, float), (K, p, m)))


def expand_terminal(cost: CostModel, x: np.ndarray):
    """Symmetrized terminal expansion ``(cN, qN, QN)``."""
    cN, qN, QN = cost.terminal_expansion(x)
    QN = np.asarray(QN, float)
    return float(cN), np.asarray(qN, float), 0.5 * (QN + QN.T)


def quadratize_many(cost: CostModel, X: np.ndarray, U: np.ndarray) -> CostExpansion:
    """Second-order expansion (symmetrized) around stacked trajectories.

    ``X`` is ``(..., N+1, m)`` and ``U`` is ``(..., N, p)``; every field of the
    result carries the same leading shape.
    """
    batch, N = U.shape[:-2], U.shape[-2]
    m, p = X.shape[-1], U.shape[-1]
    n = np.broadcast_to(np.arange(N), batch + (N,)).reshape(-1)
    c, q, r, Q, R, P = expand_running(cost, X[..., :-1, :].reshape(-1, m),
                                      U.reshape(-1, p), n)
    terms = [expand_terminal(cost, x) for x in X[..., -1, :].reshape(-1, m)]
    cN = np.array([t[0] for t in terms]).reshape(batch)
    qN = np.array([t[1] for t in terms]).reshape(batch + (m,))
    QN = np.array([t[2] for t in terms]).reshape(batch + (m, m))
    return CostExpansion(c.reshape(batch + (N,)), q.reshape(batch + (N, m)),
                         r.reshape(batch + (N, p)), Q.reshape(batch + (N, m, m)),
                         R.reshape(batch + (N, p, p)), P.reshape(batch + (N, p, m)),
                         cN if batch else float(cN), qN, QN)


def quadratize(cost: CostModel, traj: Trajectory) -> CostExpansion:
    """Second-order expansion of the cost around ``traj`` (symmetrized)."""
    return quadratize_many(cost, traj.X, traj.U)
