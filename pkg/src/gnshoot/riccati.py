"""Backward Riccati sweep for LQ subproblems with defects.

The recursion runs in a compiled kernel. It accepts stacks of independent
subproblems: every array of the :class:`~gnshoot.lq.LQSubproblem` may carry
the same leading batch shape, and the returned :class:`RiccatiSolution`
carries it too.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from gnshoot.core import NonConvexityError
from gnshoot.lq import LQSubproblem


@dataclass(frozen=True)
class Regularization:
    """Levenberg-style ``mu I`` added to ``H_n`` when its Cholesky factorization fails."""

    mu0: float = 1e-6
    factor: float = 10.0
    mu_max: float = 1e6


@dataclass(frozen=True)
class RiccatiSolution:
    l: np.ndarray        # (N, p) feedforward
    L: np.ndarray        # (N, p, m) feedback gain
    H: np.ndarray        # (N, p, p), regularized if mu > 0
    G: np.ndarray        # (N, p, m)
    h: np.ndarray        # (N, p)
    S: np.ndarray        # (N+1, m, m)
    s: np.ndarray        # (N+1, m)
    s_const: np.ndarray  # (N+1,) constant term of the value function
    mu: np.ndarray       # (N,) regularization applied per stage

    def take(self, i) -> RiccatiSolution:
        """Solution of batch member ``i``."""
        return RiccatiSolution(*(a[i] for a in
                                 (self.l, self.L, self.H, self.G, self.h,
                                  self.S, self.s, self.s_const, self.mu)))


@numba.njit(cache=True, nogil=True)
def _cholesky_into(H, C):
    """Lower Cholesky factor of ``H`` written to ``C``; False if not PD."""
    p = H.shape[0]
    for i in range(p):
        for j in range(i + 1):
            acc = H[i, j]
            for k in range(j):
                acc -= C[i, k] * C[j, k]
            if i == j:
                if not acc > 0.0:
                    return False
                C[i, i] = np.sqrt(acc)
            else:
                C[i, j] = acc / C[j, j]
        for j in range(i + 1, p):
            C[i, j] = 0.0
    return True


@numba.njit(cache=True, nogil=True)
def _cholesky_solve(C, X):
    """Overwrite ``X`` with ``(C C')^{-1} X`` by two triangular solves."""
    p, k = X.shape
    for col in range(k):
        for i in range(p):
            acc = X[i, col]
            for j in range(i):
                acc -= C[i, j] * X[j, col]
            X[i, col] = acc / C[i, i]
        for i in range(p - 1, -1, -1):
            acc = X[i, col]
            for j in range(i + 1, p):
                acc -= C[j, i] * X[j, col]
            X[i, col] = acc / C[i, i]


@numba.njit(cache=True, nogil=True)
def _sweep_kernel(A, B, d, Q, q, c, R, r, P, QN, qN, cN, mu0, factor, mu_max,
                  l, L, Hs, Gs, hs, S, s, v, mus, fail):
    K, N, m, _ = A.shape
    p = B.shape[3]
    C = np.empty((p, p))
    H = np.empty((p, p))
    rhs = np.empty((p, m + 1))
    Sd = np.empty(m)
    sSd = np.empty(m)
    BtS = np.empty((p, m))
    AtS = np.empty((m, m))
    HL = np.empty((p, m))
    Hl = np.empty(p)
    w = np.empty(p)
    for b in range(K):
        S[b, N] = QN[b]
        s[b, N] = qN[b]
        v[b, N] = cN[b]
        for n in range(N - 1, -1, -1):
            An, Bn, dn = A[b, n], B[b, n], d[b, n]
            S1, s1 = S[b, n + 1], s[b, n + 1]
            for i in range(m):
                acc = 0.0
                for j in range(m):
                    acc += S1[i, j] * dn[j]
                Sd[i] = acc
                sSd[i] = s1[i] + acc
            for i in range(p):
                acc = r[b, n, i]
                for j in range(m):
                    acc += Bn[j, i] * sSd[j]
                rhs[i, 0] = acc
                for j in range(m):
                    acc = 0.0
                    for k in range(m):
                        acc += Bn[k, i] * S1[k, j]
                    BtS[i, j] = acc
            for i in range(p):
                for j in range(m):
                    acc = P[b, n, i, j]
                    for k in range(m):
                        acc += BtS[i, k] * An[k, j]
                    rhs[i, j + 1] = acc
                for j in range(p):
                    acc = R[b, n, i, j]
                    for k in range(m):
                        acc += BtS[i, k] * Bn[k, j]
                    H[i, j] = acc
            Hs[b, n] = H
            hs[b, n] = rhs[:, 0]
            Gs[b, n] = rhs[:, 1:]
            mu = 0.0
            while not _cholesky_into(H, C):
                mu = mu0 if mu == 0.0 else mu * factor
                if mu > mu_max:
                    break
                for i in range(p):
                    H[i, i] = Hs[b, n, i, i] + mu
            if mu > mu_max:
                fail[b] = n
                break
            mus[b, n] = mu
            Hs[b, n] = H
            _cholesky_solve(C, rhs)
            ln, Ln, h, G = l[b, n], L[b, n], hs[b, n], Gs[b, n]
            for i in range(p):
                ln[i] = -rhs[i, 0]
                for j in range(m):
                    Ln[i, j] = -rhs[i, j + 1]
            for i in range(p):
                acc = 0.0
                for j in range(p):
                    acc += H[i, j] * ln[j]
                Hl[i] = acc
                w[i] = h[i] + acc
                for j in range(m):
                    acc = 0.0
                    for k in range(p):
                        acc += H[i, k] * Ln[k, j]
                    HL[i, j] = acc
            for i in range(m):
                for j in range(m):
                    acc = 0.0
                    for k in range(m):
                        acc += An[k, i] * S1[k, j]
                    AtS[i, j] = acc
            Sn, sn = S[b, n], s[b, n]
            for i in range(m):
                for j in range(m):
                    acc = Q[b, n, i, j]
                    for k in range(m):
                        acc += AtS[i, k] * An[k, j]
                    for k in range(p):
                        acc -= Ln[k, i] * HL[k, j]
                    Sn[i, j] = acc
                acc = q[b, n, i]
                for k in range(m):
                    acc += An[k, i] * sSd[k]
                for k in range(p):
                    acc += G[k, i] * ln[k] + Ln[k, i] * w[k]
                sn[i] = acc
            for i in range(m):
                for j in range(i):
                    sym = 0.5 * (Sn[i, j] + Sn[j, i])
                    Sn[i, j] = sym
                    Sn[j, i] = sym
            acc = c[b, n] + v[b, n + 1]
            for i in range(m):
                acc += dn[i] * s1[i] + 0.5 * dn[i] * Sd[i]
            for i in range(p):
                acc += ln[i] * (h[i] + 0.5 * Hl[i])
            v[b, n] = acc


def _flat(a, batch, core):
    return np.ascontiguousarray(np.broadcast_to(a, batch + core), dtype=float).reshape((-1,) + core)


def backward_sweep(lq: LQSubproblem, reg: Regularization | None = None) -> RiccatiSolution:
    """Solve the LQ subproblem backwards in time for affine feedback policies.

    ``H_n`` is factorized by Cholesky; on failure ``mu I`` is added with ``mu``
    growing geometrically up to ``reg.mu_max`` before giving up.
    """
    reg = reg or Regularization()
    batch = lq.A.shape[:-3]
    N, m, p = lq.N, lq.m, lq.p
    ins = [_flat(lq.A, batch, (N, m, m)), _flat(lq.B, batch, (N, m, p)),
           _flat(lq.d, batch, (N, m)), _flat(lq.Q, batch, (N, m, m)),
           _flat(lq.q, batch, (N, m)), _flat(lq.c, batch, (N,)),
           _flat(lq.R, batch, (N, p, p)), _flat(lq.r, batch, (N, p)),
           _flat(lq.P, batch, (N, p, m)), _flat(lq.QN, batch, (m, m)),
           _flat(lq.qN, batch, (m,)), _flat(lq.cN, batch, ())]
    K = ins[0].shape[0]
    outs = [np.empty((K, N, p)), np.empty((K, N, p, m)), np.empty((K, N, p, p)),
            np.empty((K, N, p, m)), np.empty((K, N, p)), np.empty((K, N + 1, m, m)),
            np.empty((K, N + 1, m)), np.empty((K, N + 1)), np.zeros((K, N))]
    fail = np.full(K, -1, dtype=np.int64)
    _sweep_kernel(*ins, float(reg.mu0), float(reg.factor), float(reg.mu_max), *outs, fail)
    if (fail >= 0).any():
        n = int(fail[fail >= 0].max())
        raise NonConvexityError(
            f"H_n not positive definite at stage {n} even with mu = {reg.mu_max:g}", stage=n)
    return RiccatiSolution(*(o.reshape(batch + o.shape[1:]) for o in outs))


def predicted_cost_change(sol: RiccatiSolution, lq: LQSubproblem):
    """Change of the LQ cost model under the full step with ``dx_0 = 0``."""
    out = sol.s_const[..., 0] - lq.c.sum(axis=-1) - lq.cN
    return float(out) if np.ndim(out) == 0 else out
