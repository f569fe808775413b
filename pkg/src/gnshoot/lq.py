"""Stage-wise LQ subproblem built around a trajectory snapshot."""

from __future__ import annotations

import json
from dataclasses import dataclass, fields

import numpy as np

from gnshoot.core import DimensionError, OcProblem, Trajectory
from gnshoot.cost import quadratize


@dataclass(frozen=True)
class LQSubproblem:
    """Affine dynamics ``dx' = A dx + B du + d`` and a quadratic cost model.

    ``c`` and ``cN`` are the constant (zeroth-order) cost terms. A stack of
    independent subproblems is represented by giving every field the same
    leading batch shape.
    """

    A: np.ndarray   # (N, m, m)
    B: np.ndarray   # (N, m, p)
    d: np.ndarray   # (N, m)
    Q: np.ndarray   # (N, m, m)
    q: np.ndarray   # (N, m)
    c: np.ndarray   # (N,)
    R: np.ndarray   # (N, p, p)
    r: np.ndarray   # (N, p)
    P: np.ndarray   # (N, p, m)
    QN: np.ndarray  # (m, m)
    qN: np.ndarray  # (m,)
    cN: float

    @property
    def N(self) -> int:
        return self.A.shape[-3]

    @property
    def m(self) -> int:
        return self.A.shape[-1]

    @property
    def p(self) -> int:
        return self.B.shape[-1]

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.A.shape[:-3]

    def take(self, i) -> LQSubproblem:
        """Subproblem of batch member ``i``."""
        kw = {f.name: np.asarray(getattr(self, f.name))[i] for f in fields(self)}
        if np.ndim(kw["cN"]) == 0:
            kw["cN"] = float(kw["cN"])
        return LQSubproblem(**kw)

    def to_dict(self) -> dict:
        return {f.name: np.asarray(getattr(self, f.name)).tolist() for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> LQSubproblem:
        kw = {f.name: np.asarray(data[f.name], dtype=float) for f in fields(cls)}
        kw["cN"] = float(kw["cN"])
        return cls(**kw)

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def from_json(cls, path) -> LQSubproblem:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def objective(self, dX: np.ndarray, dU: np.ndarray) -> float:
        """Value of the quadratic cost model for increments ``dX`` (N+1, m), ``dU`` (N, p)."""
        dx, dxN = dX[:-1], dX[-1]
        val = self.c.sum() + self.cN
        val += np.einsum("ni,ni->", dx, self.q) + np.einsum("ni,ni->", dU, self.r)
        val += 0.5 * np.einsum("ni,nij,nj->", dx, self.Q, dx)
        val += 0.5 * np.einsum("ni,nij,nj->", dU, self.R, dU)
        val += np.einsum("ni,nij,nj->", dU, self.P, dx)
        val += dxN @ self.qN + 0.5 * dxN @ self.QN @ dxN
        return float(val)


def assemble(problem: OcProblem, traj: Trajectory, sens) -> LQSubproblem:
    """LQ data from the rollout sensitivities ``sens = (A, B)`` and the cost expansion."""
    A, B = (np.asarray(a, dtype=float) for a in sens)
    N, m, p = problem.N, problem.m, problem.p
    traj.check(problem)
    if A.shape != (N, m, m) or B.shape != (N, m, p):
        raise DimensionError(f"sensitivities A{A.shape} B{B.shape} do not match problem")
    e = quadratize(problem.cost, traj)
    return LQSubproblem(A=A, B=B, d=traj.D.copy(), Q=e.Q, q=e.q, c=e.c, R=e.R,
                        r=e.r, P=e.P, QN=e.QN, qN=e.qN, cN=e.cN)
