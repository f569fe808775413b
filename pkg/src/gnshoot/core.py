"""Problem and trajectory containers shared by every solver component."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any

import numpy as np

if TYPE_CHECKING:
    from gnshoot.cost import CostModel
    from gnshoot.dynamics import DynamicsModel, Integrator


class GnshootError(Exception):
    """Base class for all errors raised by the package."""


class DimensionError(GnshootError, ValueError):
    pass


class ConfigurationError(GnshootError, ValueError):
    pass


class IntegrationDivergenceError(GnshootError):
    """A rollout produced a non-finite state.

    ``interval`` is the shooting interval index (if known) and ``stage`` the
    control stage at which the state stopped being finite.
    """

    def __init__(self, message: str, *, stage: int | None = None,
                 interval: int | None = None) -> None:
        super().__init__(message)
        self.stage = stage
        self.interval = interval


class CostEvaluationError(GnshootError):
    def __init__(self, message: str, *, stage: int | None = None) -> None:
        super().__init__(message)
        self.stage = stage


class ModelError(GnshootError):
    """The cost or dynamics model violates a precondition (e.g. R not PD)."""


class NonConvexityError(GnshootError):
    """Riccati regularization exceeded its cap at ``stage``."""

    def __init__(self, message: str, *, stage: int) -> None:
        super().__init__(message)
        self.stage = stage


class DegenerateProblemError(GnshootError):
    pass


class InsufficientDataError(GnshootError):
    pass


@dataclass(frozen=True)
class OcProblem:
    """Discrete-time optimal control problem over ``N`` control stages."""

    dynamics: DynamicsModel
    cost: CostModel
    x_init: np.ndarray
    N: int
    dt: float
    integrator: Integrator = field(default=None)  # type: ignore[assignment]
    name: str = ""

    def __post_init__(self) -> None:
        from gnshoot.dynamics import Integrator

        x_init = np.array(self.x_init, dtype=float).reshape(-1)
        object.__setattr__(self, "x_init", x_init)
        x_init.setflags(write=False)
        if self.N < 1:
            raise ConfigurationError(f"N must be >= 1, got {self.N}")
        if not self.dt > 0:
            raise ConfigurationError(f"dt must be > 0, got {self.dt}")
        m, p = self.dynamics.state_dim, self.dynamics.control_dim
        if m < 1 or p < 1:
            raise ConfigurationError(f"invalid dimensions m={m}, p={p}")
        if x_init.shape != (m,):
            raise DimensionError(
                f"x_init has length {x_init.size}, expected state_dim={m}")
        if self.integrator is None:
            object.__setattr__(self, "integrator", Integrator(dt=self.dt))
        elif self.integrator.dt != self.dt:
            raise ConfigurationError(
                f"integrator dt {self.integrator.dt} != problem dt {self.dt}")

    @property
    def m(self) -> int:
        return self.dynamics.state_dim

    @property
    def p(self) -> int:
        return self.dynamics.control_dim

    def with_x_init(self, x_init: Any) -> OcProblem:
        return OcProblem(self.dynamics, self.cost, np.asarray(x_init, float),
                         self.N, self.dt, self.integrator, self.name)


@dataclass(frozen=True)
class Trajectory:
    """States ``X`` (N+1, m), controls ``U`` (N, p) and defects ``D`` (N, m).

    Arrays are copied and frozen on construction, so a trajectory can be
    shared between threads without defensive copies.
    """

    X: np.ndarray
    U: np.ndarray
    D: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        X = np.array(self.X, dtype=float)
        U = np.array(self.U, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if U.ndim == 1:
            U = U[:, None]
        if X.ndim != 2 or U.ndim != 2 or X.shape[0] != U.shape[0] + 1:
            raise DimensionError(
                f"inconsistent trajectory shapes X{X.shape} U{U.shape}")
        if self.D is None:
            D = np.zeros((U.shape[0], X.shape[1]))
        else:
            D = np.array(self.D, dtype=float).reshape(U.shape[0], X.shape[1])
        for a in (X, U, D):
            a.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "D", D)

    @property
    def N(self) -> int:
        return self.U.shape[0]

    def check(self, problem: OcProblem) -> None:
        if self.X.shape != (problem.N + 1, problem.m) or \
                self.U.shape != (problem.N, problem.p):
            raise DimensionError(
                f"trajectory X{self.X.shape} U{self.U.shape} does not match "
                f"problem (N={problem.N}, m={problem.m}, p={problem.p})")


@dataclass(frozen=True)
class IterationRecord:
    iter: int
    cost: float
    defect_l1: float
    update_norm: float
    alpha: float
    wall_ms: float

    def __post_init__(self) -> None:
        if self.defect_l1 < 0 or self.update_norm < 0:
            raise ValueError("defect_l1 and update_norm must be nonnegative")
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")

    CSV_HEADER = ("iter", "cost", "defect_l1", "update_norm", "alpha",
                  "wall_ms")

    def as_row(self) -> tuple:
        return (self.iter, self.cost, self.defect_l1, self.update_norm,
                self.alpha, self.wall_ms)


def total_defect(traj: Trajectory) -> float:
    """Elementwise absolute sum of all defects."""
    return float(np.abs(traj.D).sum())


def control_update_norm(U_new: np.ndarray, U_old: np.ndarray) -> float:
    """Euclidean norm of the stacked control difference."""
    U_new = np.asarray(U_new, dtype=float)
    U_old = np.asarray(U_old, dtype=float)
    if U_new.shape != U_old.shape:
        raise DimensionError(
            f"control sequences differ in shape: {U_new.shape} vs {U_old.shape}")
    return float(np.linalg.norm((U_new - U_old).ravel()))
