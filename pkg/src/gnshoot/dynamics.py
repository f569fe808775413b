"""Discrete flow maps obtained by fixed-step integration of continuous dynamics.

Every routine here works on batches: states have shape ``(..., m)`` and
controls ``(..., p)``. Rolling out several shooting intervals therefore costs
one batched integrator step per stage of the *longest* interval, which is how
the interval rollouts are executed concurrently.

Sensitivities are exact for the discrete map: the Jacobians of the vector
field are chained through every Runge-Kutta stage and substep, so the linear
model used by the Riccati sweep agrees with the simulated rollout to machine
precision.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from gnshoot.core import ConfigurationError, DimensionError, IntegrationDivergenceError

SCHEMES = ("rk4", "euler")


class DynamicsModel:
    """Continuous-time vector field ``dx/dt = f(x, u)``.

    Subclasses implement :meth:`f` for batched inputs and may override
    :meth:`jacobians` with analytic derivatives; the default uses central
    finite differences of :meth:`f`.
    """

    state_dim: int
    control_dim: int
    name: str = "model"

    def f(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def jacobians(self, x: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return fd_jacobians(self.f, x, u)


class FunctionDynamics(DynamicsModel):
    """Wraps plain callables as a :class:`DynamicsModel`.

    ``f(x, u)`` must accept batched arrays. ``jac(x, u)``, if given, returns
    ``(df/dx, df/du)`` with shapes ``(..., m, m)`` and ``(..., m, p)``.
    """

    def __init__(self, f: Callable, state_dim: int, control_dim: int,
                 jac: Callable | None = None, name: str = "custom") -> None:
        self._f = f
        self._jac = jac
        self.state_dim = state_dim
        self.control_dim = control_dim
        self.name = name

    def f(self, x, u):
        return self._f(x, u)

    def jacobians(self, x, u):
        if self._jac is None:
            return fd_jacobians(self._f, x, u)
        return self._jac(x, u)


def fd_jacobians(f: Callable, x: np.ndarray, u: np.ndarray,
                 rel_step: float = 6e-6) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    m, p = x.shape[-1], u.shape[-1]
    fx = np.empty(x.shape[:-1] + (m, m))
    fu = np.empty(x.shape[:-1] + (m, p))
    for i in range(m):
        h = rel_step * np.maximum(1.0, np.abs(x[..., i]))
        e = np.zeros_like(x)
        e[..., i] = h
        fx[..., :, i] = (f(x + e, u) - f(x - e, u)) / (2.0 * h[..., None])
    for i in range(p):
        h = rel_step * np.maximum(1.0, np.abs(u[..., i]))
        e = np.zeros_like(u)
        e[..., i] = h
        fu[..., :, i] = (f(x, u + e) - f(x, u - e)) / (2.0 * h[..., None])
    return fx, fu


@dataclass(frozen=True)
class Integrator:
    dt: float
    scheme: str = "rk4"
    substeps: int = 1

    def __post_init__(self) -> None:
        if not self.dt > 0:
            raise ConfigurationError(f"integrator dt must be > 0, got {self.dt}")
        if self.substeps < 1:
            raise ConfigurationError(f"substeps must be >= 1, got {self.substeps}")
        if self.scheme not in SCHEMES:
            raise ConfigurationError(f"unknown integration scheme {self.scheme!r}")


class StageSensitivity(NamedTuple):
    A: np.ndarray
    B: np.ndarray


def _flow(model: DynamicsModel, integ: Integrator, x: np.ndarray, u: np.ndarray,
          sens: bool):
    """Integrate one control stage with zero-order-hold ``u``.

    Returns ``(x_next, A, B)``; ``A`` and ``B`` are None unless ``sens``.
    """
    h = integ.dt / integ.substeps
    I = _eye(x.shape[-1])
    Phi = Psi = None  # None encodes identity / zero before the first substep
    f = model.f
    for _ in range(integ.substeps):
        if integ.scheme == "euler":
            k1 = f(x, u)
            if sens:
                Jx, Ju = model.jacobians(x, u)
                dx = Jx if Phi is None else Jx @ Phi
                du = Ju if Psi is None else Jx @ Psi + Ju
                Phi = (I if Phi is None else Phi) + h * dx
                Psi = h * du if Psi is None else Psi + h * du
            x = x + h * k1
            continue

        k1 = f(x, u)
        x2 = x + (0.5 * h) * k1
        k2 = f(x2, u)
        x3 = x + (0.5 * h) * k2
        k3 = f(x3, u)
        x4 = x + h * k3
        k4 = f(x4, u)
        if sens:
            P0 = I if Phi is None else Phi
            J1x, J1u = model.jacobians(x, u)
            J2x, J2u = model.jacobians(x2, u)
            J3x, J3u = model.jacobians(x3, u)
            J4x, J4u = model.jacobians(x4, u)
            d1x = J1x @ P0
            d2x = J2x @ (P0 + (0.5 * h) * d1x)
            d3x = J3x @ (P0 + (0.5 * h) * d2x)
            d4x = J4x @ (P0 + h * d3x)
            if Psi is None:
                d1u = J1u
                d2u = J2x @ ((0.5 * h) * d1u) + J2u
                d3u = J3x @ ((0.5 * h) * d2u) + J3u
                d4u = J4x @ (h * d3u) + J4u
                Psi = (h / 6.0) * (d1u + 2.0 * d2u + 2.0 * d3u + d4u)
            else:
                d1u = J1x @ Psi + J1u
                d2u = J2x @ (Psi + (0.5 * h) * d1u) + J2u
                d3u = J3x @ (Psi + (0.5 * h) * d2u) + J3u
                d4u = J4x @ (Psi + h * d3u) + J4u
                Psi = Psi + (h / 6.0) * (d1u + 2.0 * d2u + 2.0 * d3u + d4u)
            Phi = P0 + (h / 6.0) * (d1x + 2.0 * d2x + 2.0 * d3x + d4x)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x, Phi, Psi


@functools.lru_cache(maxsize=None)
def _eye(m: int) -> np.ndarray:
    eye = np.eye(m)
    eye.flags.writeable = False
    return eye


def _check_inputs(model: DynamicsModel, x, u):
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape[-1] != model.state_dim or u.shape[-1] != model.control_dim:
        raise DimensionError(
            f"expected state dim {model.state_dim} and control dim "
            f"{model.control_dim}, got {x.shape} and {u.shape}")
    return x, u


def step(model: DynamicsModel, integ: Integrator, x, u, *, stage: int | None = None) -> np.ndarray:
    """State after one control stage."""
    x, u = _check_inputs(model, x, u)
    with np.errstate(all="ignore"):  # non-finite results are reported below
        x_next, _, _ = _flow(model, integ, x, u, sens=False)
    if not np.all(np.isfinite(x_next)):
        raise IntegrationDivergenceError(
            f"non-finite state after stage {stage}", stage=stage)
    return x_next


def step_with_sensitivity(model: DynamicsModel, integ: Integrator, x, u, *,
                          stage: int | None = None) -> tuple[np.ndarray, StageSensitivity]:
    """State after one stage plus ``A = dF/dx`` and ``B = dF/du`` of the discrete map."""
    x, u = _check_inputs(model, x, u)
    with np.errstate(all="ignore"):
        x_next, A, B = _flow(model, integ, x, u, sens=True)
    if not np.all(np.isfinite(x_next)):
        raise IntegrationDivergenceError(
            f"non-finite state after stage {stage}", stage=stage)
    return x_next, StageSensitivity(A, B)


class IntervalRollout(NamedTuple):
    """Result of rolling out a set of shooting intervals over a horizon.

    ``X`` holds the visited state at every covered stage (interval starts are
    the supplied start states), ``U`` the applied controls, ``X_end`` the
    integrated end state of each interval and ``A``/``B`` the stage
    sensitivities at the visited ``(x, u)`` pairs.
    """

    X: np.ndarray
    U: np.ndarray
    X_end: np.ndarray
    A: np.ndarray | None
    B: np.ndarray | None
    diverged: np.ndarray | None = None


def rollout_intervals(model: DynamicsModel, integ: Integrator, starts, lengths,
                      x_starts: np.ndarray, U: np.ndarray, *,
                      feedforward: np.ndarray | None = None,
                      gains: np.ndarray | None = None,
                      X_ref: np.ndarray | None = None,
                      U_ref: np.ndarray | None = None,
                      sensitivities: bool = True,
                      stage_offset: int = 0,
                      on_divergence: str = "raise") -> IntervalRollout:
    """Integrate several shooting intervals in lockstep.

    ``U``, ``feedforward``, ``gains``, ``X_ref`` and ``U_ref`` are indexed by
    the stage relative to ``stage_offset``. The first control of each interval
    is ``U[start]``. Interior controls are ``U[n]`` in open loop; with
    ``gains`` they follow ``U_ref[n] + feedforward[n] + gains[n] (x_n - X_ref[n])``.
    """
    starts = np.asarray(starts, dtype=int)
    lengths = np.asarray(lengths, dtype=int)
    x = np.array(x_starts, dtype=float).reshape(len(starts), model.state_dim)
    U = np.asarray(U, dtype=float)
    n_stages = U.shape[0]
    m, p = model.state_dim, model.control_dim
    closed_loop = gains is not None
    if closed_loop:
        if X_ref is None or U_ref is None:
            raise ValueError("closed-loop rollout needs X_ref and U_ref")
        ff = np.zeros_like(U) if feedforward is None else np.asarray(feedforward, float)

    X_out = np.full((n_stages, m), np.nan)
    U_out = np.full((n_stages, p), np.nan)
    X_end = np.empty((len(starts), m))
    A_out = np.full((n_stages, m, m), np.nan) if sensitivities else None
    B_out = np.full((n_stages, m, p), np.nan) if sensitivities else None

    diverged = np.zeros(len(starts), dtype=bool)
    active = np.arange(len(starts))
    for j in range(int(lengths.max()) if len(lengths) else 0):
        keep = lengths[active] > j
        if not keep.all():
            x = x[keep]
            active = active[keep]
        idx = starts[active] + j
        with np.errstate(all="ignore"):
            if j == 0 or not closed_loop:
                u = U[idx]
            else:
                dx = x - X_ref[idx]
                u = U_ref[idx] + ff[idx] + (gains[idx] @ dx[..., None])[..., 0]
            X_out[idx] = x
            U_out[idx] = u
            x, A, B = _flow(model, integ, x, u, sens=sensitivities)
        if sensitivities:
            A_out[idx] = A
            B_out[idx] = B
        bad = ~np.all(np.isfinite(x), axis=-1)
        if bad.any() and on_divergence == "flag":
            diverged[active[bad]] = True
        elif bad.any():
            k = int(active[np.argmax(bad)])
            stage = int(starts[k] + j) + stage_offset
            raise IntegrationDivergenceError(
                f"rollout diverged in interval {k} at stage {stage}",
                stage=stage, interval=k)
        ends = lengths[active] == j + 1
        if ends.any():
            X_end[active[ends]] = x[ends]
    return IntervalRollout(X_out, U_out, X_end, A_out, B_out, diverged)


def rollout_interval(model: DynamicsModel, integ: Integrator, x_start, controls, *,
                     policy: tuple[np.ndarray, np.ndarray] | None = None,
                     reference: tuple[np.ndarray, np.ndarray] | None = None,
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Roll out a single shooting interval.

    ``policy`` is ``(feedforward, gains)`` and ``reference`` is
    ``(X_ref, U_ref)``, all indexed by the interval's inner stage. Returns the
    ``l + 1`` visited states and the ``l`` applied controls.
    """
    controls = np.asarray(controls, dtype=float).reshape(-1, model.control_dim)
    n = controls.shape[0]
    kw = {}
    if policy is not None:
        if reference is None:
            raise ValueError("closed-loop rollout needs a reference trajectory")
        kw = dict(feedforward=policy[0], gains=policy[1],
                  X_ref=reference[0], U_ref=reference[1])
    res = rollout_intervals(model, integ, [0], [n], np.asarray(x_start, float)[None],
                            controls, sensitivities=False, **kw)
    states = np.vstack([res.X, res.X_end])
    return states, res.U
