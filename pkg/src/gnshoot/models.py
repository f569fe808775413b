"""Built-in dynamics models. All vector fields and Jacobians are batched."""

from __future__ import annotations

import numpy as np

from gnshoot.dynamics import DynamicsModel


class ScalarUnstable(DynamicsModel):
    """``dx/dt = (1 + x) x + u``: slightly nonlinear and open-loop unstable at 0."""

    state_dim = 1
    control_dim = 1
    name = "scalar_unstable"

    def f(self, x, u):
        return (1.0 + x) * x + u

    def jacobians(self, x, u):
        fx = (1.0 + 2.0 * x)[..., None]
        fu = np.ones(np.shape(x)[:-1] + (1, 1))
        return fx, fu


class Pendulum(DynamicsModel):
    """Torque-driven pendulum, state ``(theta, omega)``; ``theta = 0`` hangs down."""

    state_dim = 2
    control_dim = 1
    name = "pendulum"

    def __init__(self, g: float = 9.81, length: float = 1.0) -> None:
        self.g_over_l = g / length

    def f(self, x, u):
        th, om = x[..., 0], x[..., 1]
        return np.stack([om, -self.g_over_l * np.sin(th) + u[..., 0]], axis=-1)

    def jacobians(self, x, u):
        shape = np.shape(x)[:-1]
        fx = np.zeros(shape + (2, 2))
        fx[..., 0, 1] = 1.0
        fx[..., 1, 0] = -self.g_over_l * np.cos(x[..., 0])
        fu = np.zeros(shape + (2, 1))
        fu[..., 1, 0] = 1.0
        return fx, fu


class CartPole(DynamicsModel):
    """Cart-pole with force input; state ``(pos, theta, vel, omega)``, ``theta = 0`` upright.

    Frictionless point-mass pole. Jacobians fall back to central differences.
    """

    state_dim = 4
    control_dim = 1
    name = "cartpole"

    def __init__(self, m_cart: float = 1.0, m_pole: float = 0.1, length: float = 0.5,
                 g: float = 9.81) -> None:
        self.mc, self.mp, self.l, self.g = m_cart, m_pole, length, g

    def f(self, x, u):
        th, v, om = x[..., 1], x[..., 2], x[..., 3]
        F = u[..., 0]
        s, c = np.sin(th), np.cos(th)
        total = self.mc + self.mp
        tmp = (F + self.mp * self.l * om**2 * s) / total
        alpha = (self.g * s - c * tmp) / (self.l * (4.0 / 3.0 - self.mp * c**2 / total))
        acc = tmp - self.mp * self.l * alpha * c / total
        return np.stack([v, om, acc, alpha], axis=-1)


class LinearModel(DynamicsModel):
    """``dx/dt = Ac x + Bc u``."""

    name = "linear"

    def __init__(self, Ac, Bc) -> None:
        self.Ac = np.atleast_2d(np.asarray(Ac, dtype=float))
        self.Bc = np.atleast_2d(np.asarray(Bc, dtype=float))
        self.state_dim, self.control_dim = self.Bc.shape

    def f(self, x, u):
        return x @ self.Ac.T + u @ self.Bc.T

    def jacobians(self, x, u):
        shape = np.shape(x)[:-1]
        return (np.broadcast_to(self.Ac, shape + self.Ac.shape),
                np.broadcast_to(self.Bc, shape + self.Bc.shape))
