import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gnshoot.core import NonConvexityError
from gnshoot.lq import LQSubproblem
from gnshoot.oracle import solve_kkt
from gnshoot.riccati import Regularization, backward_sweep, predicted_cost_change
from gnshoot.sweep import forward_arrays
from helpers import random_lq


def scalar_lq(d=0.0, R=1.0, B=1.0):
    one = np.ones((1, 1, 1))
    return LQSubproblem(A=one, B=B * one, d=np.full((1, 1), d), Q=np.zeros((1, 1, 1)),
                        q=np.zeros((1, 1)), c=np.zeros(1), R=R * one, r=np.zeros((1, 1)),
                        P=np.zeros((1, 1, 1)), QN=np.ones((1, 1)), qN=np.zeros(1), cN=0.0)


def increments(lq, sol):
    N, m, p = lq.N, lq.m, lq.p
    return forward_arrays(lq.A, lq.B, lq.d, sol.l, sol.L, np.zeros((N + 1, m)),
                          np.zeros((N, p)), np.zeros(m))


def test_scalar_example_without_defect():
    sol = backward_sweep(scalar_lq())
    assert (sol.H[0, 0, 0], sol.G[0, 0, 0], sol.h[0, 0]) == (2.0, 1.0, 0.0)
    assert sol.L[0, 0, 0] == pytest.approx(-0.5, abs=1e-15)
    assert sol.l[0, 0] == 0.0
    assert sol.S[0, 0, 0] == pytest.approx(0.5, abs=1e-15)


def test_scalar_example_with_defect():
    lq = scalar_lq(d=1.0)
    sol = backward_sweep(lq)
    assert sol.h[0, 0] == 1.0
    assert sol.l[0, 0] == pytest.approx(-0.5, abs=1e-15)
    assert sol.L[0, 0, 0] == pytest.approx(-0.5, abs=1e-15)
    assert predicted_cost_change(sol, lq) == pytest.approx(0.25, abs=1e-15)
    assert solve_kkt(lq).objective_change == pytest.approx(0.25, abs=1e-14)


def test_stationary_problem_has_no_feedforward(rng):
    lq = random_lq(rng, N=8, m=3, p=2, defects=False)
    lq = LQSubproblem(**{**lq.__dict__, "q": 0 * lq.q, "r": 0 * lq.r, "qN": 0 * lq.qN})
    sol = backward_sweep(lq)
    assert np.all(sol.l == 0)
    assert predicted_cost_change(sol, lq) == pytest.approx(0.0, abs=1e-12)


def test_terminal_conditions_and_gain_identities(rng):
    lq = random_lq(rng, N=10, m=3, p=2)
    sol = backward_sweep(lq)
    assert np.array_equal(sol.S[-1], lq.QN)
    assert np.array_equal(sol.s[-1], lq.qN)
    assert sol.s_const[-1] == lq.cN
    for n in range(lq.N):
        assert np.allclose(sol.H[n] @ sol.l[n], -sol.h[n], rtol=0, atol=1e-11)
        assert np.allclose(sol.H[n] @ sol.L[n], -sol.G[n], rtol=0, atol=1e-11)
        assert np.all(np.linalg.eigvalsh(sol.H[n]) > 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_matches_kkt_oracle(seed):
    lq = random_lq(np.random.default_rng(seed))
    sol = backward_sweep(lq)
    dX, dU = increments(lq, sol)
    ref = solve_kkt(lq)
    assert np.abs(dX - ref.dX).max() < 1e-8
    assert np.abs(dU - ref.dU).max() < 1e-8
    assert predicted_cost_change(sol, lq) == pytest.approx(ref.objective_change, rel=1e-10)


@given(st.integers(0, 2**32 - 1))
def test_defects_leave_feedback_and_curvature_unchanged(seed):
    rng = np.random.default_rng(seed)
    lq = random_lq(rng, N=12)
    plain = LQSubproblem(**{**lq.__dict__, "d": np.zeros_like(lq.d)})
    a, b = backward_sweep(lq), backward_sweep(plain)
    for name in ("L", "H", "G", "S"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


@given(st.integers(0, 2**32 - 1))
def test_value_matrices_symmetric_psd(seed):
    rng = np.random.default_rng(seed)
    lq = random_lq(rng, N=15)
    lq = LQSubproblem(**{**lq.__dict__, "P": np.zeros_like(lq.P)})
    sol = backward_sweep(lq)
    assert np.all(sol.mu == 0)
    for S in sol.S:
        assert np.array_equal(S, S.T)
        assert np.linalg.eigvalsh(S).min() > -1e-9 * max(1.0, np.abs(S).max())


def test_regularization_escalates():
    lq = scalar_lq(R=-1e-7, B=0.0)
    sol = backward_sweep(lq)
    assert sol.mu[0] == pytest.approx(1e-6)
    assert sol.H[0, 0, 0] == pytest.approx(-1e-7 + 1e-6)
    with pytest.raises(NonConvexityError) as info:
        backward_sweep(scalar_lq(R=-1e7, B=0.0))
    assert info.value.stage == 0
    with pytest.raises(NonConvexityError):
        backward_sweep(scalar_lq(R=-1e-7, B=0.0), Regularization(mu0=1e-9, mu_max=1e-8))


def test_batched_sweep_equals_single_sweeps(rng):
    lqs = [random_lq(rng, N=9, m=3, p=2) for _ in range(4)]
    stacked = LQSubproblem(**{k: np.stack([np.asarray(getattr(q, k)) for q in lqs])
                              for k in lqs[0].__dict__})
    batch = backward_sweep(stacked)
    for i, lq in enumerate(lqs):
        single = backward_sweep(lq)
        for name in ("l", "L", "S", "s", "s_const"):
            assert np.array_equal(getattr(batch.take(i), name), getattr(single, name))
    assert np.array_equal(predicted_cost_change(batch, stacked)[2],
                          predicted_cost_change(backward_sweep(lqs[2]), lqs[2]))
