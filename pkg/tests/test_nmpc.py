import numpy as np
import pytest

from gnshoot.bench import REFERENCE_SETTINGS, scalar_unstable
from gnshoot.core import Trajectory
from gnshoot.cost import evaluate
from gnshoot.dynamics import step
from gnshoot.nmpc import (
    PlantConfig,
    create_controller,
    feedback_step,
    preparation_step,
    run_closed_loop,
)
from gnshoot.solver import ILQR, VariantConfig

ILQR_GNMS5 = VariantConfig(5, True)
LQ_FIELDS = ("A", "B", "D", "c", "q", "r", "Q", "R", "P", "qN", "QN")


def plant_for(pb):
    return PlantConfig(pb.dynamics, pb.integrator)


def policy_cost(pb, policy, x0):
    """Cost of applying the published feedback policy to the model from ``x0``."""
    X, U, x = [x0], [], x0
    for n in range(pb.N):
        u = policy.control(x, n)
        x = step(pb.dynamics, pb.integrator, x, u)
        X.append(x)
        U.append(u)
    return evaluate(pb.cost, Trajectory(np.array(X), np.array(U)))


@pytest.fixture(scope="module")
def converged():
    pb = scalar_unstable()
    return pb, create_controller(pb, ILQR_GNMS5, settings=REFERENCE_SETTINGS)


@pytest.mark.parametrize("variant", [ILQR, VariantConfig(5, False), ILQR_GNMS5],
                         ids=lambda v: v.label)
def test_measurement_on_plan_leaves_policy_unchanged(variant):
    pb = scalar_unstable()
    ctl = create_controller(pb, variant, settings=REFERENCE_SETTINGS)
    X0, U0 = ctl.X.copy(), ctl.U.copy()
    policy, rec = feedback_step(ctl, X0[0])
    assert rec.ok
    assert np.abs(policy.U - U0).max() < 1e-10
    assert np.abs(policy.X - X0).max() < 1e-10


def test_perturbation_at_origin_is_counteracted():
    pb = scalar_unstable(x_init=(0.0,))
    ctl = create_controller(pb, ILQR_GNMS5)
    assert np.abs(ctl.U).max() < 1e-12
    policy, _ = feedback_step(ctl, np.array([0.1]))
    du0 = policy.U[0, 0] - 0.0
    assert du0 < 0
    # with x_0 re-anchored and already folded into U_0, the update is u_0 = l_0 + L_0 dx
    assert np.sign(du0) == np.sign(policy.l[0, 0] + ctl.L[0, 0, 0] * 0.1)


def test_feedback_phase_is_cheaper_than_full_iteration():
    pb = scalar_unstable(N=125, dt=0.024)
    ctl = create_controller(pb, VariantConfig(25, True))
    fb, full = [], []
    for _ in range(30):
        _, rec = feedback_step(ctl, ctl.X[0])
        t = rec.latency_ms
        import time
        t0 = time.perf_counter()
        preparation_step(ctl)
        fb.append(t)
        full.append(t + (time.perf_counter() - t0) * 1e3)
    assert np.median(fb) < np.median(full)


def test_repeated_cycles_are_idempotent(converged):
    pb, _ = converged
    ctl = create_controller(pb, ILQR_GNMS5, settings=REFERENCE_SETTINGS)
    published = []
    prepared = []
    for _ in range(4):
        policy, _ = feedback_step(ctl, ctl.X[0])
        published.append(policy.U.copy())
        preparation_step(ctl)
        prepared.append({k: np.array(getattr(ctl, k), copy=True) for k in LQ_FIELDS})
    for a, b in zip(published, published[1:]):
        assert np.abs(a - b).max() < 1e-8
    for a, b in zip(prepared, prepared[1:]):
        for k in LQ_FIELDS:
            assert np.abs(a[k] - b[k]).max() < 1e-10


def test_parallel_preparation_is_bit_identical():
    pb = scalar_unstable()
    states = []
    for threads in (1, 3):
        ctl = create_controller(pb, VariantConfig(10, True), threads=threads)
        for x in (1.52, 1.45, 1.4):
            feedback_step(ctl, np.array([x]))
            preparation_step(ctl)
        states.append(ctl)
        ctl.close()
    a, b = states
    for k in LQ_FIELDS + ("X", "U", "L"):
        assert np.array_equal(getattr(a, k), getattr(b, k))


def test_warm_start_beats_cold_iteration():
    pb = scalar_unstable()
    x_meas = np.array([1.6])
    warm = create_controller(pb, ILQR_GNMS5, settings=REFERENCE_SETTINGS)
    cold = create_controller(pb.with_x_init(x_meas), ILQR_GNMS5, presolve=False)
    warm_policy, _ = feedback_step(warm, x_meas)
    cold_policy, _ = feedback_step(cold, x_meas)
    assert policy_cost(pb, warm_policy, x_meas) < policy_cost(pb, cold_policy, x_meas)


def test_failed_cycle_falls_back_to_previous_policy():
    pb = scalar_unstable()
    ctl = create_controller(pb, ILQR_GNMS5)
    good, rec = feedback_step(ctl, np.array([1.5]))
    assert rec.ok
    preparation_step(ctl)
    X_before = ctl.X.copy()
    policy, rec = feedback_step(ctl, np.array([1e3]))
    assert not rec.ok and "diverged" in rec.message
    assert policy is good
    assert np.array_equal(ctl.X, X_before)


def test_undisturbed_closed_loop_tracks_plan(converged):
    pb, _ = converged
    ctl = create_controller(pb, ILQR_GNMS5, settings=REFERENCE_SETTINGS)
    planned = evaluate(pb.cost, ctl.trajectory())
    res = run_closed_loop(plant_for(pb), ctl, pb.N * pb.dt)
    assert res.status == "ok" and len(res.rows) == pb.N
    assert res.accumulated_cost == pytest.approx(planned, rel=0.01)


def test_closed_loop_is_deterministic_across_thread_counts():
    pb = scalar_unstable()
    rows = []
    for threads in (1, 4):
        ctl = create_controller(pb, ILQR_GNMS5, threads=threads)
        res = run_closed_loop(PlantConfig(pb.dynamics, pb.integrator, noise_std=0.01, seed=5),
                              ctl, 0.5)
        ctl.close()
        rows.append([{k: v for k, v in r.items() if not k.endswith("_ms")} for r in res.rows])
    assert rows[0] == rows[1]


def test_plant_divergence_ends_run_with_partial_stats():
    pb = scalar_unstable()
    res = run_closed_loop(plant_for(pb), create_controller(pb, ILQR_GNMS5), 1.0, x0=[50.0])
    assert res.status == "plant_diverged"
    assert 0 < len(res.rows) < 100
    assert res.failed_cycles > 0


def test_zero_duration_produces_empty_log():
    pb = scalar_unstable()
    res = run_closed_loop(plant_for(pb), create_controller(pb, ILQR_GNMS5), 0.0)
    assert res.rows == [] and res.accumulated_cost == 0.0


def test_shift_duplicates_terminal_entries():
    pb = scalar_unstable()
    ctl = create_controller(pb, VariantConfig(5, False), shift=True)
    feedback_step(ctl, ctl.X[0])
    U_pub = ctl.published.U.copy()
    preparation_step(ctl)
    assert np.array_equal(ctl.U[:-1, 0], U_pub[1:, 0])
    assert ctl.U[-1, 0] == U_pub[-1, 0]
