import numpy as np
import pytest

from gnshoot.bench import REFERENCE_SETTINGS, STUDY_SETTINGS, cartpole, linear_random, pendulum, \
    scalar_unstable
from gnshoot.core import ConfigurationError, InsufficientDataError, Trajectory
from gnshoot.cost import evaluate
from gnshoot.lq import assemble
from gnshoot.oracle import solve_kkt
from gnshoot.solver import (
    GNMS,
    ILQR,
    SS,
    InterpolateInit,
    LineSearch,
    ProvidedInit,
    SolverSettings,
    SteadyStateInit,
    UnstableInitializationError,
    VariantConfig,
    contraction_rate,
    initialize,
    solve,
    solve_batch,
)
from helpers import consistent_init, interior_stages

ALL_VARIANTS = [SS, ILQR, GNMS, VariantConfig(5, False), VariantConfig(5, True)]


@pytest.mark.parametrize("name,expected", [
    ("SS", (1, False)), ("iLQR", (1, True)), ("GNMS", (None, False)),
    ("GNMS(5)", (5, False)), ("iLQR-GNMS(5)", (5, True)), ("GNMS(N)", (None, False)),
])
def test_variant_parsing(name, expected):
    v = VariantConfig.parse(name)
    assert (v.M, v.closed_loop) == expected
    assert VariantConfig.parse(v.label) == v


@pytest.mark.parametrize("name", ["SS(3)", "iLQR(2)", "DDP", "GNMS(x)"])
def test_variant_parsing_rejects(name):
    with pytest.raises(ConfigurationError):
        VariantConfig.parse(name)


def test_variant_interval_bounds():
    with pytest.raises(ConfigurationError):
        VariantConfig(301, True).resolve_M(300)
    with pytest.raises(ConfigurationError):
        solve(scalar_unstable(), VariantConfig(0, False))


def test_settings_validation():
    with pytest.raises(ConfigurationError):
        SolverSettings(d_max=0)
    with pytest.raises(ConfigurationError):
        SolverSettings(J_rel_min=-1)
    with pytest.raises(ConfigurationError):
        LineSearch(rho=-1)


def test_steady_state_init():
    it = initialize(scalar_unstable(), VariantConfig(5, False), SteadyStateInit())
    assert np.allclose(it.traj.U, -3.75, atol=1e-12)
    assert np.all(it.traj.D == 0)


def test_interpolate_init_ramp_with_defects():
    pb = scalar_unstable()
    it = initialize(pb, GNMS, InterpolateInit(np.zeros(1)))
    assert np.allclose(it.traj.X[:, 0], np.linspace(1.5, 0.0, 301), atol=1e-15)
    assert np.all(it.traj.U == 0)
    assert np.all(np.abs(it.traj.D) > 0)
    it10 = initialize(pb, VariantConfig(10, False), InterpolateInit(np.zeros(1)))
    assert np.all(it10.traj.D[interior_stages(it10.partition)] == 0)
    assert np.all(np.abs(it10.traj.D[list(it10.partition.ends)]) > 0)


def test_long_open_loop_intervals_blow_up():
    # 0.6 s intervals exceed the finite escape time of the open-loop system
    with pytest.raises(UnstableInitializationError):
        initialize(scalar_unstable(), VariantConfig(5, False), InterpolateInit(np.zeros(1)))


def test_unstable_initialization_is_reported():
    with pytest.raises(UnstableInitializationError) as info:
        initialize(scalar_unstable(), SS, InterpolateInit(np.zeros(1)))
    assert info.value.stage is not None


def test_first_feedforward_identical_for_consistent_guess(rng):
    pb = pendulum()
    init = consistent_init(pb, 0.2 * rng.normal(size=(pb.N, 1)))
    first = {}
    for v in ALL_VARIANTS:
        res = solve(pb, v, SolverSettings(max_iters=1), init,
                    callback=lambda info, v=v: first.setdefault(v.label, info.policy.l))
        assert res.initial_defect == 0.0
    ref = first["iLQR"]
    for l in first.values():
        assert np.abs(l - ref).max() < 1e-12


@pytest.mark.parametrize("variant", ALL_VARIANTS, ids=lambda v: v.label)
def test_linear_quadratic_problem_solved_by_first_iteration(variant):
    pb = linear_random(seed=7, N=20)
    init = consistent_init(pb)
    it = initialize(pb, variant, init)
    kkt = solve_kkt(assemble(pb, it.traj, it.sens))
    J_opt = evaluate(pb.cost, it.traj) + kkt.objective_change
    res = solve(pb, variant, None, init)
    assert res.converged
    assert res.records[0].cost == pytest.approx(J_opt, rel=1e-9)
    assert np.abs(res.history[1].U - (it.traj.U + kkt.dU)).max() < 1e-9
    # the second iteration only confirms convergence
    assert res.iterations == 2 and res.records[1].update_norm < 1e-10


def test_already_optimal_init_converges_in_one_iteration():
    pb = scalar_unstable()
    ref = solve(pb, ILQR, REFERENCE_SETTINGS)
    res = solve(pb, ILQR, None, ProvidedInit(ref.traj.X, ref.traj.U, ref.policy.L))
    assert res.converged and res.iterations == 1
    assert res.records[0].update_norm < 1e-10


@pytest.mark.parametrize("variant", [ILQR, GNMS, VariantConfig(5, False), VariantConfig(5, True)],
                         ids=lambda v: v.label)
def test_fixed_point(variant):
    pb = scalar_unstable()
    res = solve(pb, variant, REFERENCE_SETTINGS)
    again = solve(pb, variant, SolverSettings(max_iters=1),
                  ProvidedInit(res.traj.X, res.traj.U, res.policy.L))
    assert again.records[0].update_norm < 1e-10
    assert again.records[0].defect_l1 < 1e-6


def test_converged_status_implies_termination_tests():
    pb = scalar_unstable()
    s = SolverSettings()
    for v in ALL_VARIANTS[1:]:
        res = solve(pb, v, s)
        assert res.converged
        last, prev = res.records[-1].cost, res.records[-2].cost
        assert res.records[-1].defect_l1 < s.d_max
        assert abs(last - prev) / abs(last) < s.J_rel_min


def test_benchmark_variants_agree():
    pb = scalar_unstable()
    costs = [solve(pb, v).cost for v in ALL_VARIANTS[1:]]
    assert max(costs) - min(costs) < 1e-6 * min(costs)


def test_single_shooting_on_unstable_system_fails_cleanly():
    res = solve(scalar_unstable(), SS)
    assert res.status == "unstable_rollout"
    assert res.iterations == 0


@pytest.mark.parametrize("variant", [ILQR, GNMS], ids=lambda v: v.label)
def test_linear_convergence(variant):
    pb = scalar_unstable()
    ref = solve(pb, ILQR, REFERENCE_SETTINGS)
    res = solve(pb, variant, STUDY_SETTINGS)
    err = np.array([np.linalg.norm(U - ref.traj.U) for U in res.U_history])
    tail = err[(err > 1e-11)][-15:]
    ratios = tail[1:] / tail[:-1]
    assert np.all(ratios < 0.9)


def test_line_search_rescues_full_step_divergence():
    pb = cartpole()
    init = InterpolateInit(np.zeros(4))
    assert solve(pb, ILQR, None, init).status == "unstable_rollout"
    res = solve(pb, ILQR, SolverSettings(line_search=LineSearch(enabled=True)), init)
    assert res.converged
    assert min(r.alpha for r in res.records) < 1


@pytest.mark.parametrize("pb,variant,init", [
    (cartpole(), ILQR, InterpolateInit(np.zeros(4))),
    (pendulum(), GNMS, None),
    (pendulum(), VariantConfig(5, True), None),
    (scalar_unstable(), VariantConfig(10, False), InterpolateInit(np.zeros(1))),
], ids=["cartpole-iLQR", "pendulum-GNMS", "pendulum-iLQR-GNMS5", "scalar-GNMS10"])
def test_line_search_never_increases_merit(pb, variant, init):
    ls = LineSearch(enabled=True, rho=10.0)
    res = solve(pb, variant, SolverSettings(line_search=ls), init)
    merit = [res.initial_cost + ls.rho * res.initial_defect] + \
        [r.cost + ls.rho * r.defect_l1 for r in res.records]
    assert np.all(np.diff(merit) < 0)


def test_full_step_tolerates_cost_increase():
    res = solve(scalar_unstable(), GNMS, None, InterpolateInit(np.zeros(1)))
    costs = [res.initial_cost] + [r.cost for r in res.records]
    assert res.converged and np.any(np.diff(costs) > 0)


def test_divergence_guard():
    res = solve(scalar_unstable(), GNMS, SolverSettings(divergence_factor=1.0 + 1e-9),
                InterpolateInit(np.zeros(1)))
    assert res.status == "diverged"


def test_batch_solve_matches_individual_solves(rng):
    pb = scalar_unstable()
    problems = [pb.with_x_init(pb.x_init + 0.1 * rng.normal(size=1)) for _ in range(4)]
    v = VariantConfig(6, True)
    batch = solve_batch(problems, v)
    for p, b in zip(problems, batch):
        single = solve(p, v)
        assert single.status == b.status and single.iterations == b.iterations
        for s_traj, b_traj in zip(single.history, b.history):
            assert np.array_equal(s_traj.U, b_traj.U) and np.array_equal(s_traj.X, b_traj.X)


def test_batch_isolates_failures():
    pb = scalar_unstable()
    problems = [pb, pb.with_x_init([1.6])]
    res = solve_batch(problems, SS, inits=[SteadyStateInit(), InterpolateInit(np.zeros(1))],
                      isolate_failures=True)
    assert res[1].status == "failed"
    assert res[0].status == "unstable_rollout"


def test_callback_and_records():
    seen = []
    res = solve(scalar_unstable(), VariantConfig(5, True), callback=seen.append)
    assert [i.record for i in seen] == res.records
    assert all(isinstance(i.traj, Trajectory) for i in seen)
    assert [r.iter for r in res.records] == list(range(1, res.iterations + 1))


def test_contraction_rate_examples():
    U_star = np.zeros((3, 1))
    iterates = [U_star + 0.5**k * np.ones((3, 1)) / np.sqrt(3) for k in range(10)]
    assert contraction_rate(iterates, U_star) == pytest.approx(0.5, rel=1e-12)
    with pytest.raises(InsufficientDataError):
        contraction_rate([U_star] * 6, U_star)


@pytest.mark.xfail(strict=False, reason="asymptotic rates coincide under exact sensitivities; "
                                        "analysis in notes/decisions.md")
def test_gnms_contracts_faster_than_ilqr():
    pb = scalar_unstable()
    ref = solve(pb, ILQR, REFERENCE_SETTINGS).traj.U
    c_ilqr = contraction_rate(solve(pb, ILQR, STUDY_SETTINGS).U_history, ref)
    c_gnms = contraction_rate(solve(pb, GNMS, STUDY_SETTINGS).U_history, ref)
    assert 0 < c_ilqr < 1 and 0 < c_gnms < 1
    assert c_gnms < c_ilqr
