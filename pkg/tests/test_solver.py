import logging

import numpy as np
import pytest
from instances import certified_steps, random_game, zero_game

from mcgne.certify import StepConfig
from mcgne.game import BoxSet, CouplingConstraint, Dimensions, GameSpec, QuadraticPayoff
from mcgne.graph import ClusterTopology, WeightedGraph
from mcgne.operators import StackedState, StateLayout
from mcgne.oracle import centralized_vgne
from mcgne.solver import (
    TRACE_COLUMNS,
    DivergenceError,
    LockstepError,
    SolverOptions,
    agent_half_step_1,
    agent_half_step_2,
    agent_step,
    fbf_step,
    kkt_residual,
    run,
)

TIGHT = dict(tol_fixed_point=1e-12, tol_consensus=1e-10, max_iters=200_000)


def _random_sync_state(spec, rng, mu_nonneg=True):
    s = StackedState(rng.standard_normal(StateLayout.of(spec).size), StateLayout.of(spec))
    spec.layout.synchronize(s.x_hat, out=s.x_hat)
    if mu_nonneg:
        s.mu[:] = np.abs(s.mu)
    return s


@pytest.fixture(scope="module")
def binding():
    spec = random_game(21, sizes=(2, 2), qdims=(1, 2), w=1, coupling="binding")
    steps = certified_steps(spec)
    trace = run(spec, steps, SolverOptions(**TIGHT))
    return spec, steps, trace


def test_options_validation():
    for bad in (dict(max_iters=0), dict(tol_fixed_point=0.0), dict(tol_consensus=-1.0),
                dict(record_every=0), dict(realization="parallel"), dict(lockstep_tol=0.0)):
        with pytest.raises(ValueError):
            SolverOptions(**bad)


def test_degenerate_game_is_fixed():
    spec = zero_game((1,), (2,))
    s = StackedState.from_parts(spec, [0.3, -4.0])
    _, nxt = fbf_step(spec, StepConfig.uniform(spec, 0.5, 0.0), s)
    assert np.array_equal(nxt.vector, s.vector)


def test_second_half_step_with_equal_input_is_identity():
    spec = random_game(22, sizes=(3, 1), w=2, coupling="binding")
    steps = certified_steps(spec)
    s = _random_sync_state(spec, np.random.default_rng(0))
    half = agent_half_step_1(spec, steps, s)
    out = agent_half_step_2(spec, steps, half, half)
    assert np.array_equal(out.vector, half.vector)


def test_half_steps_match_compact():
    spec = random_game(23, sizes=(2, 3), qdims=(2, 1), w=1, coupling="binding")
    steps = certified_steps(spec)
    s = _random_sync_state(spec, np.random.default_rng(1))
    half_c, next_c = fbf_step(spec, steps, s)
    half_a = agent_half_step_1(spec, steps, s)
    next_a = agent_half_step_2(spec, steps, s, half_a)
    assert np.max(np.abs(half_c.vector - half_a.vector)) <= 1e-12
    assert np.max(np.abs(next_c.vector - next_a.vector)) <= 1e-12


def test_leader_graph_does_not_reach_other_estimates_of_followers():
    spec = random_game(24, sizes=(2, 3, 2), qdims=(1, 1, 2), w=1, coupling="binding")
    heavy = GameSpec(spec.dims, spec.payoffs, spec.boxes, spec.coupling,
                     ClusterTopology(spec.topology.inner,
                                     WeightedGraph(5.0 * spec.topology.leader.weights)))
    steps = certified_steps(spec)
    s = _random_sync_state(spec, np.random.default_rng(2))
    h1, h2 = agent_half_step_1(spec, steps, s), agent_half_step_1(heavy, steps, s)
    lay = spec.layout
    followers = [a for a, (j, i) in enumerate(spec.dims.agents()) if i > 0]
    q = spec.dims.q
    strip = np.asarray(lay.s_index)
    for a in followers:
        mine = strip[(strip >= a * q) & (strip < (a + 1) * q)]
        assert np.array_equal(h1.x_hat[mine], h2.x_hat[mine])
    assert not np.array_equal(h1.mu, h2.mu)


def test_single_cluster_multipliers_follow_constraint_only():
    spec = random_game(25, sizes=(3,), w=2, coupling="binding")
    steps = certified_steps(spec)
    s = _random_sync_state(spec, np.random.default_rng(3))
    half = agent_half_step_1(spec, steps, s)
    own = s.x_hat[spec.layout.r_index]
    Ax = spec.coupling.A[0] @ own[spec.layout.x_slice(0, 0)]
    assert np.array_equal(half.z, s.z)
    assert np.allclose(half.mu, np.maximum(s.mu + steps.nu[0] * (Ax - spec.coupling.b[0]), 0.0), atol=1e-14)


def test_run_converges_to_oracle(binding):
    spec, _, trace = binding
    assert trace.converged and trace.status == "converged"
    ref = centralized_vgne(spec)
    x = trace.final.x_hat[spec.layout.r_index]
    assert np.linalg.norm(x - ref.x_star) <= 1e-6 * np.linalg.norm(ref.x_star)
    # limit consistency
    d = spec.dims
    assert np.max(np.abs(trace.final.x_hat - spec.layout.consensus(x))) <= 1e-8
    assert trace.column("mu_consensus")[-1] <= 1e-8
    assert trace.column("constraint_viol")[-1] <= 1e-8
    assert np.allclose(trace.final.mu.reshape(d.m, d.w), ref.mu_star, atol=1e-6)
    kkt = kkt_residual(spec, trace.final)
    assert kkt.max() <= 1e-6


def test_trace_shape(binding):
    _, _, trace = binding
    k = trace.column("k")
    assert np.all(np.diff(k) > 0) and k[0] == 1 and k[-1] == trace.iterations
    for name in TRACE_COLUMNS[1:]:
        col = trace.column(name)
        assert np.all(col[~np.isnan(col)] >= 0), name
    assert np.all(np.isnan(trace.column("psi_dist")))


def test_restart_at_limit(binding):
    spec, steps, trace = binding
    again = run(spec, steps, SolverOptions(**TIGHT), s0=trace.final)
    assert again.converged and again.iterations <= 1
    _, nxt = fbf_step(spec, steps, trace.final)
    assert np.max(np.abs(nxt.vector - trace.final.vector)) <= 1e-10


def test_record_stride_and_budget():
    spec = random_game(26, sizes=(2, 1), w=1, coupling="binding")
    steps = certified_steps(spec)
    tr = run(spec, steps, SolverOptions(max_iters=25, record_every=10))
    assert tr.status == "max_iters" and not tr.converged
    assert tr.column("k").tolist() == [10, 20, 25]
    one = run(spec, steps, SolverOptions(max_iters=1))
    assert one.iterations == 1 and one.status == "max_iters"


def test_lockstep_mode_records_gap():
    spec = random_game(27, sizes=(2, 2), w=1, coupling="binding")
    tr = run(spec, certified_steps(spec), SolverOptions(max_iters=50, realization="both"))
    gap = tr.column("lockstep_gap")
    assert gap.size == 50 and gap.max() <= 1e-9
    agent = run(spec, certified_steps(spec), SolverOptions(max_iters=50, realization="agent"))
    compact = run(spec, certified_steps(spec), SolverOptions(max_iters=50))
    assert np.max(np.abs(agent.final.vector - compact.final.vector)) <= 1e-9


def test_lockstep_failure_is_reported(monkeypatch):
    import mcgne.solver as solver_mod

    spec = random_game(28, sizes=(2, 1), w=1, coupling="binding")
    real = solver_mod.agent_step

    def skewed(*args, **kw):
        half, nxt = real(*args, **kw)
        nxt.vector[-1] += 1e-3
        return half, nxt

    monkeypatch.setattr(solver_mod, "agent_step", skewed)
    with pytest.raises(LockstepError) as info:
        run(spec, certified_steps(spec), SolverOptions(max_iters=5, realization="both"))
    assert info.value.iteration == 1 and info.value.block == "mu"


def test_divergence_names_iteration():
    spec = random_game(29, sizes=(2, 1), w=1, coupling="binding", boxes="free")
    with pytest.raises(DivergenceError) as info:
        run(spec, StepConfig.uniform(spec, 50.0, 500.0), SolverOptions(max_iters=10_000, check_certificate=False))
    assert info.value.iteration > 1


def test_unsynchronized_start_is_repaired(caplog):
    spec = random_game(30, sizes=(3,), w=1)
    s0 = StackedState.zeros(spec)
    s0.x_hat[:] = np.random.default_rng(4).standard_normal(s0.x_hat.size)
    with caplog.at_level(logging.WARNING, logger="mcgne.solver"):
        tr = run(spec, certified_steps(spec), SolverOptions(max_iters=3), s0=s0)
    assert any("synchroniz" in r.message for r in caplog.records)
    assert spec.layout.sync_defect(tr.final.x_hat) == 0.0


def test_uncertified_parameters_warn(caplog):
    spec = random_game(31, sizes=(2, 1), w=1)
    with caplog.at_level(logging.WARNING, logger="mcgne.solver"):
        run(spec, StepConfig.uniform(spec, 1e-4, 1e-3), SolverOptions(max_iters=2))
    assert any("not certified" in r.message for r in caplog.records)


def test_reference_distance_and_history():
    spec = random_game(32, sizes=(2, 1), w=1, coupling="binding")
    steps = certified_steps(spec)
    limit = run(spec, steps, SolverOptions(**TIGHT)).final
    tr = run(spec, steps, SolverOptions(max_iters=200, reference=limit, keep_iterates=True))
    psi = tr.column("psi_dist")
    assert tr.initial_psi_dist >= psi[0]
    assert np.all(np.diff(psi) <= 1e-9)
    assert len(tr.x_hat_history) == 201


def test_runs_are_deterministic():
    spec = random_game(33, sizes=(2, 2), w=1, coupling="binding")
    steps = certified_steps(spec)
    a = run(spec, steps, SolverOptions(max_iters=300))
    b = run(spec, steps, SolverOptions(max_iters=300))
    assert np.array_equal(a.final.vector, b.final.vector)
    assert all(np.array_equal(a.column(c), b.column(c), equal_nan=True) for c in TRACE_COLUMNS)


def test_kkt_residual_cases():
    zg = zero_game((2, 3), (1, 2))
    x = np.concatenate([np.tile([0.4], 2), np.tile([1.0, -2.0], 3)])
    r = kkt_residual(zg, StackedState.from_parts(zg, zg.layout.consensus(x)))
    assert (r.r1, r.r2, r.r3) == (0.0, 0.0, 0.0)
    spec = random_game(34, sizes=(3,), w=1)
    x = np.arange(spec.dims.q, dtype=float)    # cluster-mates disagree
    assert kkt_residual(spec, StackedState.from_parts(spec, spec.layout.consensus(x))).r3 > 0


def test_kkt_residual_at_oracle_point():
    spec = random_game(35, sizes=(2, 3), qdims=(1, 1), w=1, coupling="binding")
    ref = centralized_vgne(spec)
    d = spec.dims
    s = StackedState.from_parts(spec, spec.layout.consensus(ref.x_star), lam=ref.lambda_star,
                                mu=np.tile(ref.mu_star, d.m))
    assert kkt_residual(spec, s).max() <= 1e-6


def test_mu_negativity_is_recorded_not_raised():
    spec = random_game(36, sizes=(1, 1), w=1, coupling="slack")
    steps = certified_steps(spec)
    tr = run(spec, steps, SolverOptions(max_iters=500))
    assert np.all(tr.column("mu_neg") >= 0)
    s = StackedState(np.zeros(StateLayout.of(spec).size), StateLayout.of(spec))
    s.mu[:] = 0.0
    half, nxt = agent_step(spec, steps, s)
    assert np.all(half.mu >= 0)
    assert np.all(np.isfinite(nxt.mu))


def test_box_constrained_limit_is_feasible():
    dims = Dimensions((2, 1), (1, 1), 0)
    H = np.zeros((3, 3, 3))
    for a in range(3):
        H[a, a, a] = 2.0
    g = -np.array([[10.0, 0, 0], [0, 10.0, 0], [0, 0, -10.0]])
    spec = GameSpec(dims, QuadraticPayoff(dims, H, g), [BoxSet([-1.0], [1.0])] * 3, CouplingConstraint.none(dims),
                    ClusterTopology.complete((2, 1)))
    tr = run(spec, certified_steps(spec), SolverOptions(**TIGHT))
    x = tr.final.x_hat[spec.layout.r_index]
    assert tr.converged
    assert np.allclose(x, centralized_vgne(spec).x_star, atol=1e-7)
    assert np.all(x <= 1 + 1e-12) and np.all(x >= -1 - 1e-12)
