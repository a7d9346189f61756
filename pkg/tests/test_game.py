import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from instances import random_game, two_player_scalar

from mcgne.game import (
    BoxSet,
    CallbackPayoff,
    CouplingConstraint,
    Dimensions,
    GameError,
    GameSpec,
    QuadraticPayoff,
    UnsynchronizedError,
    central_difference,
    dense_selectors,
    extended_pseudogradient,
    full_pseudogradient,
    own_strategies,
    payoff_value,
    prox_all,
    prox_h,
    strip_own_cluster,
    synchronize_cluster_blocks,
)
from mcgne.graph import ClusterTopology

a, b, c, d = 1.5, -2.0, 3.25, 7.0


def _free_spec(sizes, qdims, H=None, g=None):
    dims = Dimensions(sizes, qdims, 0)
    H = np.zeros((dims.n, dims.q, dims.q)) if H is None else H
    g = np.zeros((dims.n, dims.q)) if g is None else g
    return GameSpec(dims, QuadraticPayoff(dims, H, g), [BoxSet.free(qdims[j]) for j, _ in dims.agents()],
                    CouplingConstraint.none(dims), ClusterTopology.complete(sizes))


def test_dimensions():
    dims = Dimensions((4, 2, 3), (2, 2, 2), 2)
    assert (dims.m, dims.n, dims.q, dims.est_dim) == (3, 9, 18, 162)
    assert dims.xi == 16 * 2 + 4 * 2 + 9 * 2


def test_own_strategies_of_consensus_vector():
    spec = random_game(3, sizes=(2, 3), qdims=(2, 1))
    x = np.arange(spec.dims.q, dtype=float)
    assert np.array_equal(own_strategies(spec, spec.layout.consensus(x)), x)


def test_single_agent_selector_is_whole_copy():
    spec = _free_spec((1,), (3,))
    v = np.array([a, b, c])
    assert np.array_equal(own_strategies(spec, v), v)
    assert strip_own_cluster(spec, v).size == 0


def test_two_singleton_clusters_selectors():
    spec = _free_spec((1, 1), (1, 1))
    x_hat = np.array([a, b, c, d])
    assert own_strategies(spec, x_hat).tolist() == [a, d]
    assert strip_own_cluster(spec, x_hat).tolist() == [b, c]


def test_synchronize_single_cluster():
    spec = _free_spec((2,), (1,))
    out = synchronize_cluster_blocks(spec, np.array([a, b, c, d]))
    assert out.tolist() == [a, d, a, d]


def test_selector_matrices():
    spec = random_game(4, sizes=(2, 1, 3), qdims=(1, 2, 1))
    R, S = dense_selectors(spec.layout)
    assert np.array_equal(R @ R.T, np.eye(spec.dims.q))
    assert S.shape == (spec.dims.est_dim - spec.dims.xi, spec.dims.est_dim)
    # R and S touch disjoint coordinates, and S skips whole own-cluster blocks
    assert not np.any((R.sum(axis=0) > 0) & (S.sum(axis=0) > 0))


def test_consensus_gradient_equals_full():
    spec = random_game(5, sizes=(3, 2), w=1)
    x = np.random.default_rng(0).standard_normal(spec.dims.q)
    assert np.allclose(extended_pseudogradient(spec, spec.layout.consensus(x)), full_pseudogradient(spec, x),
                       rtol=0, atol=1e-12)


def test_square_payoff_gradient():
    spec = _free_spec((1,), (2,), H=np.array([2 * np.eye(2)]))
    x = np.array([0.3, -1.2])
    assert np.allclose(full_pseudogradient(spec, x), 2 * x)


def test_two_player_pseudogradient():
    spec = two_player_scalar()
    x1, x2 = 0.7, -1.3
    assert np.allclose(full_pseudogradient(spec, np.array([x1, x2])), [2 * x1 + x2, 2 * x2 - x1])


def test_unsynchronized_input_rejected():
    spec = _free_spec((2,), (1,))
    with pytest.raises(UnsynchronizedError):
        extended_pseudogradient(spec, np.array([a, b, c, d]))


def test_prox_examples():
    dims = Dimensions((1,), (3,), 0)
    box = BoxSet(np.zeros(3), np.ones(3))
    spec = GameSpec(dims, QuadraticPayoff(dims, np.zeros((1, 3, 3)), np.zeros((1, 3))), [box],
                    CouplingConstraint.none(dims), ClusterTopology.complete((1,)))
    assert prox_h(spec, 0, 0, np.array([0.2, 0.5, 0.9]), 1.0).tolist() == [0.2, 0.5, 0.9]
    assert prox_h(spec, 0, 0, np.array([-2.0, 0.5, 7.0]), 0.3).tolist() == [0.0, 0.5, 1.0]
    free = _free_spec((1,), (3,))
    v = np.array([-1e9, 3.0, 1e9])
    for step in (1e-3, 1.0, 1e3):
        assert np.array_equal(prox_h(free, 0, 0, v, step), v)


def test_prox_override():
    spec = _free_spec((1,), (2,))
    # l1 regularizer: soft thresholding
    soft = lambda v, t: np.sign(v) * np.maximum(np.abs(v) - t, 0.0)
    spec = GameSpec(spec.dims, spec.payoffs, spec.boxes, spec.coupling, spec.topology, {(0, 0): soft})
    assert np.allclose(prox_all(spec, np.array([2.0, -0.1]), np.full(2, 0.5)), [1.5, 0.0])


def test_payoff_value_and_infeasible_flag():
    dims = Dimensions((1,), (2,), 0)
    box = BoxSet(np.zeros(2), np.full(2, 5.0))
    spec = GameSpec(dims, QuadraticPayoff(dims, np.array([2 * np.eye(2)]), np.zeros((1, 2)), [0.0]), [box],
                    CouplingConstraint.none(dims), ClusterTopology.complete((1,)))
    assert payoff_value(spec, 0, 0, np.array([1.0, 1.0])) == pytest.approx(2.0)
    assert payoff_value(spec, 0, 0, np.array([-1.0, 1.0])) == math.inf


def test_invalid_inputs():
    with pytest.raises(GameError):
        BoxSet(np.ones(2), np.zeros(2))
    dims = Dimensions((1,), (1,), 0)
    with pytest.raises(GameError, match="convex"):
        QuadraticPayoff(dims, np.array([[[-1.0]]]), np.zeros((1, 1)))
    with pytest.raises(GameError, match="symmetric"):
        QuadraticPayoff(Dimensions((2,), (1,), 0), np.array([[[1.0, 1.0], [0.0, 1.0]]] * 2), np.zeros((2, 2)))
    with pytest.raises(GameError, match="boxes"):
        GameSpec(dims, QuadraticPayoff(dims, np.ones((1, 1, 1)), np.zeros((1, 1))), [],
                 CouplingConstraint.none(dims), ClusterTopology.complete((1,)))


def test_leader_coupling_matrix():
    spec = random_game(6, sizes=(2, 3), qdims=(1, 2), w=2, coupling="slack")
    x = np.random.default_rng(1).standard_normal(spec.dims.q)
    lay = spec.layout
    expected = np.concatenate([spec.coupling.A[j] @ x[lay.x_slice(j, 0)] for j in range(2)])
    assert np.allclose(spec.Lambda @ x, expected)


def _callback_twin(spec):
    """The same quadratic game exposed through value/gradient callbacks."""
    pay = spec.payoffs
    lay = spec.layout

    def value(j, i, x):
        return pay.value(j, i, x)

    def grad(j, i, x):
        aidx = lay.agent_index(j, i)
        return (pay.hessians[aidx] @ x + pay.linear[aidx])[lay.cluster_slice(j)]

    cb = CallbackPayoff(spec.dims, value, grad)
    return GameSpec(spec.dims, cb, spec.boxes, spec.coupling, spec.topology)


def test_callback_rejects_wrong_gradient():
    spec = two_player_scalar()
    with pytest.raises(GameError, match="finite-difference"):
        CallbackPayoff(spec.dims, lambda j, i, x: float(x @ x), lambda j, i, x: np.array([3.0 * x[j]]))


def test_callback_matches_quadratic():
    spec = random_game(8, sizes=(2, 2), qdims=(1, 2), w=1)
    twin = _callback_twin(spec)
    rng = np.random.default_rng(2)
    for _ in range(5):
        x_hat = spec.layout.synchronize(rng.standard_normal(spec.dims.est_dim))
        assert np.allclose(extended_pseudogradient(twin, x_hat), extended_pseudogradient(spec, x_hat),
                           rtol=0, atol=1e-12)


# -- properties -----------------------------------------------------------------------

shapes = st.tuples(
    st.lists(st.integers(1, 3), min_size=1, max_size=3),
    st.integers(0, 10_000),
)


def _game_from(shape):
    sizes, seed = shape
    rng = np.random.default_rng(seed)
    qdims = tuple(int(v) for v in rng.integers(1, 4, size=len(sizes)))
    return random_game(seed, sizes=tuple(sizes), qdims=qdims, w=int(rng.integers(0, 3)), coupling="slack"), rng


@settings(max_examples=40, deadline=None)
@given(shapes)
def test_selectors_partition_and_reassemble(shape):
    spec, rng = _game_from(shape)
    lay = spec.layout
    x_hat = rng.standard_normal(spec.dims.est_dim)
    rebuilt = lay.assemble(own_strategies(spec, x_hat), strip_own_cluster(spec, x_hat), own_cluster_fill=x_hat)
    assert np.array_equal(rebuilt, x_hat)
    # own-cluster blocks (which contain the own slots) and the stripped part tile x_hat
    assert np.array_equal(np.sort(np.concatenate([lay.sync_dst, lay.s_index])), np.arange(spec.dims.est_dim))
    assert lay.sync_dst.size == spec.dims.xi
    assert set(lay.r_index) <= set(lay.sync_dst)


@settings(max_examples=40, deadline=None)
@given(shapes)
def test_synchronize_idempotent_and_keeps_own(shape):
    spec, rng = _game_from(shape)
    x_hat = rng.standard_normal(spec.dims.est_dim)
    once = synchronize_cluster_blocks(spec, x_hat)
    assert np.array_equal(synchronize_cluster_blocks(spec, once), once)
    assert np.array_equal(own_strategies(spec, once), own_strategies(spec, x_hat))
    assert spec.layout.sync_defect(once) == 0.0


@settings(max_examples=30, deadline=None)
@given(shapes)
def test_extended_on_consensus_matches_full(shape):
    spec, rng = _game_from(shape)
    x = rng.standard_normal(spec.dims.q)
    x_hat = spec.layout.consensus(x)
    full = full_pseudogradient(spec, x)
    assert np.allclose(extended_pseudogradient(spec, x_hat), full, rtol=0, atol=1e-12)
    twin = _callback_twin(spec)
    assert np.allclose(extended_pseudogradient(twin, x_hat), full, rtol=0, atol=1e-8)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_prox_firmly_nonexpansive(seed, step):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 5))
    lo = rng.uniform(-2, 0, size=k)
    box = BoxSet(lo, lo + rng.uniform(0, 3, size=k))
    dims = Dimensions((1,), (k,), 0)
    spec = GameSpec(dims, QuadraticPayoff(dims, np.zeros((1, k, k)), np.zeros((1, k))), [box],
                    CouplingConstraint.none(dims), ClusterTopology.complete((1,)))
    u, v = 4 * rng.standard_normal(k), 4 * rng.standard_normal(k)
    pu, pv = prox_h(spec, 0, 0, u, step), prox_h(spec, 0, 0, v, step)
    assert np.sum((pu - pv) ** 2) <= (pu - pv) @ (u - v) + 1e-12
    assert np.linalg.norm(pu - pv) <= np.linalg.norm(u - v) + 1e-12


@settings(max_examples=30, deadline=None)
@given(shapes)
def test_affine_map_matches_finite_differences(shape):
    spec, rng = _game_from(shape)
    M, m0 = spec.payoffs.affine_full()
    x = rng.standard_normal(spec.dims.q)
    assert np.allclose(M @ x + m0, full_pseudogradient(spec, x), atol=1e-12)
    J = np.column_stack([central_difference(lambda y, r=r: full_pseudogradient(spec, y)[r], x, slice(None))
                         for r in range(spec.dims.q)]).T
    assert np.linalg.norm(J - M) <= 1e-6 * max(np.linalg.norm(M), 1.0)
