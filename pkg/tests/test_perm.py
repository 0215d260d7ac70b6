import itertools
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import linear_sum_assignment

from conftest import ARCH_GRID
from tnalign.connect import loss_barrier, sweep
from tnalign.errors import ConfigError, DimensionError
from tnalign.nncore import NetworkSpec, OptimizerState, build_network, forward, train
from tnalign.perm import (NetworkPermutation, apply_permutation, matching_objective,
                          simulated_annealing_match, solve_assignment, weight_match)


def brute_force(cost, maximize=False):
    n = cost.shape[0]
    best, arg = None, None
    for p in itertools.permutations(range(n)):  # lexicographic order
        v = cost[np.arange(n), p].sum()
        if best is None or (v > best if maximize else v < best):
            best, arg = v, p
    return best, arg


def test_identity_favoring_cost():
    cost = 1.0 - np.eye(5)
    p, obj = solve_assignment(cost)
    assert p.tolist() == list(range(5)) and obj == 0.0


def test_two_by_two():
    p, obj = solve_assignment(np.array([[1.0, 2.0], [2.0, 1.0]]))
    assert p.tolist() == [0, 1] and obj == 2.0


def test_maximize_two_by_two():
    p, obj = solve_assignment(np.array([[1.0, 2.0], [2.0, 1.0]]), maximize=True)
    assert p.tolist() == [1, 0] and obj == 4.0


def test_matches_brute_force_and_scipy(rng):
    for _ in range(100):
        cost = rng.normal(size=(6, 6))
        p, obj = solve_assignment(cost)
        best, _ = brute_force(cost)
        assert obj == pytest.approx(best, abs=1e-12)
        r, c = linear_sum_assignment(cost)
        assert obj == pytest.approx(cost[r, c].sum(), abs=1e-12)


@given(st.integers(1, 6), st.integers(0, 3), st.booleans(), st.integers(0, 10**6))
def test_ties_give_lexicographically_smallest(n, levels, maximize, seed):
    # integer costs produce many ties
    cost = np.random.default_rng(seed).integers(0, levels + 1, size=(n, n)).astype(float)
    p, obj = solve_assignment(cost, maximize)
    best, arg = brute_force(cost, maximize)
    assert obj == best
    assert tuple(p) == arg


def test_medium_size_matches_scipy(rng):
    cost = rng.normal(size=(120, 120))
    _, obj = solve_assignment(cost, maximize=True)
    r, c = linear_sum_assignment(cost, maximize=True)
    assert obj == pytest.approx(cost[r, c].sum(), rel=1e-12)


def test_solver_rejects_bad_input():
    with pytest.raises(ConfigError):
        solve_assignment(np.array([[0.0, np.nan], [1.0, 1.0]]))
    with pytest.raises(DimensionError):
        solve_assignment(np.zeros((2, 3)))
    assert solve_assignment(np.zeros((0, 0)))[0].size == 0


def test_bijection_validation():
    with pytest.raises(ConfigError):
        NetworkPermutation(([0, 0, 1],))
    with pytest.raises(ConfigError):
        NetworkPermutation(([0, 3],))


def test_identity_leaves_network_unchanged():
    net = build_network(NetworkSpec((3, 5, 4, 2), seed=0))
    out = apply_permutation(net, NetworkPermutation.identity(net.spec))
    assert np.array_equal(out.params, net.params)


def test_width_mismatch():
    net = build_network(NetworkSpec((3, 5, 2)))
    with pytest.raises(DimensionError):
        apply_permutation(net, NetworkPermutation((np.arange(4),)))


@given(st.sampled_from([w for w in ARCH_GRID if len(w) > 2]), st.integers(0, 10**6))
def test_function_preserved(widths, seed):
    spec = NetworkSpec(widths, seed=seed)
    net = build_network(spec)
    net.params[:] += np.random.default_rng(seed).normal(scale=0.1, size=spec.num_params)
    p = NetworkPermutation.random(spec, seed + 1)
    x = np.random.default_rng(seed + 2).normal(size=(16, widths[0]))
    assert np.max(np.abs(forward(apply_permutation(net, p), x) - forward(net, x))) < 1e-5


@given(st.sampled_from([w for w in ARCH_GRID if len(w) > 2]), st.integers(0, 10**6))
def test_inverse_roundtrip_bit_exact(widths, seed):
    spec = NetworkSpec(widths, seed=seed)
    net = build_network(spec)
    p = NetworkPermutation.random(spec, seed)
    back = apply_permutation(apply_permutation(net, p), p.inverse())
    assert np.array_equal(back.params, net.params)


@given(st.integers(0, 10**6))
def test_composition(seed):
    spec = NetworkSpec((3, 6, 5, 2), seed=seed)
    net = build_network(spec)
    p, q = NetworkPermutation.random(spec, seed), NetworkPermutation.random(spec, seed + 1)
    two_step = apply_permutation(apply_permutation(net, p), q)
    assert np.array_equal(two_step.params, apply_permutation(net, p.then(q)).params)
    assert p.then(p.inverse()).is_identity()


def test_json_roundtrip():
    p = NetworkPermutation.random(NetworkSpec((2, 4, 3, 1)), 5)
    text = p.to_json()
    assert json.loads(text) == [x.tolist() for x in p.perms]
    assert NetworkPermutation.from_json(text) == p


def test_wm_on_identical_nets():
    net = build_network(NetworkSpec((6, 10, 10, 3), seed=1))
    res = weight_match(net, net.copy())
    assert res.perm.is_identity()
    assert res.sweeps_used == 1 and res.converged


@pytest.mark.parametrize("width", [8, 32, 64])
def test_wm_recovers_planted_permutation(width):
    spec = NetworkSpec((12, width, width, 4), seed=width)
    a = build_network(spec)
    planted = NetworkPermutation.random(spec, 17)
    b = apply_permutation(a, planted)
    res = weight_match(a, b, seed=3)
    assert res.perm == planted.inverse()
    assert np.array_equal(apply_permutation(b, res.perm).params, a.params)


def test_wm_objective_never_decreases(blobs):
    spec = NetworkSpec((4, 24, 24, 3), seed=0)
    a, b = build_network(spec), build_network(NetworkSpec((4, 24, 24, 3), seed=1))
    res = weight_match(a, b, seed=2)
    trace = res.objective_trace
    assert all(y >= x - 1e-9 * abs(x) for x, y in zip(trace, trace[1:]))
    assert trace[-1] == pytest.approx(matching_objective(a, apply_permutation(b, res.perm)))


def test_wm_spec_mismatch():
    with pytest.raises(DimensionError):
        weight_match(build_network(NetworkSpec((3, 4, 2))), build_network(NetworkSpec((3, 5, 2))))


def test_wm_respects_max_sweeps():
    a = build_network(NetworkSpec((4, 16, 16, 16, 3), seed=0))
    b = build_network(NetworkSpec((4, 16, 16, 16, 3), seed=1))
    assert weight_match(a, b, max_sweeps=1).sweeps_used == 1


def test_wm_lowers_barrier_of_planted_pair(blobs):
    spec = NetworkSpec((4, 16, 3), seed=0)
    a = build_network(spec)
    train(a, blobs, 5, 16, OptimizerState(lr=0.05, momentum=0.9), shuffle_seed=0)
    b = apply_permutation(a, NetworkPermutation.random(spec, 8))
    res = weight_match(a, b)
    assert abs(loss_barrier(sweep(a, apply_permutation(b, res.perm), blobs))) < 1e-3


def test_sa_zero_iterations_is_identity(blobs):
    a = build_network(NetworkSpec((4, 8, 3), seed=0))
    b = build_network(NetworkSpec((4, 8, 3), seed=1))
    res = simulated_annealing_match(a, b, blobs, iters=0)
    assert res.perm.is_identity() and len(res.trace) == 1


def test_sa_zero_temperature_is_greedy(blobs):
    a = build_network(NetworkSpec((4, 8, 8, 3), seed=0))
    b = build_network(NetworkSpec((4, 8, 8, 3), seed=1))
    res = simulated_annealing_match(a, b, blobs, iters=40, t0=0.0, seed=4)
    assert all(y <= x for x, y in zip(res.trace, res.trace[1:]))


def test_sa_is_deterministic(blobs):
    a = build_network(NetworkSpec((4, 8, 8, 3), seed=0))
    b = build_network(NetworkSpec((4, 8, 8, 3), seed=1))
    r1 = simulated_annealing_match(a, b, blobs, iters=20, seed=9)
    r2 = simulated_annealing_match(a, b, blobs, iters=20, seed=9)
    assert r1.perm == r2.perm and r1.trace == r2.trace


def test_sa_rejects_bad_schedule(blobs):
    a = build_network(NetworkSpec((4, 8, 3), seed=0))
    with pytest.raises(ConfigError):
        simulated_annealing_match(a, a, blobs, iters=5, decay=0.0)
