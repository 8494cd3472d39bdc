import warnings

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fliplab import flipout, nn
from fliplab.errors import ConfigError, LayerCollapseWarning, PruningError
from fliplab.oracles import count_flips_bruteforce, flip_counts_match, random_trajectories
from fliplab.pruning import (FlipState, Mask, SaliencyVector, apply_mask, check_layer_collapse,
                             final_sparsity, global_rank_and_prune, make_schedule, mask_grads,
                             prunable_set, prune_count, record_flips)

from conftest import make_store


def _flips_along(trajectory):
    params = make_store([trajectory[0]])
    mask = Mask.full(params)
    state = FlipState.start(params, mask)
    for v in trajectory[1:]:
        params.groups[0].value[...] = v
        record_flips(state, params, mask)
    return int(state.flips[0][0]), state


# -- flips -------------------------------------------------------------------

@pytest.mark.parametrize("traj,expected", [
    ([1.0, -1.0, 1.0, -1.0], 3),
    ([0.3, 0.2, 0.1], 0),
    ([0.1, 0.0, -0.1], 0),
    ([0.0, 1.0, -1.0], 1),
])
def test_flip_examples(traj, expected):
    assert _flips_along(traj)[0] == expected
    assert count_flips_bruteforce(traj) == expected


def test_flip_counters_frozen_for_masked_weights():
    params = make_store([1.0, 1.0])
    mask = Mask.full(params)
    state = FlipState.start(params, mask)
    mask.bits[0][1] = False
    for v in (-1.0, 1.0, -1.0):
        params.groups[0].value[...] = v
        record_flips(state, params, mask)
    npt.assert_array_equal(state.flips[0], [3, 0])
    assert state.steps_recorded == 3


def test_flip_oracle_on_random_walks():
    rng = np.random.default_rng(7)
    assert flip_counts_match(random_trajectories(rng, 200, 300))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from([-2.0, -0.5, 0.0, 0.5, 2.0]), min_size=1, max_size=40))
def test_flips_bounded_and_match_bruteforce(traj):
    flips, state = _flips_along(traj)
    assert flips == count_flips_bruteforce(traj)
    assert 0 <= flips <= state.steps_recorded


# -- masks -------------------------------------------------------------------

def test_all_true_mask_leaves_params_unchanged(rng):
    params = make_store(rng.normal(size=(3, 4)), rng.normal(size=5))
    before = [g.value.copy() for g in params.groups]
    apply_mask(params, Mask.full(params))
    for b, g in zip(before, params.groups):
        npt.assert_array_equal(b, g.value)


def test_masked_weight_stays_zero_under_noisy_sgd(rng):
    params = make_store(rng.normal(size=(4, 4)))
    mask = Mask.full(params)
    mask.bits[0][2, 3] = False
    apply_mask(params, mask)
    opt = nn.OptimizerConfig(learning_rate=0.1)
    for _ in range(100):
        grads = [rng.normal(size=(4, 4))]
        mask_grads(grads, mask)
        grads = flipout.inject_noise(grads, params, mask, 1.0, rng)
        nn.sgd_step(params, grads, opt, 0)
        apply_mask(params, mask)
        assert params.groups[0].value[2, 3] == 0.0
        assert params.momentum[0][2, 3] == 0.0


def test_masking_k_reduces_alive_by_k(rng):
    params = make_store(rng.normal(size=(5, 5)), rng.normal(size=7))
    mask = Mask.full(params)
    before = mask.alive
    mask.bits[0][0, :3] = False
    mask.bits[1][4] = False
    assert mask.alive == before - 4
    assert mask.alive == sum(int(b.sum()) for b in mask.bits)


def test_mask_json_round_trip(rng):
    net = [nn.dense(5, 7), nn.relu(), nn.dense(7, 3)]
    params = nn.init_params(net, rng)
    mask = Mask.full(params)
    mask.bits[0][rng.random((5, 7)) < 0.4] = False
    back = Mask.from_json(mask.to_json(), params)
    assert back.names == mask.names and back.slots == mask.slots
    for a, b in zip(back.bits, mask.bits):
        npt.assert_array_equal(a, b)


def test_layer_collapse_warning():
    params = make_store(np.ones(3), np.ones(2))
    mask = Mask.full(params)
    mask.bits[1][:] = False
    with pytest.warns(LayerCollapseWarning):
        dead = check_layer_collapse(mask)
    assert dead == ["1.t.weight"]


# -- prunable set --------------------------------------------------------------

def test_prunable_excludes_bn_and_bias(rng):
    params = nn.init_params([nn.dense(3, 4), nn.batchnorm(4)], rng)
    assert [params.groups[k].name for k in prunable_set(params)] == ["0.dense.weight"]


def test_prunable_without_bn(rng):
    net = [nn.conv2d(1, 2, 3), nn.flatten(), nn.dense(18, 2)]
    params = nn.init_params(net, rng)
    assert [params.groups[k].role for k in prunable_set(params)] == ["weight", "weight"]


def test_prunable_empty_network(rng):
    assert prunable_set(nn.init_params([], rng)) == []


# -- ranking -------------------------------------------------------------------

def _two_layer(values_a, values_b):
    params = make_store(np.array(values_a), np.array(values_b))
    mask = Mask.full(params)
    vec = SaliencyVector.from_dense([np.abs(g.value) for g in params.groups], mask)
    return params, mask, vec


def test_cross_layer_selection():
    _, mask, vec = _two_layer([0.1, 0.5], [0.2, 0.05])
    out = global_rank_and_prune(vec, mask, 0.5)
    npt.assert_array_equal(out.bits[0], [False, True])
    npt.assert_array_equal(out.bits[1], [True, False])


def test_round_half_up_count():
    assert prune_count(7, 0.5) == 4
    _, mask, vec = _two_layer(np.arange(1, 5) / 10, np.arange(5, 8) / 10)
    assert global_rank_and_prune(vec, mask, 0.5).alive == 3


def test_uniform_scores_use_tie_break():
    _, mask, vec = _two_layer(np.ones(3), np.ones(3))
    out = global_rank_and_prune(vec, mask, 0.5)
    npt.assert_array_equal(out.bits[0], [False, False, False])
    npt.assert_array_equal(out.bits[1], [True, True, True])
    again = global_rank_and_prune(vec, mask, 0.5)
    for a, b in zip(out.bits, again.bits):
        npt.assert_array_equal(a, b)


def test_zero_count_warns_and_no_ops():
    _, mask, vec = _two_layer([0.1], [0.2])
    with pytest.warns(RuntimeWarning):
        out = global_rank_and_prune(vec, mask, 0.2)
    assert out.alive == 2


def test_pruning_everything_refused():
    _, mask, vec = _two_layer([0.1], [])
    with pytest.raises(PruningError):
        global_rank_and_prune(vec, mask, 0.5)


def test_ranking_validation():
    _, mask, vec = _two_layer([0.1, 0.2], [0.3])
    with pytest.raises(ConfigError):
        global_rank_and_prune(vec, mask, 1.0)
    vec.scores[0] = np.nan
    with pytest.raises(PruningError):
        global_rank_and_prune(vec, mask, 0.5)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=12), min_size=1, max_size=4),
       st.floats(0.05, 0.95))
def test_no_pruned_weight_beats_a_survivor(layers, r):
    params = make_store(*[np.array(v) for v in layers])
    mask = Mask.full(params)
    alive = mask.alive
    n = prune_count(alive, r)
    if n <= 0 or n >= alive:
        return
    vec = SaliencyVector.from_dense([g.value for g in params.groups], mask)
    out = global_rank_and_prune(vec, mask, r)
    pruned = np.concatenate([g.value[~b] for g, b in zip(params.groups, out.bits)])
    kept = np.concatenate([g.value[b] for g, b in zip(params.groups, out.bits)])
    assert out.alive == alive - n
    assert pruned.max() <= kept.min()


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 5000), st.integers(1, 6), st.sampled_from([0.2, 0.5, 0.8]))
def test_alive_count_follows_iteration(n0, m, r):
    rng = np.random.default_rng(n0)
    params = make_store(rng.random(n0))
    mask = Mask.full(params)
    expected = n0
    for _ in range(m):
        n = prune_count(expected, r)
        if n <= 0 or n >= expected:
            break
        expected -= n
        vec = SaliencyVector.from_dense([params.groups[0].value], mask)
        mask = global_rank_and_prune(vec, mask, r)
        assert mask.alive == expected


# -- schedules -----------------------------------------------------------------

@pytest.mark.parametrize("m,interval", [(2, 117), (4, 70), (6, 50), (8, 39), (10, 32)])
def test_schedule_intervals(m, interval):
    s = make_schedule(350, m, 0.5)
    assert s.interval == interval
    assert s.prune_epochs == tuple(k * interval for k in range(1, m + 1))
    assert len(s.prune_epochs) == m and s.prune_epochs[-1] < 350


@pytest.mark.parametrize("m,sparsity", [(2, 0.75), (4, 0.9375), (6, 0.984375), (8, 0.99609375), (10, 0.9990234375)])
def test_final_sparsity_values(m, sparsity):
    assert final_sparsity(0.5, m) == sparsity


def test_final_sparsity_edge():
    assert final_sparsity(0.5, 0) == 0
    assert round(final_sparsity(0.5, 10), 3) == 0.999


def test_schedule_errors():
    with pytest.raises(ConfigError):
        make_schedule(3, 3, 0.5)
    with pytest.raises(ConfigError):
        make_schedule(10, 2, 1.5)
    assert make_schedule(10, 0, 0.5).prune_epochs == ()


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 400), st.integers(1, 12))
def test_schedule_epochs_inside_training(E, m):
    if not E > m:
        return
    s = make_schedule(E, m, 0.5)
    assert len(s.prune_epochs) == m
    assert all(a < b for a, b in zip(s.prune_epochs, s.prune_epochs[1:]))
    assert 0 < s.prune_epochs[0] and s.prune_epochs[-1] < E


def test_desk_schedules():
    # at E=20 the rounded interval for m=7 would land the last prune at 21
    assert make_schedule(20, 4, 0.5).prune_epochs == (4, 8, 12, 16)
    assert make_schedule(20, 7, 0.5).prune_epochs == (2, 4, 6, 8, 10, 12, 14)
