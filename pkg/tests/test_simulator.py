import math
from collections import Counter

import numpy as np
import pytest
from scipy import stats

from exceptions import EmptyPopulation, TooFewSurvivors, ValidationError
from models import BRWConfig, EventKind, Outcome, PopulationState
from simulator import (Simulator, _build_tree, _tree_add, _tree_find, estimate, event_frequency_test,
                       replica_rng, run, run_replicas, small_time_mean_check, step, step_per_particle)
from spectral import eigenfunction, psi
from walk_kernel import binary_source, build_config, make_source


@pytest.fixture
def dying_source(nn1):
    """Subcritical source: splits at rate 0.5, dies at rate 2"""
    return build_config(nn1, [binary_source((0,), -1.5, death=2.0)])


# ============================================================================
# BUILDING BLOCKS
# ============================================================================

def test_replica_streams_are_reproducible_and_distinct():
    a = replica_rng(42, 3).random(5)
    b = replica_rng(42, 3).random(5)
    c = replica_rng(42, 4).random(5)
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)


def test_partial_sum_tree_find():
    tree = np.zeros(9, dtype=np.int64)
    _tree_add(tree, 0, 2)
    _tree_add(tree, 2, 3)
    _tree_add(tree, 7, 1)
    assert [_tree_find(tree, k) for k in range(6)] == [0, 0, 2, 2, 2, 7]
    _tree_add(tree, 2, -3)
    assert [_tree_find(tree, k) for k in range(3)] == [0, 0, 7]


def test_partial_sum_tree_rebuild_skips_sources():
    counts = np.array([5, 1, 0, 2, 0, 0, 0, 4], dtype=np.int64)
    tree = np.zeros(9, dtype=np.int64)
    _build_tree(tree, counts, 1)
    assert [_tree_find(tree, k) for k in range(7)] == [1, 3, 3, 7, 7, 7, 7]


def test_population_state_add():
    state = PopulationState.single((0,))
    state.add((1,), 2)
    state.add((0,), -1)
    assert state.counts == {(1,): 2}
    assert state.total == 2
    with pytest.raises(ValueError):
        state.add((5,), -1)


# ============================================================================
# SINGLE EVENTS
# ============================================================================

def test_step_off_source_is_a_jump(single_source):
    state = PopulationState.single((5,))
    event, dt = step(state, single_source, replica_rng(1, 0))
    assert dt > 0
    assert event.kind is EventKind.JUMP
    assert event.site == (5,)
    assert state.total == 1
    assert list(state.counts) in ([(4,)], [(6,)])


def test_step_keeps_counts_consistent(single_source):
    state = PopulationState.single((0,))
    sim = Simulator(single_source, state, replica_rng(2, 0))
    for _ in range(500):
        if state.total == 0:
            break
        sim.step()
        assert state.total == sum(state.counts.values())
        assert all(c > 0 for c in state.counts.values())
    assert state.clock > 0


def test_step_extinct_population(single_source):
    state = PopulationState(counts={}, total=0)
    with pytest.raises(EmptyPopulation):
        step(state, single_source, replica_rng(0, 0))
    with pytest.raises(EmptyPopulation):
        step_per_particle([], single_source, replica_rng(0, 0))


def test_step_per_particle_branching(single_source):
    rng = replica_rng(5, 0)
    branched = 0
    for _ in range(200):
        particles, event, dt = step_per_particle([(0,)], single_source, rng)
        assert dt > 0
        if event.kind is EventKind.BRANCH:
            branched += 1
            assert particles == [(0,), (0,)]
            assert event.category == "branch2"
        else:
            assert particles in ([(1,)], [(-1,)])
    assert 0 < branched < 200


def test_event_times_are_absolute(single_source):
    state = PopulationState.single((0,))
    sim = Simulator(single_source, state, replica_rng(4, 0))
    clock = 0.0
    for _ in range(20):
        event, dt = sim.step()
        assert event.time == pytest.approx(clock + dt)
        clock = event.time
    assert state.clock == pytest.approx(clock)
    _, event, dt = step_per_particle([(0,)], single_source, replica_rng(4, 1), clock=2.5)
    assert event.time == pytest.approx(2.5 + dt)


def test_source_rate_table(nn1):
    config = build_config(nn1, [make_source((0,), (1.0, -3.0, 2.0), 1)])
    expected = {'jump(-1,)': 0.125, 'jump(1,)': 0.125, 'branch0': 0.25, 'branch2': 0.5}
    sim = Simulator(config, PopulationState.single((0,)), replica_rng(0, 0))
    assert sim.total_rate() == pytest.approx(4.0)
    assert sim.outcome_probabilities(0) == pytest.approx(expected)

    rng = replica_rng(1, 0)
    observed = Counter(step(PopulationState.single((0,)), config, rng)[0].category for _ in range(4000))
    labels = sorted(expected)
    result = stats.chisquare([observed[label] for label in labels],
                             [4000 * expected[label] for label in labels])
    assert set(observed) == set(expected)
    assert result.pvalue > 0.01


def test_slot_arrays_grow(nn1):
    walk = BRWConfig.pure_walk(nn1)
    state = PopulationState(counts={(3 * k,): 2 for k in range(15)}, total=30)
    sim = Simulator(walk, state, replica_rng(6, 0), capacity=2)
    assert len(sim.counts) == 16
    for _ in range(50):
        sim.step()
        assert state.total == sum(state.counts.values()) == 30
    assert len(sim.counts) >= 32
    assert sim.events == 50


@pytest.mark.slow
def test_aggregated_and_per_particle_samplers_agree(single_source):
    p_value, counts = event_frequency_test(single_source, [(0,), (0,), (3,)], 5000, 17)
    assert p_value > 0.01
    assert sum(a for a, _ in counts.values()) == 5000


# ============================================================================
# RUNS
# ============================================================================

def test_run_is_reproducible(single_source):
    first = run(single_source, 11, 3.0, 10000, snapshots=16)
    second = run(single_source, 11, 3.0, 10000, snapshots=16)
    assert [s.total for s in first.snapshots] == [s.total for s in second.snapshots]
    assert first.events == second.events
    assert first.outcome is second.outcome


def test_run_snapshot_grid(single_source):
    result = run(single_source, 3, 2.0, 10000, snapshots=9)
    assert [s.time for s in result.snapshots] == pytest.approx(list(np.linspace(0.0, 2.0, 9)))
    assert result.snapshots[0].total == 1
    assert result.snapshots[0].sites == {(0,): 1}


def test_pure_walk_run_conserves_particles(nn1):
    result = run(BRWConfig.pure_walk(nn1), 8, 5.0, 10, snapshots=6, window=100)
    assert result.outcome is Outcome.COMPLETED
    assert all(s.total == 1 for s in result.snapshots)
    assert result.final_time == 5.0


def test_extinct_runs_are_zero_filled(dying_source):
    runs = run_replicas(dying_source, 4, 40, 5.0, 1000, snapshots=11)
    extinct = [r for r in runs if r.outcome is Outcome.EXTINCT]
    assert extinct
    for r in extinct:
        assert r.final_total == 0
        assert len(r.snapshots) == 11
        assert all(s.total == 0 for s in r.snapshots if s.time > r.final_time)
        assert not r.survived


def test_cap_hit_is_censored(single_source):
    runs = run_replicas(single_source, 9, 20, 60.0, 20, snapshots=32)
    capped = [r for r in runs if r.outcome is Outcome.CAP_HIT]
    assert capped
    for r in capped:
        assert r.final_total > 20
        assert len(r.snapshots) < 32
        assert r.final_time < 60.0


def test_run_argument_checks(single_source):
    with pytest.raises(ValidationError):
        run(single_source, 0, 0.0, 100)
    with pytest.raises(ValidationError):
        run(single_source, 0, 1.0, 100, snapshots=1)


@pytest.mark.slow
def test_results_do_not_depend_on_workers(single_source):
    serial = run_replicas(single_source, 21, 8, 3.0, 10000, snapshots=8, workers=1)
    parallel = run_replicas(single_source, 21, 8, 3.0, 10000, snapshots=8, workers=2)
    assert [r.final_total for r in serial] == [r.final_total for r in parallel]
    assert [r.events for r in serial] == [r.events for r in parallel]


# ============================================================================
# ESTIMATORS
# ============================================================================

def test_estimate_pure_walk(nn1):
    runs = run_replicas(BRWConfig.pure_walk(nn1), 6, 30, 4.0, 10, snapshots=9, window=3)
    report = estimate(runs, None, bootstrap=50, seed=1, min_survivors=30)
    assert report.survivors == 30
    assert report.extinction_fraction == 0.0
    assert report.lambda_hat == pytest.approx(0.0, abs=1e-12)
    assert report.lambda_ci[0] <= 0.0 <= report.lambda_ci[1] + 1e-12
    assert 0.0 < report.psi_coverage <= 1.0
    assert report.xi_moments == []


def test_estimate_needs_survivors(dying_source):
    runs = run_replicas(dying_source, 4, 10, 2.0, 1000, snapshots=5)
    with pytest.raises(TooFewSurvivors):
        estimate(runs, None, bootstrap=10, min_survivors=11)
    with pytest.raises(TooFewSurvivors):
        estimate([], None)


def test_estimate_xi_moments(single_source):
    runs = run_replicas(single_source, 13, 60, 4.0, 100000, snapshots=9)
    lam0 = math.sqrt(2) - 1
    report = estimate(runs, lam0, bootstrap=20, seed=2, min_survivors=1, predicted_ratios=[1.0, 2.0])
    uncensored = [r for r in runs if r.outcome is not Outcome.CAP_HIT]
    assert len(report.xi_samples) == len(uncensored)
    assert report.xi_moment_ratios[0] == pytest.approx(1.0)
    assert report.predicted_ratios == [1.0, 2.0]


@pytest.mark.slow
def test_growth_rate_and_limit_shape(single_source):
    lam0 = math.sqrt(2) - 1
    runs = run_replicas(single_source, 20240101, 2000, 12.0, 100000, snapshots=25, window=2)
    report = estimate(runs, lam0, bootstrap=200, seed=3, min_survivors=100)
    assert report.lambda_hat == pytest.approx(lam0, rel=0.05)
    f_sources, _, _ = eigenfunction(single_source, lam0, 12)
    for y in [(0,), (1,), (-1,)]:
        assert report.psi_hat[y] == pytest.approx(psi(single_source, lam0, f_sources, y), rel=0.10)
    rows = small_time_mean_check(runs, single_source, 60, 1.0)
    assert rows and all(abs(row["z"]) < 3 for row in rows)
