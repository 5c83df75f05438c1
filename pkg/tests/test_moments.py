import math

import numpy as np
import pytest

from exceptions import NotSupercritical, OutOfRange, TooLarge
from models import SpectralResult
from moments import (carleman_diag, check_bounds, comp_sum, comp_sum_bruteforce, comp_sum_table,
                     duhamel_check, duhamel_check_local, factorial_bound_constant,
                     factorization_residual, g_eval, g_eval_bruteforce, growth_envelope,
                     induction_thresholds, moment_constants, resolvent_D)
from spectral import analyze
from walk_kernel import binary_source, build_config, make_source, nearest_neighbour_kernel


@pytest.fixture(scope="module")
def single_source_table():
    config = build_config(nearest_neighbour_kernel(1), [binary_source((0,), 1.0)])
    spectral = analyze(config)
    table = moment_constants(config, spectral, 20, [(0,), (2,)], [(0,), (1,)], 60)
    return config, spectral, table


# ============================================================================
# COMPOSITION SUMS
# ============================================================================

def test_comp_sum_small_values():
    assert comp_sum(2, 2) == 1
    assert comp_sum(3, 2) == 8  # (1,2) and (2,1), each 1 * 2^2
    assert comp_sum(4, 2) == 70
    assert comp_sum(6, 1) == 46656


@pytest.mark.parametrize("n", [1, 5, 17, 40])
def test_comp_sum_extremes(n):
    assert comp_sum(n, 1) == n ** n
    assert comp_sum(n, n) == 1


def test_comp_sum_one_part_equal_to_two():
    for n in range(2, 50):
        assert comp_sum(n, n - 1) == 4 * (n - 1)


def test_comp_sum_matches_enumeration():
    for n in range(1, 13):
        for r in range(1, n + 1):
            assert comp_sum(n, r) == comp_sum_bruteforce(n, r), (n, r)


def test_comp_sum_is_exact_for_large_n():
    value = comp_sum(200, 1)
    assert value == 200 ** 200
    assert isinstance(value, int)


def test_comp_sum_table_rows():
    table = comp_sum_table(6)
    assert len(table) == 7
    assert table[4][1:] == [256, 70, 12, 1]


@pytest.mark.parametrize("n, r", [(3, 0), (3, 4), (0, 0)])
def test_comp_sum_out_of_range(n, r):
    with pytest.raises(OutOfRange):
        comp_sum(n, r)


def test_bruteforce_guard():
    with pytest.raises(TooLarge):
        comp_sum_bruteforce(26, 3)


# ============================================================================
# BOUNDS AND THRESHOLDS
# ============================================================================

def test_induction_thresholds():
    assert induction_thresholds() == {"n1": 9, "n2": 105, "n3": 6}


def test_check_bounds():
    report = check_bounds(60)
    assert report.violations == []
    assert report.identity_failures == []
    assert report.min_constant == pytest.approx(16 / 27)
    assert report.min_constant_at == (3, 2)
    assert report.constant_within_6_6
    assert report.n_tilde == 105
    assert report.induction_start == report.published_threshold == 106
    assert report.consistent


@pytest.mark.slow
def test_check_bounds_full_range():
    report = check_bounds(300)
    assert report.violations == []
    assert report.consistent


@pytest.mark.parametrize("n_max", [1, 301])
def test_check_bounds_range(n_max):
    with pytest.raises(OutOfRange):
        check_bounds(n_max)


# ============================================================================
# COEFFICIENT POLYNOMIALS
# ============================================================================

def test_g_eval_low_orders():
    source = make_source((0,), [0.5, -1.5, 0.5, 0.5], 1)  # beta2 = 4, beta3 = 3
    assert g_eval(source, 2, [3.0]) == pytest.approx(4 * 9.0)
    assert g_eval(source, 3, [2.0, 5.0]) == pytest.approx(3 * 4 * 2 * 5 + 3 * 8)


def test_g_eval_matches_enumeration():
    source = make_source((0,), [0.2, -1.0, 0.3, 0.1, 0.4], 1)
    rng = np.random.default_rng(11)
    for k in range(2, 11):
        values = list(rng.uniform(0.5, 3.0, size=k - 1))
        assert g_eval(source, k, values) == pytest.approx(g_eval_bruteforce(source, k, values), rel=1e-12)


def test_g_eval_homogeneous():
    source = make_source((0,), [0.0, -1.0, 1.0], 1)
    values = [1.0, 3.0, 7.0, 20.0]
    c = 1.7
    scaled = [c ** i * v for i, v in enumerate(values, start=1)]
    assert g_eval(source, 5, scaled) == pytest.approx(c ** 5 * g_eval(source, 5, values), rel=1e-12)


def test_g_eval_arguments():
    source = make_source((0,), [0.0, -1.0, 1.0], 1)
    with pytest.raises(OutOfRange):
        g_eval(source, 1, [])
    with pytest.raises(OutOfRange):
        g_eval(source, 4, [1.0, 2.0])
    with pytest.raises(TooLarge):
        g_eval_bruteforce(source, 21, [1.0] * 20)


def test_factorial_bound_constant(single_source):
    # beta^(2) = 2 against 2! 2^1
    assert factorial_bound_constant(single_source) == pytest.approx(0.5)


# ============================================================================
# LIMIT CONSTANTS
# ============================================================================

def test_first_moment_constants(single_source_table):
    config, spectral, table = single_source_table
    f = table.f
    assert table.C_xy[(1, (2,), (1,))] == pytest.approx(f[(2,)] * f[(1,)])
    assert table.C_x[(1, (0,))] == pytest.approx(f[(0,)] ** 2 / spectral.lambda0)
    assert table.psi[(0,)] == pytest.approx(spectral.lambda0, rel=1e-9)


def test_factorization(single_source_table):
    _, _, table = single_source_table
    assert factorization_residual(table) < 1e-8


def test_higher_constants_positive(single_source_table):
    _, _, table = single_source_table
    assert all(v > 0 for v in table.C_x.values())
    assert all(v > 0 for v in table.D.values())


def test_resolvent_bound_beyond_n_star(single_source_table):
    _, _, table = single_source_table
    assert table.n_star == math.ceil(2 * table.operator_norm / table.lambda0)
    for n in range(max(table.n_star, 2), table.n_max + 1):
        assert table.d_bound_margin(n, (0,)) >= 0


def test_resolvent_D_matches_table(single_source_table):
    config, spectral, table = single_source_table
    assert resolvent_D(config, spectral.lambda0, 3, 0, (2,), 60) == pytest.approx(table.D[(3, 0, (2,))])
    with pytest.raises(OutOfRange):
        resolvent_D(config, spectral.lambda0, 1, 0, (0,), 60)


def test_moment_constants_need_supercritical(single_source):
    with pytest.raises(NotSupercritical):
        moment_constants(single_source, SpectralResult(lambda0=None), 4, [(0,)], [(0,)], 30)


# ============================================================================
# GROWTH ENVELOPE AND CARLEMAN
# ============================================================================

def test_growth_envelope(single_source_table):
    config, _, table = single_source_table
    envelope = growth_envelope(table, config)
    assert envelope.holds
    assert envelope.gamma >= 1.0
    assert envelope.beta2 == pytest.approx(2.0)


def test_carleman_diverges(single_source_table):
    config, _, table = single_source_table
    report = carleman_diag(table, (0,), growth_envelope(table, config))
    assert report.bound_holds
    assert report.increasing
    assert report.diverges
    assert report.normalized_moments[0] == pytest.approx(1.0)


def test_carleman_needs_ten_moments(single_source_table):
    config, spectral, _ = single_source_table
    short = moment_constants(config, spectral, 6, [(0,)], [(0,)], 60)
    with pytest.raises(OutOfRange):
        carleman_diag(short, (0,), growth_envelope(short, config))


# ============================================================================
# DUHAMEL
# ============================================================================

def test_duhamel_total_mass(single_source):
    report = duhamel_check(single_source, [0.5, 1.0, 2.0], 60)
    assert report.max_residual < 1e-6
    assert all(v > 1.0 for v in report.lhs)


def test_duhamel_local(single_source):
    report = duhamel_check_local(single_source, [0.5, 1.0], 60, (0,), (2,))
    assert report.max_residual < 1e-6
