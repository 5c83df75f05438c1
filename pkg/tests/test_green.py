import math

import numpy as np
import pytest
from scipy.special import iv

from exceptions import (DimensionNotSupported, HorizonTooLong, LambdaNonpositive,
                        PointOutsideBox, QuadratureNotConverged, ValidationError)
from green import (TruncatedOperator, check_leakage, converged_nodes, green_kernel_matrix,
                   green_matrix, green_square_values, green_value, green_values, operator_for,
                   recurrence_probe, resolvent_green, total_mean, truncated_heat)
from models import BRWConfig, QuadratureSpec
from walk_kernel import kernel_from_pairs, nearest_neighbour_kernel


def nn1_green(x, lam):
    """Closed form for the simple walk on Z with total rate 1"""
    rho = 1 + lam - math.sqrt((1 + lam) ** 2 - 1)
    return rho ** abs(x) / math.sqrt(lam ** 2 + 2 * lam)


# ============================================================================
# FOURIER QUADRATURE
# ============================================================================

@pytest.mark.parametrize("lam", [0.2, 1.0, 3.5])
def test_green_origin_closed_form(nn1, lam):
    assert green_value(nn1, (0,), lam) == pytest.approx(nn1_green(0, lam), rel=1e-9)


def test_green_origin_known_values(nn1):
    assert green_value(nn1, (0,), 1.0) == pytest.approx(1 / math.sqrt(3), rel=1e-10)
    assert green_value(nn1, (0,), 0.2) == pytest.approx(1.50756, abs=1e-5)


def test_green_displacements_closed_form(nn1):
    xs = list(range(-6, 7))
    values = green_values(nn1, [(x,) for x in xs], 0.5)
    expected = [nn1_green(x, 0.5) for x in xs]
    np.testing.assert_allclose(values, expected, rtol=1e-9)


def test_green_square_is_derivative_and_convolution(nn1):
    lam = 0.5
    # J_0 = -dI_0/dlambda
    assert green_square_values(nn1, [(0,)], lam)[0] == pytest.approx(
        (lam + 1) / (lam ** 2 + 2 * lam) ** 1.5, rel=1e-9)
    for z in (0, 1, 4):
        direct = sum(nn1_green(z - x, lam) * nn1_green(x, lam) for x in range(-80, 81))
        assert green_square_values(nn1, [(z,)], lam)[0] == pytest.approx(direct, rel=1e-9)
    with pytest.raises(LambdaNonpositive):
        green_square_values(nn1, [(0,)], 0.0)


def test_green_sums_to_inverse_lambda(nn1):
    values = green_values(nn1, [(x,) for x in range(-80, 81)], 1.0)
    assert values.sum() == pytest.approx(1.0, rel=1e-9)


def test_green_symmetric_in_displacement():
    kernel = kernel_from_pairs(2, [((1, 0), 0.2), ((-1, 0), 0.2), ((1, 2), 0.1), ((-1, -2), 0.1),
                                   ((0, 1), 0.3), ((0, -1), 0.3)])
    disp = [(1, 2), (-1, -2), (3, -1), (-3, 1)]
    values = green_values(kernel, disp, 0.7)
    assert values[0] == pytest.approx(values[1], rel=1e-10)
    assert values[2] == pytest.approx(values[3], rel=1e-10)
    assert np.all(values > 0)


def test_green_decreases_in_lambda(nn1):
    lams = [0.05, 0.1, 0.5, 1.0, 2.0]
    values = [green_value(nn1, (0,), lam) for lam in lams]
    assert all(b < a for a, b in zip(values, values[1:]))


def test_green_rejects_nonpositive_lambda(nn1):
    with pytest.raises(LambdaNonpositive):
        green_value(nn1, (0,), 0.0)
    with pytest.raises(LambdaNonpositive):
        green_value(nn1, (0,), -1.0)


def test_green_rejects_high_dimension():
    with pytest.raises(DimensionNotSupported):
        green_value(nearest_neighbour_kernel(4), (0, 0, 0, 0), 1.0)


def test_quadrature_cap(nn1):
    spec = QuadratureSpec(nodes_per_axis=8, max_nodes=16)
    with pytest.raises(QuadratureNotConverged) as info:
        green_value(nn1, (0,), 1e-6, spec)
    assert info.value.nodes <= 16


def test_nodes_grow_for_long_displacements(nn1):
    assert converged_nodes(nn1, [(100,)], 1.0) >= 202


def test_green_matrix_scales_columns(adjacent_pair):
    base = green_kernel_matrix(adjacent_pair, 1.0)
    np.testing.assert_allclose(base, base.T, rtol=1e-12)
    np.testing.assert_allclose(green_matrix(adjacent_pair, 1.0), 2.0 * base, rtol=1e-12)


# ============================================================================
# RECURRENCE
# ============================================================================

@pytest.mark.parametrize("dim", [1, 2])
def test_low_dimensions_are_recurrent(dim):
    verdict = recurrence_probe(nearest_neighbour_kernel(dim))
    assert verdict.finite is False
    assert verdict.exact is True


def test_three_dimensions_transient():
    verdict = recurrence_probe(nearest_neighbour_kernel(3))
    assert verdict.finite is True
    # three times the Watson integral
    assert verdict.g0_estimate == pytest.approx(1.5164, abs=0.1)


# ============================================================================
# TRUNCATED OPERATORS
# ============================================================================

def test_heat_kernel_matches_bessel(nn1):
    value = truncated_heat(nn1, 30, 1.0, (0,), (0,))
    assert value == pytest.approx(math.exp(-1) * iv(0, 1), rel=1e-10)
    assert value == pytest.approx(0.4657596, abs=1e-7)


def test_heat_kernel_at_time_zero(nn1):
    assert truncated_heat(nn1, 10, 0.0, (0,), (0,)) == 1.0
    assert truncated_heat(nn1, 10, 0.0, (0,), (2,)) == 0.0


def test_heat_kernel_rejects_negative_time(nn1):
    with pytest.raises(ValidationError):
        truncated_heat(nn1, 10, -1.0, (0,), (0,))


def test_resolvent_green_matches_quadrature(nn1):
    assert resolvent_green(nn1, (3,), 1.0, 60) == pytest.approx(nn1_green(3, 1.0), rel=1e-9)


def test_truncated_operator_top_eigenvalue(single_source):
    op = operator_for(single_source, 200)
    assert op.positive_eigenvalues() == pytest.approx([math.sqrt(2) - 1], rel=1e-8)


def test_truncated_operator_expm_matches_time_zero(single_source):
    op = operator_for(single_source, 20)
    vec = np.arange(op.size, dtype=float)
    np.testing.assert_allclose(op.expm_apply(0.0, vec), vec, atol=1e-9)


def test_total_mean_grows_with_branching(single_source):
    early = total_mean(single_source, 60, 0.5, (0,))
    late = total_mean(single_source, 60, 2.0, (0,))
    assert 1.0 < early < late


def test_pure_walk_conserves_mass(nn1):
    walk = BRWConfig.pure_walk(nn1)
    assert total_mean(walk, 40, 2.0, (0,)) == pytest.approx(1.0, abs=1e-9)


def test_leakage_raises_for_small_box(single_source):
    with pytest.raises(HorizonTooLong):
        check_leakage(single_source, 5, 20.0, [(0,)])


def test_point_outside_box(single_source):
    op = operator_for(single_source, 10)
    with pytest.raises(PointOutsideBox):
        op.index((11,))


def test_box_size_limit():
    walk = BRWConfig.pure_walk(nearest_neighbour_kernel(2))
    with pytest.raises(ValidationError):
        TruncatedOperator(walk, 40)
