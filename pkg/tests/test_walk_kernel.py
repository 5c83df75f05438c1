import math

import numpy as np
import pytest

from exceptions import (AsymmetricKernel, DuplicateSourcePosition, EmptySupport,
                        InvalidCoefficients, NoSources, NotIrreducible, ValidationError)
from walk_kernel import (binary_source, build_config, kernel_from_pairs, make_source,
                         mean_offspring, nearest_neighbour_kernel, shift_intensity,
                         sojourn_rate, source_moments, symbol, validate_kernel)


# ============================================================================
# KERNEL VALIDATION
# ============================================================================

def test_nearest_neighbour_kernel_rates():
    kernel = nearest_neighbour_kernel(2)
    assert kernel.diagonal == pytest.approx(-1.0)
    assert kernel.rate((1, 0)) == pytest.approx(0.25)
    assert kernel.rate((0, -1)) == pytest.approx(0.25)
    assert kernel.rate((1, 1)) == 0.0
    assert kernel.reach == 1


def test_diagonal_is_recomputed():
    kernel = validate_kernel({(1,): 0.3, (-1,): 0.3, (0,): 5.0}, 1)
    assert kernel.diagonal == pytest.approx(-0.6)
    assert kernel.total_rate == pytest.approx(0.6)


def test_asymmetric_kernel_names_offset():
    with pytest.raises(AsymmetricKernel) as info:
        kernel_from_pairs(1, [((1,), 0.5), ((-1,), 0.25)])
    assert info.value.offset in ((1,), (-1,))
    assert "offset" in str(info.value)


def test_empty_support():
    with pytest.raises(EmptySupport):
        validate_kernel({(0,): -1.0}, 1)


def test_sublattice_support_is_not_irreducible():
    with pytest.raises(NotIrreducible):
        kernel_from_pairs(1, [((2,), 0.5), ((-2,), 0.5)])
    with pytest.raises(NotIrreducible):
        kernel_from_pairs(2, [((1, 0), 0.5), ((-1, 0), 0.5)])
    with pytest.raises(NotIrreducible):
        kernel_from_pairs(2, [((1, 1), 0.5), ((-1, -1), 0.5), ((1, -1), 0.5), ((-1, 1), 0.5)])


def test_coprime_jumps_are_irreducible():
    kernel = kernel_from_pairs(1, [((2,), 0.25), ((-2,), 0.25), ((3,), 0.1), ((-3,), 0.1)])
    assert kernel.reach == 3


def test_negative_rate_rejected():
    with pytest.raises(ValidationError):
        validate_kernel({(1,): -0.5, (-1,): -0.5}, 1)


def test_duplicate_offset_rejected():
    with pytest.raises(ValidationError):
        kernel_from_pairs(1, [((1,), 0.5), ((1,), 0.5), ((-1,), 0.5)])


def test_wrong_dimension_offset():
    with pytest.raises(ValidationError):
        kernel_from_pairs(2, [((1,), 0.5), ((-1,), 0.5)])


# ============================================================================
# SYMBOL
# ============================================================================

def test_symbol_nearest_neighbour(nn1):
    assert symbol(nn1, 0.0) == pytest.approx(0.0, abs=1e-15)
    assert symbol(nn1, math.pi) == pytest.approx(-2.0)
    assert symbol(nn1, math.pi / 2) == pytest.approx(-1.0)


def test_symbol_is_even_and_nonpositive():
    kernel = kernel_from_pairs(2, [((1, 0), 0.2), ((-1, 0), 0.2), ((1, 2), 0.1), ((-1, -2), 0.1),
                                   ((0, 1), 0.3), ((0, -1), 0.3)])
    rng = np.random.default_rng(3)
    theta = rng.uniform(-math.pi, math.pi, size=(200, 2))
    values = symbol(kernel, theta)
    assert np.all(values <= 1e-14)
    np.testing.assert_allclose(values, symbol(kernel, -theta), atol=1e-14)
    assert symbol(kernel, (0.0, 0.0)) == pytest.approx(0.0, abs=1e-14)


# ============================================================================
# BRANCHING SOURCES
# ============================================================================

def test_source_moments():
    beta, moments = source_moments([1, -3, 2], 3)
    assert beta == pytest.approx(1.0)
    assert moments == pytest.approx([1.0, 4.0, 0.0])


def test_source_moments_higher_order():
    beta, moments = source_moments([0.5, -1.5, 0.5, 0.5], 3)
    assert beta == pytest.approx(1.0)
    assert moments == pytest.approx([1.0, 4.0, 3.0])


def test_nonpositive_intensity_warns(caplog):
    beta, _ = source_moments([2, -3, 1], 2)
    assert beta == pytest.approx(-1.0)
    assert "non-positive" in caplog.text


@pytest.mark.parametrize("coeffs", [
    [0.0, 1.0, -1.0],  # b_1 positive
    [-0.5, -0.5, 1.0],  # negative b_0
    [0.0, -1.0, 0.5],  # does not sum to zero
    [1.0],  # too short
    [0.0, -1.0, float("nan")],
])
def test_invalid_coefficients(coeffs):
    with pytest.raises(InvalidCoefficients):
        make_source((0,), coeffs, 1)


def test_binary_source():
    source = binary_source((3,), 1.5, death=0.25)
    assert source.coeffs == pytest.approx((0.25, -2.0, 1.75))
    assert source.intensity == pytest.approx(1.5)
    assert source.factorial_moment(2) == pytest.approx(3.5)


def test_shift_intensity_up_and_down():
    source = binary_source((0,), 1.0)
    up = shift_intensity(source, 0.5)
    assert up.intensity == pytest.approx(1.5)
    assert up.coeffs == pytest.approx((0.0, -1.5, 1.5))
    down = shift_intensity(source, -0.5)
    assert down.intensity == pytest.approx(0.5)
    assert down.coeffs == pytest.approx((0.5, -1.5, 1.0))


def test_sojourn_rate_and_mean_offspring(single_source):
    assert sojourn_rate(single_source, (0,)) == pytest.approx(2.0)
    assert sojourn_rate(single_source, (4,)) == pytest.approx(1.0)
    assert mean_offspring(single_source.sources[0]) == pytest.approx(2.0)


# ============================================================================
# CONFIGURATION
# ============================================================================

def test_build_config(adjacent_pair):
    assert adjacent_pair.N == 2
    assert adjacent_pair.dim == 1
    np.testing.assert_allclose(adjacent_pair.intensities, [2.0, 2.0])
    assert adjacent_pair.source_at((1,)).intensity == pytest.approx(2.0)
    assert adjacent_pair.source_at((2,)) is None


def test_duplicate_source_position(nn1):
    with pytest.raises(DuplicateSourcePosition):
        build_config(nn1, [binary_source((0,), 1.0), binary_source((0,), 2.0)])


def test_no_sources(nn1):
    with pytest.raises(NoSources):
        build_config(nn1, [])


def test_source_dimension_mismatch(nn1):
    with pytest.raises(ValidationError):
        build_config(nn1, [binary_source((0, 0), 1.0)])
