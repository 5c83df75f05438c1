"""
Random walk kernel and branching source ingestion
Validates jump rates and offspring coefficients and provides the Fourier symbol.
"""
import logging
import math
from typing import Iterable, List, Mapping, Sequence, Tuple

import numpy as np

from exceptions import (AsymmetricKernel, DuplicateSourcePosition, EmptySupport,
                        InvalidCoefficients, NoSources, NotIrreducible, ValidationError)
from models import BranchingSource, BRWConfig, Point, TransitionKernel

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-12


def _as_point(z, dim: int) -> Point:
    try:
        point = tuple(int(c) for c in (z if isinstance(z, Iterable) else (z,)))
    except (TypeError, ValueError):
        raise ValidationError(f"lattice vector {z!r} is not a tuple of integers")
    if len(point) != dim:
        raise ValidationError(f"lattice vector {point} does not have dimension {dim}")
    return point


def _lattice_index(vectors: Sequence[Point], dim: int) -> int:
    """
    Index of the lattice spanned by `vectors` in Z^d (0 when not of full rank).

    Integer row reduction keeps the span unchanged, so the product of the
    pivots of the resulting echelon form is the determinant of a basis.
    """
    rows = [list(v) for v in vectors]
    index = 1
    r = 0
    for col in range(dim):
        while True:
            nonzero = [i for i in range(r, len(rows)) if rows[i][col] != 0]
            if not nonzero:
                return 0
            p = min(nonzero, key=lambda i: abs(rows[i][col]))
            rows[r], rows[p] = rows[p], rows[r]
            reduced = True
            for i in range(r + 1, len(rows)):
                if rows[i][col]:
                    q = rows[i][col] // rows[r][col]
                    rows[i] = [a - q * b for a, b in zip(rows[i], rows[r])]
                    if rows[i][col]:
                        reduced = False
            if reduced:
                break
        index *= abs(rows[r][col])
        r += 1
    return index


def validate_kernel(raw_entries: Mapping, dim: int) -> TransitionKernel:
    """
    Validate raw jump rates and return the canonical kernel.

    Args:
        raw_entries: mapping from lattice vector z to rate a(z); a z = 0 entry is ignored
        dim: lattice dimension d

    Returns:
        TransitionKernel with a(0) recomputed as -sum of the off-diagonal rates

    Raises:
        EmptySupport, AsymmetricKernel, NotIrreducible, ValidationError
    """
    if not isinstance(dim, int) or dim < 1:
        raise ValidationError(f"dimension must be a positive integer, got {dim!r}")

    rates = {}
    for z, a in raw_entries.items():
        point = _as_point(z, dim)
        a = float(a)
        if not math.isfinite(a):
            raise ValidationError(f"rate at offset {point} is not finite")
        if not any(point):
            logger.debug("Ignoring supplied diagonal a(0)=%s; it is recomputed", a)
            continue
        if a < 0:
            raise ValidationError(f"rate at offset {point} is negative ({a})")
        if a > 0:
            rates[point] = rates.get(point, 0.0) + a

    if not rates:
        raise EmptySupport("kernel has no positive off-diagonal rate")

    for z, a in rates.items():
        mirror = tuple(-c for c in z)
        b = rates.get(mirror, 0.0)
        if abs(a - b) > SYMMETRY_TOL * max(1.0, abs(a)):
            raise AsymmetricKernel(z, a, b)

    support = sorted(rates)
    index = _lattice_index(support, dim)
    if index != 1:
        detail = "is not of full rank" if index == 0 else f"has index {index} in Z^{dim}"
        raise NotIrreducible(f"lattice generated by the kernel support {detail}")

    entries = tuple((z, rates[z]) for z in support)
    diagonal = -math.fsum(rates.values())
    return TransitionKernel(dim=dim, entries=entries, diagonal=diagonal)


def kernel_from_pairs(dim: int, pairs: Iterable[Tuple[Sequence[int], float]]) -> TransitionKernel:
    """Build a kernel from (offset, rate) pairs as they appear in config files"""
    raw = {}
    for offset, rate in pairs:
        point = _as_point(offset, dim)
        if point in raw:
            raise ValidationError(f"offset {point} listed twice")
        raw[point] = rate
    return validate_kernel(raw, dim)


def nearest_neighbour_kernel(dim: int, total_rate: float = 1.0) -> TransitionKernel:
    """Simple symmetric walk: a(+-e_k) = total_rate / (2d)"""
    raw = {}
    for k in range(dim):
        for sign in (1, -1):
            e = [0] * dim
            e[k] = sign
            raw[tuple(e)] = total_rate / (2 * dim)
    return validate_kernel(raw, dim)


def symbol(kernel: TransitionKernel, theta) -> np.ndarray:
    """
    Fourier symbol phi(theta) = sum_z a(z) cos(z, theta), z = 0 term included.

    Accepts a single point of [-pi, pi]^d or an array of shape (..., d).
    """
    theta = np.asarray(theta, dtype=float)
    if kernel.dim == 1 and (theta.ndim == 0 or theta.shape[-1] != 1):
        theta = theta[..., None]
    phases = theta @ kernel.offsets.T.astype(float)
    phi = kernel.diagonal + np.cos(phases) @ kernel.rates
    return float(phi) if np.ndim(phi) == 0 else phi


def _check_coefficients(coeffs: Sequence[float]) -> Tuple[float, ...]:
    coeffs = tuple(float(b) for b in coeffs)
    if len(coeffs) < 2:
        raise InvalidCoefficients("need at least b_0 and b_1")
    if not all(math.isfinite(b) for b in coeffs):
        raise InvalidCoefficients("coefficients must be finite")
    if coeffs[1] >= 0:
        raise InvalidCoefficients(f"b_1 must be negative, got {coeffs[1]}")
    for n, b in enumerate(coeffs):
        if n != 1 and b < 0:
            raise InvalidCoefficients(f"b_{n} must be nonnegative, got {b}")
    scale = math.fsum(abs(b) for b in coeffs)
    if abs(math.fsum(coeffs)) > SYMMETRY_TOL * max(1.0, scale):
        raise InvalidCoefficients(f"coefficients must sum to zero, sum is {math.fsum(coeffs)!r}")
    return coeffs


def source_moments(coeffs: Sequence[float], r_max: int) -> Tuple[float, List[float]]:
    """
    Intensity and factorial moments of an infinitesimal generating function.

    Returns:
        (beta, [beta^(1), ..., beta^(r_max)]) with beta^(1) = beta
    """
    coeffs = _check_coefficients(coeffs)
    source = BranchingSource(position=(0,), coeffs=coeffs)
    beta = source.intensity
    if beta <= 0:
        logger.warning("Branching source with non-positive intensity beta=%.6g", beta)
    return beta, [source.factorial_moment(r) for r in range(1, r_max + 1)]


def make_source(position, coeffs: Sequence[float], dim: int) -> BranchingSource:
    """Validated branching source at `position`"""
    source = BranchingSource(position=_as_point(position, dim), coeffs=_check_coefficients(coeffs))
    if source.intensity <= 0:
        logger.warning("Source at %s has non-positive intensity beta=%.6g",
                       source.position, source.intensity)
    return source


def binary_source(position, beta: float, death: float = 0.0) -> BranchingSource:
    """Source that splits in two at rate beta + death and dies at rate death"""
    position = tuple(int(c) for c in position)
    birth = beta + death
    return make_source(position, (death, -(death + birth), birth), len(position))


def build_config(kernel: TransitionKernel, sources: Sequence[BranchingSource]) -> BRWConfig:
    """Assemble the configuration; positions must be pairwise distinct"""
    if not sources:
        raise NoSources("a configuration needs at least one branching source")
    seen = set()
    for s in sources:
        if len(s.position) != kernel.dim:
            raise ValidationError(f"source {s.position} does not have dimension {kernel.dim}")
        if s.position in seen:
            raise DuplicateSourcePosition(f"two sources at {s.position}")
        seen.add(s.position)
    return BRWConfig(kernel=kernel, sources=tuple(sources))


def shift_intensity(source: BranchingSource, delta: float) -> BranchingSource:
    """
    Change beta by `delta` keeping the coefficient constraints.

    A positive shift adds binary splitting (b_2 += delta, b_1 -= delta);
    a negative one adds death (b_0 += |delta|, b_1 -= |delta|).
    """
    coeffs = list(source.coeffs) + [0.0] * max(0, 3 - len(source.coeffs))
    if delta >= 0:
        coeffs[2] += delta
        coeffs[1] -= delta
    else:
        coeffs[0] += -delta
        coeffs[1] -= -delta
    return BranchingSource(position=source.position, coeffs=_check_coefficients(coeffs))


def sojourn_rate(config: BRWConfig, y) -> float:
    """Exit rate of one particle at y: -a(0) off the sources, -(a(0) + b_1) at a source"""
    source = config.source_at(y)
    rate = -config.kernel.diagonal
    if source is not None:
        rate -= source.b1
    return rate


def mean_offspring(source: BranchingSource) -> float:
    """Mean number of descendants per branching event, so beta = (-b_1)(mean - 1)"""
    return math.fsum(n * b for n, b in enumerate(source.coeffs) if n != 1) / -source.b1
