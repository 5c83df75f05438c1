"""
Error taxonomy for the branching random walk toolkit.

Library code raises these; only cli.py turns them into exit statuses.
"""


class BRWError(Exception):
    """Base class for every error raised by this package"""


# ============================================================================
# INPUT VALIDATION
# ============================================================================

class ValidationError(BRWError, ValueError):
    """Input describes an invalid walk, source or configuration"""


class AsymmetricKernel(ValidationError):
    """a(z) != a(-z) for some offset in the support"""

    def __init__(self, offset, rate, mirror_rate):
        self.offset = tuple(offset)
        self.rate = rate
        self.mirror_rate = mirror_rate
        super().__init__(
            f"kernel is not symmetric at offset {self.offset}: "
            f"a(z)={rate!r} but a(-z)={mirror_rate!r}"
        )


class NotIrreducible(ValidationError):
    """Support of the kernel generates a proper sublattice of Z^d"""


class EmptySupport(ValidationError):
    """No nonzero off-diagonal rate"""


class InvalidCoefficients(ValidationError):
    """Branching coefficients violate the sign pattern or do not sum to zero"""


class DuplicateSourcePosition(ValidationError):
    """Two branching sources share a lattice point"""


class NoSources(ValidationError):
    """A configuration needs at least one branching source"""


class ParseError(BRWError):
    """Config file could not be parsed; carries the offending location"""

    def __init__(self, location, message):
        self.location = location
        super().__init__(f"{location}: {message}")


# ============================================================================
# NUMERICS
# ============================================================================

class LambdaNonpositive(BRWError, ValueError):
    """Green's function requested at lambda <= 0"""


class DimensionNotSupported(BRWError):
    """Quadrature is only available for 1 <= d <= 3"""


class QuadratureNotConverged(BRWError):
    """Node doubling reached the node cap before the Cauchy criterion held"""

    def __init__(self, lam, nodes, change):
        self.lam = lam
        self.nodes = nodes
        self.change = change
        super().__init__(
            f"quadrature did not converge at lambda={lam:.3e} "
            f"(K={nodes}, last change {change:.3e})"
        )


class PointOutsideBox(BRWError, ValueError):
    """Lattice point lies outside the truncation box"""


class HorizonTooLong(BRWError):
    """Boundary leakage of the truncated operator exceeds the allowed mass"""


class SingularSystem(BRWError):
    """Linear solve on a truncated operator failed"""


class GridResolutionExhausted(BRWError):
    """Eigenvalue curve tracking could not separate crossings at the finest grid"""


class WindowTooSmall(BRWError):
    """Certified tail of the eigenfunction is too large for the window"""


class NotSupercritical(BRWError):
    """The operation requires a positive eigenvalue and none was found"""


# ============================================================================
# COMBINATORICS / SIMULATION
# ============================================================================

class OutOfRange(BRWError, ValueError):
    """Integer argument outside the admissible range"""


class TooLarge(BRWError, ValueError):
    """Brute-force enumeration refused by its cost guard"""


class EmptyPopulation(BRWError):
    """Cannot step a population with no particles"""


class TooFewSurvivors(BRWError):
    """Not enough surviving replicas for the estimators"""
