"""
Domain models for the branching random walk toolkit
"""
import enum
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Optional, Tuple

import numpy as np

from exceptions import ValidationError

Point = Tuple[int, ...]


# ============================================================================
# MODEL
# ============================================================================

@dataclass(frozen=True)
class TransitionKernel:
    """Symmetric, spatially homogeneous jump rates a(z) on Z^d with finite support"""
    dim: int
    entries: Tuple[Tuple[Point, float], ...]  # sorted (z, a(z)) pairs, z != 0, a(z) > 0
    diagonal: float  # a(0) = -sum of off-diagonal rates

    @cached_property
    def offsets(self) -> np.ndarray:
        return np.array([z for z, _ in self.entries], dtype=np.int64).reshape(-1, self.dim)

    @cached_property
    def rates(self) -> np.ndarray:
        return np.array([a for _, a in self.entries], dtype=float)

    @cached_property
    def _rate_map(self) -> Dict[Point, float]:
        return dict(self.entries)

    @property
    def total_rate(self) -> float:
        """Exit rate -a(0) of a particle off the sources"""
        return -self.diagonal

    @property
    def reach(self) -> int:
        """Largest sup-norm jump"""
        return int(np.abs(self.offsets).max())

    def rate(self, z) -> float:
        z = tuple(int(c) for c in z)
        if not any(z):
            return self.diagonal
        return self._rate_map.get(z, 0.0)

    def __repr__(self):
        return f"<TransitionKernel(d={self.dim}, support={len(self.entries)}, a0={self.diagonal:.6g})>"


@dataclass(frozen=True)
class BranchingSource:
    """Lattice point running a continuous-time Galton-Watson process"""
    position: Point
    coeffs: Tuple[float, ...]  # b_0, b_1, ..., b_M

    @property
    def b1(self) -> float:
        return self.coeffs[1]

    @property
    def max_offspring(self) -> int:
        return len(self.coeffs) - 1

    @cached_property
    def intensity(self) -> float:
        """beta = sum_n n b_n"""
        return math.fsum(n * b for n, b in enumerate(self.coeffs))

    def factorial_moment(self, r: int) -> float:
        """beta^(r) = sum_n n(n-1)...(n-r+1) b_n; zero beyond the largest offspring count"""
        if r > self.max_offspring:
            return 0.0
        return math.fsum(math.perm(n, r) * b for n, b in enumerate(self.coeffs) if n >= r)

    def __repr__(self):
        return f"<BranchingSource(x={self.position}, beta={self.intensity:.6g})>"


@dataclass(frozen=True)
class BRWConfig:
    """Kernel plus the N branching sources"""
    kernel: TransitionKernel
    sources: Tuple[BranchingSource, ...]

    @classmethod
    def pure_walk(cls, kernel: TransitionKernel) -> "BRWConfig":
        """Source-free configuration (no branching anywhere)"""
        return cls(kernel=kernel, sources=())

    @property
    def N(self) -> int:
        return len(self.sources)

    @property
    def dim(self) -> int:
        return self.kernel.dim

    @cached_property
    def positions(self) -> np.ndarray:
        return np.array([s.position for s in self.sources], dtype=np.int64).reshape(-1, self.dim)

    @cached_property
    def intensities(self) -> np.ndarray:
        return np.array([s.intensity for s in self.sources], dtype=float)

    @cached_property
    def _by_position(self) -> Dict[Point, BranchingSource]:
        return {s.position: s for s in self.sources}

    def source_at(self, y) -> Optional[BranchingSource]:
        return self._by_position.get(tuple(int(c) for c in y))

    def __repr__(self):
        return f"<BRWConfig(d={self.dim}, N={self.N})>"


# ============================================================================
# NUMERICS
# ============================================================================

@dataclass(frozen=True)
class QuadratureSpec:
    """Tensor-product periodic trapezoid rule on [-pi, pi]^d"""
    nodes_per_axis: int = 64
    tol: float = 1e-10  # Cauchy criterion between K and 2K nodes
    max_nodes: int = 2 ** 22  # cap on K^d
    fixed: bool = False  # evaluate at nodes_per_axis only, no doubling

    def __post_init__(self):
        if self.nodes_per_axis < 8 or self.nodes_per_axis % 2:
            raise ValidationError(f"nodes_per_axis must be even and >= 8, got {self.nodes_per_axis}")
        if self.tol <= 0:
            raise ValidationError("quadrature tolerance must be positive")

    def at(self, nodes_per_axis: int) -> "QuadratureSpec":
        """Same spec pinned to a fixed node count"""
        return QuadratureSpec(nodes_per_axis, self.tol, self.max_nodes, fixed=True)


@dataclass(frozen=True)
class RecurrenceVerdict:
    """Whether G_0 = G_0(0, 0) is finite"""
    finite: bool
    g0_estimate: Optional[float]
    exact: bool  # True when decided from the dimension alone
    note: str


@dataclass
class SpectralResult:
    """Everything the eigenvalue criterion yields for one configuration"""
    lambda0: Optional[float]
    bracket: Optional[Tuple[float, float]] = None
    residual: Optional[float] = None  # |gamma(lambda0) - 1|
    gamma_at: Dict[float, float] = field(default_factory=dict)
    positive_eigs: List[float] = field(default_factory=list)
    f_sources: Optional[np.ndarray] = None  # Perron vector, scaled so f_extended has unit l2 norm
    f_extended: Dict[Point, float] = field(default_factory=dict)
    tail_bound: Optional[float] = None  # certified l2 tail mass beyond the window, relative
    perron_gap: Optional[float] = None  # 1 - second largest |eigenvalue| of G(lambda0)
    isolation_gap: Optional[float] = None  # lambda0 - next positive eigenvalue (or lambda0)
    caveat: Optional[str] = None

    @property
    def supercritical(self) -> bool:
        return self.lambda0 is not None


@dataclass
class MomentTable:
    """Limit constants C_n(x, y), C_n(x) and the resolvent values D_n^(j)(x)"""
    n_max: int
    lambda0: float
    x_points: List[Point]
    y_points: List[Point]
    f: Dict[Point, float]
    psi: Dict[Point, float]
    C_xy: Dict[Tuple[int, Point, Point], float] = field(default_factory=dict)
    C_x: Dict[Tuple[int, Point], float] = field(default_factory=dict)
    D: Dict[Tuple[int, int, Point], float] = field(default_factory=dict)
    operator_norm: float = 0.0  # ||H_R||
    n_star: int = 2

    def d_bound_margin(self, n: int, x: Point) -> float:
        """2/(n lambda0) minus the largest |D_n^(j)(x)| over sources"""
        values = [abs(v) for (m, _, p), v in self.D.items() if m == n and p == x]
        if not values:
            return float("nan")
        return 2.0 / (n * self.lambda0) - max(values)


# ============================================================================
# SIMULATION
# ============================================================================

class Outcome(enum.Enum):
    """How a replica ended"""
    COMPLETED = "completed"  # reached the horizon
    EXTINCT = "extinct"  # population hit zero
    CAP_HIT = "cap_hit"  # population exceeded the cap; censored at that time


class EventKind(enum.Enum):
    """Type of a simulation event"""
    JUMP = "jump"
    BRANCH = "branch"  # includes death (zero offspring)


@dataclass(frozen=True)
class EventRecord:
    time: float
    site: Point
    kind: EventKind
    offset: Optional[Point] = None  # for jumps
    offspring: Optional[int] = None  # for branchings; the parent counts itself

    @property
    def category(self) -> str:
        """Label used when comparing event-type frequencies"""
        if self.kind is EventKind.JUMP:
            return f"jump{self.offset}"
        return f"branch{self.offspring}"


@dataclass
class PopulationState:
    """Sparse per-site particle counts; mutated in place by the simulator"""
    counts: Dict[Point, int]
    total: int
    clock: float = 0.0

    @classmethod
    def single(cls, x: Point) -> "PopulationState":
        return cls(counts={tuple(x): 1}, total=1, clock=0.0)

    def add(self, y: Point, k: int):
        if k == 0:
            return
        c = self.counts.get(y, 0) + k
        if c < 0:
            raise ValueError(f"negative count at {y}")
        if c == 0:
            del self.counts[y]
        else:
            self.counts[y] = c
        self.total += k


@dataclass(frozen=True)
class Snapshot:
    time: float
    total: int
    sites: Dict[Point, int]  # only sites inside the configured window


@dataclass
class SimulationRun:
    seed: int
    replica: int
    horizon: float
    cap: int
    start: Point
    snapshots: List[Snapshot]
    outcome: Outcome
    final_time: float
    final_total: int
    events: int

    @property
    def survived(self) -> bool:
        return self.outcome is not Outcome.EXTINCT

    def __repr__(self):
        return (f"<SimulationRun(replica={self.replica}, outcome={self.outcome.value}, "
                f"total={self.final_total}, t={self.final_time:.3f})>")


@dataclass
class EstimatorReport:
    replicas: int
    survivors: int
    extinction_fraction: float
    lambda_hat: float
    lambda_ci: Tuple[float, float]
    psi_hat: Dict[Point, float]
    psi_ci: Dict[Point, Tuple[float, float]]
    psi_coverage: float  # sum of psi_hat over the window
    xi_samples: List[float] = field(default_factory=list)
    xi_moments: List[float] = field(default_factory=list)  # E xi^n, n = 1..4
    xi_moment_ratios: List[float] = field(default_factory=list)  # E xi^n / (E xi)^n
    predicted_ratios: List[float] = field(default_factory=list)  # C_n(x) / C_1(x)^n
