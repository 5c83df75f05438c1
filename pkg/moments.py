"""
Higher moments of particle numbers and their limit constants

Covers the composition sums f(n, r), the coefficient polynomials g^(j)_k, the
recursion for C_n(x, y) and C_n(x), the n! n^n growth envelope, the Carleman
check and the Duhamel consistency checks for the first moment.
"""
import itertools
import logging
import math
import threading
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy.integrate import trapezoid

from exceptions import NotSupercritical, OutOfRange, TooLarge
from green import check_leakage, operator_for
from models import BranchingSource, BRWConfig, MomentTable, Point, SpectralResult
from spectral import extend

logger = logging.getLogger(__name__)

BOUNDS_N_MAX = 300
BRUTE_FORCE_N_MAX = 25
G_BRUTE_FORCE_K_MAX = 20
PUBLISHED_N_TILDE = 106
DUHAMEL_TOL = 1e-8


# ============================================================================
# COMPOSITION SUMS
# ============================================================================

_table_lock = threading.Lock()
_table: List[List[int]] = [[1]]  # _table[n][r] = f(n, r); f(0, 0) = 1


def comp_sum_table(n_max: int) -> List[List[int]]:
    """
    Exact table of f(n, r) = sum over compositions of n into r parts of prod i^i.

    Built bottom-up with f(n, r) = sum_u u^u f(n - u, r - 1); rows are memoized
    and extended under a lock.
    """
    with _table_lock:
        for n in range(len(_table), n_max + 1):
            row = [0] * (n + 1)
            for r in range(1, n + 1):
                row[r] = sum(u ** u * _table[n - u][r - 1]
                             for u in range(1, n - r + 2))
            _table.append(row)
        return _table[:n_max + 1]


def comp_sum(n: int, r: int) -> int:
    if not 1 <= r <= n:
        raise OutOfRange(f"need 1 <= r <= n, got n={n}, r={r}")
    return comp_sum_table(n)[n][r]


def _compositions(n: int, r: int):
    for cuts in itertools.combinations(range(1, n), r - 1):
        bounds = (0,) + cuts + (n,)
        yield tuple(b - a for a, b in zip(bounds, bounds[1:]))


def comp_sum_bruteforce(n: int, r: int) -> int:
    """Enumerate every composition; guarded to n <= 25"""
    if not 1 <= r <= n:
        raise OutOfRange(f"need 1 <= r <= n, got n={n}, r={r}")
    if n > BRUTE_FORCE_N_MAX:
        raise TooLarge(f"brute force enumeration refused for n={n} > {BRUTE_FORCE_N_MAX}")
    return sum(math.prod(i ** i for i in parts) for parts in _compositions(n, r))


def _last_true(predicate, start: int, limit: int) -> int:
    last = start - 1
    for n in range(start, limit + 1):
        if predicate(n):
            last = n
    return last


def induction_thresholds(limit: int = 1000) -> Dict[str, int]:
    """
    Largest n at which each auxiliary inequality of the induction still holds:

        n1: 6^6 (n-5)^(n-5) >= 4^4 (n-3)^(n-3)
        n2: 283 (n-2)^(n-2) >= (n-1)^(n-1)
        n3: ((n+1)/(n-1))^(n-1) <= 2e
    """
    n1 = _last_true(lambda n: 6 ** 6 * (n - 5) ** (n - 5) >= 4 ** 4 * (n - 3) ** (n - 3), 5, limit)
    n2 = _last_true(lambda n: 283 * (n - 2) ** (n - 2) >= (n - 1) ** (n - 1), 2, limit)
    n3 = _last_true(lambda n: (n - 1) * math.log1p(2 / (n - 1)) <= 1 + math.log(2), 2, limit)
    return {"n1": n1, "n2": n2, "n3": n3}


@dataclass
class BoundsReport:
    n_max: int
    violations: List[Tuple[int, int]]  # (n, r), 2 <= r <= n, with f(n, r) >= 6 (n-1)^(n-1)
    identity_failures: List[int]  # n with f(n, n-1) != 4(n-1)
    min_constant: float  # sup of f(n, r) r^(r-1) / n^n over 2 <= r <= n
    min_constant_at: Tuple[int, int]
    constant_within_6_6: bool
    n1: int
    n2: int
    n3: int
    n_tilde: int
    induction_start: int
    published_threshold: int = PUBLISHED_N_TILDE

    @property
    def consistent(self) -> bool:
        return (not self.violations and not self.identity_failures
                and self.constant_within_6_6 and self.induction_start <= self.published_threshold)


def check_bounds(n_max: int) -> BoundsReport:
    """Verify the composition-sum bounds for every 2 <= r <= n <= n_max"""
    if not 2 <= n_max <= BOUNDS_N_MAX:
        raise OutOfRange(f"need 2 <= n_max <= {BOUNDS_N_MAX}, got {n_max}")
    table = comp_sum_table(n_max)

    violations, identity_failures = [], []
    best_num, best_den, best_at = 0, 1, (2, 2)
    for n in range(2, n_max + 1):
        bound = 6 * (n - 1) ** (n - 1)
        if table[n][n - 1] != 4 * (n - 1):
            identity_failures.append(n)
        for r in range(2, n + 1):
            value = table[n][r]
            if value >= bound:
                violations.append((n, r))
            num, den = value * r ** (r - 1), n ** n
            if num * best_den > best_num * den:
                best_num, best_den, best_at = num, den, (n, r)

    constant = Fraction(best_num, best_den)
    thresholds = induction_thresholds()
    n_tilde = max(thresholds.values())
    if violations:
        logger.warning("Composition bound violated at %d pair(s)", len(violations))
    return BoundsReport(n_max=n_max, violations=violations, identity_failures=identity_failures,
                        min_constant=float(constant), min_constant_at=best_at,
                        constant_within_6_6=constant <= 6 ** 6,
                        n1=thresholds["n1"], n2=thresholds["n2"], n3=thresholds["n3"],
                        n_tilde=n_tilde, induction_start=n_tilde + 1)


# ============================================================================
# COEFFICIENT POLYNOMIALS
# ============================================================================

def _check_g_args(k: int, values: Sequence[float]):
    if k < 2:
        raise OutOfRange(f"g_k needs k >= 2, got {k}")
    if len(values) < k - 1:
        raise OutOfRange(f"g_{k} needs {k - 1} values, got {len(values)}")


def g_eval(source: BranchingSource, k: int, values: Sequence[float]) -> float:
    """
    g_k = sum_{r=2..k} beta^(r)/r! sum over compositions of k into r parts of
    the multinomial k!/(i_1!...i_r!) times v_{i_1}...v_{i_r}.

    Evaluated as k! [t^k] sum_r beta^(r)/r! (sum_i v_i t^i / i!)^r with truncated
    polynomial products.
    """
    _check_g_args(k, values)
    series = np.zeros(k + 1)
    for i in range(1, k):
        series[i] = values[i - 1] / math.factorial(i)
    power = series.copy()
    total = 0.0
    for r in range(2, min(k, source.max_offspring) + 1):
        power = np.convolve(power, series)[:k + 1]
        moment = source.factorial_moment(r)
        if moment:
            total += moment / math.factorial(r) * power[k]
    return total * math.factorial(k)


@lru_cache(maxsize=256)
def _weighted_compositions(k: int, r: int) -> Tuple[Tuple[int, Tuple[int, ...]], ...]:
    return tuple((math.factorial(k) // math.prod(math.factorial(i) for i in parts), parts)
                 for parts in _compositions(k, r))


def g_eval_bruteforce(source: BranchingSource, k: int, values: Sequence[float]) -> float:
    """Direct sum over compositions; reference for g_eval"""
    _check_g_args(k, values)
    if k > G_BRUTE_FORCE_K_MAX:
        raise TooLarge(f"brute force enumeration refused for k={k} > {G_BRUTE_FORCE_K_MAX}")
    total = 0.0
    for r in range(2, k + 1):
        moment = source.factorial_moment(r)
        if not moment:
            continue
        inner = math.fsum(weight * math.prod(values[i - 1] for i in parts)
                          for weight, parts in _weighted_compositions(k, r))
        total += moment / math.factorial(r) * inner
    return total


# ============================================================================
# LIMIT CONSTANTS
# ============================================================================

def resolvent_D(config: BRWConfig, lam0: float, n: int, j: int, x, radius: int) -> float:
    """D_n^(j)(x) = ((n lambda_0 - H)^{-1} delta_{x_j})(x) on the truncated box"""
    if n < 2:
        raise OutOfRange(f"D_n needs n >= 2, got {n}")
    op = operator_for(config, radius)
    column = op.resolvent_columns(n * lam0, [config.sources[j].position])[:, 0]
    return float(column[op.index(x)])


def _ordered_points(*groups) -> List[Point]:
    seen = []
    for group in groups:
        for p in group:
            p = tuple(int(c) for c in p)
            if p not in seen:
                seen.append(p)
    return seen


def moment_constants(config: BRWConfig, spectral: SpectralResult, n_max: int,
                     x_points: Sequence, y_points: Sequence, radius: int,
                     spec=None) -> MomentTable:
    """
    C_n(x, y) and C_n(x) for n <= n_max through

        C_1(x, y) = f(x) f(y),  C_1(x) = f(x) sum_j beta_j f(x_j) / lambda_0,
        C_n = sum_j g^(j)_n(C_1(x_j), ..., C_{n-1}(x_j)) D_n^(j)(x).
    """
    if not spectral.supercritical:
        raise NotSupercritical(spectral.caveat or "no positive eigenvalue")
    if n_max < 1:
        raise OutOfRange(f"n_max must be positive, got {n_max}")
    lam0 = spectral.lambda0
    sources = [s.position for s in config.sources]
    x_points = _ordered_points(x_points)
    y_points = _ordered_points(y_points)
    evaluated = _ordered_points(x_points, sources)

    op = operator_for(config, radius)
    for p in _ordered_points(evaluated, y_points):
        op.index(p)

    needed = _ordered_points(evaluated, y_points)
    f_values = extend(config, lam0, spectral.f_sources, needed, spec)
    f = dict(zip(needed, (float(v) for v in f_values)))
    source_sum = math.fsum(s.intensity * f[s.position] for s in config.sources)
    psi = {p: lam0 * f[p] / source_sum for p in needed}

    norm = op.norm
    table = MomentTable(n_max=n_max, lambda0=lam0, x_points=x_points, y_points=y_points,
                        f=f, psi=psi, operator_norm=norm, n_star=math.ceil(2 * norm / lam0))

    for x in evaluated:
        table.C_x[(1, x)] = f[x] * source_sum / lam0
        for y in y_points:
            table.C_xy[(1, x, y)] = f[x] * f[y]

    rows = [op.index(x) for x in evaluated]
    for n in range(2, n_max + 1):
        columns = op.resolvent_columns(n * lam0, sources)[rows, :]
        for a, x in enumerate(evaluated):
            for j in range(config.N):
                table.D[(n, j, x)] = float(columns[a, j])

        g_x = [g_eval(s, n, [table.C_x[(i, s.position)] for i in range(1, n)])
               for s in config.sources]
        for a, x in enumerate(evaluated):
            table.C_x[(n, x)] = float(columns[a] @ np.asarray(g_x))
        for y in y_points:
            g_xy = [g_eval(s, n, [table.C_xy[(i, s.position, y)] for i in range(1, n)])
                    for s in config.sources]
            for a, x in enumerate(evaluated):
                table.C_xy[(n, x, y)] = float(columns[a] @ np.asarray(g_xy))

    logger.info("Moment constants up to n=%d at %d point(s); n* = %d",
                n_max, len(evaluated), table.n_star)
    return table


def factorization_residual(table: MomentTable) -> float:
    """Largest relative deviation of C_n(x, y) from C_n(x) psi(y)^n"""
    worst = 0.0
    for (n, x, y), value in table.C_xy.items():
        expected = table.C_x[(n, x)] * table.psi[y] ** n
        worst = max(worst, abs(value - expected) / max(abs(expected), 1e-300))
    return worst


def factorial_bound_constant(config: BRWConfig) -> float:
    """Smallest D with beta_j^(r) <= D r! r^(r-1) for every source and r >= 2"""
    best = 0.0
    for s in config.sources:
        for r in range(2, s.max_offspring + 1):
            best = max(best, s.factorial_moment(r) / (math.factorial(r) * r ** (r - 1)))
    return best


@dataclass
class EnvelopeReport:
    """C_n(x) <= gamma^(n-1) n! n^n with gamma = 2 N C D E (lambda_0 beta_2 / 2) C_1(x_1)^2"""
    gamma: float
    C: float
    D: float
    E: float
    beta2: float
    c1_max: float
    n_fit: int
    violations: List[int] = field(default_factory=list)

    @property
    def holds(self) -> bool:
        return not self.violations


def _max_over_points(table: MomentTable, n: int) -> float:
    return max(v for (m, _), v in table.C_x.items() if m == n)


def growth_envelope(table: MomentTable, config: BRWConfig, bounds_n_max: int = 60) -> EnvelopeReport:
    """
    Fit E on 2 <= n <= max(n*, 2) and check the n! n^n envelope for every computed n.

    E is also raised so that gamma >= 1.
    """
    C = check_bounds(min(max(bounds_n_max, 2), BOUNDS_N_MAX)).min_constant
    D = factorial_bound_constant(config)
    beta2 = max(s.factorial_moment(2) for s in config.sources)
    c1_max = _max_over_points(table, 1)
    scale = 2 * config.N * C * D * (table.lambda0 * beta2 / 2) * c1_max ** 2
    if scale <= 0:
        raise NotSupercritical("no second factorial moment at any source")

    n_fit = min(max(table.n_star, 2), table.n_max)
    E = 1.0 / scale
    for n in range(2, n_fit + 1):
        log_ratio = math.log(_max_over_points(table, n)) - math.lgamma(n + 1) - n * math.log(n)
        E = max(E, math.exp(log_ratio / (n - 1)) / scale)
    gamma = scale * E

    violations = []
    for n in range(2, table.n_max + 1):
        log_bound = (n - 1) * math.log(gamma) + math.lgamma(n + 1) + n * math.log(n)
        if math.log(_max_over_points(table, n)) > log_bound + 1e-12:
            violations.append(n)
    if violations:
        logger.warning("Growth envelope fails at n=%s", violations)
    return EnvelopeReport(gamma=gamma, C=C, D=D, E=E, beta2=beta2, c1_max=c1_max,
                          n_fit=n_fit, violations=violations)


@dataclass
class CarlemanReport:
    x: Point
    normalized_moments: List[float]  # m(n, x) = C_n(x) / C_1(x)^n
    terms: List[float]  # m(n, x)^(-1/2n)
    lower_bounds: List[float]  # sqrt(2 C_1(x) / gamma) / (n + 1)
    partial_sums: List[float]
    harmonic_tail: float  # sqrt(2 C_1 / gamma) * sum_{n=11..n_max} 1/(n+1)
    bound_holds: bool
    increasing: bool

    @property
    def diverges(self) -> bool:
        return self.bound_holds and self.increasing


def carleman_diag(table: MomentTable, x, envelope: EnvelopeReport) -> CarlemanReport:
    """Compare the Carleman series terms at x against the harmonic lower bound"""
    if table.n_max < 10:
        raise OutOfRange(f"the Carleman check needs n_max >= 10, got {table.n_max}")
    x = tuple(int(c) for c in x)
    c1 = table.C_x[(1, x)]
    log_c1 = math.log(c1)
    scale = math.sqrt(2 * c1 / envelope.gamma)

    moments, terms, bounds = [], [], []
    for n in range(1, table.n_max + 1):
        log_m = math.log(table.C_x[(n, x)]) - n * log_c1
        moments.append(math.exp(log_m))
        terms.append(math.exp(-log_m / (2 * n)))
        bounds.append(scale / (n + 1))
    partial = list(itertools.accumulate(terms))
    harmonic = scale * math.fsum(1.0 / (n + 1) for n in range(11, table.n_max + 1))

    bound_holds = all(t >= b * (1 - 1e-12) for t, b in zip(terms, bounds))
    bound_holds = bound_holds and partial[-1] - partial[9] >= harmonic * (1 - 1e-12)
    increasing = all(b > a for a, b in zip(partial, partial[1:]))
    return CarlemanReport(x=x, normalized_moments=moments, terms=terms, lower_bounds=bounds,
                          partial_sums=partial, harmonic_tail=harmonic,
                          bound_holds=bound_holds, increasing=increasing)


# ============================================================================
# DUHAMEL CHECKS
# ============================================================================

@dataclass
class DuhamelReport:
    times: List[float]
    lhs: List[float]
    rhs: List[float]
    steps: int

    @property
    def residuals(self) -> List[float]:
        return [abs(a - b) for a, b in zip(self.lhs, self.rhs)]

    @property
    def max_residual(self) -> float:
        return max(self.residuals, default=0.0)


def _integrate(integrand, t: float, tol: float = DUHAMEL_TOL, steps: int = 64,
               max_steps: int = 2 ** 16) -> Tuple[float, int]:
    """Trapezoid rule on [0, t], halving the step until the change is below tol"""
    if t == 0:
        return 0.0, 0
    s = np.linspace(0.0, t, steps + 1)
    previous = trapezoid(integrand(s), s)
    while steps < max_steps:
        steps *= 2
        s = np.linspace(0.0, t, steps + 1)
        current = trapezoid(integrand(s), s)
        if abs(current - previous) < tol:
            return float(current), steps
        previous = current
    logger.warning("Duhamel quadrature did not settle below %.0e on [0, %g]", tol, t)
    return float(previous), steps


def _mean_kernel(op, x, y) -> callable:
    """s -> (e^{sM})(x, y) as a vectorized function"""
    mu, v = op.eig
    left, right = v[op.index(x)], v[op.index(y)]
    weights = left * right
    return lambda s: np.exp(np.outer(s, mu)) @ weights


def duhamel_check(config: BRWConfig, times: Sequence[float], radius: int, x=None) -> DuhamelReport:
    """m_1(t, x) against 1 + sum_j beta_j int_0^t m_1(s, x, x_j) ds"""
    x = tuple(x) if x is not None else (0,) * config.dim
    op = operator_for(config, radius)
    starts = [x] + [s.position for s in config.sources]
    check_leakage(config, radius, max(times), starts)

    ones = np.ones(op.size)
    lhs, rhs, steps = [], [], 0
    for t in times:
        lhs.append(float(op.expm_apply(t, ones)[op.index(x)]))
        value = 1.0
        for s in config.sources:
            integral, used = _integrate(_mean_kernel(op, x, s.position), t)
            value += s.intensity * integral
            steps = max(steps, used)
        rhs.append(value)
    return DuhamelReport(times=list(times), lhs=lhs, rhs=rhs, steps=steps)


def duhamel_check_local(config: BRWConfig, times: Sequence[float], radius: int, x, y) -> DuhamelReport:
    """m_1(t, x, y) against p(t, x, y) + sum_j beta_j int_0^t p(t-s, x, x_j) m_1(s, x_j, y) ds"""
    x, y = tuple(x), tuple(y)
    op = operator_for(config, radius)
    walk = operator_for(BRWConfig.pure_walk(config.kernel), radius)
    starts = [x, y] + [s.position for s in config.sources]
    check_leakage(config, radius, max(times), starts)

    lhs, rhs, steps = [], [], 0
    for t in times:
        lhs.append(float(_mean_kernel(op, x, y)(np.array([t]))[0]))
        value = float(_mean_kernel(walk, x, y)(np.array([t]))[0])
        for s in config.sources:
            p = _mean_kernel(walk, x, s.position)
            m = _mean_kernel(op, s.position, y)
            integral, used = _integrate(lambda u, t=t, p=p, m=m: p(t - u) * m(u), t)
            value += s.intensity * integral
            steps = max(steps, used)
        rhs.append(value)
    return DuhamelReport(times=list(times), lhs=lhs, rhs=rhs, steps=steps)
