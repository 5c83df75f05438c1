"""
Eigenvalue criterion for the operator H = A + sum_i beta_i delta_{x_i}

lambda > 0 is an eigenvalue of H iff the N x N matrix G(lambda) has eigenvalue 1.
The largest root lambda_0 is found where the Perron root gamma(lambda) crosses 1.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
from scipy.optimize import brentq

from exceptions import (GridResolutionExhausted, NoSources, NotSupercritical,
                        QuadratureNotConverged, ValidationError, WindowTooSmall)
from green import (converged_nodes, green_kernel_matrix, green_matrix, green_square_values,
                   green_values, operator_for, recurrence_probe, source_displacements)
from models import BRWConfig, Point, QuadratureSpec, SpectralResult
from walk_kernel import build_config, shift_intensity

logger = logging.getLogger(__name__)

PROBE_FLOOR = 1e-8
ROOT_TOL = 1e-12
POWER_MAX_ITER = 2000
TAIL_TOL = 1e-6
MAX_WINDOW_POINTS = 2 ** 21
WINDOW_SEARCH_STEPS = 8


def _require_positive(config: BRWConfig):
    if config.N == 0:
        raise NoSources("the spectral criterion needs at least one source")
    if np.any(config.intensities <= 0):
        raise ValidationError("the spectral criterion needs positive intensities at every source")


def _symmetric_form(config: BRWConfig, lam: float, spec: QuadratureSpec) -> np.ndarray:
    """B^{1/2} I B^{1/2}, similar to G(lambda)"""
    root = np.sqrt(config.intensities)
    return root[:, None] * green_kernel_matrix(config, lam, spec) * root[None, :]


def gamma(config: BRWConfig, lam: float, spec: Optional[QuadratureSpec] = None) -> float:
    """
    Perron root of G(lambda).

    Power iteration from the all-ones vector, stopped when the Collatz-Wielandt
    bounds agree to 1e-12 relative; falls back to a symmetric eigensolve.
    """
    _require_positive(config)
    spec = spec or QuadratureSpec()
    g = green_matrix(config, lam, spec)
    v = np.ones(config.N)
    for _ in range(POWER_MAX_ITER):
        w = g @ v
        ratios = w / v
        lo, hi = ratios.min(), ratios.max()
        if hi - lo <= 1e-12 * hi:
            return float(0.5 * (lo + hi))
        v = w / np.linalg.norm(w)
    logger.debug("Power iteration stalled at lambda=%.3e; using eigvalsh", lam)
    return float(scipy.linalg.eigvalsh(_symmetric_form(config, lam, spec))[-1])


def perron_vector(config: BRWConfig, lam: float, spec: Optional[QuadratureSpec] = None) -> np.ndarray:
    """Positive right eigenvector of G(lambda) for its largest eigenvalue, unit l2 norm"""
    _require_positive(config)
    spec = spec or QuadratureSpec()
    _, vecs = scipy.linalg.eigh(_symmetric_form(config, lam, spec))
    v = vecs[:, -1] / np.sqrt(config.intensities)
    v = v if v.sum() > 0 else -v
    return v / np.linalg.norm(v)


@dataclass
class Lambda0Search:
    """Outcome of the root search for gamma(lambda) = 1"""
    value: Optional[float]
    bracket: Optional[Tuple[float, float]] = None
    residual: Optional[float] = None
    gamma_at: Dict[float, float] = field(default_factory=dict)
    nodes: Optional[int] = None
    caveat: Optional[str] = None


def _extrapolate_gamma0(gamma_at: Dict[float, float]) -> Optional[float]:
    """gamma(0) from a fit a + b sqrt(lambda) + c lambda through the three smallest lambdas"""
    if len(gamma_at) < 3:
        return None
    lams = sorted(gamma_at)[:3]
    s = np.sqrt(lams)
    coeffs = np.polyfit(s, [gamma_at[l] for l in lams], 2)
    return float(coeffs[-1])


def find_lambda0(config: BRWConfig, spec: Optional[QuadratureSpec] = None,
                 lambda_floor: float = PROBE_FLOOR) -> Lambda0Search:
    """
    Largest positive eigenvalue of H, or an absent result with a caveat.

    Brackets by doubling or halving from lambda = 1, then pins the quadrature
    at the lower bracket so gamma is smooth in lambda during the root solve.
    """
    _require_positive(config)
    spec = spec or QuadratureSpec()
    gamma_at: Dict[float, float] = {}

    def probe(lam):
        gamma_at[lam] = gamma(config, lam, spec)
        return gamma_at[lam]

    lam = 1.0
    value = probe(lam)
    if value == 1.0:
        return Lambda0Search(value=lam, bracket=(lam, lam), residual=0.0, gamma_at=gamma_at)

    if value > 1:
        lo = lam
        while value > 1:
            lo = lam
            lam *= 2
            value = probe(lam)
        hi = lam
    else:
        hi = lam
        while value < 1:
            hi = lam
            lam /= 2
            if lam < lambda_floor:
                verdict = recurrence_probe(config.kernel, spec)
                if verdict.finite:
                    caveat = f"gamma < 1 down to lambda={lambda_floor:.0e}; G_0 is finite"
                else:
                    caveat = (f"gamma < 1 down to lambda={lambda_floor:.0e} although G_0 is infinite; "
                              f"a root below the probe floor is expected")
                logger.info("No eigenvalue found above %.0e", lambda_floor)
                return Lambda0Search(value=None, gamma_at=gamma_at, caveat=caveat)
            try:
                value = probe(lam)
            except QuadratureNotConverged:
                verdict = recurrence_probe(config.kernel, spec)
                estimate = _extrapolate_gamma0(gamma_at)
                if verdict.finite and estimate is not None and estimate < 1:
                    caveat = (f"quadrature cap reached at lambda={lam:.2e}; "
                              f"extrapolated gamma(0)={estimate:.6f} < 1")
                    logger.info(caveat)
                    return Lambda0Search(value=None, gamma_at=gamma_at, caveat=caveat)
                raise
        lo = lam

    nodes = converged_nodes(config.kernel, source_displacements(config), lo, spec)
    pinned = spec.at(nodes)

    def excess(l):
        return gamma(config, l, pinned) - 1.0

    f_lo, f_hi = excess(lo), excess(hi)
    if f_lo * f_hi > 0:
        # the pinned rule moved an endpoint across 1; keep the adaptive endpoint
        root = lo if abs(f_lo) < abs(f_hi) else hi
    else:
        root = brentq(excess, lo, hi, xtol=1e-15, rtol=1e-15, maxiter=200)
    residual = abs(excess(root))
    if residual > ROOT_TOL:
        logger.warning("Root residual %.2e exceeds %.0e", residual, ROOT_TOL)
    logger.info("lambda_0 = %.12f (bracket [%g, %g], K=%d)", root, lo, hi, nodes)
    return Lambda0Search(value=float(root), bracket=(lo, hi), residual=residual,
                         gamma_at=gamma_at, nodes=nodes)


def _usable_grid(config, spec, lambda_floor, lambda_ceil, points) -> Tuple[np.ndarray, np.ndarray]:
    """Evaluate curves top-down; drop grid points where the quadrature cap is hit"""
    grid = np.geomspace(lambda_floor, lambda_ceil, points)
    rows = []
    for lam in grid[::-1]:
        try:
            rows.append(scipy.linalg.eigvalsh(_symmetric_form(config, lam, spec))[::-1])
        except QuadratureNotConverged:
            break
    kept = grid[len(grid) - len(rows):]
    if len(kept) < len(grid):
        logger.warning("Quadrature cap reached below lambda=%.3e; spectrum search floor raised", kept[0])
    return kept, np.array(rows[::-1])


def _brackets(grid: np.ndarray, curves: np.ndarray) -> List[Tuple[int, float, float]]:
    found = []
    excess = curves - 1.0
    for k in range(curves.shape[1]):
        sign = np.sign(excess[:, k])
        for i in np.nonzero(sign[:-1] * sign[1:] < 0)[0]:
            found.append((k, float(grid[i]), float(grid[i + 1])))
    return found


def all_positive_eigs(config: BRWConfig, spec: Optional[QuadratureSpec] = None,
                      lambda_floor: float = PROBE_FLOOR, initial_points: int = 64,
                      max_points: int = 4096) -> List[float]:
    """
    Every eigenvalue of H above lambda_floor, in decreasing order.

    Tracks the sorted eigenvalues of G(lambda) on a log grid and refines the grid
    until the number of crossings of 1 is stable between two resolutions.
    """
    _require_positive(config)
    spec = spec or QuadratureSpec()
    lambda_ceil = float(config.intensities.max()) * (1 + 1e-6) + 1e-12

    points = initial_points
    grid, curves = _usable_grid(config, spec, lambda_floor, lambda_ceil, points)
    brackets = _brackets(grid, curves)
    while True:
        points *= 2
        if points > max_points:
            raise GridResolutionExhausted(
                f"crossing count did not stabilize up to {max_points} grid points")
        grid, curves = _usable_grid(config, spec, lambda_floor, lambda_ceil, points)
        refined = _brackets(grid, curves)
        if len(refined) == len(brackets):
            brackets = refined
            break
        brackets = refined

    roots = []
    for k, lo, hi in brackets:
        pinned = spec.at(converged_nodes(config.kernel, source_displacements(config), lo, spec))

        def excess(l, k=k):
            return scipy.linalg.eigvalsh(_symmetric_form(config, l, pinned))[::-1][k] - 1.0

        if excess(lo) * excess(hi) > 0:
            roots.append(0.5 * (lo + hi))
            continue
        roots.append(float(brentq(excess, lo, hi, xtol=1e-15, rtol=1e-15, maxiter=200)))
    roots.sort(reverse=True)
    if len(roots) > config.N:
        raise GridResolutionExhausted(f"found {len(roots)} eigenvalues for N={config.N} sources")
    logger.info("Found %d positive eigenvalue(s) for N=%d", len(roots), config.N)
    return roots


def window_points(dim: int, radius: int) -> np.ndarray:
    axis = np.arange(-radius, radius + 1)
    mesh = np.meshgrid(*([axis] * dim), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def extend(config: BRWConfig, lam0: float, f_sources: np.ndarray, points,
           spec: Optional[QuadratureSpec] = None) -> np.ndarray:
    """f(x) = sum_j beta_j f_j I_{x_j - x}(lambda_0) at each of `points`"""
    points = np.asarray(points, dtype=np.int64).reshape(-1, config.dim)
    disp = (config.positions[None, :, :] - points[:, None, :]).reshape(-1, config.dim)
    values = green_values(config.kernel, disp, lam0, spec).reshape(len(points), config.N)
    return values @ (config.intensities * np.asarray(f_sources))


def _check_window(config: BRWConfig, window_radius: int):
    if np.any(np.abs(config.positions) > window_radius - 3):
        raise WindowTooSmall(f"window radius {window_radius} must exceed every source by 3")
    if (2 * window_radius + 1) ** config.dim > MAX_WINDOW_POINTS:
        raise WindowTooSmall(f"window radius {window_radius} exceeds {MAX_WINDOW_POINTS} points")


def norm_squared(config: BRWConfig, lam0: float, f_sources: np.ndarray,
                 spec: Optional[QuadratureSpec] = None) -> float:
    """sum over Z^d of f(x)^2, exactly: c^T J(lambda_0) c with c_j = beta_j f_j"""
    c = config.intensities * np.asarray(f_sources)
    j = green_square_values(config.kernel, source_displacements(config), lam0, spec)
    return float(c @ j.reshape(config.N, config.N) @ c)


def _shell_sums(config: BRWConfig, lam0: float, f_sources: np.ndarray, window_radius: int,
                spec: Optional[QuadratureSpec]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    points = window_points(config.dim, window_radius)
    f = extend(config, lam0, f_sources, points, spec)
    shell = np.abs(points).max(axis=1)
    return points, f, np.bincount(shell, weights=f ** 2, minlength=window_radius + 1)


def _relative_tail(sums: np.ndarray, total: float) -> float:
    return max(0.0, 1.0 - float(sums.sum()) / total)


def window_for_tail(config: BRWConfig, lam0: float, window_radius: int,
                    spec: Optional[QuadratureSpec] = None) -> int:
    """
    Radius (at least `window_radius`) beyond which at most 1e-6 of the eigenfunction's
    l2 mass lies.

    The next radius is extrapolated from the geometric decay of the outer shell masses,
    so slowly decaying eigenfunctions of weak sources get a window of the right size.
    """
    v = perron_vector(config, lam0, spec)
    total = norm_squared(config, lam0, v, spec)
    radius = window_radius
    for _ in range(WINDOW_SEARCH_STEPS):
        _check_window(config, radius)
        _, _, sums = _shell_sums(config, lam0, v, radius, spec)
        tail = _relative_tail(sums, total)
        if tail <= TAIL_TOL:
            return radius
        q = float((sums[-3:] / sums[-4:-1]).max())
        if 0 < q < 1:
            radius += max(1, math.ceil(math.log(TAIL_TOL / (2 * tail)) / math.log(q)))
        else:
            radius *= 2
        logger.debug("Tail %.2e; growing eigenfunction window to %d", tail, radius)
    raise WindowTooSmall(f"no window up to radius {radius} holds all but {TAIL_TOL:g} of the mass")


def eigenfunction(config: BRWConfig, lam0: float, window_radius: int,
                  spec: Optional[QuadratureSpec] = None) -> Tuple[np.ndarray, Dict[Point, float], float]:
    """
    Eigenfunction of H for lambda_0 on the window |x|_inf <= R_w, unit l2 norm over Z^d.

    Returns:
        (f at the sources, f on the window, relative l2 tail mass beyond the window)

    Raises:
        WindowTooSmall when more than 1e-6 of the exact norm lies outside the window
    """
    _check_window(config, window_radius)
    v = perron_vector(config, lam0, spec)
    points, f, sums = _shell_sums(config, lam0, v, window_radius, spec)
    total = norm_squared(config, lam0, v, spec)
    relative_tail = _relative_tail(sums, total)
    if relative_tail > TAIL_TOL:
        raise WindowTooSmall(f"tail mass {relative_tail:.2e} beyond radius {window_radius}")

    scale = 1.0 / math.sqrt(total)
    f_window = {tuple(int(c) for c in p): float(val * scale) for p, val in zip(points, f)}
    return v * scale, f_window, float(relative_tail)


def psi(config: BRWConfig, lam0: float, f_sources: np.ndarray, y,
        spec: Optional[QuadratureSpec] = None) -> float:
    """psi(y) = lambda_0 f(y) / sum_j beta_j f(x_j)"""
    f_y = float(extend(config, lam0, f_sources, [y], spec)[0])
    return lam0 * f_y / float(config.intensities @ np.asarray(f_sources))


def analyze(config: BRWConfig, spec: Optional[QuadratureSpec] = None,
            window_radius: int = 12, lambda_floor: float = PROBE_FLOOR) -> SpectralResult:
    """Full spectral picture: lambda_0, all positive eigenvalues, eigenfunction and gaps"""
    spec = spec or QuadratureSpec()
    search = find_lambda0(config, spec, lambda_floor)
    if search.value is None:
        return SpectralResult(lambda0=None, gamma_at=search.gamma_at, caveat=search.caveat)

    lam0 = search.value
    eigs = all_positive_eigs(config, spec, lambda_floor=lambda_floor)

    radius = max(window_radius, int(np.abs(config.positions).max()) + 4)
    radius = window_for_tail(config, lam0, radius, spec)
    f_sources, f_window, tail = eigenfunction(config, lam0, radius, spec)

    spectrum = np.sort(np.abs(scipy.linalg.eigvalsh(_symmetric_form(config, lam0, spec))))[::-1]
    perron_gap = float(1.0 - spectrum[1]) if len(spectrum) > 1 else 1.0
    others = [e for e in eigs if abs(e - lam0) > 1e-10]
    isolation_gap = float(lam0 - others[0]) if others else float(lam0)
    return SpectralResult(lambda0=lam0, bracket=search.bracket, residual=search.residual,
                          gamma_at=search.gamma_at, positive_eigs=eigs, f_sources=f_sources,
                          f_extended=f_window, tail_bound=tail, perron_gap=perron_gap,
                          isolation_gap=isolation_gap, caveat=search.caveat)


def require_supercritical(result: SpectralResult) -> float:
    if not result.supercritical:
        raise NotSupercritical(result.caveat or "no positive eigenvalue")
    return result.lambda0


def operator_positive_eigs(config: BRWConfig, radius: int) -> List[float]:
    """Positive eigenvalues of the truncated operator H_R; used as an oracle"""
    return operator_for(config, radius).positive_eigenvalues()


def intensity_sweep(config: BRWConfig, index: int, deltas: Sequence[float],
                    spec: Optional[QuadratureSpec] = None) -> List[Tuple[float, Optional[float]]]:
    """lambda_0 after shifting beta at source `index` by each delta"""
    if not 0 <= index < config.N:
        raise ValidationError(f"source index {index} out of range for N={config.N}")
    results = []
    for delta in deltas:
        sources = list(config.sources)
        sources[index] = shift_intensity(sources[index], delta)
        shifted = build_config(config.kernel, sources)
        results.append((float(delta), find_lambda0(shifted, spec).value))
    return results


def critical_intensity(config: BRWConfig, spec: Optional[QuadratureSpec] = None) -> float:
    """Threshold beta_c = 1 / G_0 above which a single source is supercritical (0 when recurrent)"""
    verdict = recurrence_probe(config.kernel, spec)
    if not verdict.finite or verdict.g0_estimate is None:
        return 0.0
    return 1.0 / verdict.g0_estimate
