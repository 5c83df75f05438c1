"""
Acceptance checks run by `verify`

Each check returns a CheckResult; a failing numerical library call is recorded
as a failed check instead of aborting the run.
"""
import logging
import math
import time
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from config_manager import ConfigFile
from exceptions import BRWError
from green import truncated_heat
from models import BRWConfig
from moments import (carleman_diag, check_bounds, comp_sum, comp_sum_bruteforce, duhamel_check,
                     factorization_residual, growth_envelope, moment_constants)
from simulator import estimate, event_frequency_test, run_replicas, small_time_mean_check
from spectral import (all_positive_eigs, analyze, find_lambda0, gamma, intensity_sweep,
                      operator_positive_eigs)
from walk_kernel import binary_source, build_config, nearest_neighbour_kernel

logger = logging.getLogger(__name__)

ORACLE_RADIUS = 500
SINGLE_SOURCE_LAMBDA0 = math.sqrt(2) - 1  # NN walk in d=1, total rate 1, beta = 1


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def reference_configs() -> List[BRWConfig]:
    """NN walk in d=1: one source, two adjacent sources, two distant sources"""
    kernel = nearest_neighbour_kernel(1)
    return [
        build_config(kernel, [binary_source((0,), 1.0)]),
        build_config(kernel, [binary_source((0,), 2.0), binary_source((1,), 2.0)]),
        build_config(kernel, [binary_source((0,), 1.0), binary_source((8,), 1.5)]),
    ]


def random_config(rng: np.random.Generator) -> BRWConfig:
    """NN walk in d=1 with 1-3 binary sources at distinct points of [-4, 4]"""
    n = int(rng.integers(1, 4))
    positions = rng.choice(np.arange(-4, 5), size=n, replace=False)
    sources = [binary_source((int(p),), float(rng.uniform(0.2, 2.0)), death=float(rng.uniform(0, 0.5)))
               for p in positions]
    return build_config(nearest_neighbour_kernel(1), sources)


class Verifier:
    """Runs the acceptance checks against one parsed config"""

    def __init__(self, config_file: ConfigFile, trials: int = 50, sweep_trials: int = 20,
                 bounds_n_max: int = 300, replicas: Optional[int] = None, seed: Optional[int] = None):
        self.config_file = config_file
        self.config = config_file.config
        self.spec = config_file.quadrature_spec()
        self.trials = trials
        self.sweep_trials = sweep_trials
        self.bounds_n_max = bounds_n_max
        self.replicas = replicas if replicas is not None else config_file.get('replicas')
        self.seed = seed if seed is not None else config_file.get('seed')
        self.results: List[CheckResult] = []
        self._spectral = None

    def spectral(self):
        if self._spectral is None:
            self._spectral = analyze(self.config, self.spec,
                                     window_radius=self.config_file.get('window_radius'),
                                     lambda_floor=self.config_file.get('lambda_floor'))
        return self._spectral

    def _record(self, name: str, check: Callable[[], tuple]):
        started = time.perf_counter()
        try:
            passed, detail = check()
        except BRWError as e:
            passed, detail = False, f"{type(e).__name__}: {e}"
        elapsed = time.perf_counter() - started
        self.results.append(CheckResult(name, bool(passed), detail, round(elapsed, 3)))
        logger.info("%s %s (%.1fs): %s", "PASS" if passed else "FAIL", name, elapsed, detail)

    # ------------------------------------------------------------------------

    def check_closed_form(self):
        config = reference_configs()[0]
        lam0 = find_lambda0(config, self.spec).value
        error = abs(lam0 - SINGLE_SOURCE_LAMBDA0)
        return error < 1e-8, f"lambda0={lam0:.12f}, |error|={error:.2e}"

    def check_operator_oracle(self):
        worst = 0.0
        for config in reference_configs():
            eigs = all_positive_eigs(config, self.spec)
            oracle = operator_positive_eigs(config, ORACLE_RADIUS)
            if len(eigs) != len(oracle):
                return False, f"N={config.N}: {len(eigs)} eigenvalue(s) vs {len(oracle)} from H_R"
            worst = max([worst] + [abs(a - b) for a, b in zip(eigs, oracle)])
        return worst < 1e-6, f"max deviation from H_R (R={ORACLE_RADIUS}): {worst:.2e}"

    def check_monotonicity(self):
        grid = np.geomspace(1e-3, max(2.0, 2 * float(self.config.intensities.max())), 50)
        values = [gamma(self.config, lam, self.spec) for lam in grid]
        decreasing = all(b < a - 1e-12 for a, b in zip(values, values[1:]))

        rng = np.random.default_rng(self.seed)
        failures = 0
        for _ in range(self.sweep_trials):
            config = random_config(rng)
            base = find_lambda0(config, self.spec).value
            for i in range(config.N):
                (_, raised), = intensity_sweep(config, i, [0.1], self.spec)
                if base is None and raised is None:
                    continue
                if raised is None or (base is not None and not raised > base + 1e-12):
                    failures += 1
        return decreasing and failures == 0, (
            f"gamma decreasing on 50 points: {decreasing}; beta sweep failures: {failures}")

    def check_eigenvalue_count(self):
        rng = np.random.default_rng(self.seed + 1)
        violations = 0
        for _ in range(self.trials):
            config = random_config(rng)
            if len(all_positive_eigs(config, self.spec, lambda_floor=1e-6)) > config.N:
                violations += 1
        return violations == 0, f"{violations} violation(s) in {self.trials} random configs"

    def check_combinatorics(self):
        mismatches = [(n, r) for n in range(1, 13) for r in range(1, n + 1)
                      if comp_sum(n, r) != comp_sum_bruteforce(n, r)]
        report = check_bounds(self.bounds_n_max)
        passed = not mismatches and not report.violations and not report.identity_failures
        passed = passed and report.induction_start == report.published_threshold
        return passed, (f"brute-force mismatches: {len(mismatches)}; bound violations up to "
                        f"n={self.bounds_n_max}: {len(report.violations)}; n1={report.n1}, "
                        f"n2={report.n2}, n3={report.n3}, induction start {report.induction_start}")

    def check_moment_structure(self):
        spectral = self.spectral()
        if not spectral.supercritical:
            return False, "configuration is not supercritical"
        radius = self.config_file.get('truncation_radius')
        points = [(0,) * self.config.dim]
        table = moment_constants(self.config, spectral, 6, points, points, radius, self.spec)
        residual = factorization_residual(table)
        margins = [table.d_bound_margin(n, x) for n in range(max(table.n_star, 2), 7) for x in points]
        d_ok = all(m >= -1e-12 for m in margins)
        return residual < 1e-8 and d_ok, (f"factorization residual {residual:.2e}; "
                                          f"D_n bound {'holds' if d_ok else 'fails'} for n >= {table.n_star}")

    def check_duhamel(self):
        horizon = self.config_file.get('heat_horizon')
        times = list(np.linspace(0.0, horizon, 7)[1:])
        report = duhamel_check(self.config, times, self.config_file.get('truncation_radius'))
        return report.max_residual < 1e-6, f"max residual {report.max_residual:.2e} for t <= {horizon}"

    def check_carleman(self):
        spectral = self.spectral()
        if not spectral.supercritical:
            return False, "configuration is not supercritical"
        radius = self.config_file.get('truncation_radius')
        origin = (0,) * self.config.dim
        table = moment_constants(self.config, spectral, 20, [origin], [origin], radius, self.spec)
        envelope = growth_envelope(table, self.config)
        report = carleman_diag(table, origin, envelope)
        return report.diverges and envelope.holds, (
            f"gamma={envelope.gamma:.4g}; term bound holds: {report.bound_holds}; "
            f"partial sums increasing: {report.increasing}")

    def check_monte_carlo(self):
        spectral = self.spectral()
        if not spectral.supercritical:
            return False, "configuration is not supercritical"
        cf = self.config_file
        runs = run_replicas(self.config, self.seed, self.replicas, cf.get('horizon'), cf.get('cap'),
                            cf.get('snapshots'), cf.start(), cf.get('site_window'), cf.get('workers'))
        report = estimate(runs, spectral.lambda0, bootstrap=cf.get('bootstrap'), seed=self.seed,
                          min_survivors=min(cf.get('min_survivors'), self.replicas))
        lam_error = abs(report.lambda_hat - spectral.lambda0) / spectral.lambda0
        psi_errors = []
        for y, value in report.psi_hat.items():
            expected = spectral.f_extended.get(y)
            if expected is None:
                continue
            predicted = spectral.lambda0 * expected / float(
                self.config.intensities @ spectral.f_sources)
            if predicted > 0.05:
                psi_errors.append(abs(value - predicted) / predicted)
        psi_error = max(psi_errors, default=0.0)
        early = small_time_mean_check(runs, self.config, cf.get('truncation_radius'), 1.0)
        worst_z = max((abs(row['z']) for row in early), default=0.0)
        passed = lam_error < 0.05 and psi_error < 0.10 and worst_z < 3.0
        return passed, (f"lambda_hat={report.lambda_hat:.4f} (rel. error {lam_error:.3f}); "
                        f"psi rel. error {psi_error:.3f}; small-t |z| <= {worst_z:.2f}")

    def check_pure_walk(self):
        walk = BRWConfig.pure_walk(self.config.kernel)
        origin = (0,) * self.config.dim
        runs = run_replicas(walk, self.seed, 200, 5.0, 10, 16, origin, 3)
        report = estimate(runs, None, bootstrap=200, seed=self.seed, min_survivors=1)
        heat = truncated_heat(self.config.kernel, 30, 1.0, origin, origin) if self.config.dim == 1 else None
        contains_zero = report.lambda_ci[0] <= 1e-12 and report.lambda_ci[1] >= -1e-12
        detail = f"lambda CI {report.lambda_ci}"
        if heat is not None:
            detail += f"; p(1,0,0)={heat:.6f}"
        return contains_zero, detail

    def check_aggregation(self):
        sources = [s.position for s in self.config.sources]
        particles = sources + [sources[0]] + [tuple(c + 1 for c in sources[0])]
        p_value, _ = event_frequency_test(self.config, particles, 20000, self.seed)
        return p_value > 0.01, f"chi-square p={p_value:.3f}"

    # ------------------------------------------------------------------------

    def run_all(self, simulate: bool = True) -> List[CheckResult]:
        self.results = []
        self._record("closed_form_lambda0", self.check_closed_form)
        self._record("operator_oracle", self.check_operator_oracle)
        self._record("monotonicity", self.check_monotonicity)
        self._record("eigenvalue_count", self.check_eigenvalue_count)
        self._record("combinatorics", self.check_combinatorics)
        self._record("moment_structure", self.check_moment_structure)
        self._record("duhamel", self.check_duhamel)
        self._record("carleman", self.check_carleman)
        if simulate:
            self._record("monte_carlo", self.check_monte_carlo)
            self._record("pure_walk", self.check_pure_walk)
            self._record("aggregation", self.check_aggregation)
        return self.results


def run_verification(config_file: ConfigFile, quick: bool = False, simulate: bool = True,
                     replicas: Optional[int] = None) -> List[CheckResult]:
    """Full acceptance run; `quick` shrinks the randomized and combinatorial parts"""
    if quick:
        verifier = Verifier(config_file, trials=10, sweep_trials=4, bounds_n_max=60, replicas=replicas)
    else:
        verifier = Verifier(config_file, replicas=replicas)
    return verifier.run_all(simulate=simulate)
