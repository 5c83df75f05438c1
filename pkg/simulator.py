"""
Exact event-driven simulation of the branching random walk

Aggregated Gillespie sampler over site counts. The event loop is compiled with
numba and works on flat arrays: per-slot site coordinates and counts, a partial-sum
(Fenwick) tree over the off-source counts, and a typed dict from packed site
coordinates to slots. Source sites own the first N slots and are handled directly.
"""
import itertools
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from numba import njit, types
from numba.typed import Dict as TypedDict
from scipy import stats

from exceptions import EmptyPopulation, TooFewSurvivors, ValidationError
from green import total_mean
from models import (BRWConfig, EstimatorReport, EventKind, EventRecord, Outcome, Point,
                    PopulationState, SimulationRun, Snapshot)

logger = logging.getLogger(__name__)

DEFAULT_SNAPSHOTS = 64
INITIAL_CAPACITY = 64
MAX_EVENTS = np.iinfo(np.int64).max

# sites are packed into one int64 key, 21 bits per coordinate
COORD_BITS = 21
COORD_OFFSET = 1 << 20

# kernel status codes
PAUSED, NEED_SLOTS, EXTINCT, COMPLETED, CAP_HIT = 0, 1, 2, 3, 4
_OUTCOMES = {EXTINCT: Outcome.EXTINCT, COMPLETED: Outcome.COMPLETED, CAP_HIT: Outcome.CAP_HIT}

# meta layout
N_SLOTS, FREE_TOP, OFF_TOTAL, TOTAL, NEXT_SNAPSHOT, EVENTS = 0, 1, 2, 3, 4, 5


def replica_rng(seed: int, replica: int) -> np.random.Generator:
    """Independent stream per replica: Philox keyed by SeedSequence(seed, spawn_key=(replica,))"""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(replica,))))


# ============================================================================
# COMPILED EVENT LOOP
# ============================================================================

@njit(cache=True)
def _pack(point):
    key = 0
    for a in range(point.shape[0]):
        key |= (point[a] + COORD_OFFSET) << (COORD_BITS * a)
    return key


@njit(cache=True)
def _tree_add(tree, slot, delta):
    i = slot + 1
    n = tree.shape[0] - 1
    while i <= n:
        tree[i] += delta
        i += i & -i


@njit(cache=True)
def _tree_find(tree, k):
    """Slot holding the k-th particle (0-based); the capacity is a power of two"""
    n = tree.shape[0] - 1
    pos = 0
    step = n
    while step:
        nxt = pos + step
        if nxt <= n and tree[nxt] <= k:
            pos = nxt
            k -= tree[nxt]
        step >>= 1
    return pos


@njit(cache=True)
def _build_tree(tree, counts, n_sources):
    tree[:] = 0
    n = tree.shape[0] - 1
    for slot in range(n_sources, counts.shape[0]):
        tree[slot + 1] = counts[slot]
    for i in range(1, n + 1):
        j = i + (i & -i)
        if j <= n:
            tree[j] += tree[i]


@njit(cache=True)
def _slot_for(point, index, coords, free, meta):
    key = _pack(point)
    slot = index[key] if key in index else -1
    if slot < 0:
        if meta[FREE_TOP] > 0:
            meta[FREE_TOP] -= 1
            slot = free[meta[FREE_TOP]]
        else:
            slot = meta[N_SLOTS]
            meta[N_SLOTS] += 1
        coords[slot, :] = point
        index[key] = slot
    return slot


@njit(cache=True)
def _add_particles(slot, delta, index, coords, counts, tree, free, meta, n_sources):
    counts[slot] += delta
    if slot >= n_sources:
        meta[OFF_TOTAL] += delta
        _tree_add(tree, slot, delta)
        if counts[slot] == 0:
            index.pop(_pack(coords[slot]))
            free[meta[FREE_TOP]] = slot
            meta[FREE_TOP] += 1


@njit(cache=True)
def _pick(cdf, length, v):
    i = 0
    while i < length - 1 and cdf[i] <= v:
        i += 1
    return i


@njit(cache=True)
def _record(k, index, coords, counts, meta, snap_totals, snap_sites, window, point):
    snap_totals[k] = meta[TOTAL]
    d = point.shape[0]
    side = 2 * window + 1
    for flat in range(snap_sites.shape[1]):
        rem = flat
        for a in range(d - 1, -1, -1):
            point[a] = rem % side - window
            rem //= side
        key = _pack(point)
        slot = index[key] if key in index else -1
        snap_sites[k, flat] = counts[slot] if slot >= 0 else 0


@njit(cache=True)
def _advance(rg, index, coords, counts, tree, free, meta, clock, last, n_sources,
             offsets, jump_cdf, walk_rate, src_rates, src_cdf, src_len, src_code,
             horizon, cap, grid, snap_totals, snap_sites, window, max_events):
    """
    Run events until the horizon, extinction, the cap or `max_events`.

    Returns NEED_SLOTS without consuming randomness when the slot arrays are full;
    the caller grows them and calls again.
    """
    d = offsets.shape[1]
    point = np.empty(d, dtype=np.int64)
    target = np.empty(d, dtype=np.int64)
    while True:
        if meta[EVENTS] >= max_events:
            return PAUSED
        if meta[TOTAL] == 0:
            return EXTINCT
        if meta[FREE_TOP] == 0 and meta[N_SLOTS] >= counts.shape[0]:
            return NEED_SLOTS

        off_rate = walk_rate * meta[OFF_TOTAL]
        rate = off_rate
        for i in range(n_sources):
            rate += src_rates[i] * counts[i]
        t_next = clock[0] - math.log1p(-rg.random()) / rate
        while meta[NEXT_SNAPSHOT] < grid.shape[0] and grid[meta[NEXT_SNAPSHOT]] < t_next:
            _record(meta[NEXT_SNAPSHOT], index, coords, counts, meta, snap_totals, snap_sites,
                    window, point)
            meta[NEXT_SNAPSHOT] += 1
        if t_next > horizon:
            clock[0] = horizon
            return COMPLETED
        clock[1] = t_next - clock[0]
        clock[0] = t_next

        u = rg.random() * rate
        v = rg.random()
        if u < off_rate:
            k = min(int(u / walk_rate), meta[OFF_TOTAL] - 1)
            slot = _tree_find(tree, k)
            code = _pick(jump_cdf, jump_cdf.shape[0], v)
        else:
            u -= off_rate
            chosen = n_sources - 1
            for i in range(n_sources):
                weight = src_rates[i] * counts[i]
                if u < weight:
                    chosen = i
                    break
                u -= weight
            while counts[chosen] == 0:
                chosen -= 1
            slot = chosen
            code = src_code[chosen, _pick(src_cdf[chosen], src_len[chosen], v)]

        last[:d] = coords[slot]
        if code >= 0:
            for a in range(d):
                target[a] = coords[slot, a] + offsets[code, a]
            _add_particles(slot, -1, index, coords, counts, tree, free, meta, n_sources)
            dest = _slot_for(target, index, coords, free, meta)
            _add_particles(dest, 1, index, coords, counts, tree, free, meta, n_sources)
            last[d] = 0
            last[d + 1] = code
        else:
            offspring = -code - 1
            counts[slot] += offspring - 1
            meta[TOTAL] += offspring - 1
            last[d] = 1
            last[d + 1] = offspring

        meta[EVENTS] += 1
        if meta[TOTAL] > cap:
            return CAP_HIT


# ============================================================================
# DRIVER
# ============================================================================

class Simulator:
    """
    Holds the compiled sampler's arrays for one population.

    Each particle off the sources jumps at rate -a(0); a particle at source x_i
    also branches at rate -b_1 into n particles with probability b_n / (-b_1).
    Coordinates must stay below 2^20 in absolute value.
    """

    def __init__(self, config: BRWConfig, state: PopulationState, rng: np.random.Generator,
                 capacity: int = INITIAL_CAPACITY):
        self.config = config
        self.state = state
        self.rng = rng
        self.dim = config.dim
        self.n_sources = config.N

        kernel = config.kernel
        self.walk_rate = kernel.total_rate
        self.offsets = kernel.offsets
        self.jump_cdf = np.cumsum(kernel.rates) / self.walk_rate
        self.jump_cdf[-1] = 1.0

        m = len(self.offsets)
        width = m + max([s.max_offspring + 1 for s in config.sources] + [0])
        self.src_rates = np.zeros(self.n_sources)
        self.src_cdf = np.ones((self.n_sources, width))
        self.src_code = np.zeros((self.n_sources, width), dtype=np.int64)
        self.src_len = np.zeros(self.n_sources, dtype=np.int64)
        for i, s in enumerate(config.sources):
            codes = list(range(m))
            weights = list(kernel.rates)
            for n, b in enumerate(s.coeffs):
                if n != 1 and b > 0:
                    codes.append(-n - 1)
                    weights.append(b)
            rate = math.fsum(weights)
            self.src_rates[i] = rate
            self.src_len[i] = len(codes)
            self.src_code[i, :len(codes)] = codes
            self.src_cdf[i, :len(codes)] = np.cumsum(weights) / rate
            self.src_cdf[i, len(codes) - 1] = 1.0

        needed = self.n_sources + len(state.counts) + 1
        capacity = 1 << max(capacity, needed).bit_length() - 1
        if capacity < needed:
            capacity *= 2
        self.index = TypedDict.empty(key_type=types.int64, value_type=types.int64)
        self.coords = np.zeros((capacity, self.dim), dtype=np.int64)
        self.counts = np.zeros(capacity, dtype=np.int64)
        self.tree = np.zeros(capacity + 1, dtype=np.int64)
        self.free = np.zeros(capacity, dtype=np.int64)
        self.meta = np.zeros(6, dtype=np.int64)
        self.clock = np.array([state.clock, 0.0])
        self.last = np.zeros(self.dim + 2, dtype=np.int64)

        for s in config.sources:
            _slot_for(np.asarray(s.position, dtype=np.int64), self.index, self.coords, self.free, self.meta)
        for y, c in state.counts.items():
            point = np.asarray(y, dtype=np.int64)
            if np.any(np.abs(point) >= COORD_OFFSET):
                raise ValidationError(f"site {y} is outside the simulated range |x| < {COORD_OFFSET}")
            slot = _slot_for(point, self.index, self.coords, self.free, self.meta)
            _add_particles(slot, c, self.index, self.coords, self.counts, self.tree, self.free,
                           self.meta, self.n_sources)
        self.meta[TOTAL] = state.total

    @property
    def events(self) -> int:
        return int(self.meta[EVENTS])

    def total_rate(self) -> float:
        return float(self.walk_rate * self.meta[OFF_TOTAL]
                     + self.src_rates @ self.counts[:self.n_sources])

    def outcome_probabilities(self, index: int) -> Dict[str, float]:
        """Event category -> probability for one particle at source `index`"""
        probs = np.diff(np.concatenate([[0.0], self.src_cdf[index, :self.src_len[index]]]))
        table = {}
        for code, p in zip(self.src_code[index, :self.src_len[index]], probs):
            if code >= 0:
                label = f"jump{tuple(int(c) for c in self.offsets[code])}"
            else:
                label = f"branch{-code - 1}"
            table[label] = float(p)
        return table

    def _grow(self):
        capacity = 2 * len(self.counts)
        self.coords = np.concatenate([self.coords, np.zeros_like(self.coords)])
        self.counts = np.concatenate([self.counts, np.zeros_like(self.counts)])
        self.free = np.concatenate([self.free, np.zeros_like(self.free)])
        self.tree = np.zeros(capacity + 1, dtype=np.int64)
        _build_tree(self.tree, self.counts, self.n_sources)
        logger.debug("Slot arrays grown to %d", capacity)

    def advance(self, horizon: float, cap: int, grid: np.ndarray, snap_totals: np.ndarray,
                snap_sites: np.ndarray, window: int, max_events: int = MAX_EVENTS) -> int:
        while True:
            status = _advance(self.rng, self.index, self.coords, self.counts, self.tree, self.free,
                              self.meta, self.clock, self.last, self.n_sources, self.offsets,
                              self.jump_cdf, self.walk_rate, self.src_rates, self.src_cdf,
                              self.src_len, self.src_code, float(horizon), int(cap), grid,
                              snap_totals, snap_sites, int(window), int(max_events))
            if status != NEED_SLOTS:
                return status
            self._grow()

    def _sync_state(self):
        occupied = np.nonzero(self.counts[:self.meta[N_SLOTS]])[0]
        self.state.counts.clear()
        self.state.counts.update({tuple(int(c) for c in self.coords[s]): int(self.counts[s])
                                  for s in occupied})
        self.state.total = int(self.meta[TOTAL])
        self.state.clock = float(self.clock[0])

    def step(self) -> Tuple[EventRecord, float]:
        """Advance by one event; returns the event and the holding time"""
        if self.state.total == 0:
            raise EmptyPopulation("cannot step an extinct population")
        self.advance(math.inf, MAX_EVENTS, _NO_GRID, _NO_TOTALS, _NO_SITES, 0,
                     max_events=self.events + 1)
        self._sync_state()
        d = self.dim
        site = tuple(int(c) for c in self.last[:d])
        if self.last[d] == 0:
            event = EventRecord(self.state.clock, site, EventKind.JUMP,
                                offset=tuple(int(c) for c in self.offsets[self.last[d + 1]]))
        else:
            event = EventRecord(self.state.clock, site, EventKind.BRANCH, offspring=int(self.last[d + 1]))
        return event, float(self.clock[1])


_NO_GRID = np.zeros(0)
_NO_TOTALS = np.zeros(0, dtype=np.int64)
_NO_SITES = np.zeros((0, 1), dtype=np.int64)


def step(state: PopulationState, config: BRWConfig, rng: np.random.Generator) -> Tuple[EventRecord, float]:
    """One aggregated event on `state` (mutated in place)"""
    return Simulator(config, state, rng).step()


def step_per_particle(particles: List[Point], config: BRWConfig, rng: np.random.Generator,
                      clock: float = 0.0) -> Tuple[List[Point], EventRecord, float]:
    """Naive reference sampler: one clock per particle, linear scan for the firing one"""
    if not particles:
        raise EmptyPopulation("cannot step an extinct population")
    kernel = config.kernel
    rates = []
    for y in particles:
        source = config.source_at(y)
        rates.append(kernel.total_rate - (source.b1 if source else 0.0))
    total = math.fsum(rates)
    dt = rng.exponential(1.0 / total)

    u = rng.random() * total
    index = len(particles) - 1
    for i, r in enumerate(rates):
        if u < r:
            index = i
            break
        u -= r
    site = particles[index]
    source = config.source_at(site)

    options = [(EventKind.JUMP, z, a) for z, a in kernel.entries]
    if source is not None:
        options += [(EventKind.BRANCH, n, b) for n, b in enumerate(source.coeffs) if n != 1 and b > 0]
    v = rng.random() * rates[index]
    kind, value, _ = options[-1]
    for option in options:
        if v < option[2]:
            kind, value, _ = option
            break
        v -= option[2]

    rest = particles[:index] + particles[index + 1:]
    if kind is EventKind.JUMP:
        moved = tuple(a + b for a, b in zip(site, value))
        return rest + [moved], EventRecord(clock + dt, site, kind, offset=value), dt
    return rest + [site] * value, EventRecord(clock + dt, site, kind, offspring=value), dt


def run(config: BRWConfig, seed: int, horizon: float, cap: int, snapshots: int = DEFAULT_SNAPSHOTS,
        start: Optional[Point] = None, window: int = 5, replica: int = 0) -> SimulationRun:
    """
    One replica from a single particle at `start` up to `horizon`.

    Snapshot k records the last state before t_k on a uniform grid over [0, T].
    Extinct runs carry zeros to T; a run exceeding `cap` is censored at that time.
    """
    if horizon <= 0:
        raise ValidationError(f"horizon must be positive, got {horizon}")
    if snapshots < 2:
        raise ValidationError("need at least two snapshot times")
    start = tuple(start) if start is not None else (0,) * config.dim
    sim = Simulator(config, PopulationState.single(start), replica_rng(seed, replica))

    grid = np.linspace(0.0, horizon, snapshots)
    side = 2 * window + 1
    totals = np.zeros(snapshots, dtype=np.int64)
    sites = np.zeros((snapshots, side ** config.dim), dtype=np.int64)
    status = sim.advance(horizon, cap, grid, totals, sites, window)
    outcome = _OUTCOMES[status]
    if outcome is Outcome.CAP_HIT:
        logger.debug("Replica %d hit the cap at t=%.3f", replica, sim.clock[0])

    recorded = snapshots if outcome is not Outcome.CAP_HIT else int(sim.meta[NEXT_SNAPSHOT])
    points = [tuple(p) for p in itertools.product(range(-window, window + 1), repeat=config.dim)]
    snaps = []
    for k in range(recorded):
        occupied = np.nonzero(sites[k])[0]
        snaps.append(Snapshot(float(grid[k]), int(totals[k]),
                              {points[i]: int(sites[k, i]) for i in occupied}))
    return SimulationRun(seed=seed, replica=replica, horizon=horizon, cap=cap, start=start,
                         snapshots=snaps, outcome=outcome, final_time=float(sim.clock[0]),
                         final_total=int(sim.meta[TOTAL]), events=sim.events)


def _run_one(args) -> SimulationRun:
    return run(*args)


def run_replicas(config: BRWConfig, seed: int, replicas: int, horizon: float, cap: int,
                 snapshots: int = DEFAULT_SNAPSHOTS, start: Optional[Point] = None,
                 window: int = 5, workers: int = 1) -> List[SimulationRun]:
    """Replicas 0..replicas-1; results do not depend on `workers`"""
    jobs = [(config, seed, horizon, cap, snapshots, start, window, r) for r in range(replicas)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_run_one, jobs, chunksize=max(1, replicas // (4 * workers))))
    else:
        runs = [_run_one(job) for job in jobs]
    extinct = sum(r.outcome is Outcome.EXTINCT for r in runs)
    capped = sum(r.outcome is Outcome.CAP_HIT for r in runs)
    logger.info("Ran %d replica(s): %d extinct, %d capped", replicas, extinct, capped)
    return runs


# ============================================================================
# ESTIMATORS
# ============================================================================

def _totals_matrix(runs: Sequence[SimulationRun]) -> Tuple[np.ndarray, np.ndarray]:
    """Snapshot totals, NaN after a capped run was censored"""
    grid = np.array([s.time for s in max(runs, key=lambda r: len(r.snapshots)).snapshots])
    totals = np.full((len(runs), len(grid)), np.nan)
    for i, r in enumerate(runs):
        totals[i, :len(r.snapshots)] = [s.total for s in r.snapshots]
    return grid, totals


def _growth_slope(times: np.ndarray, totals: np.ndarray) -> float:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", category=RuntimeWarning)
        mean = np.nanmean(totals, axis=0)
    usable = np.isfinite(mean) & (mean > 0)
    if usable.sum() < 2:
        return float("nan")
    return float(np.polyfit(times[usable], np.log(mean[usable]), 1)[0])


def estimate(runs: Sequence[SimulationRun], lambda0: Optional[float] = None, bootstrap: int = 1000,
             seed: int = 0, min_survivors: int = 100,
             predicted_ratios: Optional[Sequence[float]] = None) -> EstimatorReport:
    """
    Growth rate from log mean population on [T/2, T], limit shape psi from the final
    snapshot of uncensored survivors, and samples of xi = mu_T e^{-lambda_0 T}.
    Confidence intervals are percentile bootstraps over replicas.
    """
    if not runs:
        raise TooFewSurvivors("no replicas")
    survivors = [r for r in runs if r.survived]
    if len(survivors) < min_survivors:
        raise TooFewSurvivors(f"{len(survivors)} surviving replica(s), need {min_survivors}")

    horizon = runs[0].horizon
    grid, totals = _totals_matrix(runs)
    late = grid >= horizon / 2
    times, late_totals = grid[late], totals[:, late]
    lambda_hat = _growth_slope(times, late_totals)

    rng = np.random.default_rng(seed)
    slopes = []
    for _ in range(bootstrap):
        slopes.append(_growth_slope(times, late_totals[rng.integers(len(runs), size=len(runs))]))
    slopes = np.array(slopes)
    slopes = slopes[np.isfinite(slopes)]
    lambda_ci = (float(np.percentile(slopes, 2.5)), float(np.percentile(slopes, 97.5)))

    finals = [r.snapshots[-1] for r in survivors
              if r.outcome is Outcome.COMPLETED and r.snapshots and r.snapshots[-1].total > 0]
    sites = sorted({y for s in finals for y in s.sites})
    shares = np.array([[s.sites.get(y, 0) / s.total for y in sites] for s in finals]).reshape(len(finals), len(sites))
    psi_mean = shares.mean(axis=0) if len(finals) else np.zeros(len(sites))
    psi_boot = np.array([shares[rng.integers(len(finals), size=len(finals))].mean(axis=0)
                         for _ in range(bootstrap)]) if len(finals) else np.zeros((1, len(sites)))
    psi_hat = {y: float(v) for y, v in zip(sites, psi_mean)}
    psi_ci = {y: (float(np.percentile(psi_boot[:, i], 2.5)), float(np.percentile(psi_boot[:, i], 97.5)))
              for i, y in enumerate(sites)}

    xi, moments, ratios = [], [], []
    if lambda0 is not None:
        xi = [r.final_total * math.exp(-lambda0 * horizon)
              for r in runs if r.outcome is not Outcome.CAP_HIT]
        xi_arr = np.array(xi)
        moments = [float(np.mean(xi_arr ** n)) for n in range(1, 5)]
        ratios = [m / moments[0] ** n if moments[0] > 0 else float("nan")
                  for n, m in enumerate(moments, start=1)]

    extinct = sum(r.outcome is Outcome.EXTINCT for r in runs)
    logger.info("lambda_hat = %.5f [%.5f, %.5f] from %d survivor(s)",
                lambda_hat, lambda_ci[0], lambda_ci[1], len(survivors))
    return EstimatorReport(replicas=len(runs), survivors=len(survivors),
                           extinction_fraction=extinct / len(runs), lambda_hat=lambda_hat,
                           lambda_ci=lambda_ci, psi_hat=psi_hat, psi_ci=psi_ci,
                           psi_coverage=float(sum(psi_hat.values())), xi_samples=xi,
                           xi_moments=moments, xi_moment_ratios=ratios,
                           predicted_ratios=list(predicted_ratios or []))


def small_time_mean_check(runs: Sequence[SimulationRun], config: BRWConfig, radius: int,
                          t_max: float) -> List[Dict[str, float]]:
    """Replica mean of mu_t against m_1(t, x) at every uncensored snapshot time <= t_max"""
    grid, totals = _totals_matrix(runs)
    start = runs[0].start
    rows = []
    for k, t in enumerate(grid):
        if t > t_max:
            break
        column = totals[:, k]
        column = column[np.isfinite(column)]
        mean = float(column.mean())
        stderr = float(column.std(ddof=1) / math.sqrt(len(column))) if len(column) > 1 else 0.0
        expected = total_mean(config, radius, float(t), start)
        z = (mean - expected) / stderr if stderr > 0 else 0.0
        rows.append({"t": float(t), "mean": mean, "stderr": stderr, "m1": expected, "z": z})
    return rows


def event_frequency_test(config: BRWConfig, particles: Sequence[Point], samples: int,
                         seed: int) -> Tuple[float, Dict[str, Tuple[int, int]]]:
    """
    Chi-square homogeneity test of first-event (site, category) frequencies between
    the aggregated and per-particle samplers started from the same population.

    Returns:
        (p-value, {label: (aggregated count, per-particle count)})
    """
    rng_a = replica_rng(seed, 0)
    rng_b = replica_rng(seed, 1)
    counts: Dict[str, List[int]] = {}
    for _ in range(samples):
        state = PopulationState(counts={}, total=0)
        for y in particles:
            state.add(tuple(y), 1)
        event, _ = step(state, config, rng_a)
        counts.setdefault(f"{event.site}:{event.category}", [0, 0])[0] += 1
        _, event, _ = step_per_particle([tuple(y) for y in particles], config, rng_b)
        counts.setdefault(f"{event.site}:{event.category}", [0, 0])[1] += 1
    labels = sorted(counts)
    table = np.array([counts[label] for label in labels]).T
    _, p_value, _, _ = stats.chi2_contingency(table)
    return float(p_value), {label: tuple(counts[label]) for label in labels}
