#!/usr/bin/env python3
"""
Branching Random Walk Toolkit - Command Line Interface
"""
import functools
import logging
import sys

import click
import numpy as np
from tabulate import tabulate

from config_manager import TOOL_VERSION, describe_defaults, parse_config
from exceptions import BRWError, NotSupercritical, ValidationError
from green import green_values, recurrence_probe, truncated_heat
from moments import (carleman_diag, check_bounds, factorization_residual, growth_envelope,
                     moment_constants)
from report_generator import ReportGenerator, point_label
from simulator import estimate, run_replicas
from spectral import analyze, find_lambda0, require_supercritical, window_points
from verification import run_verification
from walk_kernel import symbol

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s [%(levelname)s] %(name)s: %(message)s'


def _point(text, dim):
    """Parse "1,-2" into a lattice point"""
    if text is None:
        return (0,) * dim
    try:
        point = tuple(int(c) for c in str(text).split(','))
    except ValueError:
        raise ValidationError(f"cannot parse lattice point {text!r}")
    if len(point) != dim:
        raise ValidationError(f"point {text!r} does not have dimension {dim}")
    return point


def handle_errors(func):
    """Map library errors onto exit statuses: 1 not supercritical, 2 any other error"""
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except NotSupercritical as e:
            click.echo(f"✗ Not supercritical: {e}", err=True)
            sys.exit(1)
        except BRWError as e:
            click.echo(f"✗ {type(e).__name__}: {e}", err=True)
            sys.exit(2)
    return wrapper


def _load(ctx):
    obj = ctx.obj
    if obj.get('config_file') is None:
        if not obj.get('config_path'):
            click.echo("✗ --config is required for this command", err=True)
            sys.exit(2)
        obj['config_file'] = parse_config(obj['config_path'])
    return obj['config_file']


def _reporter(ctx, command, config_file, seed=None, **resolved):
    """Report writer whose header records the command flags, `resolved` overriding the raw values"""
    options = {**ctx.params, **resolved}
    if 'seed' in options:
        options['seed'] = seed
    return ReportGenerator(config_file, command, ctx.obj['output_dir'], seed=seed, options=options)


@click.group()
@click.option('--config', 'config_path', type=click.Path(dir_okay=False), help='JSON run configuration')
@click.option('--output-dir', default='.', type=click.Path(file_okay=False), help='Directory for JSON/CSV artifacts')
@click.option('--verbose', is_flag=True, help='Debug logging')
@click.version_option(TOOL_VERSION)
@click.pass_context
def cli(ctx, config_path, output_dir, verbose):
    """Branching Random Walk Toolkit - spectra, moments and simulation"""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format=LOG_FORMAT, stream=sys.stderr, force=True)
    ctx.ensure_object(dict)
    ctx.obj.update(config_path=config_path, output_dir=output_dir, config_file=None)


# ============================================================================
# MODEL COMMANDS
# ============================================================================

@cli.command()
@click.pass_context
@handle_errors
def validate(ctx):
    """Check the config and summarize the walk and sources"""
    cf = _load(ctx)
    config = cf.config
    click.echo(f"✓ Config valid: d={config.dim}, N={config.N}, a(0)={config.kernel.diagonal:.6g}")
    rows = [[point_label(s.position), s.intensity, s.factorial_moment(2), s.max_offspring]
            for s in config.sources]
    click.echo(tabulate(rows, headers=['Source', 'beta', 'beta^(2)', 'Max offspring'], tablefmt='simple'))


@cli.command()
@click.pass_context
def defaults(ctx):
    """List every config option with its default"""
    rows = [[d['category'], d['key'], d['value'], d['description']] for d in describe_defaults()]
    click.echo(tabulate(rows, headers=['Category', 'Key', 'Default', 'Description'], tablefmt='simple'))


@cli.command('symbol')
@click.option('--points', default=16, help='Grid points per axis on [-pi, pi)')
@click.pass_context
@handle_errors
def symbol_table(ctx, points):
    """Tabulate the Fourier symbol phi(theta)"""
    cf = _load(ctx)
    dim = cf.dim
    axis = np.linspace(-np.pi, np.pi, points, endpoint=False)
    grid = np.stack([m.ravel() for m in np.meshgrid(*([axis] * dim), indexing='ij')], axis=1)
    values = np.atleast_1d(symbol(cf.config.kernel, grid))
    columns = [f"theta{k + 1}" for k in range(dim)] + ['phi']
    path = _reporter(ctx, 'symbol', cf).write_csv(
        'symbol.csv', columns, ([*theta, phi] for theta, phi in zip(grid, values)))
    click.echo(f"✓ Symbol table saved to: {path}")


@cli.command()
@click.option('--lam', 'lams', multiple=True, type=float, required=True, help='lambda > 0 (repeatable)')
@click.option('--radius', default=5, help='Sup-norm radius of displacements')
@click.pass_context
@handle_errors
def green(ctx, lams, radius):
    """Tabulate I_x(lambda) over a box of displacements"""
    cf = _load(ctx)
    spec = cf.quadrature_spec()
    points = window_points(cf.dim, radius)
    columns = {lam: green_values(cf.config.kernel, points, lam, spec) for lam in lams}
    rows = [[tuple(int(c) for c in p)] + [columns[lam][i] for lam in lams] for i, p in enumerate(points)]
    path = _reporter(ctx, 'green', cf).write_csv(
        'green.csv', ['x'] + [f"I(lambda={lam:g})" for lam in lams], rows)
    origin = int(np.flatnonzero(np.all(points == 0, axis=1))[0])
    click.echo(tabulate([[lam, columns[lam][origin]] for lam in lams],
                        headers=['lambda', 'I_0(lambda)'], tablefmt='simple', floatfmt='.12g'))
    click.echo(f"✓ Green's function table saved to: {path}")


@cli.command()
@click.option('--t', 't', type=float, required=True, help='Time t >= 0')
@click.option('--x', default=None, help='Start point, e.g. "0" or "1,-1"')
@click.option('--y', default=None, help='End point')
@click.option('--walk-only', is_flag=True, help='Transition density of the walk without sources')
@click.pass_context
@handle_errors
def heat(ctx, t, x, y, walk_only):
    """p(t, x, y) or m_1(t, x, y) on the truncated box"""
    cf = _load(ctx)
    x, y = _point(x, cf.dim), _point(y, cf.dim)
    target = cf.config.kernel if walk_only else cf.config
    value = truncated_heat(target, cf.get('truncation_radius'), t, x, y)
    name = 'p' if walk_only else 'm1'
    path = _reporter(ctx, 'heat', cf, x=x, y=y).write_json(
        'heat.json', {'quantity': name, 't': t, 'x': list(x), 'y': list(y), 'value': value})
    click.echo(f"{name}({t:g}, {point_label(x)}, {point_label(y)}) = {value:.12g}")
    click.echo(f"✓ Saved to: {path}")


@cli.command()
@click.pass_context
@handle_errors
def probe(ctx):
    """Whether G_0 is finite (transient walk)"""
    cf = _load(ctx)
    verdict = recurrence_probe(cf.config.kernel, cf.quadrature_spec())
    _reporter(ctx, 'probe', cf).write_json('probe.json', {'verdict': verdict})
    click.echo(f"G_0 {'finite' if verdict.finite else 'infinite'}: {verdict.note}")
    if verdict.g0_estimate is not None:
        click.echo(f"G_0 ~ {verdict.g0_estimate:.8f}")


# ============================================================================
# SPECTRAL COMMANDS
# ============================================================================

def _analyze(cf):
    return analyze(cf.config, cf.quadrature_spec(), window_radius=cf.get('window_radius'),
                   lambda_floor=cf.get('lambda_floor'))


@cli.command()
@click.pass_context
@handle_errors
def lambda0(ctx):
    """Largest positive eigenvalue lambda_0 of H"""
    cf = _load(ctx)
    search = find_lambda0(cf.config, cf.quadrature_spec(), cf.get('lambda_floor'))
    payload = {'lambda0': search.value, 'residual': search.residual, 'bracket': search.bracket,
               'quadrature_nodes': search.nodes, 'caveat': search.caveat}
    path = _reporter(ctx, 'lambda0', cf).write_json('lambda0.json', payload)
    if search.value is None:
        raise NotSupercritical(search.caveat or "no positive eigenvalue")
    click.echo(f"✓ lambda_0 = {search.value:.12f} (residual {search.residual:.1e})")
    click.echo(f"  Saved to: {path}")


@cli.command()
@click.pass_context
@handle_errors
def spectrum(ctx):
    """All positive eigenvalues, eigenfunction and limit shape psi"""
    cf = _load(ctx)
    result = _analyze(cf)
    reporter = _reporter(ctx, 'spectrum', cf)
    if not result.supercritical:
        reporter.write_json('spectrum.json', {'lambda0': None, 'caveat': result.caveat})
        require_supercritical(result)

    norm = float(cf.config.intensities @ result.f_sources)
    psi = {p: result.lambda0 * v / norm for p, v in result.f_extended.items()}
    payload = {
        'lambda0': result.lambda0,
        'residual': result.residual,
        'positive_eigs': result.positive_eigs,
        'perron_gap': result.perron_gap,
        'isolation_gap': result.isolation_gap,
        'tail_bound': result.tail_bound,
        'f_sources': result.f_sources,
        'f': result.f_extended,
        'psi': psi,
        'caveat': result.caveat,
    }
    path = reporter.write_json('spectrum.json', payload)
    rows = [[k + 1, e] for k, e in enumerate(result.positive_eigs)]
    click.echo(tabulate(rows, headers=['#', 'Eigenvalue'], tablefmt='simple', floatfmt='.12g'))
    click.echo(f"✓ Spectrum saved to: {path}")


# ============================================================================
# MOMENT COMMANDS
# ============================================================================

@cli.command()
@click.option('--n-max', type=int, default=None, help='Highest moment order (config n_max)')
@click.option('--x', 'xs', multiple=True, help='Start point(s) (default origin)')
@click.option('--y', 'ys', multiple=True, help='Target point(s) (default origin)')
@click.pass_context
@handle_errors
def moments(ctx, n_max, xs, ys):
    """Limit constants C_n(x, y), C_n(x) and the D_n bound margin"""
    cf = _load(ctx)
    n_max = n_max or cf.get('n_max')
    x_points = [_point(x, cf.dim) for x in xs] or [(0,) * cf.dim]
    y_points = [_point(y, cf.dim) for y in ys] or [(0,) * cf.dim]
    result = _analyze(cf)
    require_supercritical(result)
    table = moment_constants(cf.config, result, n_max, x_points, y_points,
                             cf.get('truncation_radius'), cf.quadrature_spec())

    def rows():
        for n in range(1, n_max + 1):
            for x in x_points:
                margin = table.d_bound_margin(n, x) if n >= 2 else None
                for y in y_points:
                    yield [n, x, y, table.C_xy[(n, x, y)], table.C_x[(n, x)], margin]

    reporter = _reporter(ctx, 'moments', cf, n_max=n_max, xs=x_points, ys=y_points)
    path = reporter.write_csv('moments.csv', ['n', 'x', 'y', 'C_xy', 'C_x', 'D_bound_margin'], rows())
    summary = {'lambda0': table.lambda0, 'n_star': table.n_star, 'operator_norm': table.operator_norm,
               'factorization_residual': factorization_residual(table), 'psi': table.psi}
    reporter.write_json('moments.json', summary)
    click.echo(f"✓ Moment table (n <= {n_max}, n* = {table.n_star}) saved to: {path}")


@cli.command()
@click.option('--n-max', type=int, default=20, help='Highest moment order (>= 10)')
@click.option('--x', default=None, help='Start point (default origin)')
@click.pass_context
@handle_errors
def carleman(ctx, n_max, x):
    """Carleman divergence check of the limit moments at x"""
    cf = _load(ctx)
    x = _point(x, cf.dim)
    result = _analyze(cf)
    require_supercritical(result)
    table = moment_constants(cf.config, result, n_max, [x], [x], cf.get('truncation_radius'),
                             cf.quadrature_spec())
    envelope = growth_envelope(table, cf.config)
    report = carleman_diag(table, x, envelope)
    path = _reporter(ctx, 'carleman', cf, x=x).write_json(
        'carleman.json', {'envelope': envelope, 'carleman': report, 'diverges': report.diverges})
    status = "✓ diverges" if report.diverges else "✗ inconclusive"
    click.echo(f"{status}: gamma={envelope.gamma:.6g}, sum of {n_max} terms = {report.partial_sums[-1]:.6g}")
    click.echo(f"  Saved to: {path}")


@cli.command()
@click.option('--n-max', type=int, default=300, help='Largest n checked (<= 300)')
@click.pass_context
@handle_errors
def bounds(ctx, n_max):
    """Composition sum bounds and induction thresholds (no config needed)"""
    report = check_bounds(n_max)
    rows = [['f(n,r) < 6(n-1)^(n-1) violations', len(report.violations)],
            ['f(n,n-1) = 4(n-1) failures', len(report.identity_failures)],
            ['smallest constant C', f"{report.min_constant:.6f} at {report.min_constant_at}"],
            ['n1 / n2 / n3', f"{report.n1} / {report.n2} / {report.n3}"],
            ['induction start', report.induction_start]]
    click.echo(tabulate(rows, headers=['Check', 'Result'], tablefmt='simple'))
    if ctx.obj.get('config_path'):
        _reporter(ctx, 'bounds', _load(ctx)).write_json('bounds.json', {'bounds': report})
    click.echo("✓ consistent" if report.consistent else "✗ inconsistent")


# ============================================================================
# SIMULATION COMMANDS
# ============================================================================

@cli.command()
@click.option('--seed', type=int, default=None, help='Master seed (config seed)')
@click.option('--replicas', type=int, default=None, help='Number of replicas')
@click.option('--horizon', type=float, default=None, help='Horizon T')
@click.option('--cap', type=int, default=None, help='Population cap')
@click.option('--workers', type=int, default=None, help='Worker processes')
@click.pass_context
@handle_errors
def simulate(ctx, seed, replicas, horizon, cap, workers):
    """Run replicas and estimate lambda_0, psi and the law of xi"""
    cf = _load(ctx).with_options(seed=seed, replicas=replicas, horizon=horizon, cap=cap, workers=workers)
    seed = cf.get('seed')
    search = find_lambda0(cf.config, cf.quadrature_spec(), cf.get('lambda_floor'))
    if search.value is None:
        logger.warning("No positive eigenvalue (%s); xi samples are skipped", search.caveat)
    runs = run_replicas(cf.config, seed, cf.get('replicas'), cf.get('horizon'), cf.get('cap'),
                        cf.get('snapshots'), cf.start(), cf.get('site_window'), cf.get('workers'))
    reporter = _reporter(ctx, 'simulate', cf, seed=seed, replicas=cf.get('replicas'),
                         horizon=cf.get('horizon'), cap=cf.get('cap'), workers=cf.get('workers'))
    rows = ([r.replica, s.time, s.total, r.outcome] for r in runs for s in r.snapshots)
    csv_path = reporter.write_csv('simulation.csv', ['replica', 't', 'total', 'outcome'], rows)

    report = estimate(runs, search.value, bootstrap=cf.get('bootstrap'), seed=seed,
                      min_survivors=cf.get('min_survivors'))
    json_path = reporter.write_json('estimates.json', {'lambda0': search.value, 'estimates': report})
    click.echo(tabulate([
        ['replicas', report.replicas],
        ['survivors', report.survivors],
        ['lambda_hat', f"{report.lambda_hat:.5f} [{report.lambda_ci[0]:.5f}, {report.lambda_ci[1]:.5f}]"],
        ['lambda_0', search.value],
    ], tablefmt='simple'))
    click.echo(f"✓ Snapshots saved to: {csv_path}")
    click.echo(f"✓ Estimates saved to: {json_path}")


@cli.command()
@click.option('--quick', is_flag=True, help='Fewer random trials and a shorter bounds range')
@click.option('--no-simulate', is_flag=True, help='Skip the Monte Carlo checks')
@click.option('--replicas', type=int, default=None, help='Replicas for the Monte Carlo checks')
@click.pass_context
@handle_errors
def verify(ctx, quick, no_simulate, replicas):
    """Run the acceptance checks and report pass/fail"""
    cf = _load(ctx).with_options(replicas=replicas)
    results = run_verification(cf, quick=quick, simulate=not no_simulate)
    reporter = _reporter(ctx, 'verify', cf, seed=cf.get('seed'), replicas=cf.get('replicas'))
    reporter.write_json('verify.json', {'checks': results, 'passed': all(r.passed for r in results)})
    click.echo(reporter.generate_text_report('Verification', [
        ('CHECKS', ['Check', 'Status', 'Seconds', 'Detail'],
         [[r.name, 'PASS' if r.passed else 'FAIL', r.seconds, r.detail] for r in results]),
    ]))
    if not all(r.passed for r in results):
        sys.exit(1)


if __name__ == '__main__':
    cli()
