import math

import pytest

from exceptions import ValidationError
from models import (BranchingSource, EventKind, EventRecord, MomentTable, Outcome,
                    QuadratureSpec, SimulationRun)


def test_quadrature_spec_validation():
    with pytest.raises(ValidationError):
        QuadratureSpec(nodes_per_axis=7)
    with pytest.raises(ValidationError):
        QuadratureSpec(nodes_per_axis=4)
    with pytest.raises(ValidationError):
        QuadratureSpec(tol=0.0)


def test_quadrature_spec_pinning():
    spec = QuadratureSpec(tol=1e-8, max_nodes=2 ** 20)
    pinned = spec.at(256)
    assert pinned.nodes_per_axis == 256
    assert pinned.fixed
    assert pinned.tol == 1e-8
    assert pinned.max_nodes == 2 ** 20


def test_factorial_moments():
    source = BranchingSource(position=(0,), coeffs=(0.1, -1.0, 0.2, 0.3, 0.4))
    assert source.intensity == pytest.approx(-1.0 + 0.4 + 0.9 + 1.6)
    assert source.factorial_moment(2) == pytest.approx(2 * 0.2 + 6 * 0.3 + 12 * 0.4)
    assert source.factorial_moment(4) == pytest.approx(24 * 0.4)
    assert source.factorial_moment(5) == 0.0


def test_event_categories():
    jump = EventRecord(time=0.5, site=(0,), kind=EventKind.JUMP, offset=(-1,))
    death = EventRecord(time=0.5, site=(0,), kind=EventKind.BRANCH, offspring=0)
    assert jump.category == "jump(-1,)"
    assert death.category == "branch0"


def test_d_bound_margin():
    table = MomentTable(n_max=3, lambda0=0.5, x_points=[(0,)], y_points=[(0,)], f={}, psi={})
    assert math.isnan(table.d_bound_margin(2, (0,)))
    table.D[(2, 0, (0,))] = 1.5
    table.D[(2, 1, (0,))] = -1.75
    assert table.d_bound_margin(2, (0,)) == pytest.approx(2.0 - 1.75)


def test_run_survival():
    run = SimulationRun(seed=1, replica=0, horizon=1.0, cap=10, start=(0,), snapshots=[],
                        outcome=Outcome.CAP_HIT, final_time=0.5, final_total=11, events=12)
    assert run.survived
    run.outcome = Outcome.EXTINCT
    assert not run.survived
