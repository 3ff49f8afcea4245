"""Control-space tests: cost term, gradient assembly, projection, and the
variational-inequality residual."""

import numpy as np
import pytest

from kscontrol.adjoint import AdjointTrajectory
from kscontrol.control import (
    AdmissibleSet,
    ControlField,
    CostWeights,
    GradientField,
    TrackingTargets,
    control_cost,
    project,
    qc_norm,
    reduced_gradient,
    require_well_posed,
    vi_residual,
)
from kscontrol.errors import GridMismatchError
from kscontrol.forward import StateTrajectory, TimeGrid
from kscontrol.mesh import Field2D, GridSpec, RegionMask, constant_field

GRID = GridSpec(Lx=1.0, Ly=1.0, nx=8, ny=8)
TG = TimeGrid(T=1.0, nt=10)
REGION = RegionMask.rectangle(GRID, 0.25, 0.25, 0.75, 0.75)


def _control(values):
    return ControlField(TG, REGION, values)


def _random_control(rng, lo=-1.0, hi=1.0):
    return _control(rng.uniform(lo, hi, size=(TG.nt, REGION.count)))


# ----------------------------------------------------------------------
# layout


def test_control_field_validates_shape():
    with pytest.raises(ValueError, match="shape"):
        _control(np.zeros((TG.nt, REGION.count + 1)))
    with pytest.raises(ValueError, match="finite"):
        bad = np.zeros((TG.nt, REGION.count))
        bad[3, 2] = np.inf
        _control(bad)


def test_control_region_must_be_nonempty():
    empty = RegionMask.rectangle(GRID, 2.0, 2.0, 3.0, 3.0)
    with pytest.raises(ValueError, match="at least one cell"):
        ControlField.zeros(TG, empty)


def test_field_at_scatters_onto_region_only():
    f = ControlField.from_constant(TG, REGION, 2.5)
    field = f.field_at(4)
    assert field.grid == GRID
    np.testing.assert_array_equal(field.values[REGION.inside], 2.5)
    np.testing.assert_array_equal(field.values[~REGION.inside], 0.0)


def test_layout_matches():
    f = ControlField.zeros(TG, REGION)
    g = GradientField(TG, REGION, np.ones((TG.nt, REGION.count)))
    assert f.layout_matches(g)
    other = ControlField.zeros(TimeGrid(T=1.0, nt=5), REGION)
    assert not f.layout_matches(other)


def test_tracking_targets_indexing():
    static = TrackingTargets(constant_field(GRID, 0.1), constant_field(GRID, 0.2))
    u_d, v_d = static.at(7)
    assert u_d.values[0, 0] == 0.1 and v_d.values[0, 0] == 0.2
    per_level = TrackingTargets(
        [constant_field(GRID, float(n)) for n in range(3)],
        constant_field(GRID, 0.5),
    )
    assert per_level.at(2)[0].values[0, 0] == 2.0


# ----------------------------------------------------------------------
# cost term


def test_control_cost_of_zero_is_zero():
    assert control_cost(ControlField.zeros(TG, REGION), 1.0, 2.1) == 0.0


def test_control_cost_of_unit_control_is_measure_over_p():
    # |f| = 1 makes the integrand 1, so the cost is (gamma_f/p) * |Q_c|;
    # picking gamma_f = p turns it into the plain space-time measure
    p = 2.1
    f = ControlField.from_constant(TG, REGION, 1.0)
    expected = REGION.area * TG.T
    np.testing.assert_allclose(control_cost(f, p, p), expected, rtol=1e-13)


def test_control_cost_p_homogeneity():
    rng = np.random.default_rng(61)
    f = _random_control(rng)
    p = 2.1
    c = -1.7
    scaled = _control(c * f.values)
    np.testing.assert_allclose(
        control_cost(scaled, 0.5, p),
        abs(c) ** p * control_cost(f, 0.5, p),
        rtol=1e-12,
    )


def test_control_cost_gateaux_derivative():
    """Directional derivative of the cost against the analytic integrand
    gamma_f sgn(f) |f|^(p-1), for controls bounded away from zero where
    the p-power is smooth."""
    rng = np.random.default_rng(62)
    p, gamma_f = 2.1, 0.7
    f = _control(rng.uniform(0.5, 1.5, size=(TG.nt, REGION.count)))
    direction = rng.standard_normal(f.values.shape)
    eps = 1e-6
    plus = control_cost(_control(f.values + eps * direction), gamma_f, p)
    minus = control_cost(_control(f.values - eps * direction), gamma_f, p)
    fd = (plus - minus) / (2.0 * eps)
    integrand = gamma_f * np.sign(f.values) * np.abs(f.values) ** (p - 1.0)
    exact = float(np.sum(integrand * direction)) * GRID.cell_area * TG.tau
    np.testing.assert_allclose(fd, exact, rtol=1e-6)


def test_control_cost_rejects_negative_weight():
    f = ControlField.zeros(TG, REGION)
    with pytest.raises(ValueError):
        control_cost(f, -1.0, 2.1)


# ----------------------------------------------------------------------
# reduced gradient


def _trivial_state_and_adjoint(v_val, eta_val):
    u = [constant_field(GRID, 0.0) for _ in range(TG.nt + 1)]
    v = [constant_field(GRID, v_val) for _ in range(TG.nt + 1)]
    state = StateTrajectory(time_grid=TG, u=u, v=v)
    lam = [constant_field(GRID, 0.0) for _ in range(TG.nt + 1)]
    eta = [constant_field(GRID, eta_val) for _ in range(TG.nt + 1)]
    return state, AdjointTrajectory(TG, lam, eta)


def test_reduced_gradient_at_zero_control_with_zero_multiplier():
    state, adj = _trivial_state_and_adjoint(0.8, 0.0)
    d = reduced_gradient(ControlField.zeros(TG, REGION), state, adj, 1.0, 2.1)
    np.testing.assert_array_equal(d.values, np.zeros((TG.nt, REGION.count)))


def test_reduced_gradient_coupling_term():
    # gamma_f = 0 isolates the v * eta coupling
    state, adj = _trivial_state_and_adjoint(0.8, -0.3)
    d = reduced_gradient(ControlField.zeros(TG, REGION), state, adj, 0.0, 2.1)
    np.testing.assert_allclose(d.values, 0.8 * -0.3, rtol=1e-14)


def test_reduced_gradient_regularization_term():
    state, adj = _trivial_state_and_adjoint(0.0, 0.0)
    rng = np.random.default_rng(63)
    f = _random_control(rng, 0.2, 1.0)
    p, gamma_f = 2.1, 1.3
    d = reduced_gradient(f, state, adj, gamma_f, p)
    np.testing.assert_allclose(
        d.values, gamma_f * np.abs(f.values) ** (p - 1.0) * np.sign(f.values),
        rtol=1e-13,
    )


# ----------------------------------------------------------------------
# projection and optimality residual


def test_project_is_identity_inside_the_box():
    rng = np.random.default_rng(64)
    box = AdmissibleSet("box", -1.0, 1.0)
    f = _random_control(rng, -0.9, 0.9)
    np.testing.assert_array_equal(project(f, box).values, f.values)


def test_project_clips_and_is_idempotent():
    box = AdmissibleSet("box", -1.0, 1.0)
    f = ControlField.from_constant(TG, REGION, 10.0)
    once = project(f, box)
    np.testing.assert_array_equal(once.values, 1.0)
    np.testing.assert_array_equal(project(once, box).values, once.values)


def test_project_is_non_expansive():
    rng = np.random.default_rng(65)
    box = AdmissibleSet("box", -0.5, 0.5)
    for _ in range(5):
        a = _random_control(rng, -2.0, 2.0)
        b = _random_control(rng, -2.0, 2.0)
        pa, pb = project(a, box), project(b, box)
        assert qc_norm(pa.values - pb.values, a) <= qc_norm(a.values - b.values, a) + 1e-15


def test_vi_residual_zero_gradient():
    f = ControlField.from_constant(TG, REGION, 0.3)
    d = GradientField(TG, REGION, np.zeros((TG.nt, REGION.count)))
    assert vi_residual(f, d, AdmissibleSet(), step=1.0) == 0.0


def test_vi_residual_unconstrained_is_step_times_gradient_norm():
    rng = np.random.default_rng(66)
    f = _random_control(rng)
    d = GradientField(TG, REGION, rng.standard_normal(f.values.shape))
    step = 0.7
    np.testing.assert_allclose(
        vi_residual(f, d, AdmissibleSet(), step=step),
        step * qc_norm(d.values, f),
        rtol=1e-13,
    )


def test_vi_residual_vanishes_on_saturated_bound():
    # at f = f_max with the gradient pushing further up, the projection
    # lands back on the bound: a constrained stationary point
    box = AdmissibleSet("box", -1.0, 1.0)
    f = ControlField.from_constant(TG, REGION, 1.0)
    d = GradientField(TG, REGION, -0.4 * np.ones((TG.nt, REGION.count)))
    assert vi_residual(f, d, box, step=1.0) == 0.0


def test_vi_residual_validation():
    f = ControlField.zeros(TG, REGION)
    d = GradientField(TG, REGION, np.zeros((TG.nt, REGION.count)))
    with pytest.raises(ValueError, match="step"):
        vi_residual(f, d, AdmissibleSet(), step=0.0)
    other = GradientField(TimeGrid(T=1.0, nt=5), REGION,
                          np.zeros((5, REGION.count)))
    with pytest.raises(GridMismatchError):
        vi_residual(f, other, AdmissibleSet())


# ----------------------------------------------------------------------
# admissibility and weights


def test_admissible_set_validation():
    with pytest.raises(ValueError, match="kind"):
        AdmissibleSet("fancy")
    with pytest.raises(ValueError, match="finite"):
        AdmissibleSet("box", -np.inf, 1.0)
    with pytest.raises(ValueError, match="f_min"):
        AdmissibleSet("box", 2.0, 1.0)


def test_cost_weights_validation():
    with pytest.raises(ValueError):
        CostWeights(gamma_u=-1.0)


def test_well_posedness_guard():
    require_well_posed(CostWeights(1.0, 1.0, 0.0), AdmissibleSet("box", -1.0, 1.0))
    require_well_posed(CostWeights(1.0, 1.0, 0.1), AdmissibleSet())
    with pytest.raises(ValueError, match="gamma_f"):
        require_well_posed(CostWeights(1.0, 1.0, 0.0), AdmissibleSet())
