import numpy as np
import pytest

from relaxctl.dynamics import CoefficientModel, CostSpec, generate_paths
from relaxctl.errors import DomainError
from relaxctl.instances import diffusion_gap, drift_chatter
from relaxctl.measures import ActionGrid, FeedbackControl, RelaxedControl
from relaxctl.optimizer import (
    ControlProblem,
    MsaConfig,
    NearOptimalityRow,
    certify,
    msa_optimize,
    near_optimality_probe,
    near_optimality_trend,
    rows_csv,
)


def control_free_problem(S=500):
    grid = ActionGrid(np.array([0.0, 1.0, 2.0]))
    tg = np.linspace(0, 1, 17)
    model = CoefficientModel.constant(grid, tg, upsilon=0.1, phi=0.2, chi=0.3, psi=0.1)
    b = generate_paths(0, S, tg, x0=1.0)
    return ControlProblem(model, CostSpec.mean_variance(1.0), b), grid, tg


def test_control_independent_instance_is_certified_immediately():
    prob, grid, tg = control_free_problem()
    ctrl, cert = msa_optimize(prob, RelaxedControl.constant(grid, tg, [0.2, 0.5, 0.3]),
                              MsaConfig(tolerance=1e-9, relative=False))
    assert cert.status == "converged" and len(cert.trace) == 1
    assert abs(cert.integrated) <= 1e-9
    assert np.all(np.abs(cert.pointwise) <= 1e-9)


def test_msa_recovers_half_half_measure():
    inst = diffusion_gap(M=32)
    tg = inst.model.time_grid
    prob = ControlProblem(inst.model, inst.cost, generate_paths(0, 4000, tg, x0=1.0))
    start = RelaxedControl.constant(inst.model.grid, tg, [0.8, 0.2])
    ctrl, cert = msa_optimize(prob, start, MsaConfig(beta=1.0, tolerance=1e-6, relative=False))
    assert cert.converged
    assert np.allclose(ctrl.weights, 0.5, atol=1e-9)
    assert abs(cert.J - inst.optimum) <= 2 * cert.J_se + 1e-12


def test_msa_on_drift_instance_reaches_analytic_cost():
    inst = drift_chatter(M=64)
    tg = inst.model.time_grid
    b = generate_paths(0, 4000, tg, x0=0.0, antithetic=True)
    prob = ControlProblem(inst.model, inst.cost, b, scheme="euler")
    start = RelaxedControl.constant(inst.model.grid, tg, [0.9, 0.1])
    ctrl, cert = msa_optimize(prob, start, MsaConfig(beta=1.0, tolerance=1e-4, relative=False,
                                                     max_iterations=100))
    assert cert.converged
    # costs decrease along the accepted iterates
    J = [row["J"] for row in cert.trace]
    assert all(b <= a for a, b in zip(J, J[1:]))
    # left-point quadrature on M = 64 knots biases T^2/4 by about T^2 / (4 M)
    assert abs(cert.J - inst.optimum) <= 2 * cert.J_se + 0.25 / 64


def test_perturbed_optimum_has_larger_gap():
    inst = diffusion_gap(M=16)
    tg = inst.model.time_grid
    prob = ControlProblem(inst.model, inst.cost, generate_paths(1, 2000, tg, x0=1.0))
    best = certify(prob, inst.reference)
    w = inst.reference.weights.copy()
    w[5] = [1.0, 0.0]
    worse = certify(prob, RelaxedControl(inst.model.grid, tg, w))
    assert worse.integrated > best.integrated
    assert best.min_pointwise >= -1e-9 and worse.min_pointwise >= -1e-9


def test_certificate_gaps_are_nonnegative_for_feedback_and_adapted():
    inst = diffusion_gap(M=8)
    tg = inst.model.time_grid
    prob = ControlProblem(inst.model, inst.cost, generate_paths(2, 1000, tg, x0=1.0))
    ctrl = RelaxedControl.constant(inst.model.grid, tg, [0.7, 0.3])
    states = prob.simulate(ctrl)
    fb = FeedbackControl.from_states(ctrl, states.x, bins=4)
    for c in (ctrl, fb):
        cert = certify(prob, c)
        assert cert.min_pointwise >= -1e-9
        assert cert.adapted_integrated >= cert.integrated - 1e-12


def test_feedback_msa_decreases_cost():
    inst = diffusion_gap(M=8)
    tg = inst.model.time_grid
    prob = ControlProblem(inst.model, inst.cost, generate_paths(2, 1000, tg, x0=1.0))
    ctrl = RelaxedControl.constant(inst.model.grid, tg, [0.7, 0.3])
    fb = FeedbackControl.from_states(ctrl, prob.simulate(ctrl).x, bins=4)
    out, cert = msa_optimize(prob, fb, MsaConfig(max_iterations=5))
    assert isinstance(out, FeedbackControl)
    assert cert.trace[-1]["J"] <= cert.trace[0]["J"]


def test_near_optimality_of_strict_control_is_exact():
    inst = diffusion_gap(M=16)
    tg = inst.model.time_grid
    prob = ControlProblem(inst.model, inst.cost, generate_paths(3, 500, tg, x0=1.0))
    strict = RelaxedControl.dirac(inst.model.grid, tg, 1)
    rows = near_optimality_probe(prob, strict, [1, 2, 3])
    own = certify(prob, strict).integrated
    for r in rows:
        assert r.eps == 0.0
        assert r.gap == pytest.approx(own, abs=1e-15)


def test_near_optimality_trend_and_csv(tmp_path):
    rows = [NearOptimalityRow(k, 2.0**-k, 0.0, 1.0, 0.0, 2.0 ** (-k / 3), 0.0) for k in range(2, 6)]
    trend = near_optimality_trend(rows)
    assert trend["spearman"] == pytest.approx(1.0)
    assert trend["last_le_first"] and trend["dominated"]
    rows_csv(rows, tmp_path / "rows.csv")
    lines = (tmp_path / "rows.csv").read_text().splitlines()
    assert lines[0].startswith("k,eps") and len(lines) == 5


def test_msa_config_validation():
    with pytest.raises(DomainError):
        MsaConfig(beta=0.0)
    with pytest.raises(DomainError):
        MsaConfig(backtrack=1.0)
    prob = control_free_problem(S=10)[0]
    with pytest.raises(DomainError):
        ControlProblem(prob.model, prob.cost, prob.bundle, scheme="midpoint")
