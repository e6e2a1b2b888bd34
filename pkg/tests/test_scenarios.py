"""Divergence-form reduction, Pauli construction and transform identity."""

import numpy as np
import pytest

from homog.coeffs import ComplexExpr, MatrixField, validate
from homog.discrete import TorusGrid, assemble_H_eps
from homog.errors import DimensionError
from homog.expr import parse_expr
from homog.scenarios import (
    PRESET_NAMES,
    DivergenceFormSpec,
    assemble_divergence_form,
    f_transform_check,
    get_preset,
    pauli_2d,
    to_canonical,
    validate_divergence_spec,
)

L = 2 * np.pi


def identity_metric(d, n):
    eye = MatrixField.identity(n)
    zero = MatrixField.zeros(n, n)
    return tuple(
        tuple(eye if i == j else zero for j in range(d)) for i in range(d)
    )


def test_to_canonical_vector_laplacian():
    spec = DivergenceFormSpec(
        d=2, n=1, g=identity_metric(2, 1),
        sa=(MatrixField.zeros(1, 1), MatrixField.zeros(1, 1)),
        sv=MatrixField.zeros(1, 1),
    )
    cs = to_canonical(spec)
    assert cs.bstruct.m == 2 and cs.bstruct.n == 1
    A = cs.A.evaluate([np.zeros(1), np.zeros(1)], [np.zeros(1), np.zeros(1)])
    assert np.allclose(A[0], np.eye(2))
    assert all(entry.is_structural_zero() for entry in cs.V.entries.flat)
    for a_i in cs.a:
        assert all(entry.is_structural_zero() for entry in a_i.entries.flat)


def test_to_canonical_1d_scalar_metric():
    g = ((MatrixField([[ComplexExpr(parse_expr("2 + sin(2*pi*xi1)"))]]),),)
    spec = DivergenceFormSpec(
        d=1, n=1, g=g, sa=(MatrixField.zeros(1, 1),), sv=MatrixField.zeros(1, 1)
    )
    cs = to_canonical(spec)
    val = cs.A.evaluate([np.array(0.0)], [np.array(0.25)])
    assert val[0, 0] == pytest.approx(3.0)


def test_magnetic_reduction_hermitian_V():
    scenario = get_preset("magnetic2d")
    spec = scenario.div_spec
    cs = scenario.cs
    # hand expansion for the diagonal metric: V = sv + sum_i A_i^2 g^{ii}
    rng = np.random.default_rng(0)
    x = rng.uniform(0, L, size=(40, 2))
    xi = rng.uniform(0, 1, size=(40, 2))
    x_axes = [x[:, 0], x[:, 1]]
    xi_axes = [xi[:, 0], xi[:, 1]]
    V = cs.V.evaluate(x_axes, xi_axes)
    assert np.abs(V - np.conj(np.swapaxes(V, -1, -2))).max() < 1e-12
    A1 = 0.3 * np.cos(x[:, 1])
    A2 = 0.3 * np.cos(x[:, 0])
    g11 = 1 + 0.25 * np.cos(2 * np.pi * xi[:, 0])
    g22 = 1 + 0.25 * np.sin(2 * np.pi * xi[:, 1])
    sv = 0.2 + 0.1 * np.cos(x[:, 0])
    expected = sv + A1**2 * g11 + A2**2 * g22
    assert np.allclose(V[:, 0, 0], expected, atol=1e-12)


def test_pauli_zero_potentials():
    spec = pauli_2d("0", "0")
    vals = spec.sv.evaluate([np.zeros(3), np.zeros(3)], [np.zeros(3), np.zeros(3)])
    assert np.abs(vals).max() == 0.0


def test_pauli_linear_potential_unit_field():
    spec = pauli_2d("0", "x1")
    pts = np.array([0.5, 1.7, 3.0])
    vals = spec.sv.evaluate([pts, pts[::-1]], [np.zeros(3), np.zeros(3)])
    for k in range(3):
        assert np.allclose(vals[k], np.diag([1.0, -1.0]), atol=1e-8)
        assert abs(np.trace(vals[k])) < 1e-8  # sigma_3 is trace-free


def test_pauli_symmetric_gauge_unit_field():
    spec = pauli_2d("-x2/2", "x1/2")
    pts = np.linspace(0.3, 5.0, 5)
    vals = spec.sv.evaluate([pts, pts], [np.zeros(5), np.zeros(5)])
    assert np.allclose(vals, np.stack([np.diag([1.0, -1.0])] * 5), atol=1e-8)


def test_pauli_rejects_fast_potentials():
    with pytest.raises(DimensionError):
        pauli_2d("sin(2*pi*xi1)", "0")


@pytest.mark.parametrize("name", ["schrodinger-metric", "magnetic2d", "pauli2d"])
def test_quadratic_form_agreement(name):
    scenario = get_preset(name)
    validate_divergence_spec(scenario.div_spec)
    grid = TorusGrid(2, 16)
    eps = L / 4
    H_div = assemble_divergence_form(scenario.div_spec, grid, eps)
    H_can = assemble_H_eps(scenario.cs, grid, eps)
    assert H_div.hermiticity_defect() == 0.0
    rng = np.random.default_rng(11)
    n = scenario.cs.bstruct.n
    size = grid.n_nodes * n
    scale = np.abs(H_can.matrix.data).max()
    for _ in range(20):
        u = rng.standard_normal(size) + 1j * rng.standard_normal(size)
        q_div = np.vdot(u, H_div.matrix @ u)
        q_can = np.vdot(u, H_can.matrix @ u)
        denom = max(abs(q_can), scale * np.linalg.norm(u) ** 2 * 1e-6)
        assert abs(q_div - q_can) / denom <= 1e-9


def test_f_transform_identity_trivial_and_scaled():
    scenario = get_preset("harmonic1d")
    grid = TorusGrid(1, 128)
    eps = L / 8
    rhs = np.sin(grid.axis_nodes())[:, None].astype(complex)
    disc_eye = f_transform_check(
        scenario.cs, MatrixField.identity(1), -1.0, rhs, grid, eps
    )
    assert disc_eye <= 1e-12
    disc_two = f_transform_check(
        scenario.cs, MatrixField.constant([[2.0]]), -1.0, rhs, grid, eps
    )
    assert disc_two <= 1e-9


def test_f_transform_identity_oscillating():
    scenario = get_preset("ftransform1d")
    scenario.transform.validate(d=1)
    grid = TorusGrid(1, 128)
    eps = L / 8
    rhs = np.sin(grid.axis_nodes())[:, None].astype(complex)
    disc = f_transform_check(scenario.cs, scenario.transform, -1.0, rhs, grid, eps)
    assert disc <= 1e-8


def test_f_transform_discrepancy_scales_with_tolerance():
    scenario = get_preset("ftransform1d")
    grid = TorusGrid(1, 128)
    eps = L / 8
    rhs = np.sin(grid.axis_nodes())[:, None].astype(complex)
    disc = {}
    for tol in (1e-5, 1e-7):
        disc[tol] = f_transform_check(
            scenario.cs, scenario.transform, -1.0, rhs, grid, eps,
            rtol=tol, method="krylov",
        )
        assert disc[tol] <= 10.0 * tol
    assert disc[1e-7] <= disc[1e-5] / 5.0


def test_presets_validate():
    for name in PRESET_NAMES:
        scenario = get_preset(name)
        report = validate(scenario.cs)
        assert report.valid, name


def test_divergence_spec_validation_rejects_asymmetric_metric():
    from homog.errors import ValidationFailed

    g = (
        (MatrixField.identity(1), MatrixField.constant([[0.5]])),
        (MatrixField.constant([[0.1]]), MatrixField.identity(1)),
    )
    spec = DivergenceFormSpec(
        d=2, n=1, g=g,
        sa=(MatrixField.zeros(1, 1),) * 2,
        sv=MatrixField.zeros(1, 1),
    )
    with pytest.raises(ValidationFailed):
        validate_divergence_spec(spec)
