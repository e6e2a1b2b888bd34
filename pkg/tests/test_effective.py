"""Homogenized-coefficient assembly against analytic and quadrature oracles."""

import numpy as np
import pytest

from homog.cell import CellGrid, solve_correctors
from homog.coeffs import BStructure, CoefficientSet, ComplexExpr, MatrixField
from homog.effective import (
    SlowGrid,
    assemble_A1_A0,
    assemble_A2,
    assemble_G0,
    assemble_homogenized,
)
from homog.expr import parse_expr

BS1 = BStructure(d=1, n=1, m=1, b_matrices=(np.ones((1, 1)),))
SQRT3 = float(np.sqrt(3.0))


def harmonic_mean_quadrature(n=2**16):
    """Independent oracle: 1 / <1/a> for a = 2 + sin(2 pi xi)."""
    xi = np.arange(n) / n
    return 1.0 / np.mean(1.0 / (2.0 + np.sin(2 * np.pi * xi)))


def scalar_cs(a_source, lower=None, V=None, G=None):
    def mat(src):
        return MatrixField([[ComplexExpr(parse_expr(src))]])

    return CoefficientSet(
        bstruct=BS1,
        A=mat(a_source),
        a=(mat(lower) if lower else MatrixField.zeros(1, 1),),
        b=(MatrixField.identity(1),),
        V=mat(V) if V else MatrixField.zeros(1, 1),
        G=mat(G) if G else MatrixField.identity(1),
    )


def test_quadrature_oracle_is_sqrt3():
    assert harmonic_mean_quadrature() == pytest.approx(SQRT3, abs=1e-12)


def test_A2_constant_in_xi_is_exact():
    cs = scalar_cs("2 + 0.5*cos(x1)")
    corr = solve_correctors(cs, [0.7], CellGrid(1, 32))
    A2, rec = assemble_A2(corr, cs)
    assert A2[0, 0] == pytest.approx(2 + 0.5 * np.cos(0.7), abs=1e-12)
    assert rec < 1e-12


def test_A2_harmonic_mean():
    cs = scalar_cs("2 + sin(2*pi*xi1)")
    corr = solve_correctors(cs, [0.0], CellGrid(1, 128))
    A2, rec = assemble_A2(corr, cs)
    assert A2[0, 0] == pytest.approx(harmonic_mean_quadrature(), abs=1e-6)
    assert abs(A2[0, 0].imag) < 1e-12
    assert rec < 1e-8


def test_A2_2d_separable_diagonal():
    bs = BStructure(
        d=2, n=1, m=2,
        b_matrices=(np.array([[1.0], [0.0]]), np.array([[0.0], [1.0]])),
    )
    A = MatrixField.zeros(2, 2)
    A.entries[0, 0] = ComplexExpr(parse_expr("2 + sin(2*pi*xi1)"))
    A.entries[1, 1] = ComplexExpr.const(4.0)
    cs = CoefficientSet(
        bstruct=bs, A=A,
        a=(MatrixField.zeros(1, 1),) * 2,
        b=(MatrixField.identity(1),) * 2,
        V=MatrixField.zeros(1, 1), G=MatrixField.identity(1),
    )
    corr = solve_correctors(cs, [0.0, 0.0], CellGrid(2, 32))
    A2, rec = assemble_A2(corr, cs)
    assert A2[0, 0] == pytest.approx(SQRT3, abs=1e-6)
    assert A2[1, 1] == pytest.approx(4.0, abs=1e-10)
    assert abs(A2[0, 1]) < 1e-10 and abs(A2[1, 0]) < 1e-10
    assert rec < 1e-8


def test_lower_order_all_zero():
    cs = scalar_cs("2 + sin(2*pi*xi1)")
    corr = solve_correctors(cs, [0.0], CellGrid(1, 64))
    left, right, zeroth, a0, recs, a_means, b_vals = assemble_A1_A0(corr, cs)
    for mat in (left, right, zeroth, a0):
        assert np.abs(mat).max() < 1e-12
    assert np.abs(a_means).max() < 1e-15
    assert b_vals[0][0, 0] == 1.0


def test_xi_independent_lower_order_reduces_to_means():
    cs = scalar_cs("3", lower="0.5*cos(x1)", V="1 + 0.25*cos(x1)")
    corr = solve_correctors(cs, [0.9], CellGrid(1, 32))
    left, right, zeroth, a0, recs, a_means, _ = assemble_A1_A0(corr, cs)
    assert np.abs(left).max() < 1e-12  # Lambda_0 = 0
    assert a_means[0][0, 0] == pytest.approx(0.5 * np.cos(0.9), abs=1e-12)
    assert a0[0, 0] == pytest.approx(1 + 0.25 * np.cos(0.9), abs=1e-12)


def test_A0_cos_lower_order_analytic():
    # a(xi) = 2 + sin(2 pi xi), a_1 = cos(2 pi xi), b = 1, V = 0:
    # A0 = -<cos^2/(2+sin)> = -(2 - sqrt(3)); closed form checked by quadrature
    n = 2**16
    xi = np.arange(n) / n
    quad_A0 = -np.mean(np.cos(2 * np.pi * xi) ** 2 / (2 + np.sin(2 * np.pi * xi)))
    assert quad_A0 == pytest.approx(SQRT3 - 2.0, abs=1e-12)

    cs = scalar_cs("2 + sin(2*pi*xi1)", lower="cos(2*pi*xi1)")
    corr = solve_correctors(cs, [0.0], CellGrid(1, 128))
    left, right, zeroth, a0, recs, _, _ = assemble_A1_A0(corr, cs)
    assert a0[0, 0] == pytest.approx(SQRT3 - 2.0, abs=1e-8)
    assert recs["A0"] < 1e-8
    # for the cosine profile the first-order blocks vanish identically
    assert abs(left[0, 0]) < 1e-10


def test_A0_high_resolution_oracle_agreement():
    cs = scalar_cs("2 + sin(2*pi*xi1)", lower="cos(2*pi*xi1)")
    coarse = solve_correctors(cs, [0.0], CellGrid(1, 128))
    fine = solve_correctors(cs, [0.0], CellGrid(1, 1024))
    a0_coarse = assemble_A1_A0(coarse, cs)[3]
    a0_fine = assemble_A1_A0(fine, cs)[3]
    assert abs(a0_coarse[0, 0] - a0_fine[0, 0]) < 1e-8


def test_A1_sine_lower_order_analytic():
    # a_1 = sin(2 pi xi): A1_left = sqrt(3) <sin/(2+sin)> = sqrt(3) - 2
    cs = scalar_cs("2 + sin(2*pi*xi1)", lower="sin(2*pi*xi1)")
    corr = solve_correctors(cs, [0.0], CellGrid(1, 128))
    left, right, zeroth, a0, recs, _, _ = assemble_A1_A0(corr, cs)
    assert left[0, 0] == pytest.approx(SQRT3 - 2.0, abs=1e-8)
    assert right[0, 0] == pytest.approx(SQRT3 - 2.0, abs=1e-8)
    assert a0[0, 0] == pytest.approx(SQRT3 - 2.0, abs=1e-8)
    assert max(recs.values()) < 1e-8


def test_form_equivalence_tightens_with_refinement():
    cs = scalar_cs("2 + sin(2*pi*xi1)", lower="sin(2*pi*xi1)")
    recs = {}
    for n in (64, 128):
        corr = solve_correctors(cs, [0.0], CellGrid(1, n))
        _, rec_a2 = assemble_A2(corr, cs)
        recs[n] = max(rec_a2, max(assemble_A1_A0(corr, cs)[4].values()))
    assert recs[64] <= 1e-6
    assert recs[128] <= 2.5e-7


def test_G0_examples():
    grid = CellGrid(1, 64)
    cs = scalar_cs("2", G="2 + sin(2*pi*xi1)")
    g0 = assemble_G0(cs, [0.0], grid)
    assert g0[0, 0] == pytest.approx(2.0, abs=1e-13)  # pure harmonic averages out

    G = MatrixField.zeros(2, 2)
    G.entries[0, 0] = ComplexExpr(parse_expr("1 + 0.5*cos(2*pi*xi1)"))
    G.entries[1, 1] = ComplexExpr.const(3.0)
    bs2 = BStructure(d=1, n=2, m=2, b_matrices=(np.eye(2, dtype=complex),))
    cs2 = CoefficientSet(
        bstruct=bs2, A=MatrixField.identity(2),
        a=(MatrixField.zeros(2, 2),), b=(MatrixField.identity(2),),
        V=MatrixField.zeros(2, 2), G=G,
    )
    g0 = assemble_G0(cs2, [0.0], grid)
    assert np.allclose(g0, np.diag([1.0, 3.0]), atol=1e-13)
    assert np.array_equal(g0, g0.conj().T)


def test_assemble_homogenized_x_independent_constant_across_nodes():
    cs = scalar_cs("2 + sin(2*pi*xi1)", lower="cos(2*pi*xi1)", V="1")
    hc = assemble_homogenized(cs, SlowGrid(1, 2 * np.pi, (6,)), CellGrid(1, 64))
    for name in ("A2", "A0", "G0"):
        data = getattr(hc, name)
        assert np.abs(data - data[0]).max() < 1e-12
    assert hc.A2[0, 0, 0] == pytest.approx(SQRT3, abs=1e-6)
    assert hc.A0[0, 0, 0] == pytest.approx(SQRT3 - 2.0 + 1.0, abs=1e-6)
    assert hc.max_crosscheck() < 1e-8


def test_assemble_homogenized_x_scaling():
    # A = rho(x) * a(xi) scales A2 by rho and leaves Lambda_1 alone
    cs = scalar_cs("(1 + 0.3*cos(x1)) * (2 + sin(2*pi*xi1))")
    slow = SlowGrid(1, 2 * np.pi, (8,))
    hc = assemble_homogenized(cs, slow, CellGrid(1, 64))
    nodes = slow.nodes()[:, 0]
    expected = (1 + 0.3 * np.cos(nodes)) * SQRT3
    assert np.allclose(hc.A2[:, 0, 0], expected, atol=1e-6)


def test_A2_positive_definite_above_c1():
    cs = scalar_cs("2 + sin(2*pi*xi1)")
    from homog.coeffs import SamplingPlan, validate

    report = validate(cs, SamplingPlan(seed=0))
    corr = solve_correctors(cs, [0.0], CellGrid(1, 128))
    A2, _ = assemble_A2(corr, cs)
    assert np.linalg.eigvalsh(A2).min() >= report.c1 - 1e-8


def test_hc_interpolation_periodic_wrap():
    cs = scalar_cs("(1 + 0.3*cos(x1)) * (2 + sin(2*pi*xi1))")
    slow = SlowGrid(1, 2 * np.pi, (16,))
    hc = assemble_homogenized(cs, slow, CellGrid(1, 32))
    # halfway between the last node and the wrap; linear interp of A2(x)
    x_last = slow.axis_nodes(0)[-1]
    mid = np.array([[x_last + 0.5 * (2 * np.pi / 16)]])
    interp = hc.sample_at("A2", mid)[0, 0, 0]
    expected = 0.5 * (hc.A2[-1, 0, 0] + hc.A2[0, 0, 0])
    assert interp == pytest.approx(expected, abs=1e-12)


def test_assembled_matrices_exactly_hermitian():
    cs = scalar_cs("2 + sin(2*pi*xi1)", lower="sin(2*pi*xi1)", V="1 + 0.5*cos(2*pi*xi1)")
    corr = solve_correctors(cs, [0.0], CellGrid(1, 64))
    A2, _ = assemble_A2(corr, cs)
    _, _, _, a0, _, _, _ = assemble_A1_A0(corr, cs)
    assert np.array_equal(A2, A2.conj().T)
    assert np.array_equal(a0, a0.conj().T)
