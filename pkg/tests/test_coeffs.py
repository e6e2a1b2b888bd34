"""Coefficient-set construction and validation tests."""

import numpy as np
import pytest

from homog.coeffs import (
    BStructure,
    CoefficientSet,
    ComplexExpr,
    MatrixField,
    SamplingPlan,
    gradient_structure,
    problem_from_dict,
    validate,
)
from homog.errors import ValidationFailed
from homog.expr import parse_expr


def scalar_problem(a_source, d=1, V=None, G=None):
    bstruct = BStructure(d=d, n=1, m=1, b_matrices=(np.ones((1, 1)),) * d)
    return CoefficientSet(
        bstruct=bstruct,
        A=MatrixField([[ComplexExpr(parse_expr(a_source))]]),
        a=tuple(MatrixField.zeros(1, 1) for _ in range(d)),
        b=tuple(MatrixField.identity(1) for _ in range(d)),
        V=V or MatrixField.zeros(1, 1),
        G=G or MatrixField.identity(1),
    )


def test_constant_diagonal_bounds():
    bs = gradient_structure(2)
    cs = CoefficientSet(
        bstruct=bs,
        A=MatrixField.constant(np.diag([2.0, 3.0])),
        a=(MatrixField.zeros(1, 1), MatrixField.zeros(1, 1)),
        b=(MatrixField.identity(1), MatrixField.identity(1)),
        V=MatrixField.zeros(1, 1),
        G=MatrixField.identity(1),
    )
    report = validate(cs, SamplingPlan(seed=3))
    assert report.c1 == pytest.approx(2.0, abs=1e-12)
    assert report.c2 == pytest.approx(3.0, abs=1e-12)
    assert report.rank_ok  # B(zeta) = zeta never vanishes off the origin


def test_scalar_oscillating_bounds_within_probe_resolution():
    cs = scalar_problem("2 + sin(2*pi*xi1)")
    report = validate(cs, SamplingPlan(seed=0))
    # dense scan oracle: extremes of 2 + sin over one period are 1 and 3
    assert report.c1 == pytest.approx(1.0, abs=0.05)
    assert report.c2 == pytest.approx(3.0, abs=0.05)
    assert report.g1 == pytest.approx(1.0, abs=1e-12)
    assert report.valid


def test_non_hermitian_V_rejected_and_named():
    V = MatrixField.zeros(2, 2)
    V.entries[0, 1] = ComplexExpr.const(1.0)  # missing conjugate partner
    bs = BStructure(
        d=1, n=2, m=2, b_matrices=(np.eye(2, dtype=complex),)
    )
    cs = CoefficientSet(
        bstruct=bs,
        A=MatrixField.identity(2),
        a=(MatrixField.zeros(2, 2),),
        b=(MatrixField.identity(2),),
        V=V,
        G=MatrixField.identity(2),
    )
    with pytest.raises(ValidationFailed) as err:
        validate(cs)
    report = err.value.report
    assert not report.hermitian_ok
    assert report.hermitian_worst[0] == "V"
    assert "V" in " ".join(report.messages)


def test_nonpositive_A_rejected():
    cs = scalar_problem("sin(2*pi*xi1)")  # sign-changing
    with pytest.raises(ValidationFailed) as err:
        validate(cs)
    assert err.value.report.c1 <= 0.0


def test_bounds_invariant_under_probe_reordering(monkeypatch):
    cs = scalar_problem("2 + sin(2*pi*xi1)")
    plan = SamplingPlan(seed=5)
    base = validate(cs, plan)

    x_pts, xi_pts = plan.points(1)
    perm = np.random.default_rng(11).permutation(len(x_pts))
    monkeypatch.setattr(
        SamplingPlan, "points", lambda self, d: (x_pts[perm], xi_pts[perm])
    )
    shuffled = validate(cs, SamplingPlan(seed=5))
    assert shuffled.c1 == base.c1
    assert shuffled.c2 == base.c2
    assert shuffled.hermitian_ok == base.hermitian_ok


def test_b_with_fast_dependence_rejected():
    bs = BStructure(d=1, n=1, m=1, b_matrices=(np.ones((1, 1)),))
    with pytest.raises(ValueError):
        CoefficientSet(
            bstruct=bs,
            A=MatrixField.identity(1),
            a=(MatrixField.zeros(1, 1),),
            b=(MatrixField([[ComplexExpr(parse_expr("sin(2*pi*xi1)"))]]),),
            V=MatrixField.zeros(1, 1),
            G=MatrixField.identity(1),
        )


def test_rank_condition_violation_detected():
    # B2 = 0 makes B(e_2) vanish; the coordinate directions are always probed
    b = np.ones((1, 1), dtype=complex)
    bs = BStructure(d=2, n=1, m=1, b_matrices=(b, 0.0 * b))
    cs = CoefficientSet(
        bstruct=bs,
        A=MatrixField.identity(1),
        a=(MatrixField.zeros(1, 1),) * 2,
        b=(MatrixField.identity(1),) * 2,
        V=MatrixField.zeros(1, 1),
        G=MatrixField.identity(1),
    )
    with pytest.raises(ValidationFailed) as err:
        validate(cs)
    assert not err.value.report.rank_ok


def test_problem_from_dict_roundtrip():
    data = {
        "bstruct": {"d": 1, "n": 1, "m": 1, "B1": [[[1.0, 0.0]]]},
        "A": {"entries": [["2 + sin(2*pi*xi1)"]]},
        "V": {"entries": [[["1", "0"]]]},
    }
    cs = problem_from_dict(data)
    report = validate(cs)
    assert report.valid
    vals = cs.A.evaluate([np.array(0.0)], [np.array(0.25)])
    assert vals[0, 0] == pytest.approx(3.0)
    # b defaults to the identity, G to the identity, a to zero
    assert cs.b[0].entries[0, 0].evaluate([0.0], [0.0]) == pytest.approx(1.0)
    assert cs.G.entries[0, 0].evaluate([0.0], [0.0]) == pytest.approx(1.0)
    assert cs.a[0].entries[0, 0].is_structural_zero()


def test_matrix_field_algebra_conjugation():
    f = MatrixField(
        [
            [ComplexExpr(parse_expr("cos(x1)"), parse_expr("x1")), ComplexExpr.const(2.0)],
            [ComplexExpr.const(1j), ComplexExpr.const(0.0)],
        ]
    )
    g = f.conj_transpose()
    x, xi = [np.array(0.3)], [np.array(0.0)]
    fv = f.evaluate(x, xi)
    gv = g.evaluate(x, xi)
    assert np.allclose(gv, np.conj(fv).T, atol=1e-14)
    prod = (f @ g).evaluate(x, xi)
    assert np.allclose(prod, fv @ np.conj(fv).T, atol=1e-13)
