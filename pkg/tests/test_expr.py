"""Parser, evaluator and periodicity-guard tests."""

import math

import numpy as np
import pytest

from homog.errors import ParseError, PeriodicityError
from homog.expr import Tabulated, eval_field, parse_expr, serialize


def test_sin_fast_variable_value():
    tree = parse_expr("2 + sin(2*pi*xi1)")
    assert eval_field(tree, x=[0.0], xi=[0.25]) == pytest.approx(3.0, abs=1e-15)


def test_product_of_slow_and_fast():
    tree = parse_expr("(1 + 0.5*cos(x1)) * (2 + sin(2*pi*xi1))")
    assert eval_field(tree, x=[0.0], xi=[0.0]) == pytest.approx(3.0, abs=1e-14)


def test_bare_fast_variable_rejected():
    with pytest.raises(PeriodicityError):
        parse_expr("xi1")


def test_fast_variable_in_sum_phase_rejected():
    with pytest.raises(PeriodicityError):
        parse_expr("sin(2*pi*xi1 + x1)")


def test_fast_variable_noninteger_phase_rejected():
    with pytest.raises(PeriodicityError):
        parse_expr("sin(3.1*xi1)")


def test_fast_variable_admits_harmonics_and_negation():
    tree = parse_expr("cos(-2*pi*3*xi2)")
    val = eval_field(tree, x=[0.0, 0.0], xi=[0.0, 1.0 / 12.0])
    assert val == pytest.approx(math.cos(math.pi / 2.0), abs=1e-12)


def test_exp_of_periodic_is_admitted():
    tree = parse_expr("exp(0.5*sin(2*pi*xi1))")
    assert eval_field(tree, x=[0.0], xi=[0.25]) == pytest.approx(math.exp(0.5))


def test_periodicity_in_xi_exact_on_dyadic_points():
    tree = parse_expr("2 + sin(2*pi*xi1)")
    for j in range(16):
        xi = j / 16.0
        base = eval_field(tree, x=[0.0], xi=[xi])
        for k in (-2, -1, 1, 3):
            assert eval_field(tree, x=[0.0], xi=[xi + k]) == base


def test_x_variable_identity():
    tree = parse_expr("cos(x1)")
    assert eval_field(tree, x=[0.0], xi=[0.7]) == 1.0


def test_parse_error_position():
    with pytest.raises(ParseError) as err:
        parse_expr("2 + @")
    assert err.value.position == 4


def test_unbalanced_parens():
    with pytest.raises(ParseError):
        parse_expr("sin(2*pi*xi1")


def test_unknown_name():
    with pytest.raises(ParseError):
        parse_expr("2 + y1")


def test_vectorized_eval():
    tree = parse_expr("cos(x1) * (2 + sin(2*pi*xi1))")
    x = np.linspace(0.0, 2 * np.pi, 7)
    xi = np.linspace(0.0, 1.0, 7)
    vals = eval_field(tree, x=[x], xi=[xi])
    expected = np.cos(x) * (2 + np.sin(2 * np.pi * np.mod(xi, 1.0)))
    assert np.allclose(vals, expected, atol=1e-14)


def test_roundtrip_serialization():
    sources = [
        "2 + sin(2*pi*xi1)",
        "(1 + 0.5*cos(x1)) * (2 + sin(2*pi*xi1))",
        "-x1 / (2 - x2) + exp(x1) * cos(2*pi*2*xi2)",
        "1 - 2 - 3",
        "1 - (2 - 3)",
        "2 / 3 / 4",
    ]
    rng = np.random.default_rng(7)
    for src in sources:
        tree = parse_expr(src)
        again = parse_expr(serialize(tree))
        for _ in range(100):
            x = rng.uniform(-3, 3, size=2)
            xi = rng.uniform(0, 1, size=2)
            a = eval_field(tree, x=x, xi=xi)
            b = eval_field(again, x=x, xi=xi)
            assert a == pytest.approx(b, abs=1e-14, rel=1e-14)


def test_tabulated_x_linear_interpolation():
    nodes = np.linspace(0.0, 2.0, 21)
    tab = Tabulated(3.0 * nodes, x_nodes=[nodes])
    assert eval_field(tab, x=[0.55], xi=[0.0]) == pytest.approx(1.65, abs=1e-12)
    # clamped outside the sampled range
    assert eval_field(tab, x=[9.0], xi=[0.0]) == pytest.approx(6.0, abs=1e-12)


def test_tabulated_xi_trig_interpolation():
    n = 16
    grid = np.arange(n) / n
    samples = np.sin(2 * np.pi * grid) + 2.0
    tab = Tabulated(samples, xi_ncell=[n])
    pts = np.linspace(0, 1, 37)
    vals = eval_field(tab, x=[np.zeros_like(pts)], xi=[pts])
    assert np.allclose(vals, np.sin(2 * np.pi * pts) + 2.0, atol=1e-12)


def test_tabulated_2d_x_and_nodal_reproduction():
    nx, ny = 9, 7
    ax = np.linspace(0.0, 1.0, nx)
    ay = np.linspace(0.0, 2.0, ny)
    vals = np.add.outer(2 * ax, 3 * ay)
    tab = Tabulated(vals, x_nodes=[ax, ay])
    X, Y = np.meshgrid(ax, ay, indexing="ij")
    out = eval_field(tab, x=[X, Y], xi=[np.zeros_like(X), np.zeros_like(Y)])
    assert np.allclose(out, vals, atol=1e-12)
    # bilinear reproduces the affine function everywhere
    assert eval_field(tab, x=[0.31, 1.17], xi=[0.0, 0.0]) == pytest.approx(
        2 * 0.31 + 3 * 1.17, abs=1e-12
    )
