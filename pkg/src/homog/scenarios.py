"""Example operators: divergence-form reduction, Pauli, transform identity.

Implements the reduction of

    sum_ij (-d_i + sa_i^*) g^ij (d_j + sa_j) + sv

to the canonical first-order factorized form (stacked gradient structure,
block multiplier), the 2D Pauli construction with the magnetic field
obtained by finite differences of the potentials, the weighted-resolvent
transform identity check, and the named presets the CLI exposes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .coeffs import (
    BStructure,
    CoefficientSet,
    ComplexExpr,
    MatrixField,
    SamplingPlan,
    validate,
)
from .discrete import (
    EpsilonChoice,
    block_mult,
    discrete_B,
    solve_shifted,
    _axis_centered,
    _first_order_pair,
    _sample_eps,
    _spatial,
    _symmetrized,
    DiscreteOperator,
)
from .cell import hermitize
from .errors import DimensionError, ValidationFailed
from .expr import Tabulated, parse_expr


@dataclass(frozen=True)
class DivergenceFormSpec:
    """Data of the divergence-form operator before reduction."""

    d: int
    n: int
    g: tuple  # d x d nested tuple of n x n MatrixField blocks
    sa: tuple  # d fields, n x n
    sv: MatrixField

    def __post_init__(self):
        g = tuple(tuple(row) for row in self.g)
        if len(g) != self.d or any(len(row) != self.d for row in g):
            raise ValueError("g must be a d x d block array")
        for row in g:
            for blk in row:
                if blk.shape != (self.n, self.n):
                    raise ValueError("metric blocks must be n x n")
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "sa", tuple(self.sa))
        if len(self.sa) != self.d:
            raise ValueError("need d lower-order fields sa_i")

    def block_metric_samples(self, x_axes, xi_axes):
        """Sampled (P, nd, nd) block matrix of the metric."""
        P = np.broadcast_shapes(*(a.shape for a in x_axes + xi_axes))
        out = np.zeros(P + (self.n * self.d, self.n * self.d), dtype=complex)
        for i in range(self.d):
            for j in range(self.d):
                out[
                    ..., i * self.n : (i + 1) * self.n, j * self.n : (j + 1) * self.n
                ] = self.g[i][j].evaluate(x_axes, xi_axes)
        return out


def validate_divergence_spec(spec, plan=None):
    """Probe metric symmetry/positivity and the hermiticity of sv."""
    plan = plan or SamplingPlan()
    x_pts, xi_pts = plan.points(spec.d)
    x_axes = [x_pts[:, i] for i in range(spec.d)]
    xi_axes = [xi_pts[:, i] for i in range(spec.d)]
    blocks = spec.block_metric_samples(x_axes, xi_axes)
    sym_defect = float(
        np.abs(blocks - np.conj(np.swapaxes(blocks, -1, -2))).max()
    )
    eigs = np.linalg.eigvalsh(hermitize(blocks))
    sv = spec.sv.evaluate(x_axes, xi_axes)
    sv_defect = float(np.abs(sv - np.conj(np.swapaxes(sv, -1, -2))).max())
    report = {
        "c1": float(eigs.min()),
        "c2": float(eigs.max()),
        "metric_symmetry_defect": sym_defect,
        "sv_hermitian_defect": sv_defect,
    }
    if report["c1"] <= 0.0 or sym_defect > 1e-12 or sv_defect > 1e-12:
        raise ValidationFailed(report, "divergence-form data invalid")
    return report


def stacked_structure(d, n):
    """B(zeta) = (zeta_1 E_n; ...; zeta_d E_n), the gradient-type structure."""
    mats = []
    for i in range(d):
        b = np.zeros((n * d, n), dtype=complex)
        b[i * n : (i + 1) * n, :] = np.eye(n)
        mats.append(b)
    return BStructure(d=d, n=n, m=n * d, b_matrices=tuple(mats))


def to_canonical(spec, plan=None):
    """Reduce the divergence form to a canonical CoefficientSet.

    m = n d; A is the block metric; a_i = sum_j sa_j^* g^{ji}; b_i = E_n;
    V = sv + sum_ij sa_i^* g^{ij} sa_j.  The result is validated.
    """
    d, n = spec.d, spec.n
    bstruct = stacked_structure(d, n)

    A = MatrixField.zeros(n * d, n * d)
    for i in range(d):
        for j in range(d):
            blk = spec.g[i][j]
            for r in range(n):
                for c in range(n):
                    A.entries[i * n + r, j * n + c] = blk.entries[r, c]

    sa_star = [spec.sa[i].conj_transpose() for i in range(d)]
    a = []
    for i in range(d):
        acc = MatrixField.zeros(n, n)
        for j in range(d):
            acc = acc + (sa_star[j] @ spec.g[j][i])
        a.append(acc)

    V = spec.sv
    for i in range(d):
        for j in range(d):
            V = V + (sa_star[i] @ spec.g[i][j] @ spec.sa[j])

    cs = CoefficientSet(
        bstruct=bstruct,
        A=A,
        a=tuple(a),
        b=tuple(MatrixField.identity(n) for _ in range(d)),
        V=V,
        G=MatrixField.identity(n),
    )
    validate(cs, plan)
    return cs


SIGMA3 = np.diag([1.0, -1.0])


def pauli_2d(a1_pot, a2_pot, g=None, sample_length=2.0 * np.pi, sample_n=64):
    """2D Pauli data: sa_i = i A_i E_2, sv = sigma_3 B.

    The magnetic field B = d(A_2)/dx_1 - d(A_1)/dx_2 is computed by
    second-order finite differences of the sampled potentials (the
    expression language has no symbolic derivative), so the potentials must
    be x-only expressions.
    """
    pots = []
    for src in (a1_pot, a2_pot):
        tree = parse_expr(src) if isinstance(src, str) else src
        if tree.has_var("xi"):
            raise DimensionError("Pauli potentials must depend on x only")
        pots.append(tree)
    if g is not None and (len(g) != 2 or len(g[0]) != 2):
        raise DimensionError("Pauli metric must be 2 x 2 blocks")

    nodes = np.linspace(0.0, sample_length, sample_n + 1)
    X1, X2 = np.meshgrid(nodes, nodes, indexing="ij")
    from .expr import eval_field

    zero = np.zeros_like(X1)
    A1 = eval_field(pots[0], [X1, X2], [zero, zero])
    A2 = eval_field(pots[1], [X1, X2], [zero, zero])
    h = nodes[1] - nodes[0]
    B = np.gradient(A2, h, axis=0, edge_order=2) - np.gradient(
        A1, h, axis=1, edge_order=2
    )
    b_field = Tabulated(B, x_nodes=[nodes, nodes])
    neg_b_field = Tabulated(-B, x_nodes=[nodes, nodes])

    sv = MatrixField.zeros(2, 2)
    sv.entries[0, 0] = ComplexExpr(b_field)
    sv.entries[1, 1] = ComplexExpr(neg_b_field)

    sa = []
    for pot in pots:
        m = MatrixField.zeros(2, 2)
        for r in range(2):
            m.entries[r, r] = ComplexExpr(0.0, pot)
        sa.append(m)

    if g is None:
        eye2 = MatrixField.identity(2)
        zero2 = MatrixField.zeros(2, 2)
        g = ((eye2, zero2), (zero2, eye2))
    return DivergenceFormSpec(d=2, n=2, g=g, sa=tuple(sa), sv=sv)


def assemble_divergence_form(spec, grid, eps):
    """Discretize the divergence form directly from its own data.

    Mirrors the canonical stencils (forward differences in the
    second-order part, centered with exact adjoints in the cross terms)
    but evaluates the coefficient products numerically per node instead of
    going through the expression-level reduction, so quadratic-form
    agreement with the canonical assembly tests the reduction formulas.
    """
    if not isinstance(eps, EpsilonChoice):
        eps = EpsilonChoice.for_grid(eps, grid)
    d, n = spec.d, spec.n
    bstruct = stacked_structure(d, n)
    x_axes = grid.node_axes()
    xi_axes = [np.mod(ax / eps.eps, 1.0) for ax in x_axes]

    g_blocks = hermitize(spec.block_metric_samples(x_axes, xi_axes))
    B = discrete_B(bstruct, grid)
    H = B.getH() @ (block_mult(g_blocks) @ B)

    sa_vals = [spec.sa[i].evaluate(x_axes, xi_axes) for i in range(d)]
    sa_star = [np.conj(np.swapaxes(v, -1, -2)) for v in sa_vals]
    Dc = _axis_centered(grid.n_phys, grid.h)
    eye_n = sp.identity(n, format="csr")
    ones = np.broadcast_to(np.eye(n), (grid.n_nodes, n, n))
    for i in range(d):
        a_i = np.zeros((grid.n_nodes, n, n), dtype=complex)
        for j in range(d):
            gij = g_blocks[:, j * n : (j + 1) * n, i * n : (i + 1) * n]
            a_i += np.einsum("prs,psq->prq", sa_star[j], gij)
        if np.abs(a_i).max() == 0.0:
            continue
        D_big = sp.kron(_spatial(Dc, i, grid), eye_n, format="csr")
        H = H + _first_order_pair(a_i, D_big, ones)

    v_blocks = spec.sv.evaluate(x_axes, xi_axes).astype(complex)
    for i in range(d):
        for j in range(d):
            gij = g_blocks[:, i * n : (i + 1) * n, j * n : (j + 1) * n]
            v_blocks += np.einsum("prs,psq,pqt->prt", sa_star[i], gij, sa_vals[j])
    H = H + block_mult(hermitize(v_blocks))

    return DiscreteOperator(
        matrix=_symmetrized(H).tocsr(), grid=grid, kind="H_eps", ncomp=n,
        meta={"assembly": "divergence-form"},
    )


@dataclass(frozen=True)
class TransformField:
    """Positive Hermitian multiplier used in the weighted-resolvent identity."""

    f: MatrixField

    def validate(self, d, plan=None):
        plan = plan or SamplingPlan()
        x_pts, xi_pts = plan.points(d)
        vals = self.f.evaluate(
            [x_pts[:, i] for i in range(d)], [xi_pts[:, i] for i in range(d)]
        )
        defect = float(np.abs(vals - np.conj(np.swapaxes(vals, -1, -2))).max())
        fmin = float(np.linalg.eigvalsh(hermitize(vals)).min())
        if defect > 1e-12 or fmin <= 0.0:
            raise ValidationFailed(
                {"hermitian_defect": defect, "min_eig": fmin},
                "transform field invalid",
            )
        return {"hermitian_defect": defect, "min_eig": fmin}


def f_transform_check(cs, transform, lam, rhs, grid, eps, rtol=1e-10, method="direct"):
    """Relative discrepancy of f (Ht - lam G)^-1 f^* = (H - lam Gt)^-1.

    Ht = f^* H f is assembled as a discrete triple product, Gt as the
    nodewise congruence (f^*)^-1 G f^-1; the identity is exact algebra at
    the discrete level, so the discrepancy scales with solver tolerance.
    """
    from .discrete import assemble_G_eps, assemble_H_eps

    if not isinstance(eps, EpsilonChoice):
        eps = EpsilonChoice.for_grid(eps, grid)
    f_field = transform.f if isinstance(transform, TransformField) else transform
    H = assemble_H_eps(cs, grid, eps)
    G = assemble_G_eps(cs, grid, eps)

    f_blocks = hermitize(_sample_eps(f_field, grid, eps))
    F = block_mult(f_blocks)
    Ht = _symmetrized(F.getH() @ (H.matrix @ F)).tocsr()
    Ht_op = DiscreteOperator(matrix=Ht, grid=grid, kind="H_eps", ncomp=H.ncomp)

    g_blocks = hermitize(_sample_eps(cs.G, grid, eps))
    finv = np.linalg.inv(f_blocks)
    gt_blocks = hermitize(
        np.einsum("pij,pjk,pkl->pil", np.conj(np.swapaxes(finv, -1, -2)), g_blocks, finv)
    )
    eigs = np.linalg.eigvalsh(gt_blocks)
    Gt_op = DiscreteOperator(
        matrix=_symmetrized(block_mult(gt_blocks)).tocsr(),
        grid=grid,
        kind="G_eps",
        ncomp=H.ncomp,
        weight_bounds=(float(eigs.min()), float(eigs.max())),
    )

    rhs = np.asarray(rhs, dtype=complex)
    w = solve_shifted(
        Ht_op, G, lam, (F.getH() @ rhs.reshape(-1)).reshape(rhs.shape),
        rtol=rtol, method=method,
    )
    lhs = (F @ w.reshape(-1)).reshape(rhs.shape)
    rhs_side = solve_shifted(H, Gt_op, lam, rhs, rtol=rtol, method=method)
    denom = max(float(np.linalg.norm(rhs_side)), 1e-300)
    return float(np.linalg.norm(lhs - rhs_side) / denom)


# ---------------------------------------------------------------------------
# named presets


@dataclass
class Scenario:
    name: str
    description: str
    cs: CoefficientSet
    problem: dict = None
    div_spec: DivergenceFormSpec = None
    transform: TransformField = None
    rhs: tuple = ("sin(x1)",)
    lam: complex = -1.0


def _scalar_field(src):
    return MatrixField([[ComplexExpr(parse_expr(src))]])


def _metric_scalar_blocks(sources, n):
    """Diagonal metric g^{ii} = source_i * E_n, off-diagonal zero."""
    d = len(sources)
    zero = MatrixField.zeros(n, n)
    rows = []
    for i in range(d):
        row = []
        for j in range(d):
            if i == j:
                row.append(MatrixField.scalar(ComplexExpr(parse_expr(sources[i])), n))
            else:
                row.append(zero)
        rows.append(tuple(row))
    return tuple(rows)


def _harmonic1d_problem():
    return {
        "bstruct": {"d": 1, "n": 1, "m": 1, "B1": [[[1.0, 0.0]]]},
        "A": {"entries": [["2 + sin(2*pi*xi1)"]]},
    }


def _lower1d_problem():
    return {
        "bstruct": {"d": 1, "n": 1, "m": 1, "B1": [[[1.0, 0.0]]]},
        "A": {"entries": [["(1 + 0.3*cos(x1)) * (2 + sin(2*pi*xi1))"]]},
        "a": {"1": {"entries": [["cos(2*pi*xi1)"]]}},
        "b": {"1": {"entries": [["1"]]}},
        "V": {"entries": [["1 + 0.5*cos(2*pi*xi1)"]]},
    }


def _build_harmonic1d():
    from .coeffs import problem_from_dict

    problem = _harmonic1d_problem()
    return Scenario(
        name="harmonic1d",
        description="1D scalar A = 2 + sin(2 pi xi); effective coefficient sqrt(3)",
        cs=problem_from_dict(problem),
        problem=problem,
    )


def _build_lower1d():
    from .coeffs import problem_from_dict

    problem = _lower1d_problem()
    return Scenario(
        name="lower1d",
        description="1D scalar with first/zeroth-order terms and slow modulation",
        cs=problem_from_dict(problem),
        problem=problem,
    )


def _build_schrodinger_metric():
    g = _metric_scalar_blocks(
        ["1 + 0.25*cos(2*pi*xi1)", "1 + 0.25*cos(2*pi*xi1)"], 2
    )
    sv = MatrixField.constant(np.array([[0.3, 0.1], [0.1, -0.2]]))
    sv = sv.scale(ComplexExpr(parse_expr("1 + 0.2*cos(x2)")))
    zero = MatrixField.zeros(2, 2)
    spec = DivergenceFormSpec(d=2, n=2, g=g, sa=(zero, zero), sv=sv)
    return Scenario(
        name="schrodinger-metric",
        description="2D matrix Schroedinger operator with an oscillating metric",
        cs=to_canonical(spec),
        div_spec=spec,
        rhs=("sin(x1)", "cos(x2)"),
    )


def _build_magnetic2d():
    g = _metric_scalar_blocks(
        ["1 + 0.25*cos(2*pi*xi1)", "1 + 0.25*sin(2*pi*xi2)"], 1
    )
    sa = []
    for pot in ("0.3*cos(x2)", "0.3*cos(x1)"):
        m = MatrixField.zeros(1, 1)
        m.entries[0, 0] = ComplexExpr(0.0, parse_expr(pot))
        sa.append(m)
    sv = _scalar_field("0.2 + 0.1*cos(x1)")
    spec = DivergenceFormSpec(d=2, n=1, g=g, sa=tuple(sa), sv=sv)
    return Scenario(
        name="magnetic2d",
        description="2D magnetic Schroedinger operator with metric",
        cs=to_canonical(spec),
        div_spec=spec,
        rhs=("sin(x1)",),
    )


def _build_pauli2d():
    g = _metric_scalar_blocks(
        ["1 + 0.25*cos(2*pi*xi1)", "1 + 0.25*cos(2*pi*xi1)"], 2
    )
    spec = pauli_2d("0.3*cos(x2)", "0.3*cos(x1)", g=g)
    return Scenario(
        name="pauli2d",
        description="2D Pauli operator (sigma_3 B potential) with metric",
        cs=to_canonical(spec),
        div_spec=spec,
        rhs=("sin(x1)", "cos(x1)"),
    )


def _build_ftransform1d():
    base = _build_harmonic1d()
    transform = TransformField(f=_scalar_field("1.5 + 0.5*sin(2*pi*xi1)"))
    return Scenario(
        name="ftransform1d",
        description="harmonic1d with the weighted-resolvent transform field",
        cs=base.cs,
        problem=base.problem,
        transform=transform,
    )


_BUILDERS = {
    "harmonic1d": _build_harmonic1d,
    "lower1d": _build_lower1d,
    "schrodinger-metric": _build_schrodinger_metric,
    "magnetic2d": _build_magnetic2d,
    "pauli2d": _build_pauli2d,
    "ftransform1d": _build_ftransform1d,
}

PRESET_NAMES = tuple(_BUILDERS)


def get_preset(name):
    if name not in _BUILDERS:
        raise KeyError(
            f"unknown preset {name!r}; available: {', '.join(PRESET_NAMES)}"
        )
    return _BUILDERS[name]()
