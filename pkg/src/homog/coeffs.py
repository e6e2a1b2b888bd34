"""Problem data: B-structure, matrix-valued coefficient fields, validation.

A coefficient entry is a pair (re, im) of real expression trees; matrices of
entries form :class:`MatrixField`.  The full problem is a
:class:`CoefficientSet` holding the second-order multiplier A(x, xi), the
first-order pairs a_i(x, xi) / b_i(x), the potential V(x, xi) and the
weight G(x, xi).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationFailed
from .expr import BinOp, Expr, Neg, Num, eval_field, parse_expr

_ZETA_RANK_RTOL = 1e-10
_HERMITIAN_TOL = 1e-12


def _is_zero(tree):
    return isinstance(tree, Num) and tree.value == 0.0


def _add(a, b):
    if _is_zero(a):
        return b
    if _is_zero(b):
        return a
    return BinOp("+", a, b)


def _sub(a, b):
    if _is_zero(b):
        return a
    if _is_zero(a):
        return Neg(b)
    return BinOp("-", a, b)


def _mul(a, b):
    if _is_zero(a) or _is_zero(b):
        return Num(0.0)
    if isinstance(a, Num) and a.value == 1.0:
        return b
    if isinstance(b, Num) and b.value == 1.0:
        return a
    return BinOp("*", a, b)


class ComplexExpr:
    """A complex scalar field as a pair of real expression trees."""

    __slots__ = ("re", "im")

    def __init__(self, re, im=None):
        self.re = re if isinstance(re, Expr) else Num(float(re))
        if im is None:
            im = Num(0.0)
        self.im = im if isinstance(im, Expr) else Num(float(im))

    @classmethod
    def const(cls, value):
        value = complex(value)
        return cls(Num(value.real), Num(value.imag))

    def conj(self):
        return ComplexExpr(self.re, _sub(Num(0.0), self.im))

    def __add__(self, other):
        return ComplexExpr(_add(self.re, other.re), _add(self.im, other.im))

    def __sub__(self, other):
        return ComplexExpr(_sub(self.re, other.re), _sub(self.im, other.im))

    def __mul__(self, other):
        re = _sub(_mul(self.re, other.re), _mul(self.im, other.im))
        im = _add(_mul(self.re, other.im), _mul(self.im, other.re))
        return ComplexExpr(re, im)

    def __neg__(self):
        return ComplexExpr(_sub(Num(0.0), self.re), _sub(Num(0.0), self.im))

    def is_structural_zero(self):
        return _is_zero(self.re) and _is_zero(self.im)

    def evaluate(self, x, xi):
        re = eval_field(self.re, x, xi)
        im = eval_field(self.im, x, xi)
        return np.asarray(re, dtype=complex) + 1j * np.asarray(im, dtype=complex)

    def has_var(self, kind):
        return self.re.has_var(kind) or self.im.has_var(kind)


class MatrixField:
    """Matrix of complex expression entries, evaluable at (x, xi)."""

    def __init__(self, entries):
        entries = np.asarray(entries, dtype=object)
        if entries.ndim != 2:
            raise ValueError("matrix field must be 2-dimensional")
        for entry in entries.flat:
            if not isinstance(entry, ComplexExpr):
                raise TypeError("entries must be ComplexExpr")
        self.entries = entries

    @property
    def shape(self):
        return self.entries.shape

    @classmethod
    def zeros(cls, rows, cols):
        return cls([[ComplexExpr.const(0.0) for _ in range(cols)] for _ in range(rows)])

    @classmethod
    def identity(cls, size):
        return cls(
            [
                [ComplexExpr.const(1.0 if i == j else 0.0) for j in range(size)]
                for i in range(size)
            ]
        )

    @classmethod
    def constant(cls, matrix):
        matrix = np.asarray(matrix, dtype=complex)
        return cls([[ComplexExpr.const(v) for v in row] for row in matrix])

    @classmethod
    def scalar(cls, entry, size=1):
        if not isinstance(entry, ComplexExpr):
            entry = ComplexExpr(entry)
        out = cls.zeros(size, size)
        for i in range(size):
            out.entries[i, i] = entry
        return out

    def conj_transpose(self):
        rows, cols = self.shape
        return MatrixField(
            [[self.entries[j, i].conj() for j in range(rows)] for i in range(cols)]
        )

    def __add__(self, other):
        if self.shape != other.shape:
            raise ValueError("shape mismatch")
        rows, cols = self.shape
        return MatrixField(
            [
                [self.entries[i, j] + other.entries[i, j] for j in range(cols)]
                for i in range(rows)
            ]
        )

    def __matmul__(self, other):
        rows, inner = self.shape
        inner2, cols = other.shape
        if inner != inner2:
            raise ValueError("shape mismatch")
        out = []
        for i in range(rows):
            row = []
            for j in range(cols):
                acc = ComplexExpr.const(0.0)
                for k in range(inner):
                    acc = acc + self.entries[i, k] * other.entries[k, j]
                row.append(acc)
            out.append(row)
        return MatrixField(out)

    def scale(self, factor):
        if not isinstance(factor, ComplexExpr):
            factor = ComplexExpr.const(factor)
        rows, cols = self.shape
        return MatrixField(
            [[factor * self.entries[i, j] for j in range(cols)] for i in range(rows)]
        )

    def evaluate(self, x, xi):
        """Sample at points; returns shape points_shape + (rows, cols)."""
        x = tuple(np.asarray(a, dtype=float) for a in x)
        xi = tuple(np.asarray(a, dtype=float) for a in xi)
        shape = np.broadcast_shapes(*(a.shape for a in x + xi), ())
        rows, cols = self.shape
        out = np.zeros(shape + (rows, cols), dtype=complex)
        for i in range(rows):
            for j in range(cols):
                entry = self.entries[i, j]
                if entry.is_structural_zero():
                    continue
                out[..., i, j] = entry.evaluate(x, xi)
        return out

    def has_var(self, kind):
        return any(entry.has_var(kind) for entry in self.entries.flat)


@dataclass(frozen=True)
class BStructure:
    """Constant matrices B_1..B_d of size m x n forming B(zeta) = sum B_i zeta_i."""

    d: int
    n: int
    m: int
    b_matrices: tuple

    def __post_init__(self):
        if self.d not in (1, 2):
            raise ValueError("spatial dimension must be 1 or 2")
        if self.m < self.n:
            raise ValueError("range size m must satisfy m >= n")
        mats = tuple(np.asarray(b, dtype=complex) for b in self.b_matrices)
        if len(mats) != self.d:
            raise ValueError(f"expected {self.d} matrices, got {len(mats)}")
        for b in mats:
            if b.shape != (self.m, self.n):
                raise ValueError(f"B matrix shape {b.shape} != ({self.m}, {self.n})")
        object.__setattr__(self, "b_matrices", mats)

    def symbol(self, zeta):
        zeta = np.asarray(zeta)
        out = np.zeros((self.m, self.n), dtype=complex)
        for i in range(self.d):
            out += self.b_matrices[i] * zeta[i]
        return out

    def rank_defect_ratio(self, zeta):
        """Smallest over largest singular value of B(zeta)."""
        s = np.linalg.svd(self.symbol(zeta), compute_uv=False)
        return float(s[-1] / s[0]) if s[0] > 0 else 0.0


def gradient_structure(d):
    """The stacked structure B(zeta) = (zeta_1 E_n; ...; zeta_d E_n) for n = 1."""
    mats = []
    for i in range(d):
        b = np.zeros((d, 1), dtype=complex)
        b[i, 0] = 1.0
        mats.append(b)
    return BStructure(d=d, n=1, m=d, b_matrices=tuple(mats))


@dataclass(frozen=True)
class CoefficientSet:
    """All coefficient fields of the perturbed operator."""

    bstruct: BStructure
    A: MatrixField
    a: tuple
    b: tuple
    V: MatrixField
    G: MatrixField

    def __post_init__(self):
        bs = self.bstruct
        if self.A.shape != (bs.m, bs.m):
            raise ValueError(f"A must be {bs.m}x{bs.m}")
        object.__setattr__(self, "a", tuple(self.a))
        object.__setattr__(self, "b", tuple(self.b))
        if len(self.a) != bs.d or len(self.b) != bs.d:
            raise ValueError(f"need {bs.d} first-order coefficient pairs")
        for mat in self.a + self.b + (self.V, self.G):
            if mat.shape != (bs.n, bs.n):
                raise ValueError(f"lower-order fields must be {bs.n}x{bs.n}")
        for i, mat in enumerate(self.b):
            if mat.has_var("xi"):
                raise ValueError(f"b_{i + 1} may depend on x only")

    def cell_data_has_x(self):
        """True if the cell problems depend on the slow point."""
        return (
            self.A.has_var("x")
            or any(m.has_var("x") for m in self.a)
            or any(m.has_var("x") for m in self.b)
        )


@dataclass
class SamplingPlan:
    """Deterministic probe plan for validation."""

    seed: int = 0
    n_random: int = 128
    n_zeta: int = 50
    x_extent: float = 2.0 * np.pi
    lattice_x: int = 0  # 0 -> per-dimension default
    lattice_xi: int = 0

    def points(self, d):
        """Return (x_points, xi_points) arrays of shape (P, d)."""
        lat_x = self.lattice_x or (9 if d == 1 else 3)
        lat_xi = self.lattice_xi or (64 if d == 1 else 12)
        ax = [np.linspace(0.0, self.x_extent, lat_x, endpoint=False)] * d
        axi = [np.arange(lat_xi) / lat_xi] * d
        grids = np.meshgrid(*ax, *axi, indexing="ij")
        pts = np.stack([g.ravel() for g in grids], axis=-1)
        x_pts, xi_pts = pts[:, :d], pts[:, d:]
        rng = np.random.default_rng(self.seed)
        x_extra = rng.uniform(0.0, self.x_extent, size=(self.n_random, d))
        xi_extra = rng.uniform(0.0, 1.0, size=(self.n_random, d))
        return (
            np.concatenate([x_pts, x_extra], axis=0),
            np.concatenate([xi_pts, xi_extra], axis=0),
        )

    def zeta_samples(self, d):
        rng = np.random.default_rng(self.seed + 1)
        z = rng.normal(size=(self.n_zeta, d))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        return np.concatenate([np.eye(d), z], axis=0)


@dataclass
class ValidationReport:
    c1: float = np.nan
    c2: float = np.nan
    g1: float = np.nan
    g2: float = np.nan
    hermitian_ok: bool = False
    rank_ok: bool = False
    sample_count: int = 0
    hermitian_defect: float = np.nan
    hermitian_worst: tuple = ()  # (field, row, col)
    rank_min_ratio: float = np.nan
    messages: list = field(default_factory=list)

    @property
    def valid(self):
        return bool(
            self.c1 > 0.0 and self.g1 > 0.0 and self.hermitian_ok and self.rank_ok
        )

    def to_dict(self):
        return {
            "c1": float(self.c1),
            "c2": float(self.c2),
            "g1": float(self.g1),
            "g2": float(self.g2),
            "hermitian_ok": self.hermitian_ok,
            "rank_ok": self.rank_ok,
            "sample_count": self.sample_count,
            "hermitian_defect": float(self.hermitian_defect),
            "hermitian_worst": list(self.hermitian_worst),
            "rank_min_ratio": float(self.rank_min_ratio),
            "valid": self.valid,
            "messages": list(self.messages),
        }

    def __str__(self):
        return (
            f"c1={self.c1:.6g} c2={self.c2:.6g} g1={self.g1:.6g} g2={self.g2:.6g} "
            f"hermitian_ok={self.hermitian_ok} rank_ok={self.rank_ok} "
            f"samples={self.sample_count}"
            + ("" if not self.messages else "; " + "; ".join(self.messages))
        )


def _hermitian_defect(samples):
    """Max entrywise deviation from Hermitian symmetry; index of the worst."""
    diff = np.abs(samples - np.conj(np.swapaxes(samples, -1, -2)))
    defect = float(diff.max())
    idx = np.unravel_index(int(diff.argmax()), diff.shape)
    return defect, (int(idx[-2]), int(idx[-1]))


def validate(cs, plan=None):
    """Probe ellipticity, weight bounds, hermiticity and B-rank.

    Raises :class:`ValidationFailed` (carrying the report) on violation.
    """
    plan = plan or SamplingPlan()
    d = cs.bstruct.d
    x_pts, xi_pts = plan.points(d)
    if len(x_pts) < 100:
        raise ValueError("sampling plan must provide at least 100 probe points")
    x_axes = [x_pts[:, i] for i in range(d)]
    xi_axes = [xi_pts[:, i] for i in range(d)]

    report = ValidationReport(sample_count=len(x_pts))

    defect = 0.0
    worst = ("A", 0, 0)
    samples = {}
    for name, fld in (("A", cs.A), ("V", cs.V), ("G", cs.G)):
        vals = fld.evaluate(x_axes, xi_axes)
        samples[name] = vals
        dft, (i, j) = _hermitian_defect(vals)
        if dft > defect:
            defect, worst = dft, (name, i, j)
    report.hermitian_defect = defect
    report.hermitian_worst = worst
    report.hermitian_ok = defect <= _HERMITIAN_TOL
    if not report.hermitian_ok:
        report.messages.append(
            f"field {worst[0]} entry ({worst[1]}, {worst[2]}) is not hermitian "
            f"(defect {defect:.3e})"
        )

    a_sym = 0.5 * (samples["A"] + np.conj(np.swapaxes(samples["A"], -1, -2)))
    eig_a = np.linalg.eigvalsh(a_sym)
    report.c1, report.c2 = float(eig_a.min()), float(eig_a.max())
    if report.c1 <= 0.0:
        report.messages.append(f"A is not uniformly positive (c1={report.c1:.3e})")

    g_sym = 0.5 * (samples["G"] + np.conj(np.swapaxes(samples["G"], -1, -2)))
    eig_g = np.linalg.eigvalsh(g_sym)
    report.g1, report.g2 = float(eig_g.min()), float(eig_g.max())
    if report.g1 <= 0.0:
        report.messages.append(f"G is not uniformly positive (g1={report.g1:.3e})")

    zetas = plan.zeta_samples(d)
    if len(zetas) < 50:
        raise ValueError("sampling plan must provide at least 50 zeta samples")
    ratios = [cs.bstruct.rank_defect_ratio(z) for z in zetas]
    report.rank_min_ratio = float(min(ratios))
    report.rank_ok = report.rank_min_ratio > _ZETA_RANK_RTOL
    if not report.rank_ok:
        report.messages.append(
            f"rank condition fails (min sigma ratio {report.rank_min_ratio:.3e})"
        )

    if not report.valid:
        raise ValidationFailed(report)
    return report


# ---------------------------------------------------------------------------
# problem construction from dict / TOML


def _entry_from_spec(value):
    if isinstance(value, (int, float)):
        return ComplexExpr(Num(float(value)))
    if isinstance(value, str):
        return ComplexExpr(parse_expr(value))
    if isinstance(value, (list, tuple)) and len(value) == 2:
        re, im = value
        re = parse_expr(re) if isinstance(re, str) else Num(float(re))
        im = parse_expr(im) if isinstance(im, str) else Num(float(im))
        return ComplexExpr(re, im)
    raise ValueError(f"bad matrix entry {value!r}")


def _matrix_from_spec(spec, rows, cols, what):
    entries = spec.get("entries") if isinstance(spec, dict) else spec
    if entries is None:
        raise ValueError(f"section {what} has no 'entries'")
    if len(entries) != rows or any(len(r) != cols for r in entries):
        raise ValueError(f"section {what} must be a {rows}x{cols} array")
    return MatrixField([[_entry_from_spec(v) for v in row] for row in entries])


def problem_from_dict(data):
    """Build a CoefficientSet from the TOML problem schema."""
    try:
        bspec = data["bstruct"]
        d, n, m = int(bspec["d"]), int(bspec["n"]), int(bspec["m"])
    except KeyError as err:
        raise ValueError(f"missing bstruct key: {err}") from None
    mats = []
    for i in range(1, d + 1):
        raw = bspec.get(f"B{i}")
        if raw is None:
            raise ValueError(f"missing bstruct.B{i}")
        arr = np.asarray(raw, dtype=float)
        if arr.shape != (m, n, 2):
            raise ValueError(f"bstruct.B{i} must be {m}x{n} [re, im] pairs")
        mats.append(arr[..., 0] + 1j * arr[..., 1])
    bstruct = BStructure(d=d, n=n, m=m, b_matrices=tuple(mats))

    if "A" not in data:
        raise ValueError("missing section [A]")
    A = _matrix_from_spec(data["A"], m, m, "A")

    def lower(name, i=None, default="zero"):
        if i is not None:
            section = data.get(name, {})
            spec = section.get(str(i)) if isinstance(section, dict) else None
            label = f"{name}.{i}"
        else:
            spec = data.get(name)
            label = name
        if spec is None:
            return MatrixField.identity(n) if default == "eye" else MatrixField.zeros(n, n)
        return _matrix_from_spec(spec, n, n, label)

    a = tuple(lower("a", i + 1) for i in range(d))
    b = tuple(lower("b", i + 1, default="eye") for i in range(d))
    V = lower("V")
    G = lower("G", default="eye")
    return CoefficientSet(bstruct=bstruct, A=A, a=a, b=b, V=V, G=G)


def load_problem_toml(path):
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    with open(path, "rb") as handle:
        data = tomllib.load(handle)
    return problem_from_dict(data)
