"""Scalar coefficient fields: a small expression language over (x, xi).

Grammar (see README):

    expr   := term (('+'|'-') term)*
    term   := factor (('*'|'/') factor)*
    factor := number | 'pi' | var | func '(' expr ')' | '(' expr ')' | '-' factor
    var    := 'x' digits | 'xi' digits
    func   := 'sin' | 'cos' | 'exp'

Fast variables xi1..xid may appear only inside sin/cos whose argument is a
pure product of numeric literals, ``pi`` and exactly one xi variable, with
total phase 2*pi*k for a nonzero integer k.  That makes 1-periodicity in
each xi component a static property of the tree rather than a runtime
check.  Expressions are real-valued; complex entries are formed elsewhere
as (re, im) pairs of trees.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ParseError, PeriodicityError

_TWO_PI = 2.0 * math.pi
_FUNCS = {"sin": np.sin, "cos": np.cos, "exp": np.exp}


class Expr:
    """Base node. Trees are immutable after construction."""

    def evaluate(self, x, xi):
        """Evaluate on broadcastable per-axis coordinate arrays."""
        raise NotImplementedError

    def has_var(self, kind):
        raise NotImplementedError

    def to_source(self):
        raise NotImplementedError

    # algebra used when composing coefficient fields programmatically
    def __add__(self, other):
        return BinOp("+", self, _as_expr(other))

    def __sub__(self, other):
        return BinOp("-", self, _as_expr(other))

    def __mul__(self, other):
        return BinOp("*", self, _as_expr(other))

    def __neg__(self):
        return Neg(self)

    def __repr__(self):
        try:
            return f"Expr({self.to_source()!r})"
        except ValueError:
            return f"Expr(<{type(self).__name__}>)"


def _as_expr(value):
    if isinstance(value, Expr):
        return value
    return Num(float(value))


class Num(Expr):
    def __init__(self, value):
        self.value = float(value)

    def evaluate(self, x, xi):
        return self.value

    def has_var(self, kind):
        return False

    def to_source(self):
        return repr(self.value)


class Pi(Expr):
    def evaluate(self, x, xi):
        return math.pi

    def has_var(self, kind):
        return False

    def to_source(self):
        return "pi"


class Var(Expr):
    def __init__(self, kind, index):
        if kind not in ("x", "xi"):
            raise ValueError(f"unknown variable kind {kind!r}")
        self.kind = kind
        self.index = int(index)

    def evaluate(self, x, xi):
        axes = x if self.kind == "x" else xi
        if self.index > len(axes):
            raise ValueError(
                f"variable {self.kind}{self.index} exceeds dimension {len(axes)}"
            )
        return axes[self.index - 1]

    def has_var(self, kind):
        return self.kind == kind

    def to_source(self):
        return f"{self.kind}{self.index}"


class Neg(Expr):
    def __init__(self, child):
        self.child = child

    def evaluate(self, x, xi):
        return -self.child.evaluate(x, xi)

    def has_var(self, kind):
        return self.child.has_var(kind)

    def to_source(self):
        return f"-{_wrap(self.child, 2)}"


class BinOp(Expr):
    _PREC = {"+": 0, "-": 0, "*": 1, "/": 1}

    def __init__(self, op, left, right):
        self.op = op
        self.left = left
        self.right = right

    def evaluate(self, x, xi):
        a = self.left.evaluate(x, xi)
        b = self.right.evaluate(x, xi)
        if self.op == "+":
            return a + b
        if self.op == "-":
            return a - b
        if self.op == "*":
            return a * b
        return a / b

    def has_var(self, kind):
        return self.left.has_var(kind) or self.right.has_var(kind)

    def to_source(self):
        prec = self._PREC[self.op]
        left = _wrap(self.left, prec)
        # '-' and '/' do not associate on the right
        rprec = prec + (1 if self.op in ("-", "/") else 0)
        right = _wrap(self.right, rprec)
        return f"{left} {self.op} {right}"


class Call(Expr):
    def __init__(self, func, arg):
        if func not in _FUNCS:
            raise ValueError(f"unknown function {func!r}")
        self.func = func
        self.arg = arg

    def evaluate(self, x, xi):
        return _FUNCS[self.func](self.arg.evaluate(x, xi))

    def has_var(self, kind):
        return self.arg.has_var(kind)

    def to_source(self):
        return f"{self.func}({self.arg.to_source()})"


class Tabulated(Expr):
    """Grid-sampled field: linear interpolation in x, trigonometric in xi.

    ``values`` has shape x_shape + xi_shape.  ``x_nodes`` is a tuple of
    per-axis node coordinate arrays (ascending, uniform); evaluation clamps
    to the sampled range.  ``xi_ncell`` gives the per-axis counts of a
    uniform periodic grid on [0,1)^d; trigonometric interpolation keeps the
    xi dependence exactly 1-periodic.
    """

    def __init__(self, values, x_nodes=None, xi_ncell=None):
        values = np.asarray(values, dtype=float)
        self.x_nodes = tuple(np.asarray(a, dtype=float) for a in (x_nodes or ()))
        self.xi_ncell = tuple(int(n) for n in (xi_ncell or ()))
        x_shape = tuple(len(a) for a in self.x_nodes)
        expected = x_shape + self.xi_ncell
        if values.shape != expected:
            raise ValueError(f"tabulated values shape {values.shape} != {expected}")
        self.values = values
        if self.xi_ncell:
            self._xi_coeffs = np.fft.fftn(
                values, axes=tuple(range(len(x_shape), values.ndim))
            ) / float(np.prod(self.xi_ncell))
        else:
            self._xi_coeffs = None

    def evaluate(self, x, xi):
        d_x, d_xi = len(self.x_nodes), len(self.xi_ncell)
        coords = tuple(x)[:] + tuple(xi)[:]
        shape = np.broadcast_shapes(*(np.shape(a) for a in coords), ())
        npts = int(np.prod(shape)) if shape else 1

        # per-point trig evaluation in xi -> array of shape x_shape + (P,)
        if d_xi:
            data = self._xi_coeffs
            for axis in range(d_xi):
                n = self.xi_ncell[axis]
                pts = np.broadcast_to(np.asarray(xi[axis], float), shape).reshape(npts)
                phase = _trig_phase(pts, n)  # (P, modes)
                # contract current leading xi axis (at position d_x) with phase
                data = np.tensordot(data, phase, axes=([d_x], [1]))
                # point axis lands last; keep collapsing onto a shared diagonal
                if axis > 0:
                    data = np.einsum("...pp->...p", data)
            data = np.real(data)
        else:
            data = self.values.reshape(self.values.shape + (1,))
            data = np.broadcast_to(data, self.values.shape + (npts,))

        # per-point multilinear interpolation over the x axes; the point axis
        # leads so each gather stays O(npts * remaining axes)
        data = np.moveaxis(data, -1, 0)  # (P, x_axes...)
        for axis in range(d_x):
            nodes = self.x_nodes[axis]
            pts = np.broadcast_to(np.asarray(x[axis], float), shape).reshape(npts)
            idx = np.clip(np.searchsorted(nodes, pts) - 1, 0, len(nodes) - 2)
            w = np.clip((pts - nodes[idx]) / (nodes[idx + 1] - nodes[idx]), 0.0, 1.0)
            tail = data.ndim - 2
            sel = idx.reshape((npts, 1) + (1,) * tail)
            lo = np.take_along_axis(data, sel, axis=1)[:, 0]
            hi = np.take_along_axis(data, sel + 1, axis=1)[:, 0]
            w = w.reshape((npts,) + (1,) * tail)
            data = lo * (1.0 - w) + hi * w

        out = data.reshape(shape) if shape else float(data.reshape(()))
        return out

    def has_var(self, kind):
        return bool(self.x_nodes) if kind == "x" else bool(self.xi_ncell)

    def to_source(self):
        raise ValueError("tabulated fields have no source form")


def _trig_phase(points, n):
    """Evaluation matrix of trig interpolation on an n-point periodic grid."""
    k = np.fft.fftfreq(n, d=1.0 / n)
    weights = np.ones(n)
    if n % 2 == 0:
        # split the Nyquist coefficient between +n/2 and -n/2
        k = np.concatenate([k, [n / 2.0]])
        weights = np.concatenate([weights, [0.5]])
        weights[n // 2] = 0.5
    phase = np.exp(2j * np.pi * np.outer(points, k)) * weights
    if n % 2 == 0:
        # fold the duplicated +n/2 column back onto the -n/2 coefficient slot
        phase = np.concatenate(
            [phase[:, : n // 2], (phase[:, n // 2] + phase[:, n])[:, None], phase[:, n // 2 + 1 : n]],
            axis=1,
        )
    return phase


def _wrap(node, min_prec):
    src = node.to_source()
    prec = BinOp._PREC.get(getattr(node, "op", None), 3)
    if isinstance(node, Neg):
        prec = 2
    return f"({src})" if prec < min_prec else src


# ---------------------------------------------------------------------------
# tokenizer / parser


def _tokenize(source):
    tokens = []
    i, n = 0, len(source)
    while i < n:
        c = source[i]
        if c.isspace():
            i += 1
            continue
        if c in "+-*/()":
            tokens.append((c, c, i))
            i += 1
            continue
        if c.isdigit() or c == ".":
            j = i
            while j < n and (source[j].isdigit() or source[j] == "."):
                j += 1
            if j < n and source[j] in "eE":
                k = j + 1
                if k < n and source[k] in "+-":
                    k += 1
                if k < n and source[k].isdigit():
                    j = k
                    while j < n and source[j].isdigit():
                        j += 1
            text = source[i:j]
            try:
                value = float(text)
            except ValueError:
                raise ParseError(i, f"bad number {text!r}") from None
            tokens.append(("num", value, i))
            i = j
            continue
        if c.isalpha() or c == "_":
            j = i
            while j < n and (source[j].isalnum() or source[j] == "_"):
                j += 1
            tokens.append(("name", source[i:j], i))
            i = j
            continue
        raise ParseError(i, f"unexpected character {c!r}")
    tokens.append(("end", None, n))
    return tokens


class _Parser:
    def __init__(self, tokens):
        self.tokens = tokens
        self.pos = 0

    def peek(self):
        return self.tokens[self.pos]

    def next(self):
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, kind):
        tok = self.next()
        if tok[0] != kind:
            raise ParseError(tok[2], f"expected {kind!r}, found {tok[1]!r}")
        return tok

    def parse_expr(self):
        node = self.parse_term()
        while self.peek()[0] in ("+", "-"):
            op = self.next()[0]
            node = BinOp(op, node, self.parse_term())
        return node

    def parse_term(self):
        node = self.parse_factor()
        while self.peek()[0] in ("*", "/"):
            op = self.next()[0]
            node = BinOp(op, node, self.parse_factor())
        return node

    def parse_factor(self):
        kind, value, pos = self.peek()
        if kind == "-":
            self.next()
            return Neg(self.parse_factor())
        if kind == "num":
            self.next()
            return Num(value)
        if kind == "(":
            self.next()
            node = self.parse_expr()
            self.expect(")")
            return node
        if kind == "name":
            self.next()
            if value == "pi":
                return Pi()
            if value in _FUNCS:
                self.expect("(")
                arg = self.parse_expr()
                self.expect(")")
                return Call(value, arg)
            for prefix, var_kind in (("xi", "xi"), ("x", "x")):
                if value.startswith(prefix) and value[len(prefix):].isdigit():
                    return Var(var_kind, int(value[len(prefix):]))
            raise ParseError(pos, f"unknown name {value!r}")
        raise ParseError(pos, f"unexpected token {value!r}")


def parse_expr(source):
    """Parse a coefficient expression; static 1-periodicity check included."""
    parser = _Parser(_tokenize(source))
    node = parser.parse_expr()
    tok = parser.peek()
    if tok[0] != "end":
        raise ParseError(tok[2], f"trailing input {tok[1]!r}")
    check_periodicity(node)
    return node


def serialize(expr):
    """Source form that re-parses to an equivalent tree."""
    return expr.to_source()


# ---------------------------------------------------------------------------
# periodicity guard


def _phase_product(node):
    """Decompose a sin/cos argument as coef * (one xi var); None if not pure."""
    if isinstance(node, Num):
        return node.value, None
    if isinstance(node, Pi):
        return math.pi, None
    if isinstance(node, Var):
        if node.kind == "xi":
            return 1.0, node.index
        return None
    if isinstance(node, Neg):
        inner = _phase_product(node.child)
        if inner is None:
            return None
        return -inner[0], inner[1]
    if isinstance(node, BinOp) and node.op == "*":
        left = _phase_product(node.left)
        right = _phase_product(node.right)
        if left is None or right is None:
            return None
        if left[1] is not None and right[1] is not None:
            return None
        return left[0] * right[0], left[1] if left[1] is not None else right[1]
    return None


def check_periodicity(root):
    """Reject trees where a xi variable escapes sin/cos(2*pi*k*xi_i)."""

    def visit(node):
        if isinstance(node, Call) and node.func in ("sin", "cos"):
            if node.arg.has_var("xi"):
                decomp = _phase_product(node.arg)
                if decomp is None:
                    raise PeriodicityError(
                        f"{node.func} argument {node.arg.to_source()!r} is not a "
                        "pure product of literals and one fast variable"
                    )
                coef, index = decomp
                k = coef / _TWO_PI
                if index is None or abs(k - round(k)) > 1e-9 * max(1.0, abs(k)) or round(k) == 0:
                    raise PeriodicityError(
                        f"phase {node.arg.to_source()!r} is not 2*pi*k*xi{index} "
                        "with nonzero integer k"
                    )
                return  # admitted construct; subtree fully checked
            visit(node.arg)
            return
        if isinstance(node, Var) and node.kind == "xi":
            raise PeriodicityError(
                f"fast variable xi{node.index} outside sin/cos(2*pi*k*xi)"
            )
        if isinstance(node, Tabulated):
            return  # periodic by construction in xi
        for child in _children(node):
            visit(child)

    visit(root)


def _children(node):
    if isinstance(node, Neg):
        return (node.child,)
    if isinstance(node, BinOp):
        return (node.left, node.right)
    if isinstance(node, Call):
        return (node.arg,)
    return ()


# ---------------------------------------------------------------------------
# evaluation entry point


def eval_field(expr, x, xi):
    """Evaluate a scalar field at points.

    ``x`` and ``xi`` are sequences of d per-axis coordinates (scalars or
    broadcastable arrays).  xi is reduced mod 1 per component before
    evaluation, so 1-periodicity holds exactly on dyadic points.
    """
    x = tuple(np.asarray(a, dtype=float) for a in x)
    xi = tuple(np.mod(np.asarray(a, dtype=float), 1.0) for a in xi)
    shape = np.broadcast_shapes(*(a.shape for a in x + xi), ())
    value = expr.evaluate(x, xi)
    value = np.asarray(value, dtype=float)
    if value.shape != shape:
        value = np.broadcast_to(value, shape)
    return value if shape else float(value)
