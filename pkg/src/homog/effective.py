"""Homogenized coefficients assembled from the cell correctors.

Each assembler computes its target two ways: the defining cell average and
the integrated-by-parts equivalent form.  With the exact-adjoint cell
discretization the two forms agree down to solver-residual level, so a
discrepancy above tolerance signals an inconsistent discretization, not an
approximation error.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cell import CellDiscretization, CorrectorCache, hermitize
from .errors import CrossCheckFailed, DimensionError

CROSSCHECK_TOL = 1e-6
_ZEROTH_FD_STEP = 1e-5


@dataclass(frozen=True)
class SlowGrid:
    """Uniform periodic grid of slow points on [0, length)^d."""

    d: int
    length: float
    counts: tuple

    def __post_init__(self):
        counts = tuple(int(c) for c in np.atleast_1d(np.asarray(self.counts)))
        if len(counts) == 1 and self.d > 1:
            counts = counts * self.d
        if len(counts) != self.d or any(c < 1 for c in counts):
            raise ValueError("slow grid needs a positive count per axis")
        object.__setattr__(self, "counts", counts)

    @classmethod
    def single_point(cls, d, length=2.0 * np.pi):
        return cls(d=d, length=length, counts=(1,) * d)

    def axis_nodes(self, axis):
        c = self.counts[axis]
        return np.arange(c) * (self.length / c)

    def nodes(self):
        axes = [self.axis_nodes(i) for i in range(self.d)]
        grids = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=-1)

    @property
    def n_nodes(self):
        return int(np.prod(self.counts))

    def interp_weights(self, points):
        """Periodic multilinear interpolation stencil for points (P, d).

        Returns (indices, weights): lists over 2^d corners of flat node
        indices (P,) and weights (P,).
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        P = len(points)
        lows, fracs = [], []
        for axis in range(self.d):
            c = self.counts[axis]
            step = self.length / c
            t = np.mod(points[:, axis], self.length) / step
            snap = np.abs(t - np.round(t)) <= 1e-9  # exact node hits stay exact
            t = np.where(snap, np.round(t), t)
            i0 = np.floor(t).astype(int) % c
            lows.append(i0)
            fracs.append(t - np.floor(t))
        indices, weights = [], []
        for corner in range(2**self.d):
            idx = np.zeros(P, dtype=int)
            w = np.ones(P)
            stride = 1
            for axis in reversed(range(self.d)):
                bit = corner >> axis & 1
                c = self.counts[axis]
                i = (lows[axis] + bit) % c
                idx += i * stride
                stride *= c
                w = w * (fracs[axis] if bit else 1.0 - fracs[axis])
            indices.append(idx)
            weights.append(w)
        return indices, weights


@dataclass
class HomogenizedCoefficients:
    """Per-slow-node effective coefficients and cross-check records."""

    bstruct: object
    slow_grid: SlowGrid
    A2: np.ndarray  # (P, m, m)
    A1_left: np.ndarray  # (P, m, n)
    A1_right: np.ndarray  # (P, n, m)
    A1_zeroth: np.ndarray  # (P, n, n)
    A0: np.ndarray  # (P, n, n)
    G0: np.ndarray  # (P, n, n)
    a_means: np.ndarray  # (d, P, n, n)
    b_values: np.ndarray  # (d, P, n, n)
    crosschecks: dict = field(default_factory=dict)

    _FIELDS = ("A2", "A1_left", "A1_right", "A1_zeroth", "A0", "G0")

    def sample_at(self, name, points):
        """Periodic multilinear interpolation of a per-node field at points."""
        data = getattr(self, name)
        indices, weights = self.slow_grid.interp_weights(points)
        out = np.zeros((len(indices[0]),) + data.shape[-2:], dtype=complex)
        for idx, w in zip(indices, weights):
            out += w[:, None, None] * data[idx]
        return out

    def sample_a_mean_at(self, direction, points):
        data = self.a_means[direction]
        indices, weights = self.slow_grid.interp_weights(points)
        out = np.zeros((len(indices[0]),) + data.shape[-2:], dtype=complex)
        for idx, w in zip(indices, weights):
            out += w[:, None, None] * data[idx]
        return out

    def sample_b_at(self, direction, points):
        data = self.b_values[direction]
        indices, weights = self.slow_grid.interp_weights(points)
        out = np.zeros((len(indices[0]),) + data.shape[-2:], dtype=complex)
        for idx, w in zip(indices, weights):
            out += w[:, None, None] * data[idx]
        return out

    def max_crosscheck(self):
        return max(self.crosschecks.values(), default=0.0)

    def to_dict(self):
        def matlist(arr):
            return [[[ [float(v.real), float(v.imag)] for v in row] for row in mat] for mat in arr]

        return {
            "x_nodes": [[float(v) for v in node] for node in self.slow_grid.nodes()],
            "A2": matlist(self.A2),
            "A1_left": matlist(self.A1_left),
            "A1_right": matlist(self.A1_right),
            "A1_zeroth": matlist(self.A1_zeroth),
            "A0": matlist(self.A0),
            "G0": matlist(self.G0),
            "a_means": [matlist(self.a_means[i]) for i in range(self.a_means.shape[0])],
            "b_values": [matlist(self.b_values[i]) for i in range(self.b_values.shape[0])],
            "crosschecks": {k: float(v) for k, v in self.crosschecks.items()},
        }


def _rel_discrepancy(m1, m2, scale):
    """Max-entry discrepancy relative to the forms, floored by problem scale."""
    diff = float(np.abs(m1 - m2).max())
    denom = max(float(np.abs(m1).max()), float(np.abs(m2).max()), 0.01 * scale)
    return diff / denom if denom > 0.0 else 0.0


def _cell_axes(corr):
    return corr.grid.node_axes()


def _sample_at_cell(field_matrix, x, grid):
    x_axes = [np.full(grid.n_nodes, v) for v in x]
    return field_matrix.evaluate(x_axes, grid.node_axes())


def _sample_at_point(field_matrix, x, d):
    return field_matrix.evaluate([np.asarray(v) for v in x], [np.zeros(())] * d)


def assemble_A2(corr, cs):
    """Effective principal coefficient; returns (A2, discrepancy record)."""
    bs = cs.bstruct
    disc = CellDiscretization(bs, corr.grid, corr.backend)
    a_samples = hermitize(_sample_at_cell(cs.A, corr.x, corr.grid))
    m = bs.m
    X = np.empty((corr.grid.n_nodes, m, m), dtype=complex)
    for j in range(m):
        X[:, :, j] = disc.apply_B(corr.lambda1[:, :, j])
    X += np.eye(m)[None, :, :]
    form_mean = np.einsum("pij,pjk->ik", a_samples, X) / corr.grid.n_nodes
    form_quad = np.einsum("pji,pjk,pkl->il", np.conj(X), a_samples, X) / corr.grid.n_nodes
    scale = float(np.abs(a_samples).max()) + 1e-300
    disc_rec = _rel_discrepancy(form_mean, form_quad, scale)
    A2 = 0.5 * (form_mean + form_mean.conj().T)
    return A2, disc_rec


def assemble_A1_A0(corr, cs):
    """First- and zeroth-order effective parts with proof-form cross-checks.

    Returns (A1_left, A1_right, A1_zeroth, A0, records, a_means, b_values);
    ``records`` maps form names to relative discrepancies, ``a_means`` and
    ``b_values`` carry the first-order data the discrete assembler needs.
    """
    bs = cs.bstruct
    grid = corr.grid
    disc = CellDiscretization(bs, grid, corr.backend)
    N = grid.n_nodes
    a_samples = hermitize(_sample_at_cell(cs.A, corr.x, grid))
    v_mean = hermitize(_sample_at_cell(cs.V, corr.x, grid)).mean(axis=0)

    W0 = np.empty((N, bs.m, bs.n), dtype=complex)
    for j in range(bs.n):
        W0[:, :, j] = disc.apply_B(corr.lambda0[:, :, j])

    A1_left = np.einsum("pij,pjk->ik", a_samples, W0) / N
    A1_right = np.einsum("pji,pjk->ik", np.conj(W0), a_samples) / N
    quad = np.einsum("pji,pjk,pkl->il", np.conj(W0), a_samples, W0) / N
    A0 = -quad + v_mean
    A0 = 0.5 * (A0 + A0.conj().T)

    # proof-form equivalents via the (3.9a)-style summation by parts
    a_vals = [_sample_at_cell(cs.a[i], corr.x, grid) for i in range(bs.d)]
    b_vals = [_sample_at_point(cs.b[i], corr.x, bs.d) for i in range(bs.d)]
    right_proof = np.zeros((bs.n, bs.m), dtype=complex)
    a0_proof = np.zeros((bs.n, bs.n), dtype=complex)
    for i in range(bs.d):
        d_l1 = disc.deriv(corr.lambda1, i)
        d_l0 = disc.deriv(corr.lambda0, i)
        ab = np.einsum("pij,jk->pik", a_vals[i], b_vals[i])
        right_proof += np.einsum("pij,pjk->ik", ab, d_l1) / N
        a0_proof += np.einsum("pij,pjk->ik", ab, d_l0) / N
    a0_proof += v_mean

    scale = float(np.abs(a_samples).max()) + sum(
        float(np.abs(av).max()) for av in a_vals
    ) + float(np.abs(v_mean).max()) + 1e-300
    records = {
        "A1_right": _rel_discrepancy(A1_right, right_proof, scale),
        "A1_left": _rel_discrepancy(A1_left, right_proof.conj().T, scale),
        "A0": _rel_discrepancy(A0, 0.5 * (a0_proof + a0_proof.conj().T), scale),
    }

    a_means = np.stack([av.mean(axis=0) for av in a_vals])
    zeroth = _a1_zeroth(cs, corr.x, grid, b_vals)
    return A1_left, A1_right, zeroth, A0, records, a_means, np.stack(b_vals)


def _a1_zeroth(cs, x, grid, b_vals):
    """Zeroth-order pieces generated when the derivative hits b_i(x) or
    the xi-mean of a_i^*; reported via small-step central differences."""
    bs = cs.bstruct
    h = _ZEROTH_FD_STEP
    out = np.zeros((bs.n, bs.n), dtype=complex)
    for i in range(bs.d):
        xp = list(x)
        xm = list(x)
        xp[i] += h
        xm[i] -= h
        db = (_sample_at_point(cs.b[i], xp, bs.d) - _sample_at_point(cs.b[i], xm, bs.d)) / (2 * h)
        amean_p = _sample_at_cell(cs.a[i], xp, grid).mean(axis=0)
        amean_m = _sample_at_cell(cs.a[i], xm, grid).mean(axis=0)
        damean_star = (np.conj(amean_p.T) - np.conj(amean_m.T)) / (2 * h)
        a_mean = _sample_at_cell(cs.a[i], x, grid).mean(axis=0)
        out += a_mean @ db - np.conj(b_vals[i].T) @ damean_star
    return out


def assemble_G0(cs, x, grid):
    """Cell mean of the weight G at slow point x; exactly hermitized."""
    samples = hermitize(_sample_at_cell(cs.G, tuple(np.atleast_1d(x)), grid))
    mean = samples.mean(axis=0)
    return 0.5 * (mean + mean.conj().T)


def assemble_homogenized(
    cs,
    slow_grid,
    cell_grid,
    backend="spectral",
    tol=1e-10,
    crosscheck_tol=CROSSCHECK_TOL,
    cache=None,
):
    """All effective coefficients on a slow grid.

    Raises CrossCheckFailed (with the assembled object attached as
    ``payload``) when any pair of equivalent forms disagrees beyond
    ``crosscheck_tol``.
    """
    bs = cs.bstruct
    if slow_grid.d != bs.d:
        raise DimensionError("slow grid dimension mismatch")
    cache = cache or CorrectorCache(cs, cell_grid, backend=backend, tol=tol)
    nodes = slow_grid.nodes()
    P = len(nodes)
    A2 = np.empty((P, bs.m, bs.m), dtype=complex)
    A1_left = np.empty((P, bs.m, bs.n), dtype=complex)
    A1_right = np.empty((P, bs.n, bs.m), dtype=complex)
    A1_zeroth = np.empty((P, bs.n, bs.n), dtype=complex)
    A0 = np.empty((P, bs.n, bs.n), dtype=complex)
    G0 = np.empty((P, bs.n, bs.n), dtype=complex)
    a_means = np.empty((bs.d, P, bs.n, bs.n), dtype=complex)
    b_values = np.empty((bs.d, P, bs.n, bs.n), dtype=complex)
    records = {"A2": 0.0, "A1_right": 0.0, "A1_left": 0.0, "A0": 0.0}

    for p, node in enumerate(nodes):
        corr = cache.get(node)
        A2[p], rec_a2 = assemble_A2(corr, cs)
        left, right, zeroth, a0, recs, am, bv = assemble_A1_A0(corr, cs)
        A1_left[p], A1_right[p], A1_zeroth[p], A0[p] = left, right, zeroth, a0
        G0[p] = assemble_G0(cs, node, cell_grid)
        a_means[:, p] = am
        b_values[:, p] = bv
        records["A2"] = max(records["A2"], rec_a2)
        for key in ("A1_right", "A1_left", "A0"):
            records[key] = max(records[key], recs[key])

    hc = HomogenizedCoefficients(
        bstruct=bs,
        slow_grid=slow_grid,
        A2=A2,
        A1_left=A1_left,
        A1_right=A1_right,
        A1_zeroth=A1_zeroth,
        A0=A0,
        G0=G0,
        a_means=a_means,
        b_values=b_values,
        crosschecks=records,
    )
    worst = hc.max_crosscheck()
    if worst > crosscheck_tol:
        err = CrossCheckFailed(
            f"form discrepancy {worst:.3e} exceeds {crosscheck_tol:.1e}: {records}"
        )
        err.payload = hc
        raise err
    return hc
