"""Discrete operators on a periodic physical torus.

Assembles H_eps, H_0 and the weight multipliers as sparse Hermitian
matrices, applies the corrector operator, and provides shifted solves and
lowest-eigenvalue computation for the generalized pencil (H, G).

Stencils mirror the cell module: forward differences inside B(d) with the
exact matrix adjoint for B(d)^*, centered differences for the first-order
terms (assembled with their exact adjoints so everything is Hermitian to
the last bit after symmetrization).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .cell import hermitize
from .errors import (
    CacheMiss,
    CommensurabilityError,
    DimensionError,
    NodeMismatch,
    ShiftInsideSpectrum,
    SolverDiverged,
)

SHIFT_MARGIN = 1e-6
_DENSE_EIG_LIMIT = 600


@dataclass(frozen=True)
class TorusGrid:
    """Uniform periodic grid on [0, length)^d."""

    d: int
    n_phys: int
    length: float = 2.0 * np.pi

    def __post_init__(self):
        if self.d not in (1, 2):
            raise DimensionError("torus grids support d in {1, 2}")
        if self.n_phys < 16:
            raise ValueError("n_phys must be at least 16")

    @property
    def h(self):
        return self.length / self.n_phys

    @property
    def shape(self):
        return (self.n_phys,) * self.d

    @property
    def n_nodes(self):
        return self.n_phys**self.d

    def axis_nodes(self):
        return np.arange(self.n_phys) * self.h

    def node_axes(self):
        grids = np.meshgrid(*([self.axis_nodes()] * self.d), indexing="ij")
        return [g.ravel() for g in grids]

    def nodes(self):
        return np.stack(self.node_axes(), axis=-1)


@dataclass(frozen=True)
class EpsilonChoice:
    """A fast-scale parameter commensurate with the torus length."""

    eps: float
    fast_periods: int

    @classmethod
    def for_grid(cls, eps, grid):
        ratio = grid.length / eps
        periods = round(ratio)
        if periods < 1 or abs(ratio - periods) > 1e-12 * max(1.0, periods):
            raise CommensurabilityError(
                f"length/eps = {ratio!r} is not a positive integer"
            )
        return cls(eps=float(eps), fast_periods=periods)


@dataclass
class DiscreteField:
    """Grid function with n components, node-major layout."""

    values: np.ndarray  # (n_nodes, ncomp)
    grid: TorusGrid

    def flat(self):
        return self.values.reshape(-1)


def as_values(u):
    return u.values if isinstance(u, DiscreteField) else np.asarray(u)


@dataclass
class DiscreteOperator:
    """Sparse operator on the torus with bookkeeping for shifts/spectra."""

    matrix: sp.csr_matrix
    grid: TorusGrid
    kind: str
    ncomp: int
    weight_bounds: tuple = (None, None)  # (g1, g2) for weight multipliers
    meta: dict = field(default_factory=dict)

    @property
    def size(self):
        return self.matrix.shape[0]

    def hermiticity_defect(self):
        diff = self.matrix - self.matrix.getH()
        return 0.0 if diff.nnz == 0 else float(np.abs(diff.data).max())

    def to_matrix_market(self, path):
        from scipy.io import mmwrite

        mmwrite(str(path), self.matrix.tocoo(), field="complex", symmetry="general")


# ---------------------------------------------------------------------------
# sparse building blocks


def _axis_forward(n, h):
    idx = np.arange(n)
    rows = np.concatenate([idx, idx])
    cols = np.concatenate([idx, (idx + 1) % n])
    data = np.concatenate([-np.ones(n), np.ones(n)]) / h
    return sp.csr_matrix((data, (rows, cols)), shape=(n, n))


def _axis_centered(n, h):
    idx = np.arange(n)
    rows = np.concatenate([idx, idx])
    cols = np.concatenate([(idx + 1) % n, (idx - 1) % n])
    data = np.concatenate([np.ones(n), -np.ones(n)]) / (2.0 * h)
    return sp.csr_matrix((data, (rows, cols)), shape=(n, n))


def _spatial(matrix_1d, axis, grid):
    out = None
    for a in range(grid.d):
        block = matrix_1d if a == axis else sp.identity(grid.n_phys, format="csr")
        out = block if out is None else sp.kron(out, block, format="csr")
    return out


def block_mult(blocks):
    """Block-diagonal multiplication operator from per-node blocks (N, r, c)."""
    blocks = np.ascontiguousarray(blocks, dtype=complex)
    N, r, c = blocks.shape
    return sp.bsr_matrix(
        (blocks, np.arange(N), np.arange(N + 1)), shape=(N * r, N * c)
    ).tocsr()


def discrete_B(bstruct, grid):
    """Forward-difference discretization of B(d); (N n) -> (N m)."""
    out = None
    Dfwd = _axis_forward(grid.n_phys, grid.h)
    for i in range(bstruct.d):
        term = sp.kron(_spatial(Dfwd, i, grid), sp.csr_matrix(bstruct.b_matrices[i]))
        out = term if out is None else out + term
    return out.tocsr()


def _symmetrized(matrix):
    return 0.5 * (matrix + matrix.getH())


def _first_order_pair(left_blocks, D_big, right_blocks):
    """Mult(left) D Mult(right) plus its exact adjoint."""
    S = block_mult(left_blocks) @ D_big @ block_mult(right_blocks)
    return S + S.getH()


def _sample_eps(matrix_field, grid, eps):
    x_axes = grid.node_axes()
    xi_axes = [np.mod(ax / eps.eps, 1.0) for ax in x_axes]
    return matrix_field.evaluate(x_axes, xi_axes)


# ---------------------------------------------------------------------------
# operator assembly


def assemble_H_eps(cs, grid, eps):
    """The perturbed operator B(d)^* A_eps B(d) + a_eps(x, d) + V_eps."""
    bs = cs.bstruct
    if bs.d != grid.d:
        raise DimensionError("coefficient and grid dimensions differ")
    if not isinstance(eps, EpsilonChoice):
        eps = EpsilonChoice.for_grid(eps, grid)

    B = discrete_B(bs, grid)
    a_blocks = hermitize(_sample_eps(cs.A, grid, eps))
    H = B.getH() @ (block_mult(a_blocks) @ B)

    Dc = _axis_centered(grid.n_phys, grid.h)
    eye_n = sp.identity(bs.n, format="csr")
    x_axes = grid.node_axes()
    zero_xi = [np.zeros(grid.n_nodes)] * bs.d
    for i in range(bs.d):
        if all(
            entry.is_structural_zero() for entry in cs.a[i].entries.flat
        ):
            continue
        ai = _sample_eps(cs.a[i], grid, eps)
        bi = cs.b[i].evaluate(x_axes, zero_xi)
        D_big = sp.kron(_spatial(Dc, i, grid), eye_n, format="csr")
        H = H + _first_order_pair(ai, D_big, bi)

    v_blocks = hermitize(_sample_eps(cs.V, grid, eps))
    if np.abs(v_blocks).max() > 0.0:
        H = H + block_mult(v_blocks)

    return DiscreteOperator(
        matrix=_symmetrized(H).tocsr(),
        grid=grid,
        kind="H_eps",
        ncomp=bs.n,
        meta={"eps": eps.eps},
    )


def assemble_H_0(hc, bstruct, grid):
    """The homogenized operator B(d)^* A2 B(d) + A1(x, d) + A0."""
    bs = bstruct
    if hc.slow_grid.d != grid.d:
        raise NodeMismatch("homogenized data dimension differs from grid")
    if abs(hc.slow_grid.length - grid.length) > 1e-12 * grid.length:
        raise NodeMismatch(
            f"slow grid length {hc.slow_grid.length} != torus length {grid.length}"
        )
    nodes = grid.nodes()

    B = discrete_B(bs, grid)
    a2_blocks = hermitize(hc.sample_at("A2", nodes))
    H = B.getH() @ (block_mult(a2_blocks) @ B)

    left_blocks = hc.sample_at("A1_left", nodes)  # (N, m, n)
    if np.abs(left_blocks).max() > 1e-300:
        K1 = B.getH() @ block_mult(left_blocks)
        H = H + K1 + K1.getH()

    Dc = _axis_centered(grid.n_phys, grid.h)
    eye_n = sp.identity(bs.n, format="csr")
    for i in range(bs.d):
        a_mean = hc.sample_a_mean_at(i, nodes)
        if np.abs(a_mean).max() <= 1e-300:
            continue
        b_vals = hc.sample_b_at(i, nodes)
        D_big = sp.kron(_spatial(Dc, i, grid), eye_n, format="csr")
        H = H + _first_order_pair(a_mean, D_big, b_vals)

    a0_blocks = hermitize(hc.sample_at("A0", nodes))
    if np.abs(a0_blocks).max() > 0.0:
        H = H + block_mult(a0_blocks)

    return DiscreteOperator(
        matrix=_symmetrized(H).tocsr(),
        grid=grid,
        kind="H_0",
        ncomp=bs.n,
    )


def _weight_operator(blocks, grid, kind):
    blocks = hermitize(blocks)
    eigs = np.linalg.eigvalsh(blocks)
    op = DiscreteOperator(
        matrix=_symmetrized(block_mult(blocks)).tocsr(),
        grid=grid,
        kind=kind,
        ncomp=blocks.shape[-1],
        weight_bounds=(float(eigs.min()), float(eigs.max())),
    )
    return op


def assemble_G_eps(cs, grid, eps):
    if not isinstance(eps, EpsilonChoice):
        eps = EpsilonChoice.for_grid(eps, grid)
    return _weight_operator(_sample_eps(cs.G, grid, eps), grid, "G_eps")


def assemble_G_0(hc, grid):
    return _weight_operator(hc.sample_at("G0", grid.nodes()), grid, "G_0")


def identity_operator(grid, ncomp):
    return DiscreteOperator(
        matrix=sp.identity(grid.n_nodes * ncomp, format="csr", dtype=complex),
        grid=grid,
        kind="identity",
        ncomp=ncomp,
        weight_bounds=(1.0, 1.0),
    )


# ---------------------------------------------------------------------------
# corrector application


def apply_corrector(cache, slow_grid, bstruct, u0, grid, eps):
    """L_eps u0 = Lambda_1(x, x/eps) B(d) u0 + Lambda_0(x, x/eps) u0.

    ``cache`` is a CorrectorCache (lazy) or a dict keyed by slow-node
    tuples; dict lookups miss loudly.  Slow-node blending is periodic
    multilinear via ``slow_grid``; cell samples are evaluated at x/eps by
    trigonometric interpolation.
    """
    u0 = as_values(u0)
    if not isinstance(eps, EpsilonChoice):
        eps = EpsilonChoice.for_grid(eps, grid)
    nodes = grid.nodes()
    xi_pts = np.mod(nodes / eps.eps, 1.0)

    B = discrete_B(bstruct, grid)
    Bu0 = (B @ u0.reshape(-1)).reshape(grid.n_nodes, -1)

    out = np.zeros_like(u0)
    slow_nodes = slow_grid.nodes()
    indices, weights = slow_grid.interp_weights(nodes)
    for idx, w in zip(indices, weights):
        for corner in np.unique(idx):
            mask = idx == corner
            wts = w[mask]
            if not wts.any():
                continue
            corr = _cache_get(cache, slow_nodes[corner])
            lam1 = corr.eval_at("lambda1", xi_pts[mask])
            lam0 = corr.eval_at("lambda0", xi_pts[mask])
            out[mask] += wts[:, None] * (
                np.einsum("pij,pj->pi", lam1, Bu0[mask])
                + np.einsum("pij,pj->pi", lam0, u0[mask])
            )
    return out


def _cache_get(cache, node):
    if isinstance(cache, dict):
        key = tuple(float(v) for v in np.atleast_1d(node))
        if key not in cache:
            raise CacheMiss(f"no corrector at slow point {key}")
        return cache[key]
    return cache.get(node)


# ---------------------------------------------------------------------------
# norms


def l2h_norm(u, grid):
    u = as_values(u)
    return float(np.sqrt(grid.h**grid.d) * np.linalg.norm(u))


def w1h_norm(u, grid):
    u = as_values(u)
    ug = u.reshape(grid.shape + (-1,))
    total = np.linalg.norm(u) ** 2
    for axis in range(grid.d):
        du = (np.roll(ug, -1, axis=axis) - ug) / grid.h
        total += np.linalg.norm(du) ** 2
    return float(np.sqrt(grid.h**grid.d * total))


# ---------------------------------------------------------------------------
# shifted solves and eigenvalues


def _weight_range(Gop):
    g1, g2 = Gop.weight_bounds
    if g1 is None or g2 is None or g1 <= 0.0:
        raise ValueError("weight operator must carry positive bounds")
    return g1, g2


def lowest_eigenvalue(Hop, Gop=None):
    """Smallest eigenvalue of the pencil (H, G); cached on the operator."""
    key = ("lowest", id(Gop.matrix) if Gop is not None else None)
    if key in Hop.meta:
        return Hop.meta[key]
    G = Gop.matrix if Gop is not None else sp.identity(Hop.size, format="csr", dtype=complex)
    value = _eig_smallest(Hop.matrix, G, k=1)[0]
    Hop.meta[key] = value
    return value


def _gershgorin_lower(H):
    diag = H.diagonal().real
    absrow = np.asarray(np.abs(H).sum(axis=1)).ravel()
    return float((diag - (absrow - np.abs(H.diagonal()))).min())


def _eig_smallest(H, G, k, tol=1e-10, seed=1234):
    n = H.shape[0]
    if n <= _DENSE_EIG_LIMIT:
        import scipy.linalg

        vals = scipy.linalg.eigh(
            H.toarray(), G.toarray(), eigvals_only=True, subset_by_index=[0, k - 1]
        )
        return [float(v) for v in vals]

    gersh = _gershgorin_lower(H)
    gdiag = G.diagonal().real
    gmax, gmin = float(gdiag.max()), float(gdiag.min())
    bound = gersh / gmax if gersh >= 0 else gersh / max(gmin, 1e-300)
    sigma = bound - max(1.0, 0.01 * abs(bound))
    shifted = (H - sigma * G).tocsc()
    lu = spla.splu(shifted)
    opinv = spla.LinearOperator(H.shape, matvec=lu.solve, dtype=complex)
    rng = np.random.default_rng(seed)
    v0 = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    vals = spla.eigsh(
        H,
        k=k,
        M=G,
        sigma=sigma,
        which="LM",
        OPinv=opinv,
        tol=tol,
        v0=v0,
        return_eigenvectors=False,
        maxiter=5000,
    )
    return sorted(float(v) for v in np.real(vals))


class ShiftedSolver:
    """Direct factorization of H - lambda G with a residual contract."""

    def __init__(self, Hop, Gop, lam):
        self.matrix = (Hop.matrix - lam * Gop.matrix).tocsc()
        self._lu = spla.splu(self.matrix)

    def solve(self, f):
        return self._lu.solve(f)


def solve_shifted(Hop, Gop, lam, f, rtol=1e-10, method="direct", check_shift=True, margin=SHIFT_MARGIN):
    """Solve (H - lambda G) u = f to relative residual <= rtol.

    Real shifts must sit below the numerical spectrum edge by ``margin``
    (Im lambda != 0 bypasses the gate).  The backend is a sparse direct
    factorization by default; ``method='krylov'`` uses restarted GMRES and
    honors the same residual contract.
    """
    lam = complex(lam)
    f = as_values(f)
    shape = f.shape
    fvec = f.reshape(-1)

    if check_shift and abs(lam.imag) < 1e-14:
        g1, g2 = _weight_range(Gop)
        h_hat = lowest_eigenvalue(Hop)
        mu_hat = min(h_hat / g1, h_hat / g2)
        if lam.real >= mu_hat - margin:
            raise ShiftInsideSpectrum(
                f"lambda = {lam.real:.6g} is not below mu_hat = {mu_hat:.6g} "
                f"by margin {margin:g}"
            )

    M = (Hop.matrix - lam * Gop.matrix).tocsc()
    norm_f = np.linalg.norm(fvec)
    if norm_f == 0.0:
        return np.zeros(shape, dtype=complex)
    if method == "direct":
        u = spla.splu(M).solve(fvec)
    elif method == "krylov":
        u, info = spla.gmres(M.tocsr(), fvec, rtol=rtol / 10.0, atol=0.0, restart=200, maxiter=400)
        if info != 0:
            raise SolverDiverged(f"GMRES failed to converge (info={info})")
    else:
        raise ValueError(f"unknown method {method!r}")
    residual = np.linalg.norm(M @ u - fvec) / norm_f
    if residual > rtol:
        raise SolverDiverged(f"shifted solve residual {residual:.3e} exceeds {rtol:g}")
    return u.reshape(shape)


def lowest_eigenvalues(Hop, Gop, k, tol=1e-10):
    """k smallest eigenvalues of the pencil (H, G), ascending."""
    if not 1 <= k <= 10:
        raise ValueError("k must be between 1 and 10")
    return _eig_smallest(Hop.matrix, Gop.matrix, k=k, tol=tol)
