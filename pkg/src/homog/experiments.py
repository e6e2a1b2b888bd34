"""Epsilon-sweep experiments: resolvent convergence rates and spectrum gaps.

The perturbed and homogenized problems are solved on the same fine torus
grid per epsilon, so the measured error is the homogenization error plus a
common discretization error.  The corrector is computed on a cell grid
matched to the fast lattice of the torus discretization (fd backend,
n_cell = points per fast period): the two-scale identities then close
exactly on the lattice and the corrected W1 error is clean O(eps).
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .cell import CellGrid, CorrectorCache
from .discrete import (
    EpsilonChoice,
    TorusGrid,
    apply_corrector,
    assemble_G_0,
    assemble_G_eps,
    assemble_H_0,
    assemble_H_eps,
    identity_operator,
    l2h_norm,
    lowest_eigenvalue,
    lowest_eigenvalues,
    solve_shifted,
    w1h_norm,
)
from .effective import SlowGrid, assemble_homogenized
from .errors import DegenerateFit, RateAnomalousWarning, ShiftInsideSpectrum, SolverDiverged
from .expr import parse_expr

RATE_THRESHOLD = 0.9
_ZERO_ERROR_FLOOR = 1e-12
_FLOOR_SAFETY = 10.0


@dataclass
class GridPlan:
    """Resolution plan shared by all epsilon legs."""

    domain_length: float = 2.0 * np.pi
    nphys_per_period: int = 16
    n_cell: int = 0  # 0 -> matched to the fast lattice (= nphys_per_period)
    n_slow: int = 0  # 0 -> 64 for d=1, 8 per axis for d=2 (1 if x-independent)
    cell_backend: str = "fd"
    cell_tol: float = 1e-10
    solve_tol: float = 1e-10

    def cell_grid(self, d):
        n = self.n_cell or self.nphys_per_period
        return CellGrid(d=d, n_cell=n)

    def slow_grid(self, cs, n_phys):
        """Slow sampling grid for one leg.

        With x-dependent coefficients the auto policy samples the
        homogenized data exactly at the torus nodes (d = 1) so no slow
        interpolation error enters the sweep; cell solves per node are
        cheap on the matched grid.
        """
        d = cs.bstruct.d
        if self.n_slow:
            counts = (self.n_slow,) * d
        elif not _has_any_x(cs):
            counts = (1,) * d
        else:
            counts = (n_phys,) * d if d == 1 else (min(n_phys, 16),) * d
        return SlowGrid(d=d, length=self.domain_length, counts=counts)

    def torus_grid(self, d, eps):
        periods = round(self.domain_length / eps)
        return TorusGrid(d=d, n_phys=self.nphys_per_period * periods,
                         length=self.domain_length)


def _has_any_x(cs):
    fields = (cs.A, cs.V, cs.G) + tuple(cs.a) + tuple(cs.b)
    return any(f.has_var("x") for f in fields)


@dataclass
class SpectralWindow:
    """Numerical stand-ins for the spectral lower bounds and shift window."""

    h0_hat: float
    mu0_hat: float
    g1: float
    g2: float
    eps_list: list
    h_eps_hat: list
    mu_eps_hat: list

    def to_dict(self):
        return {
            "h0_hat": self.h0_hat,
            "mu0_hat": self.mu0_hat,
            "g1": self.g1,
            "g2": self.g2,
            "eps_list": list(self.eps_list),
            "h_eps_hat": list(self.h_eps_hat),
            "mu_eps_hat": list(self.mu_eps_hat),
        }


@dataclass
class ConvergenceReport:
    eps_list: list
    err_L2: list
    err_W1_corrected: list
    err_W1_uncorrected: list
    rate_L2: float
    rate_W1: float
    rate_W1_uncorrected: float
    lam: complex
    rhs_id: str
    n_phys_list: list
    floor_contaminated: bool
    fd_floor_estimate: float
    residuals: list
    spectral_window: SpectralWindow = None
    meta: dict = field(default_factory=dict)

    def to_dict(self):
        def num(v):
            return None if v is None else (v if np.isfinite(v) else "inf")

        return {
            "eps": list(self.eps_list),
            "n_phys": list(self.n_phys_list),
            "err_L2": list(self.err_L2),
            "err_W1_corrected": list(self.err_W1_corrected),
            "err_W1_uncorrected": list(self.err_W1_uncorrected),
            "rate_L2": num(self.rate_L2),
            "rate_W1": num(self.rate_W1),
            "rate_W1_uncorrected": num(self.rate_W1_uncorrected),
            "lambda": [self.lam.real, self.lam.imag],
            "rhs_id": self.rhs_id,
            "floor_contaminated": self.floor_contaminated,
            "fd_floor_estimate": self.fd_floor_estimate,
            "residuals": list(self.residuals),
            "spectral_window": None
            if self.spectral_window is None
            else self.spectral_window.to_dict(),
            "meta": dict(self.meta),
        }

    def csv_text(self):
        lines = ["eps,err_L2,err_W1_corrected,err_W1_uncorrected"]
        for row in zip(
            self.eps_list, self.err_L2, self.err_W1_corrected, self.err_W1_uncorrected
        ):
            lines.append(",".join(f"{v:.17g}" for v in row))
        return "\n".join(lines) + "\n"


def fit_rate(eps, err):
    """Least-squares slope of log(err) against log(eps).

    Zero-error points are excluded; fewer than 3 positive points raises
    DegenerateFit.
    """
    eps = np.asarray(eps, dtype=float)
    err = np.asarray(err, dtype=float)
    if eps.shape != err.shape:
        raise ValueError("eps and err must have equal length")
    mask = err > 0.0
    if mask.sum() < 3:
        raise DegenerateFit(f"only {int(mask.sum())} positive-error points")
    return float(np.polyfit(np.log(eps[mask]), np.log(err[mask]), 1)[0])


def _sample_rhs(f_exprs, grid, ncomp):
    if isinstance(f_exprs, str):
        f_exprs = [f_exprs]
    trees = [parse_expr(src) if isinstance(src, str) else src for src in f_exprs]
    if len(trees) != ncomp:
        raise ValueError(f"rhs needs {ncomp} component expressions")
    x_axes = grid.node_axes()
    zero_xi = [np.zeros(grid.n_nodes)] * grid.d
    out = np.zeros((grid.n_nodes, ncomp), dtype=complex)
    for c, tree in enumerate(trees):
        if tree.has_var("xi"):
            raise ValueError("rhs expressions must not depend on fast variables")
        from .expr import eval_field

        out[:, c] = eval_field(tree, x_axes, zero_xi)
    return out


def rhs_identifier(f_exprs):
    if isinstance(f_exprs, str):
        return f_exprs
    return "; ".join(str(s) for s in f_exprs)


def _max_workers():
    import os

    try:
        return max(1, int(os.environ.get("HOMOG_THREADS", "1")))
    except ValueError:
        return 1


def _map_legs(fn, items, max_workers=None):
    def tagged(item):
        try:
            return fn(item)
        except (ShiftInsideSpectrum, SolverDiverged) as err:
            raise type(err)(f"at eps = {float(item):.8g}: {err}") from err

    workers = max_workers or _max_workers()
    if workers <= 1 or len(items) <= 1:
        return [tagged(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(tagged, items))


class _LegContexts:
    """Per-leg corrector/homogenized data, shared whenever the slow grid is."""

    def __init__(self, cs, plan):
        self.cs = cs
        self.plan = plan
        self.cell_grid = plan.cell_grid(cs.bstruct.d)
        self.cache = CorrectorCache(
            cs, self.cell_grid, backend=plan.cell_backend, tol=plan.cell_tol
        )
        self._by_counts = {}

    def for_nphys(self, n_phys):
        slow_grid = self.plan.slow_grid(self.cs, n_phys)
        key = slow_grid.counts
        if key not in self._by_counts:
            hc = assemble_homogenized(
                self.cs,
                slow_grid,
                self.cell_grid,
                backend=self.plan.cell_backend,
                tol=self.plan.cell_tol,
                cache=self.cache,
            )
            self._by_counts[key] = (slow_grid, hc)
        return self._by_counts[key]


def run_resolvent_convergence(cs, plan, lam, f_exprs, eps_list, probe_floor=True):
    """Theorem-1.2 experiment: resolvent errors and fitted rates over eps."""
    lam = complex(lam)
    eps_list = sorted(set(float(e) for e in eps_list), reverse=True)
    if len(eps_list) < 3:
        raise ValueError("need at least 3 epsilon values")
    contexts = _LegContexts(cs, plan)
    bs = cs.bstruct

    def leg(eps, use_plan=None):
        leg_plan = use_plan or plan
        grid = leg_plan.torus_grid(bs.d, eps)
        slow_grid, hc = contexts.for_nphys(grid.n_phys)
        eps_c = EpsilonChoice.for_grid(eps, grid)
        H_eps = assemble_H_eps(cs, grid, eps_c)
        G_eps = assemble_G_eps(cs, grid, eps_c)
        H_0 = assemble_H_0(hc, bs, grid)
        G_0 = assemble_G_0(hc, grid)
        f = _sample_rhs(f_exprs, grid, bs.n)
        u_eps = solve_shifted(H_eps, G_eps, lam, f, rtol=plan.solve_tol)
        u_0 = solve_shifted(H_0, G_0, lam, f, rtol=plan.solve_tol)
        u_hat = u_0 + eps * apply_corrector(
            contexts.cache, slow_grid, bs, u_0, grid, eps_c
        )
        scale = l2h_norm(u_eps, grid) + l2h_norm(u_0, grid)
        rec = {
            "eps": eps,
            "n_phys": grid.n_phys,
            "err_L2": l2h_norm(u_eps - u_0, grid),
            "err_W1_corrected": w1h_norm(u_eps - u_hat, grid),
            "err_W1_uncorrected": w1h_norm(u_eps - u_0, grid),
            "scale": scale,
            "residual": float(
                np.linalg.norm(
                    (H_eps.matrix - lam * G_eps.matrix) @ u_eps.reshape(-1)
                    - f.reshape(-1)
                )
                / max(np.linalg.norm(f), 1e-300)
            ),
            "h_eps_hat": lowest_eigenvalue(H_eps),
            "g_bounds": G_eps.weight_bounds,
            "h0_hat": lowest_eigenvalue(H_0),
            "g0_bounds": G_0.weight_bounds,
        }
        return rec

    records = _map_legs(leg, eps_list)

    # discretization-floor probe: repeat the smallest-eps leg with doubled
    # n_phys and compare the measured errors themselves (stencil biases are
    # common-mode between H_eps and H_0 and cancel inside each error)
    fd_floor = 0.0
    zero_floor0 = _ZERO_ERROR_FLOOR * max(max(r["scale"] for r in records), 1.0)
    if probe_floor and any(r["err_L2"] > zero_floor0 for r in records):
        fine_plan = GridPlan(
            domain_length=plan.domain_length,
            nphys_per_period=2 * plan.nphys_per_period,
            n_cell=plan.n_cell or plan.nphys_per_period,
            n_slow=plan.n_slow,
            cell_backend=plan.cell_backend,
            cell_tol=plan.cell_tol,
            solve_tol=plan.solve_tol,
        )
        probe = leg(eps_list[-1], use_plan=fine_plan)
        fd_floor = abs(probe["err_L2"] - records[-1]["err_L2"])

    err_l2 = [r["err_L2"] for r in records]
    scale = max(r["scale"] for r in records)
    zero_floor = _ZERO_ERROR_FLOOR * max(scale, 1.0)

    # clean prefix (from the largest eps down): stop at the first point whose
    # error sits on the extrapolated FD floor
    floors = [fd_floor * (e / eps_list[-1]) ** 2 for e in eps_list]
    clean = []
    for i in range(len(eps_list)):
        if err_l2[i] <= zero_floor or err_l2[i] >= _FLOOR_SAFETY * floors[i]:
            clean.append(i)
        else:
            break
    contaminated = len(clean) < len(eps_list)
    fit_idx = clean if len(clean) >= 3 else list(range(len(eps_list)))

    def rate_for(key):
        vals = [records[i][key] for i in fit_idx]
        eps_fit = [eps_list[i] for i in fit_idx]
        nonzero = [(e, v) for e, v in zip(eps_fit, vals) if v > zero_floor]
        if not nonzero:
            return float("inf")
        if len(nonzero) < 3:
            raise DegenerateFit("fewer than 3 clean positive-error points")
        tail = nonzero[-3:]
        return fit_rate([e for e, _ in tail], [v for _, v in tail])

    rate_l2 = rate_for("err_L2")
    rate_w1 = rate_for("err_W1_corrected")
    rate_w1u = rate_for("err_W1_uncorrected")
    if np.isfinite(rate_l2) and rate_l2 < 0.8:
        warnings.warn(
            f"fitted L2 rate {rate_l2:.3f} below 0.8", RateAnomalousWarning
        )

    window = SpectralWindow(
        h0_hat=records[-1]["h0_hat"],
        mu0_hat=min(
            records[-1]["h0_hat"] / records[-1]["g0_bounds"][0],
            records[-1]["h0_hat"] / records[-1]["g0_bounds"][1],
        ),
        g1=records[-1]["g_bounds"][0],
        g2=records[-1]["g_bounds"][1],
        eps_list=eps_list,
        h_eps_hat=[r["h_eps_hat"] for r in records],
        mu_eps_hat=[
            min(r["h_eps_hat"] / r["g_bounds"][0], r["h_eps_hat"] / r["g_bounds"][1])
            for r in records
        ],
    )

    return ConvergenceReport(
        eps_list=eps_list,
        err_L2=err_l2,
        err_W1_corrected=[r["err_W1_corrected"] for r in records],
        err_W1_uncorrected=[r["err_W1_uncorrected"] for r in records],
        rate_L2=rate_l2,
        rate_W1=rate_w1,
        rate_W1_uncorrected=rate_w1u,
        lam=lam,
        rhs_id=rhs_identifier(f_exprs),
        n_phys_list=[r["n_phys"] for r in records],
        floor_contaminated=contaminated,
        fd_floor_estimate=fd_floor,
        residuals=[r["residual"] for r in records],
        spectral_window=window,
        meta={
            "n_cell": plan.n_cell or plan.nphys_per_period,
            "cell_backend": plan.cell_backend,
            "zero_floor": zero_floor,
        },
    )


@dataclass
class SpectrumReport:
    eps_list: list
    k: int
    eigs_eps: list  # per eps, ascending k-list
    eigs_0: list  # per eps (same grid), ascending k-list
    gaps: list  # per eps, |lambda_j^eps - lambda_j^0|
    n_phys_list: list

    def shrink_factors(self, floor=1e-9):
        """Per-mode gap(largest eps) / gap(smallest eps); inf when both tiny."""
        first, last = np.asarray(self.gaps[0]), np.asarray(self.gaps[-1])
        out = []
        for j in range(self.k):
            if first[j] <= floor and last[j] <= floor:
                out.append(float("inf"))
            else:
                out.append(float(first[j] / max(last[j], 1e-300)))
        return out

    def to_dict(self):
        return {
            "eps": list(self.eps_list),
            "k": self.k,
            "n_phys": list(self.n_phys_list),
            "eigs_eps": [list(v) for v in self.eigs_eps],
            "eigs_0": [list(v) for v in self.eigs_0],
            "gaps": [list(v) for v in self.gaps],
            "shrink_factors": [
                v if np.isfinite(v) else "inf" for v in self.shrink_factors()
            ],
        }

    def csv_text(self):
        header = ["eps"]
        header += [f"eig{j + 1}_eps" for j in range(self.k)]
        header += [f"eig{j + 1}_0" for j in range(self.k)]
        header += [f"gap{j + 1}" for j in range(self.k)]
        lines = [",".join(header)]
        for i, eps in enumerate(self.eps_list):
            row = [eps, *self.eigs_eps[i], *self.eigs_0[i], *self.gaps[i]]
            lines.append(",".join(f"{v:.17g}" for v in row))
        return "\n".join(lines) + "\n"


def run_spectrum_convergence(cs, plan, k, eps_list):
    """Corollary-1.1 experiment: eigenvalue gaps of H_eps vs H_0 (G = I)."""
    eps_list = sorted(set(float(e) for e in eps_list), reverse=True)
    if len(eps_list) < 2:
        raise ValueError("need at least 2 epsilon values")
    contexts = _LegContexts(cs, plan)
    bs = cs.bstruct

    def leg(eps):
        grid = plan.torus_grid(bs.d, eps)
        _, hc = contexts.for_nphys(grid.n_phys)
        eps_c = EpsilonChoice.for_grid(eps, grid)
        H_eps = assemble_H_eps(cs, grid, eps_c)
        H_0 = assemble_H_0(hc, bs, grid)
        eye = identity_operator(grid, bs.n)
        ev_eps = lowest_eigenvalues(H_eps, eye, k)
        ev_0 = lowest_eigenvalues(H_0, eye, k)
        gaps = [abs(a - b) for a, b in zip(ev_eps, ev_0)]
        return grid.n_phys, ev_eps, ev_0, gaps

    results = _map_legs(leg, eps_list)
    return SpectrumReport(
        eps_list=eps_list,
        k=k,
        eigs_eps=[r[1] for r in results],
        eigs_0=[r[2] for r in results],
        gaps=[r[3] for r in results],
        n_phys_list=[r[0] for r in results],
    )
