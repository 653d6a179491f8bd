"""Discrete minimal-norm right inverse of dbar_M on a masked chart.

Given a matrix (0,1)-form omega on D_rho, find the matrix function B
minimizing

    sum_alpha || Xbar_alpha B + G_alpha ||^2  +  lambda ||B||^2

over the grid values of B on the masked ball.  Equations are posted only
where the full central stencil stays inside the mask (boundary rows are
dropped, the domain shrink provides the margin); the Tikhonov weight makes
the minimizer unique and suppresses the CR kernel.  The system decouples
over matrix entries, so one sparse factorization serves r^2 right-hand
sides.

On the hyperquadric the solve conjugates exactly with the non-isotropic
dilations: pulling data to the unit chart, solving there with a fixed
configuration, and pushing back realizes the scale-invariant operator.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix, identity as sparse_identity
from scipy.sparse.linalg import lsmr, splu

from .calculus import (ConnectionForm, MatrixField, TangentialFrame,
                       erode_valid, grid_xbar, pullback_form, pullback_scalar,
                       restrict_field)
from .errors import NonUniqueSolutionError, SolverFailureError
from .geometry import GridChart, restrict
from .norms import ck_norm, pointwise_opnorm
from .polynomial import random_matrix_polynomial

__all__ = ["SolverConfig", "SolverReport", "solve_P", "solve_P_scaled",
           "operator_norm_probe", "ProbeReport"]


@dataclass
class SolverConfig:
    """Least-squares solve parameters.

    ``regularization`` is the Tikhonov weight; None selects
    1e-8 * (grid cell volume).  Backends:

    * "direct": grid unknowns, sparse normal equations, one factorization
      and one refinement pass;
    * "iterative": grid unknowns, LSMR with damping sqrt(lambda);
    * "polynomial": the same objective minimized over a polynomial ansatz
      (dense least squares on coefficients), with the tangential derivative
      of the ansatz computed exactly.  Requires data on the hyperquadric;
      removes the finite-difference consistency floor of the grid backends,
      at the price of restricting B to degree <= ``ansatz_degree``.
    """

    regularization: float | None = None
    residual_tol: float = 1e-12
    max_iterations: int = 5000
    backend: str = "direct"
    ansatz_degree: int | None = None

    def lambda_for(self, chart: GridChart) -> float:
        if self.regularization is not None:
            if self.regularization < 0:
                raise ValueError("regularization must be >= 0")
            return self.regularization
        return 1e-8 * float(np.prod(chart.spacing))


@dataclass
class SolverReport:
    """Measured behavior of one solve."""

    rho: float
    sigma: float
    k: int
    eta_hat: float
    residual: float
    iterations: int
    lambda_: float
    omega_norm: float
    b_norm: float

    def csv_row(self) -> str:
        return (f"{self.rho:.17g},{self.sigma:.17g},{self.k},"
                f"{self.eta_hat:.17g},{self.residual:.17g},{self.iterations}")


def _axis_triple_valid(mask: np.ndarray, axes: tuple[int, ...]) -> np.ndarray:
    """Points whose +-1 neighbors along the given axes stay in the mask."""
    out = mask.copy()
    for ax in axes:
        plus = np.zeros_like(mask)
        minus = np.zeros_like(mask)
        sl_mid = [slice(None)] * mask.ndim
        sl_up = [slice(None)] * mask.ndim
        sl_mid[ax] = slice(1, -1)
        sl_up[ax] = slice(2, None)
        plus[tuple(sl_mid)] = mask[tuple(sl_up)]
        sl_down = [slice(None)] * mask.ndim
        sl_down[ax] = slice(None, -2)
        minus[tuple(sl_mid)] = mask[tuple(sl_down)]
        out = out & plus & minus
    return out


def _assemble_system(omega: ConnectionForm, frame: TangentialFrame):
    """Sparse first-order system rows for all alpha; returns (S, rhs, info)."""
    chart = omega.chart
    mask = chart.mask
    ndim = chart.ndim
    sp = chart.spacing
    unknown_index = -np.ones(chart.shape, dtype=np.int64)
    unknown_points = np.argwhere(mask)
    unknown_index[mask] = np.arange(len(unknown_points))
    nunk = len(unknown_points)
    r = omega.r

    rows, cols, data = [], [], []
    rhs_blocks = []
    strides = np.array(unknown_index.strides) // unknown_index.itemsize
    flat_index = unknown_index.reshape(-1)

    eq_count = 0
    for alpha in range(1, chart.n):
        ax_re, ax_im, ax_t = 2 * (alpha - 1), 2 * (alpha - 1) + 1, ndim - 1
        eq_mask = _axis_triple_valid(mask, (ax_re, ax_im, ax_t)) \
            & omega.components[alpha - 1].valid
        pts = np.argwhere(eq_mask)
        if len(pts) == 0:
            continue
        base_flat = pts @ strides
        eq_ids = eq_count + np.arange(len(pts))
        cb = frame.cbar(alpha, chart)[eq_mask]
        stencil = [
            (ax_re, +1, 0.25 / sp[ax_re]),
            (ax_re, -1, -0.25 / sp[ax_re]),
            (ax_im, +1, 0.25j / sp[ax_im]),
            (ax_im, -1, -0.25j / sp[ax_im]),
        ]
        for ax, step, coeff in stencil:
            nb = flat_index[base_flat + step * strides[ax]]
            rows.append(eq_ids)
            cols.append(nb)
            data.append(np.full(len(pts), coeff, dtype=complex))
        for step in (+1, -1):
            nb = flat_index[base_flat + step * strides[ax_t]]
            rows.append(eq_ids)
            cols.append(nb)
            data.append(step * cb / (2.0 * sp[ax_t]))
        rhs_blocks.append(
            -omega.components[alpha - 1].values[eq_mask].reshape(len(pts), r * r))
        eq_count += len(pts)

    if eq_count == 0:
        raise ValueError("no interior equation points on this chart")
    S = coo_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(eq_count, nunk)).tocsr()
    rhs = np.concatenate(rhs_blocks, axis=0)
    return S, rhs, unknown_points, nunk


def solve_P(omega: ConnectionForm, target: GridChart | float,
            cfg: SolverConfig | None = None,
            frame: TangentialFrame | None = None,
            k: int = 0) -> tuple[MatrixField, SolverReport]:
    """Minimal-norm discrete solve of  dbar_M B = -omega  on D_rho.

    ``target`` (a restricted chart or a radius) is where the result and the
    residual are reported; the unknowns and equations live on the full
    source chart.
    """
    if cfg is None:
        cfg = SolverConfig()
    chart = omega.chart
    if frame is None:
        from .calculus import heisenberg_surface, tangential_frame
        frame = tangential_frame(heisenberg_surface(chart.n))
    if not isinstance(target, GridChart):
        target = restrict(chart, float(target))
    if not chart.same_lattice(target):
        raise ValueError("target chart must be a restriction of the source")

    lam = cfg.lambda_for(chart)
    if cfg.backend == "polynomial":
        B = _solve_polynomial(omega, frame, cfg, lam)
        report = _report(B, omega, target, frame, k, lam, 1,
                         sigma=1.0 - target.rho / chart.rho)
        return restrict_field(B, target), report
    S, rhs, unknown_points, nunk = _assemble_system(omega, frame)
    r = omega.r

    iterations = 1
    if cfg.backend == "direct":
        gram = (S.getH() @ S).tocsc()
        if lam > 0:
            gram = gram + lam * sparse_identity(nunk, dtype=complex, format="csc")
        atb = S.getH() @ rhs
        try:
            lu = splu(gram)
        except RuntimeError as exc:
            raise NonUniqueSolutionError(
                f"normal equations are singular (lambda={lam:g}): {exc}") from exc
        x = lu.solve(atb)
        # one refinement pass cleans up the normal-equation conditioning
        resid_ne = atb - (S.getH() @ (S @ x)) - lam * x
        x = x + lu.solve(resid_ne)
    elif cfg.backend == "iterative":
        x = np.empty((nunk, r * r), dtype=complex)
        worst_istop, total_iters = 0, 0
        for col in range(r * r):
            sol = lsmr(S, rhs[:, col], damp=np.sqrt(lam),
                       atol=cfg.residual_tol, btol=cfg.residual_tol,
                       maxiter=cfg.max_iterations)
            x[:, col] = sol[0]
            worst_istop = max(worst_istop, sol[1])
            total_iters += sol[2]
        iterations = total_iters
        if worst_istop == 7:
            B = _scatter(x, unknown_points, chart, r)
            raise SolverFailureError(
                f"LSMR hit the iteration cap {cfg.max_iterations}",
                best=B, residual=float(np.linalg.norm(S @ x - rhs)))
    else:
        raise ValueError(f"unknown solver backend {cfg.backend!r}")

    B = _scatter(x, unknown_points, chart, r)
    report = _report(B, omega, target, frame, k, lam, iterations,
                     sigma=1.0 - target.rho / chart.rho)
    return restrict_field(B, target), report


def _scatter(x: np.ndarray, unknown_points: np.ndarray, chart: GridChart,
             r: int) -> MatrixField:
    values = np.zeros(chart.shape + (r, r), dtype=complex)
    values[tuple(unknown_points.T)] = x.reshape(len(unknown_points), r, r)
    return MatrixField(chart=chart, values=values, valid=chart.mask)


def _ansatz_keys(n: int, degree: int) -> list[tuple[int, ...]]:
    from .normalization import _compositions
    keys = []
    for total in range(degree + 1):
        keys.extend(_compositions(total, 2 * (n - 1) + 1))
    return keys


def _solve_polynomial(omega: ConnectionForm, frame: TangentialFrame,
                      cfg: SolverConfig, lam: float) -> MatrixField:
    """Same objective, minimized over polynomial coefficients of B.

    Rows are exact evaluations of Xbar_alpha(monomial) at the data points,
    so the system is consistent up to the quadratic term of the problem
    (no finite-difference incompatibility).
    """
    chart = omega.chart
    if not frame.is_heisenberg:
        raise ValueError("the polynomial solver backend needs the hyperquadric")
    from scipy.linalg import lstsq as dense_lstsq

    from .polynomial import MatrixPolynomial

    degree = cfg.ansatz_degree
    if degree is None:
        data_deg = max((c.poly.degree() for c in omega.components
                        if c.poly is not None), default=5)
        degree = min(data_deg + 1, 7 if chart.n == 3 else 5)
    keys = _ansatz_keys(chart.n, degree)
    r = omega.r
    pts_mask = omega.valid & chart.mask
    pts = np.argwhere(pts_mask)
    coords = np.stack([chart.axes[ax][pts[:, ax]]
                       for ax in range(chart.ndim)], axis=-1)
    npts = len(pts)
    if npts == 0:
        raise ValueError("no data points for the polynomial solve")

    blocks = []
    rhs_blocks = []
    for alpha in range(1, chart.n):
        cols = np.empty((npts, len(keys)), dtype=complex)
        for c, key in enumerate(keys):
            mono = MatrixPolynomial(chart.n, 1, {key: np.ones((1, 1))})
            dmono = mono.xbar_op(alpha)
            cols[:, c] = dmono.evaluate_at(coords)[..., 0, 0]
        blocks.append(cols)
        rhs_blocks.append(-omega.components[alpha - 1].values[pts_mask]
                          .reshape(npts, r * r))
    if lam > 0:
        reg = np.empty((npts, len(keys)), dtype=complex)
        for c, key in enumerate(keys):
            mono = MatrixPolynomial(chart.n, 1, {key: np.ones((1, 1))})
            reg[:, c] = mono.evaluate_at(coords)[..., 0, 0]
        blocks.append(np.sqrt(lam) * reg)
        rhs_blocks.append(np.zeros((npts, r * r), dtype=complex))
    system = np.concatenate(blocks, axis=0)
    rhs = np.concatenate(rhs_blocks, axis=0)
    # equilibrate columns; the raw monomial basis is badly conditioned
    scale = np.linalg.norm(system, axis=0)
    scale[scale == 0] = 1.0
    sol, *_ = dense_lstsq(system / scale, rhs, lapack_driver="gelsy")
    sol = sol / scale[:, None]

    poly = MatrixPolynomial(chart.n, r)
    for c, key in enumerate(keys):
        coeff = sol[c].reshape(r, r)
        if np.abs(coeff).max() > 0:
            poly._accumulate(key, coeff)
    poly.prune_relative(1e-18)
    return MatrixField.from_polynomial(poly, chart)


def _report(B: MatrixField, omega: ConnectionForm, target: GridChart,
            frame: TangentialFrame, k: int, lam: float, iterations: int,
            sigma: float) -> SolverReport:
    chart = omega.chart
    exact = B.poly is not None
    resid_valid = (B.valid if exact else erode_valid(B.valid, 1)) \
        & omega.valid & target.mask
    resid = 0.0
    if resid_valid.any():
        for alpha in range(1, chart.n):
            if exact:
                db = B.poly.xbar_op(alpha).evaluate(chart)
            else:
                db = grid_xbar(B.values, alpha, chart, frame)
            vals = db + omega.components[alpha - 1].values
            resid = max(resid, float(pointwise_opnorm(vals[resid_valid]).max()))
    omega_norm = ck_norm(omega, k).value
    b_norm = ck_norm(restrict_field(B, target), k).value
    eta_hat = b_norm / omega_norm if omega_norm > 0 else 0.0
    return SolverReport(rho=chart.rho, sigma=sigma, k=k, eta_hat=eta_hat,
                        residual=resid, iterations=iterations, lambda_=lam,
                        omega_norm=omega_norm, b_norm=b_norm)


def solve_P_scaled(omega: ConnectionForm, sigma: float,
                   cfg: SolverConfig | None = None,
                   frame: TangentialFrame | None = None,
                   k: int = 0) -> tuple[MatrixField, SolverReport]:
    """Scale-conjugated solve: pull to the unit chart, solve, push back.

    Exactly realizes the conjugation of the solve operator by the dilation
    group; the reported eta_hat is measured on the unit chart, which makes
    it scale-invariant by construction.
    """
    if not 0 < sigma < 1:
        raise ValueError(f"sigma must lie in (0, 1), got {sigma}")
    chart = omega.chart
    if frame is None:
        from .calculus import heisenberg_surface, tangential_frame
        frame = tangential_frame(heisenberg_surface(chart.n))
    if not frame.is_heisenberg:
        warnings.warn("scale conjugation needs the hyperquadric; "
                      "falling back to the direct solve", stacklevel=2)
        return solve_P(omega, restrict(chart, chart.rho * (1 - sigma)),
                       cfg, frame, k=k)
    kappa = chart.box_rho
    omega_unit = pullback_form(omega, kappa)
    unit_chart = omega_unit.chart
    B_unit, report = solve_P(omega_unit, restrict(unit_chart, 1.0 - sigma),
                             cfg, frame, k=k)
    B_back = pullback_scalar(
        MatrixField(chart=unit_chart, values=B_unit.values, valid=unit_chart.mask),
        1.0 / kappa, target=chart)
    target = restrict(chart, chart.rho * (1.0 - sigma))
    report.rho = chart.rho
    return restrict_field(B_back, target), report


@dataclass
class ProbeReport:
    k: int
    sigma: float
    eta_max: float
    etas: np.ndarray


def operator_norm_probe(cfg: SolverConfig | None, chart: GridChart, k: int,
                        trials: int, seed: int,
                        frame: TangentialFrame | None = None,
                        sigma: float = 0.5, r: int = 2,
                        degree: int = 3) -> ProbeReport:
    """Measured solve-operator norm: max ||B||_{rho',k} / ||omega||_{rho,k}
    over seeded random polynomial forms."""
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    rng = np.random.default_rng(seed)
    target = restrict(chart, chart.rho * (1.0 - sigma))
    etas = np.empty(trials)
    for t in range(trials):
        polys = [random_matrix_polynomial(chart.n, r, degree, rng)
                 for _ in range(chart.n - 1)]
        omega = ConnectionForm.from_polynomials(polys, chart)
        _, rep = solve_P(omega, target, cfg, frame, k=k)
        etas[t] = rep.eta_hat
    return ProbeReport(k=k, sigma=sigma, eta_max=float(etas.max()), etas=etas)
