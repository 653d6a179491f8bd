"""C^k grid norms, Holder seminorms, Folland-Stein norms, rate constants.

The pointwise matrix norm is the operator 2-norm (largest singular value),
which makes the product constant at k = 0 exactly one.  Grid suprema are
lower bounds for the continuum quantities; each derivative order is taken
on the largest point set on which its centered stencil fits, so the k-norm
family is monotone in k by construction.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .calculus import (ConnectionForm, MatrixField, TangentialFrame, _cdiff,
                       erode_valid, grid_dt, grid_x, grid_xbar, pullback_form)
from .errors import UnsupportedSurfaceError
from .geometry import GridChart, restrict
from .polynomial import random_matrix_polynomial

__all__ = [
    "NormReport", "NormConstants", "ck_norm", "holder_seminorm", "fs_norm",
    "scaled_fs_norm", "submultiplicativity_constant", "eta_bound", "alpha_j",
    "pointwise_opnorm",
]


@dataclass
class NormReport:
    """One measured norm: kind in {ck, holder, fs, fs_scaled}."""

    kind: str
    k: int
    alpha: float
    rho: float
    value: float
    breakdown: dict = field(default_factory=dict)

    def csv_row(self) -> str:
        return f"{self.kind},{self.k},{self.alpha:.17g},{self.rho:.17g},{self.value:.17g}"


@dataclass
class NormConstants:
    """Measured product constant for the k-norm and its trial values."""

    k: int
    c_tilde: float
    samples: np.ndarray
    c_cal: float | None = None


def pointwise_opnorm(values: np.ndarray) -> np.ndarray:
    """Operator 2-norm of each matrix in a (..., r, r) stack."""
    if values.shape[-1] == 1:
        return np.abs(values[..., 0, 0])
    return np.linalg.svd(values, compute_uv=False)[..., 0]


def _as_fields(F) -> tuple[list[MatrixField], GridChart]:
    if isinstance(F, ConnectionForm):
        return list(F.components), F.chart
    if isinstance(F, MatrixField):
        return [F], F.chart
    raise TypeError(f"expected MatrixField or ConnectionForm, got {type(F)}")


def _rho_mask(chart: GridChart, rho: float | None) -> tuple[np.ndarray, float]:
    if rho is None or rho == chart.rho:
        return chart.mask, chart.rho
    if rho > chart.rho:
        raise ValueError(f"norm radius {rho} exceeds chart radius {chart.rho}")
    return restrict(chart, rho).mask, rho


def _derivative_stack(f: MatrixField, order: int) -> list[np.ndarray]:
    """All mixed coordinate derivatives of the given order (FD values)."""
    chart = f.chart
    sp = chart.spacing
    if order == 0:
        return [f.values]
    out = []
    for axes in itertools.combinations_with_replacement(range(chart.ndim), order):
        vals = f.values
        for ax in axes:
            vals = _cdiff(vals, ax, sp[ax])
        out.append(vals)
    return out


def ck_norm(F, k: int, rho: float | None = None) -> NormReport:
    """sup over D_rho of the operator norm of all derivatives of order <= k.

    Order-q derivatives are evaluated where a depth-q central stencil stays
    inside the field's validity region.
    """
    fields, chart = _as_fields(F)
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    if chart.resolution < 2 * k + 1:
        raise ValueError(
            f"resolution {chart.resolution} cannot support order-{k} differences")
    mask, rho_val = _rho_mask(chart, rho)
    value = 0.0
    breakdown = {}
    seen_points = False
    for q in range(k + 1):
        best_q = 0.0
        for f in fields:
            pts = erode_valid(f.valid, q) & mask if q else (f.valid & mask)
            if not pts.any():
                continue
            seen_points = True
            for dv in _derivative_stack(f, q):
                best_q = max(best_q, float(pointwise_opnorm(dv[pts]).max()))
        breakdown[f"order{q}"] = best_q
        value = max(value, best_q)
    if not seen_points:
        raise ValueError("no valid points on the requested domain")
    return NormReport(kind="ck", k=k, alpha=0.0, rho=rho_val, value=value,
                      breakdown=breakdown)


def _pair_indices(npts: int, pair_budget: int, seed: int):
    total = npts * (npts - 1) // 2
    if total <= pair_budget:
        return np.triu_indices(npts, k=1)
    rng = np.random.default_rng(seed)
    i = rng.integers(0, npts, size=pair_budget)
    j = rng.integers(0, npts, size=pair_budget)
    keep = i != j
    return i[keep], j[keep]


def holder_seminorm(F, k: int, alpha: float, pair_budget: int = 200_000,
                    seed: int = 0, rho: float | None = None) -> NormReport:
    """sup |d^k F(x) - d^k F(y)| / |x - y|^alpha over sampled point pairs.

    Deterministic for a fixed seed; exhaustive whenever the pair count fits
    the budget.  The result is a lower bound for the continuum seminorm.
    """
    if not 0 <= alpha < 1:
        raise ValueError(f"alpha must be in [0, 1), got {alpha}")
    fields, chart = _as_fields(F)
    mask, rho_val = _rho_mask(chart, rho)
    value = 0.0
    for f in fields:
        pts = erode_valid(f.valid, k) & mask if k else (f.valid & mask)
        idx = np.argwhere(pts)
        if len(idx) < 2:
            continue
        coords = np.stack([chart.axes[ax][idx[:, ax]]
                           for ax in range(chart.ndim)], axis=-1)
        ii, jj = _pair_indices(len(idx), pair_budget, seed)
        dist = np.linalg.norm(coords[ii] - coords[jj], axis=-1)
        for dv in _derivative_stack(f, k):
            flat = dv[pts]
            diff = pointwise_opnorm(flat[ii] - flat[jj])
            ratios = diff if alpha == 0 else diff / dist**alpha
            if ratios.size:
                value = max(value, float(ratios.max()))
    return NormReport(kind="holder", k=k, alpha=alpha, rho=rho_val, value=value)


def _fs_multiindices(n: int, k: int):
    """All (m, S, R) with 2m + |S| + |R| <= k, S and R over n-1 slots."""
    nb = n - 1

    def multis(total):
        if total == 0:
            yield (0,) * nb
            return
        for c in itertools.combinations_with_replacement(range(nb), total):
            m = [0] * nb
            for a in c:
                m[a] += 1
            yield tuple(m)

    for m in range(k // 2 + 1):
        for stot in range(k - 2 * m + 1):
            for rtot in range(k - 2 * m - stot + 1):
                for S in multis(stot):
                    for R in multis(rtot):
                        yield m, S, R


def _fs_weight(m: int, S, R) -> int:
    return 2 * m + sum(S) + sum(R)


def _fs_derivative_grid(f: MatrixField, m: int, S, R,
                        frame: TangentialFrame) -> tuple[np.ndarray, np.ndarray]:
    """T^m X^S Xbar^R f by composed grid operators; returns (values, valid)."""
    chart = f.chart
    vals = f.values
    depth = 0
    for alpha in range(chart.n - 1, 0, -1):
        for _ in range(R[alpha - 1]):
            vals = grid_xbar(vals, alpha, chart, frame)
            depth += 1
    for alpha in range(chart.n - 1, 0, -1):
        for _ in range(S[alpha - 1]):
            vals = grid_x(vals, alpha, chart, frame)
            depth += 1
    for _ in range(m):
        vals = grid_dt(vals, chart)
        depth += 1
    return vals, erode_valid(f.valid, depth) if depth else f.valid


def koranyi_distance(coords_p: np.ndarray, coords_q: np.ndarray,
                     n: int) -> np.ndarray:
    """Gauge of the group difference q^{-1} p for graph-coordinate rows.

    Group law (z,t)(w,s) = (z+w, t+s+2 Im(z . conj(w))), gauge
    (|z|^4 + t^2)^(1/4).
    """
    nb = n - 1
    zp = coords_p[..., 0:2 * nb:2] + 1j * coords_p[..., 1:2 * nb:2]
    zq = coords_q[..., 0:2 * nb:2] + 1j * coords_q[..., 1:2 * nb:2]
    tp, tq = coords_p[..., -1], coords_q[..., -1]
    dz = zp - zq
    twist = tp - tq - 2.0 * np.imag(np.sum(zq * np.conj(zp), axis=-1))
    zsq = np.sum(np.abs(dz) ** 2, axis=-1)
    return (zsq * zsq + twist**2) ** 0.25


def fs_norm(F, k: int, alpha: float, frame: TangentialFrame,
            pair_budget: int = 200_000, seed: int = 0,
            rho: float | None = None) -> NormReport:
    """Anisotropic norm: sup of T^m X^S Xbar^R over 2m+|S|+|R| <= k, plus
    Holder ratios of the top-weight derivatives in the Koranyi gauge."""
    if not frame.is_heisenberg:
        raise UnsupportedSurfaceError(
            "Folland-Stein norms are implemented on the hyperquadric only")
    if not 0 <= alpha < 1:
        raise ValueError(f"alpha must be in [0, 1), got {alpha}")
    fields, chart = _as_fields(F)
    mask, rho_val = _rho_mask(chart, rho)
    value = 0.0
    breakdown = {}
    for m, S, R in _fs_multiindices(chart.n, k):
        w = _fs_weight(m, S, R)
        label = f"T^{m}X^{''.join(map(str, S))}Xb^{''.join(map(str, R))}"
        best = 0.0
        for f in fields:
            if f.poly is not None and frame.is_heisenberg:
                dvals = f.poly.fs_derivative(m, S, R).evaluate(chart)
                pts = f.valid & mask
            else:
                dvals, dvalid = _fs_derivative_grid(f, m, S, R, frame)
                pts = dvalid & mask
            if not pts.any():
                continue
            best = max(best, float(pointwise_opnorm(dvals[pts]).max()))
            if alpha > 0 and w == k:
                idx = np.argwhere(pts)
                if len(idx) >= 2:
                    coords = np.stack([chart.axes[ax][idx[:, ax]]
                                       for ax in range(chart.ndim)], axis=-1)
                    ii, jj = _pair_indices(len(idx), pair_budget, seed)
                    dist = koranyi_distance(coords[ii], coords[jj], chart.n)
                    flat = dvals[pts]
                    diff = pointwise_opnorm(flat[ii] - flat[jj])
                    good = dist > 0
                    if good.any():
                        best = max(best, float((diff[good] / dist[good]**alpha).max()))
        breakdown[label] = best
        value = max(value, best)
    return NormReport(kind="fs", k=k, alpha=alpha, rho=rho_val, value=value,
                      breakdown=breakdown)


def scaled_fs_norm(phi: ConnectionForm, rho: float | None, k: int, alpha: float,
                   frame: TangentialFrame, pair_budget: int = 200_000,
                   seed: int = 0) -> NormReport:
    """Scale-invariant norm: the FS norm of the unit-chart pullback T_rho^* phi."""
    if rho is None:
        rho = phi.chart.box_rho
    if abs(rho - phi.chart.box_rho) > 1e-12 * rho:
        raise ValueError(
            f"scaled norm radius {rho} does not match the chart lattice radius "
            f"{phi.chart.box_rho}")
    pulled = pullback_form(phi, rho)
    report = fs_norm(pulled, k, alpha, frame, pair_budget=pair_budget, seed=seed)
    return NormReport(kind="fs_scaled", k=k, alpha=alpha, rho=rho,
                      value=report.value, breakdown=report.breakdown)


def submultiplicativity_constant(k: int, trials: int = 100, seed: int = 0,
                                 chart: GridChart | None = None, r: int = 2,
                                 degree: int = 3) -> NormConstants:
    """Measured c~_k: the largest ||AB||_k / (||A||_k ||B||_k) over seeded
    random polynomial matrix pairs.  At k = 0 the operator norm gives 1."""
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    if chart is None:
        from .geometry import build_grid
        chart = build_grid(3, 1.0, 9)
    rng = np.random.default_rng(seed)
    ratios = np.empty(trials)
    for t in range(trials):
        pa = random_matrix_polynomial(chart.n, r, degree, rng)
        pb = random_matrix_polynomial(chart.n, r, degree, rng)
        fa = MatrixField.from_polynomial(pa, chart)
        fb = MatrixField.from_polynomial(pb, chart)
        na = ck_norm(fa, k).value
        nb = ck_norm(fb, k).value
        nab = ck_norm(fa.matmul(fb), k).value
        ratios[t] = nab / (na * nb)
    measured = float(ratios.max())
    return NormConstants(k=k, c_tilde=max(1.0, measured), samples=ratios)


def eta_bound(n: int, k: int, rho: float, sigma: float, c: float = 1.0) -> float:
    """Shrinking-domain solve bound  c sigma^(-2n-2k+1) rho^(-2k)."""
    if not 0 < sigma < 1:
        raise ValueError(f"sigma must lie in (0, 1), got {sigma}")
    if rho <= 0:
        raise ValueError(f"rho must be positive, got {rho}")
    return c * sigma ** (-2 * n - 2 * k + 1) * rho ** (-2 * k)


def alpha_j(n: int, k: int, j: int) -> float:
    """Step ratio of the solve bounds: 2^(2n+2k-1) (1 - sigma_j)^(-2k)."""
    if j < 0:
        raise ValueError(f"j must be >= 0, got {j}")
    sigma = 2.0 ** (-j - 1)
    return 2.0 ** (2 * n + 2 * k - 1) * (1.0 - sigma) ** (-2 * k)
