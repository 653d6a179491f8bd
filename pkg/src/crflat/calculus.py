"""Tangential vector fields, dbar on functions/matrices/forms, gauge law.

The hypersurface is r(z) = -y^n + |z'|^2 + h(z', x^n) = 0.  In graph
coordinates the tangential (0,1) fields reduce to first-order operators

    Xbar_alpha = d/d(conj z^alpha) + cbar_alpha(z', x^n) d/dx^n,

with cbar_alpha = -i (z^alpha + h_zbar) / (1 + i h_t); on the hyperquadric
(h = 0) this is the familiar -i z^alpha.  Two backends share the interface:

* grid: second-order central differences on a masked lattice, with explicit
  validity masks that erode by one ring per derivative;
* polynomial: exact operations on ``MatrixPolynomial`` data (h = 0 only).

A two-form coefficient at the ordered pair (alpha, beta), alpha < beta, is
Xbar_alpha G_beta - Xbar_beta G_alpha (and G_alpha G'_beta - G_beta G'_alpha
for the wedge), so an integrable connection has residual exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import ndimage

from .errors import (DegenerateSurfaceError, GaugeSingularError,
                     UnsupportedScaleError)
from .geometry import GridChart, _cross_structure, build_grid
from .polynomial import MatrixPolynomial

__all__ = [
    "DefiningSurface", "TangentialFrame", "MatrixField", "ConnectionForm",
    "TwoForm", "heisenberg_surface", "tangential_frame", "dbar_scalar",
    "dbar_matrix", "dbar_form", "wedge", "integrability_residual",
    "gauge_transform", "pullback_form", "pullback_scalar", "erode_valid",
    "restrict_field", "restrict_form", "grid_xbar", "grid_x", "grid_dt",
    "grid_dz", "grid_dzbar",
]


def erode_valid(valid: np.ndarray, levels: int = 1) -> np.ndarray:
    """Shrink a validity mask so a central stencil fits `levels` deep."""
    out = valid
    structure = _cross_structure(valid.ndim)
    for _ in range(levels):
        out = ndimage.binary_erosion(out, structure=structure, border_value=0)
    return out


# ---------------------------------------------------------------------------
# surface and frame
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DefiningSurface:
    """r(z) = -y^n + |z'|^2 + h(z', x^n), with h given through callables.

    ``h``, ``h_dz`` and ``h_dt`` act on (zprime: tuple of complex arrays,
    xn: real array); ``h_dz(alpha, zprime, xn)`` is the Wirtinger derivative
    of h with respect to z^alpha (1-based).  h identically zero (all three
    None) selects the hyperquadric and unlocks the polynomial backend.
    """

    n: int
    h: Callable | None = None
    h_dz: Callable | None = None
    h_dt: Callable | None = None

    def __post_init__(self):
        if self.n < 3:
            raise ValueError(f"ambient dimension must be >= 3, got {self.n}")
        if (self.h is None) != (self.h_dz is None) or \
                (self.h is None) != (self.h_dt is None):
            raise ValueError("h, h_dz, h_dt must be given together")

    @property
    def is_heisenberg(self) -> bool:
        return self.h is None


def heisenberg_surface(n: int) -> DefiningSurface:
    return DefiningSurface(n=n)


@dataclass(frozen=True)
class TangentialFrame:
    """Coefficient fields of the tangential frame X_alpha, Xbar_alpha, T."""

    surface: DefiningSurface

    @property
    def n(self) -> int:
        return self.surface.n

    @property
    def is_heisenberg(self) -> bool:
        return self.surface.is_heisenberg

    def cbar(self, alpha: int, chart: GridChart) -> np.ndarray:
        """d/dx^n coefficient of Xbar_alpha on the chart lattice."""
        z = chart.zprime[alpha - 1]
        if self.is_heisenberg:
            return -1j * z
        s = self.surface
        ht = np.asarray(s.h_dt(chart.zprime, chart.xn))
        r_alpha_bar = z + np.conj(s.h_dz(alpha, chart.zprime, chart.xn))
        denom = 1.0 + 1j * ht
        if not np.all(np.isfinite(denom)) or np.min(np.abs(denom)) < 1e-12:
            raise DegenerateSurfaceError(
                "graph defining function is degenerate on this chart")
        return -1j * r_alpha_bar / denom

    def c(self, alpha: int, chart: GridChart) -> np.ndarray:
        """d/dx^n coefficient of X_alpha (the conjugate frame field)."""
        return np.conj(self.cbar(alpha, chart))


def tangential_frame(surface: DefiningSurface) -> TangentialFrame:
    """Frame of tangential fields for a graph surface.

    Checks the third-order flatness of h at 0 (h(0) = 0, grad h(0) = 0),
    which the jet normalization relies on.
    """
    if not surface.is_heisenberg:
        zp0 = tuple(np.zeros(1, dtype=complex) for _ in range(surface.n - 1))
        xn0 = np.zeros(1)
        h0 = float(np.abs(np.asarray(surface.h(zp0, xn0))).max())
        g0 = max(float(np.abs(np.asarray(surface.h_dz(a, zp0, xn0))).max())
                 for a in range(1, surface.n))
        t0 = float(np.abs(np.asarray(surface.h_dt(zp0, xn0))).max())
        if max(h0, g0, t0) > 1e-10:
            raise ValueError(
                "h must vanish to second order at 0 "
                f"(got h(0)={h0:.2e}, grad={max(g0, t0):.2e})")
    return TangentialFrame(surface=surface)


# ---------------------------------------------------------------------------
# fields
# ---------------------------------------------------------------------------

@dataclass
class MatrixField:
    """r x r complex matrix function sampled on a chart lattice.

    ``values`` covers the full lattice; only entries where ``valid`` is True
    are meaningful.  ``poly`` optionally carries an exact polynomial
    representation (hyperquadric only) that evaluates to ``values`` on the
    mask.
    """

    chart: GridChart
    values: np.ndarray
    valid: np.ndarray = None
    poly: MatrixPolynomial | None = None

    def __post_init__(self):
        if self.valid is None:
            self.valid = self.chart.mask
        expected = self.chart.shape
        if self.values.shape[:-2] != expected:
            raise ValueError(
                f"values shape {self.values.shape} does not match chart {expected}")

    @property
    def r(self) -> int:
        return self.values.shape[-1]

    @classmethod
    def from_polynomial(cls, poly: MatrixPolynomial, chart: GridChart,
                        valid=None) -> "MatrixField":
        return cls(chart=chart, values=poly.evaluate(chart),
                   valid=chart.mask if valid is None else valid, poly=poly)

    @classmethod
    def identity(cls, chart: GridChart, r: int) -> "MatrixField":
        vals = np.broadcast_to(np.eye(r, dtype=complex),
                               chart.shape + (r, r)).copy()
        return cls(chart=chart, values=vals,
                   poly=MatrixPolynomial.identity(chart.n, r))

    def copy(self) -> "MatrixField":
        return MatrixField(chart=self.chart, values=self.values.copy(),
                           valid=self.valid.copy(), poly=self.poly)

    def matmul(self, other: "MatrixField") -> "MatrixField":
        poly = None
        if self.poly is not None and other.poly is not None:
            poly = self.poly @ other.poly
        return MatrixField(chart=self.chart,
                           values=self.values @ other.values,
                           valid=self.valid & other.valid, poly=poly)

    def __add__(self, other: "MatrixField") -> "MatrixField":
        poly = None
        if self.poly is not None and other.poly is not None:
            poly = self.poly + other.poly
        return MatrixField(chart=self.chart, values=self.values + other.values,
                           valid=self.valid & other.valid, poly=poly)

    def __sub__(self, other: "MatrixField") -> "MatrixField":
        poly = None
        if self.poly is not None and other.poly is not None:
            poly = self.poly - other.poly
        return MatrixField(chart=self.chart, values=self.values - other.values,
                           valid=self.valid & other.valid, poly=poly)

    def scaled(self, scalar: complex) -> "MatrixField":
        poly = self.poly.scaled(scalar) if self.poly is not None else None
        return MatrixField(chart=self.chart, values=scalar * self.values,
                           valid=self.valid, poly=poly)


@dataclass
class ConnectionForm:
    """(0,1) matrix form: components G_bar(1) .. G_bar(n-1)."""

    chart: GridChart
    components: tuple[MatrixField, ...]

    def __post_init__(self):
        rs = {c.r for c in self.components}
        if len(rs) != 1:
            raise ValueError(f"components disagree on rank: {rs}")
        if len(self.components) != self.chart.n - 1:
            raise ValueError(
                f"need {self.chart.n - 1} components, got {len(self.components)}")

    @property
    def r(self) -> int:
        return self.components[0].r

    @property
    def valid(self) -> np.ndarray:
        out = self.components[0].valid
        for c in self.components[1:]:
            out = out & c.valid
        return out

    @property
    def has_poly(self) -> bool:
        return all(c.poly is not None for c in self.components)

    @classmethod
    def from_polynomials(cls, polys, chart: GridChart) -> "ConnectionForm":
        comps = tuple(MatrixField.from_polynomial(p, chart) for p in polys)
        return cls(chart=chart, components=comps)

    @classmethod
    def zero(cls, chart: GridChart, r: int) -> "ConnectionForm":
        comps = tuple(
            MatrixField(chart=chart,
                        values=np.zeros(chart.shape + (r, r), dtype=complex),
                        poly=MatrixPolynomial.zero(chart.n, r))
            for _ in range(chart.n - 1))
        return cls(chart=chart, components=comps)

    def scaled(self, scalar: complex) -> "ConnectionForm":
        return ConnectionForm(
            chart=self.chart,
            components=tuple(c.scaled(scalar) for c in self.components))

    def __add__(self, other: "ConnectionForm") -> "ConnectionForm":
        return ConnectionForm(
            chart=self.chart,
            components=tuple(a + b for a, b in
                             zip(self.components, other.components)))

    def __sub__(self, other: "ConnectionForm") -> "ConnectionForm":
        return self + other.scaled(-1.0)


@dataclass
class TwoForm:
    """(0,2) matrix form, coefficients stored at ordered pairs a < b."""

    chart: GridChart
    components: dict[tuple[int, int], MatrixField]

    @property
    def valid(self) -> np.ndarray:
        out = None
        for c in self.components.values():
            out = c.valid if out is None else (out & c.valid)
        return out

    def max_abs(self) -> float:
        """Largest entry magnitude over valid points, all coefficients."""
        best = 0.0
        for c in self.components.values():
            if c.valid.any():
                best = max(best, float(np.abs(c.values[c.valid]).max()))
        return best


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def _cdiff(values: np.ndarray, axis: int, h: float) -> np.ndarray:
    """Second-order central difference along a lattice axis; edges zero."""
    out = np.zeros_like(values)
    up = [slice(None)] * values.ndim
    down = [slice(None)] * values.ndim
    mid = [slice(None)] * values.ndim
    up[axis] = slice(2, None)
    down[axis] = slice(None, -2)
    mid[axis] = slice(1, -1)
    out[tuple(mid)] = (values[tuple(up)] - values[tuple(down)]) / (2.0 * h)
    return out


def grid_dz(values: np.ndarray, alpha: int, chart: GridChart) -> np.ndarray:
    sp = chart.spacing
    dre = _cdiff(values, 2 * (alpha - 1), sp[2 * (alpha - 1)])
    dim = _cdiff(values, 2 * (alpha - 1) + 1, sp[2 * (alpha - 1) + 1])
    return 0.5 * (dre - 1j * dim)


def grid_dzbar(values: np.ndarray, alpha: int, chart: GridChart) -> np.ndarray:
    sp = chart.spacing
    dre = _cdiff(values, 2 * (alpha - 1), sp[2 * (alpha - 1)])
    dim = _cdiff(values, 2 * (alpha - 1) + 1, sp[2 * (alpha - 1) + 1])
    return 0.5 * (dre + 1j * dim)


def grid_dt(values: np.ndarray, chart: GridChart) -> np.ndarray:
    axis = chart.ndim - 1
    return _cdiff(values, axis, chart.spacing[axis])


def grid_xbar(values: np.ndarray, alpha: int, chart: GridChart,
              frame: TangentialFrame) -> np.ndarray:
    cb = frame.cbar(alpha, chart)
    extra = (np.s_[...],) + (None,) * (values.ndim - cb.ndim)
    return grid_dzbar(values, alpha, chart) + cb[extra] * grid_dt(values, chart)


def grid_x(values: np.ndarray, alpha: int, chart: GridChart,
           frame: TangentialFrame) -> np.ndarray:
    c = frame.c(alpha, chart)
    extra = (np.s_[...],) + (None,) * (values.ndim - c.ndim)
    return grid_dz(values, alpha, chart) + c[extra] * grid_dt(values, chart)


# ---------------------------------------------------------------------------
# dbar, wedge, integrability
# ---------------------------------------------------------------------------

def _want_poly(backend: str, *fields) -> bool:
    if backend == "poly":
        missing = [f for f in fields if f.poly is None]
        if missing:
            raise ValueError("polynomial backend requested but a field has no "
                             "polynomial data")
        return True
    if backend == "grid":
        return False
    if backend == "auto":
        return all(f.poly is not None for f in fields)
    raise ValueError(f"unknown backend {backend!r}")


def dbar_matrix(A: MatrixField, frame: TangentialFrame,
                backend: str = "auto") -> ConnectionForm:
    """dbar_M A = sum_alpha (Xbar_alpha A) dzbar^alpha, entrywise."""
    chart = A.chart
    if _want_poly(backend, A) and frame.is_heisenberg:
        comps = []
        for alpha in range(1, chart.n):
            p = A.poly.xbar_op(alpha)
            comps.append(MatrixField.from_polynomial(p, chart, valid=A.valid))
        return ConnectionForm(chart=chart, components=tuple(comps))
    valid = erode_valid(A.valid, 1)
    comps = tuple(
        MatrixField(chart=chart, values=grid_xbar(A.values, alpha, chart, frame),
                    valid=valid)
        for alpha in range(1, chart.n))
    return ConnectionForm(chart=chart, components=comps)


def dbar_scalar(f: MatrixField, frame: TangentialFrame,
                backend: str = "auto") -> ConnectionForm:
    """dbar_M of a scalar function (rank-1 field)."""
    return dbar_matrix(f, frame, backend=backend)


def dbar_form(phi: ConnectionForm, frame: TangentialFrame,
              backend: str = "auto") -> TwoForm:
    """Antisymmetrized derivative: (a,b) -> Xbar_a phi_b - Xbar_b phi_a."""
    chart = phi.chart
    use_poly = _want_poly(backend, *phi.components) and frame.is_heisenberg
    comps = {}
    for a in range(1, chart.n):
        for b in range(a + 1, chart.n):
            fa, fb = phi.components[a - 1], phi.components[b - 1]
            if use_poly:
                p = fb.poly.xbar_op(a) - fa.poly.xbar_op(b)
                comps[(a, b)] = MatrixField.from_polynomial(
                    p, chart, valid=fa.valid & fb.valid)
            else:
                vals = grid_xbar(fb.values, a, chart, frame) \
                    - grid_xbar(fa.values, b, chart, frame)
                comps[(a, b)] = MatrixField(
                    chart=chart, values=vals,
                    valid=erode_valid(fa.valid & fb.valid, 1))
    return TwoForm(chart=chart, components=comps)


def wedge(omega: ConnectionForm, omega2: ConnectionForm) -> TwoForm:
    """(omega ^ omega2) at (a,b):  G_a G'_b - G_b G'_a  (pointwise products)."""
    if omega.r != omega2.r:
        raise ValueError(f"rank mismatch: {omega.r} vs {omega2.r}")
    if not omega.chart.same_lattice(omega2.chart):
        raise ValueError("wedge operands live on different lattices")
    chart = omega.chart
    comps = {}
    for a in range(1, chart.n):
        for b in range(a + 1, chart.n):
            ga, gb = omega.components[a - 1], omega.components[b - 1]
            ha, hb = omega2.components[a - 1], omega2.components[b - 1]
            poly = None
            if all(f.poly is not None for f in (ga, gb, ha, hb)):
                poly = ga.poly @ hb.poly - gb.poly @ ha.poly
            vals = ga.values @ hb.values - gb.values @ ha.values
            comps[(a, b)] = MatrixField(
                chart=chart, values=vals,
                valid=ga.valid & gb.valid & ha.valid & hb.valid, poly=poly)
    return TwoForm(chart=chart, components=comps)


def integrability_residual(omega: ConnectionForm, frame: TangentialFrame,
                           backend: str = "auto") -> TwoForm:
    """dbar_M(omega) - omega ^ omega; identically zero iff integrable."""
    dphi = dbar_form(omega, frame, backend=backend)
    quad = wedge(omega, omega)
    comps = {}
    for key in dphi.components:
        d, w = dphi.components[key], quad.components[key]
        poly = None
        if d.poly is not None and w.poly is not None:
            poly = d.poly - w.poly
        comps[key] = MatrixField(chart=omega.chart, values=d.values - w.values,
                                 valid=d.valid & w.valid, poly=poly)
    return TwoForm(chart=omega.chart, components=comps)


# ---------------------------------------------------------------------------
# gauge transformation
# ---------------------------------------------------------------------------

def _check_invertible(A: MatrixField, sigma_tol: float) -> None:
    pts = A.values[A.valid]
    if pts.size == 0:
        return
    smin = np.linalg.svd(pts, compute_uv=False)[..., -1]
    worst = int(np.argmin(smin))
    if smin[worst] <= sigma_tol:
        flat_indices = np.argwhere(A.valid)
        idx = tuple(int(i) for i in flat_indices[worst])
        raise GaugeSingularError(
            f"gauge matrix singular (sigma_min={smin[worst]:.3e}) at lattice "
            f"index {idx}, point {A.chart.point_at(idx)}",
            point=A.chart.point_at(idx), sigma_min=float(smin[worst]))


def gauge_transform(omega: ConnectionForm, A: MatrixField,
                    frame: TangentialFrame, backend: str = "auto",
                    sigma_tol: float = 1e-10, cap: int = 16) -> ConnectionForm:
    """Frame change:  omega~ = (dbar_M A + A omega) A^{-1}.

    The polynomial path inverts A by a Neumann series that is exact for
    nilpotent corrections and exact modulo degree > cap otherwise.  The
    "mixed" backend needs only A to be polynomial: the gauge derivative is
    evaluated exactly and everything else is pointwise, so values chain
    without finite-difference error while the result stays a plain grid
    field.
    """
    chart = omega.chart
    _check_invertible(A, sigma_tol)
    if backend == "mixed":
        if A.poly is None or not frame.is_heisenberg:
            raise ValueError("mixed gauge backend needs a polynomial gauge "
                             "factor on the hyperquadric")
        a_inv_vals = np.zeros_like(A.values)
        a_inv_vals[A.valid] = np.linalg.inv(A.values[A.valid])
        comps = []
        for alpha in range(1, chart.n):
            comp = omega.components[alpha - 1]
            num_vals = A.poly.xbar_op(alpha).evaluate(chart) \
                + A.values @ comp.values
            comps.append(MatrixField(chart=chart, values=num_vals @ a_inv_vals,
                                     valid=A.valid & comp.valid))
        return ConnectionForm(chart=chart, components=tuple(comps))
    use_poly = frame.is_heisenberg and A.poly is not None \
        and _want_poly(backend, A, *omega.components)
    if use_poly:
        # Attached polynomials are exact through degree `cap` (Neumann
        # inverse); grid values never touch the capped series: the A-part
        # derivative is an exact polynomial evaluation and the inverse is a
        # pointwise matrix inverse, so values chain without FD error.
        a_inv_poly, _exact = A.poly.inverse(cap=cap)
        a_inv_vals = np.zeros_like(A.values)
        a_inv_vals[A.valid] = np.linalg.inv(A.values[A.valid])
        comps = []
        for alpha in range(1, chart.n):
            comp = omega.components[alpha - 1]
            num_poly = (A.poly.xbar_op(alpha)
                        + A.poly @ comp.poly).prune_relative()
            comp_poly = num_poly.matmul(a_inv_poly, max_degree=cap).prune_relative()
            num_vals = A.poly.xbar_op(alpha).evaluate(chart) \
                + A.values @ comp.values
            comps.append(MatrixField(
                chart=chart, values=num_vals @ a_inv_vals,
                valid=A.valid & comp.valid,
                poly=comp_poly))
        return ConnectionForm(chart=chart, components=tuple(comps))
    a_inv = np.zeros_like(A.values)
    a_inv[A.valid] = np.linalg.inv(A.values[A.valid])
    base_valid = erode_valid(A.valid, 1) & omega.valid
    comps = []
    for alpha in range(1, chart.n):
        num = grid_xbar(A.values, alpha, chart, frame) \
            + A.values @ omega.components[alpha - 1].values
        comps.append(MatrixField(chart=chart, values=num @ a_inv,
                                 valid=base_valid))
    return ConnectionForm(chart=chart, components=tuple(comps))


# ---------------------------------------------------------------------------
# dilation pullbacks and restriction
# ---------------------------------------------------------------------------

def _compatible_target(omega_chart: GridChart, kappa: float,
                       target: GridChart | None) -> tuple[GridChart, bool]:
    """Target chart of radius rho/kappa; flags lattice compatibility."""
    rho_new = omega_chart.box_rho / kappa
    if target is None:
        return build_grid(omega_chart.n, rho_new, omega_chart.resolution), True
    compatible = (target.n == omega_chart.n
                  and target.resolution == omega_chart.resolution
                  and abs(target.box_rho - rho_new) <= 1e-12 * rho_new)
    return target, compatible

def _pull_values(f: MatrixField, kappa: float, target: GridChart,
                 compatible: bool, form_weight: float) -> MatrixField:
    """Pull back one component through T_kappa onto the target chart.

    T_kappa maps the target lattice onto the source lattice index for index
    (same resolution, relative boxes), so compatible pullbacks copy values.
    """
    factor = kappa ** form_weight
    poly = None
    if f.poly is not None:
        poly = f.poly.dilated(kappa).scaled(factor)
    if compatible:
        values = factor * f.values
        valid = f.valid & target.mask
    elif poly is not None:
        values = poly.evaluate(target)
        valid = target.mask
    else:
        raise UnsupportedScaleError(
            "pullback target lattice is incompatible with the source and the "
            "field carries no polynomial data")
    return MatrixField(chart=target, values=values, valid=valid, poly=poly)


def pullback_form(omega: ConnectionForm, kappa: float,
                  target: GridChart | None = None) -> ConnectionForm:
    """omega^kappa = T_kappa^* omega, components sqrt(k) G(sqrt(k) z', k t).

    The result lives on the chart of radius rho/kappa (built fresh at the
    same resolution unless ``target`` is supplied).
    """
    if kappa <= 0:
        raise ValueError(f"dilation scale must be positive, got {kappa}")
    chart, compatible = _compatible_target(omega.chart, kappa, target)
    comps = tuple(_pull_values(c, kappa, chart, compatible, form_weight=0.5)
                  for c in omega.components)
    return ConnectionForm(chart=chart, components=comps)


def pullback_scalar(f: MatrixField, kappa: float,
                    target: GridChart | None = None) -> MatrixField:
    """T_kappa^* of a matrix function (weight zero, no sqrt(k) factor)."""
    if kappa <= 0:
        raise ValueError(f"dilation scale must be positive, got {kappa}")
    chart, compatible = _compatible_target(f.chart, kappa, target)
    return _pull_values(f, kappa, chart, compatible, form_weight=0.0)


def restrict_field(f: MatrixField, chart: GridChart) -> MatrixField:
    """View a field on a restriction of its chart (shared lattice)."""
    if not f.chart.same_lattice(chart):
        raise ValueError("restriction chart lives on a different lattice")
    return MatrixField(chart=chart, values=f.values,
                       valid=f.valid & chart.mask, poly=f.poly)


def restrict_form(omega: ConnectionForm, chart: GridChart) -> ConnectionForm:
    return ConnectionForm(
        chart=chart,
        components=tuple(restrict_field(c, chart) for c in omega.components))
