"""Initial-smallness gauges: jet killing at 0 and dilation prescaling.

A connection whose expansion at 0 starts at grade s is pushed to grade s+1
by the frame change A = I + A^(s+1), where A^(s+1) solves

    ordinary mode:   d/d(conj z^alpha) A^(s+1) = -G_alpha^(s)
    weighted mode:   Xbar_alpha        A^(s+1) = -G_alpha^(s)

as an equality of homogeneous polynomials (degree graded with x^n of
degree 1, or anisotropically weighted with x^n of weight 2).  The stacked
linear system over monomial coefficients is solved by least squares; its
residual is exactly the symmetry defect of the barred coefficients, which
vanishes for integrable input.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .calculus import (ConnectionForm, MatrixField, TangentialFrame,
                       gauge_transform)
from .errors import NoSolutionError, UnsupportedScaleError
from .geometry import GridChart, build_grid
from .norms import ck_norm
from .polynomial import MatrixPolynomial

__all__ = ["JetSpec", "extract_jet", "taylor_gauge", "normalize_to_order",
           "dilation_prescale", "fd_jet_polynomial"]


# ---------------------------------------------------------------------------
# monomial bookkeeping
# ---------------------------------------------------------------------------

def _compositions(total: int, slots: int):
    """All ways to write `total` as an ordered sum of `slots` nonnegatives."""
    if slots == 1:
        yield (total,)
        return
    for head in range(total + 1):
        for rest in _compositions(total - head, slots - 1):
            yield (head,) + rest


def _keys_of_grade(n: int, grade: int, weighted: bool):
    """Exponent keys (S, R, m) of the given homogeneous grade."""
    nb = n - 1
    tmax = grade // 2 if weighted else grade
    for m in range(tmax + 1):
        rem = grade - (2 * m if weighted else m)
        for comp in _compositions(rem, 2 * nb):
            yield comp[:nb] + comp[nb:] + (m,)


def _apply_dzbar(key: tuple, alpha: int, nb: int):
    e = key[nb + alpha - 1]
    if e == 0:
        return
    nk = list(key)
    nk[nb + alpha - 1] -= 1
    yield tuple(nk), complex(e)


def _apply_xbar(key: tuple, alpha: int, nb: int):
    yield from _apply_dzbar(key, alpha, nb)
    m = key[-1]
    if m:
        nk = list(key)
        nk[-1] -= 1
        nk[alpha - 1] += 1
        yield tuple(nk), -1j * m


# ---------------------------------------------------------------------------
# jets
# ---------------------------------------------------------------------------

@dataclass
class JetSpec:
    """Expansion data of a connection at 0 up to grade ``order``.

    ``parts[s]`` holds the grade-s homogeneous component of each form
    component as an exact polynomial.  ``symmetry_defect`` is the relative
    inconsistency of the top-grade gauge equations; integrability forces it
    to vanish.
    """

    n: int
    r: int
    order: int
    mode: str
    parts: list[tuple[MatrixPolynomial, ...]]
    chart: GridChart | None = None
    symmetry_defect: float = 0.0
    scale: float = 0.0

    @property
    def top(self) -> tuple[MatrixPolynomial, ...]:
        return self.parts[self.order]

    def barred_coefficients(self) -> dict:
        """Top-grade coefficients keyed by (alpha, barred multi-index)."""
        nb = self.n - 1
        out: dict[tuple, MatrixPolynomial] = {}
        for alpha, comp in enumerate(self.top, start=1):
            for key, coeff in comp.terms.items():
                bar = key[nb:2 * nb]
                reduced = key[:nb] + (0,) * nb + (key[-1],)
                entry = out.setdefault(
                    (alpha, bar), MatrixPolynomial.zero(self.n, self.r))
                entry._accumulate(reduced, coeff)
        return out

    def to_json(self) -> str:
        payload = {
            "n": self.n, "r": self.r, "order": self.order, "mode": self.mode,
            "symmetry_defect": self.symmetry_defect,
            "parts": [[json.loads(p.to_json()) for p in comps]
                      for comps in self.parts],
        }
        return json.dumps(payload)

    @classmethod
    def from_json(cls, text: str) -> "JetSpec":
        data = json.loads(text)
        parts = [tuple(MatrixPolynomial.from_json(json.dumps(p)) for p in comps)
                 for comps in data["parts"]]
        return cls(n=int(data["n"]), r=int(data["r"]), order=int(data["order"]),
                   mode=data["mode"], parts=parts,
                   symmetry_defect=float(data["symmetry_defect"]))


def _fd_stencil(order: int, width: int) -> np.ndarray:
    """Centered 1-D stencil of the given derivative order and odd width."""
    half = width // 2
    offsets = np.arange(-half, half + 1, dtype=float)
    v = np.vander(offsets, width, increasing=True).T
    rhs = np.zeros(width)
    rhs[order] = float(math.factorial(order))
    return np.linalg.solve(v, rhs)


def _fd_partial_at_origin(values: np.ndarray, chart: GridChart,
                          gamma: tuple[int, ...]) -> np.ndarray:
    """Mixed partial d^gamma at the origin by tensored centered stencils."""
    sp = chart.spacing
    center = chart.origin_index
    block = values
    offset_slices = []
    for ax, g in enumerate(gamma):
        width = 3 if g <= 2 else (g + 1 if (g + 1) % 2 == 1 else g + 2)
        half = width // 2
        c = center[ax]
        if c - half < 0 or c + half >= chart.resolution:
            raise ValueError("chart resolution cannot center this stencil")
        offset_slices.append((slice(c - half, c + half + 1) if g else
                              slice(c, c + 1), g, width, sp[ax]))
    for ax, (sl, g, width, h) in enumerate(offset_slices):
        block = np.take(block, range(sl.start, sl.stop), axis=ax)
    # contract one axis at a time against its stencil
    for ax in range(len(gamma) - 1, -1, -1):
        _, g, width, h = offset_slices[ax]
        if g == 0:
            block = np.take(block, 0, axis=ax)
            continue
        w = _fd_stencil(g, width) / h**g
        block = np.tensordot(w, np.moveaxis(block, ax, 0), axes=(0, 0))
    return block


def _real_monomial_to_complex(a: int, b: int) -> dict[tuple[int, int], complex]:
    """Expand x^a y^b with z = x + i y into z^j conj(z)^l coefficients."""
    out: dict[tuple[int, int], complex] = {}
    for j in range(a + 1):
        cx = math.comb(a, j) * (0.5 ** a)
        for l in range(b + 1):
            cy = math.comb(b, l) * ((-1.0) ** (b - l)) * ((1 / 2j) ** b)
            key = (j + l, (a - j) + (b - l))
            out[key] = out.get(key, 0.0) + cx * cy
    return out


def fd_jet_polynomial(values: np.ndarray, chart: GridChart,
                      max_degree: int, r: int) -> MatrixPolynomial:
    """Taylor polynomial at 0 from grid values, in complex monomials.

    Uses centered stencils on the lattice; accuracy is limited by the
    lattice spacing (the polynomial backend is exact and preferred).
    """
    ndim = chart.ndim
    nb = chart.n - 1
    out = MatrixPolynomial.zero(chart.n, r)
    for total in range(max_degree + 1):
        for gamma in _compositions(total, ndim):
            deriv = _fd_partial_at_origin(values, chart, gamma)
            fact = 1.0
            for g in gamma:
                fact *= float(math.factorial(g))
            coeff = np.asarray(deriv, dtype=complex) / fact
            # convert the real-coordinate monomial to complex monomials
            expansion: dict[tuple[tuple[int, ...], tuple[int, ...]], complex] = {
                ((0,) * nb, (0,) * nb): 1.0}
            for a in range(nb):
                sub = _real_monomial_to_complex(gamma[2 * a], gamma[2 * a + 1])
                new: dict = {}
                for (S, R), c0 in expansion.items():
                    for (j, l), c1 in sub.items():
                        Sn = S[:a] + (S[a] + j,) + S[a + 1:]
                        Rn = R[:a] + (R[a] + l,) + R[a + 1:]
                        new[(Sn, Rn)] = new.get((Sn, Rn), 0.0) + c0 * c1
                expansion = new
            for (S, R), c in expansion.items():
                key = S + R + (gamma[-1],)
                out._accumulate(key, c * coeff)
    return out.prune(tol=0.0)


def extract_jet(omega: ConnectionForm, s: int, mode: str = "ordinary",
                defect_tol: float = 1e-6) -> JetSpec:
    """Grade-wise expansion of a connection at 0 up to grade s.

    Polynomial-backed components are read off exactly; otherwise the jet is
    measured by centered differences at the origin.  The symmetry defect of
    the top grade is attached (a warning above ``defect_tol`` relative).
    """
    if s < 0:
        raise ValueError(f"jet order must be >= 0, got {s}")
    if mode not in ("ordinary", "weighted"):
        raise ValueError(f"unknown jet mode {mode!r}")
    chart = omega.chart
    weighted = mode == "weighted"
    polys = []
    for comp in omega.components:
        if comp.poly is not None:
            polys.append(comp.poly)
        else:
            # grid fallback: an ordinary Taylor polynomial measured at 0
            # carries every grade (weight w needs degree up to w).
            polys.append(fd_jet_polynomial(comp.values, chart,
                                           max_degree=s, r=comp.r))
    parts = [tuple(p.grade_part(g, weighted=weighted) for p in polys)
             for g in range(s + 1)]
    jet = JetSpec(n=chart.n, r=omega.r, order=s, mode=mode, parts=parts,
                  chart=chart)
    jet.scale = max((p.coeff_max() for p in polys), default=0.0)
    _, defect = _solve_stage(jet, check_only=True)
    jet.symmetry_defect = defect
    rel = defect / jet.scale if jet.scale > 0 else defect
    if rel > defect_tol:
        warnings.warn(
            f"jet coefficients are asymmetric (relative defect {rel:.2e}); "
            "the input connection looks non-integrable", stacklevel=2)
    return jet


def _solve_stage(jet: JetSpec, check_only: bool = False):
    """Least-squares solve of the grade-(s+1) gauge equations.

    Returns (A_polynomial or None, absolute residual).
    """
    n, r, s = jet.n, jet.r, jet.order
    nb = n - 1
    weighted = jet.mode == "weighted"
    apply_op = _apply_xbar if weighted else _apply_dzbar
    domain = [k for k in _keys_of_grade(n, s + 1, weighted)
              if weighted or sum(k[nb:2 * nb]) >= 1]
    range_keys = list(_keys_of_grade(n, s, weighted))
    rk_index = {k: i for i, k in enumerate(range_keys)}
    nrows = nb * len(range_keys)
    mat = np.zeros((nrows, len(domain)), dtype=complex)
    rhs = np.zeros((nrows, r * r), dtype=complex)
    for col, key in enumerate(domain):
        for alpha in range(1, n):
            for out_key, factor in apply_op(key, alpha, nb):
                row = (alpha - 1) * len(range_keys) + rk_index[out_key]
                mat[row, col] += factor
    for alpha in range(1, n):
        comp = jet.top[alpha - 1]
        for key, coeff in comp.terms.items():
            row = (alpha - 1) * len(range_keys) + rk_index[key]
            rhs[row] -= coeff.reshape(-1)
    if len(domain) == 0:
        resid = float(np.abs(rhs).max()) if rhs.size else 0.0
        return (MatrixPolynomial.identity(n, r) if not check_only else None,
                resid)
    sol, *_ = np.linalg.lstsq(mat, rhs, rcond=None)
    residual = mat @ sol - rhs
    resid = float(np.abs(residual).max()) if residual.size else 0.0
    if check_only:
        return None, resid
    gauge = MatrixPolynomial.identity(n, r)
    for col, key in enumerate(domain):
        coeff = sol[col].reshape(r, r)
        if np.abs(coeff).max() > 0:
            gauge._accumulate(key, coeff)
    return gauge, resid


def taylor_gauge(jet: JetSpec, defect_tol: float = 1e-6) -> MatrixField:
    """Gauge A = I + A^(s+1) killing the top grade of the jet.

    Raises ``NoSolutionError`` when the barred coefficients are asymmetric
    beyond tolerance (the stage equations are then inconsistent).
    """
    gauge_poly, resid = _solve_stage(jet)
    rel = resid / jet.scale if jet.scale > 0 else resid
    if rel > defect_tol:
        raise NoSolutionError(
            f"jet gauge equations inconsistent (relative defect {rel:.2e})",
            defect=rel)
    chart = jet.chart if jet.chart is not None else build_grid(jet.n, 1.0, 9)
    return MatrixField.from_polynomial(gauge_poly, chart)


def normalize_to_order(omega: ConnectionForm, k: int,
                       mode: str = "ordinary",
                       frame: TangentialFrame | None = None,
                       defect_tol: float = 1e-6,
                       cap: int = 6) -> tuple[MatrixField, ConnectionForm]:
    """Kill the expansion of omega at 0 through grade k, stage by stage.

    Returns (A_total, omega_normalized) with
    omega_normalized = gauge_transform(omega, A_total).
    """
    if frame is None:
        from .calculus import heisenberg_surface, tangential_frame
        frame = tangential_frame(heisenberg_surface(omega.chart.n))
    if mode == "weighted" and not frame.is_heisenberg:
        raise UnsupportedSurfaceError(
            "weighted normalization needs the hyperquadric frame")
    chart = omega.chart
    a_total = MatrixField.identity(chart, omega.r)
    current = omega
    for s in range(k + 1):
        jet = extract_jet(current, s, mode=mode, defect_tol=defect_tol)
        if all(p.is_zero(tol=1e-14 * max(jet.scale, 1.0)) for p in jet.top):
            continue
        stage = taylor_gauge(jet, defect_tol=defect_tol)
        current = gauge_transform(current, stage, frame, cap=cap)
        a_total = stage.matmul(a_total)
    return a_total, current


def dilation_prescale(omega: ConnectionForm, kappa: float,
                      frame: TangentialFrame | None = None,
                      resolution: int | None = None):
    """Pull the connection back from the kappa-ball to the unit chart.

    Returns (omega_kappa, achieved_norm) where achieved_norm is the measured
    sup of the pulled-back components on the unit chart; it decays like
    sqrt(kappa) for small kappa.
    """
    if kappa <= 0:
        raise ValueError(f"dilation scale must be positive, got {kappa}")
    chart = omega.chart
    if kappa > chart.rho:
        raise ValueError(
            f"prescale {kappa} samples outside the chart ball {chart.rho}")
    if resolution is None:
        resolution = chart.resolution
    if kappa == 1.0 and resolution == chart.resolution:
        return omega, ck_norm(omega, 0).value
    if not omega.has_poly:
        raise UnsupportedScaleError(
            "grid-only fields cannot be prescaled (off-lattice samples); "
            "provide polynomial data")
    unit = build_grid(chart.n, 1.0, resolution)
    comps = []
    for c in omega.components:
        poly = c.poly.dilated(kappa).scaled(np.sqrt(kappa))
        comps.append(MatrixField.from_polynomial(poly, unit))
    out = ConnectionForm(chart=unit, components=tuple(comps))
    return out, ck_norm(out, 0).value
