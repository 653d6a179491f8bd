"""Manufactured flattening problems with exact polynomial ground truth.

A problem is built backwards from an invertible frame A: the connection

    omega_0 = -A^{-1} dbar_M A

is then integrable by construction, and the flattening gauge is A itself.
To keep both A and A^{-1} exactly polynomial, A is a product of
exponentials of nilpotent elementary matrix polynomials,

    A = prod_m exp(amplitude * E_{i_m k_m} q_m) ,
    exp(N q) = I + N q   when  N^2 = 0,

so each factor inverts by negation and the product inverts in reverse
order.  Successive factors use different elementary positions, which makes
the problem genuinely noncommutative at quadratic order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .calculus import ConnectionForm, MatrixField
from .errors import CrflatError
from .geometry import GridChart, build_grid
from .polynomial import MatrixPolynomial

__all__ = ["ProblemSpec", "manufacture_problem", "ManufactureError"]


class ManufactureError(CrflatError):
    """Could not generate an acceptably invertible frame."""


@dataclass
class ProblemSpec:
    """Parameters of a manufactured instance."""

    n: int = 3
    r: int = 2
    rho0: float = 1.0
    resolution: int = 9
    amplitude: float = 1e-2
    seed: int = 7
    generator: str = "exp-polynomial"   # nilpotent | exp-polynomial | custom-file
    degree: int = 2
    nfactors: int = 2
    q_min_degree: int = 0
    q_candidates: int = 1
    custom_file: str | None = None

    def __post_init__(self):
        if self.n < 3:
            raise ValueError(f"n must be >= 3, got {self.n}")
        if self.r < 1:
            raise ValueError(f"rank must be >= 1, got {self.r}")
        if self.amplitude < 0:
            raise ValueError("amplitude must be >= 0")


def _elementary(r: int, i: int, k: int) -> np.ndarray:
    m = np.zeros((r, r), dtype=complex)
    m[i, k] = 1.0
    return m


def _random_scalar_poly(n: int, degree: int, rng, zbar_only: bool = False,
                        min_degree: int = 0) -> MatrixPolynomial:
    """Dense random scalar polynomial, total degree in [min_degree, degree]."""
    nb = n - 1
    out = MatrixPolynomial(n, 1)
    from .normalization import _compositions
    for total in range(min(min_degree, degree), degree + 1):
        slots = nb if zbar_only else 2 * nb + 1
        for comp in _compositions(total, slots):
            c = complex(rng.standard_normal(), rng.standard_normal())
            key = ((0,) * nb + comp + (0,)) if zbar_only else comp
            out._accumulate(key, np.array([[c]]))
    return out.prune()


def _sup_on_chart(poly: MatrixPolynomial, chart: GridChart) -> float:
    vals = poly.evaluate(chart)[chart.mask]
    return float(np.abs(vals).max()) if vals.size else 0.0


def _normalized_scalar(poly: MatrixPolynomial, chart: GridChart) -> MatrixPolynomial:
    sup = _sup_on_chart(poly, chart)
    if sup == 0:
        raise ManufactureError("degenerate zero polynomial draw")
    return poly.scaled(1.0 / sup)


def _roughness(q: MatrixPolynomial, chart: GridChart) -> float:
    """Tangential-derivative content of a sup-normalized scalar."""
    best = 0.0
    for alpha in range(1, q.n):
        best = max(best, _sup_on_chart(q.xbar_op(alpha), chart))
    return best / max(_sup_on_chart(q, chart), 1e-300)


def _draw_scalar(spec: "ProblemSpec", chart: GridChart, rng,
                 zbar_only: bool = False) -> MatrixPolynomial:
    """One sup-normalized scalar; with q_candidates > 1, the roughest of
    several seeded draws (largest derivative-to-value ratio)."""
    best, best_score = None, -1.0
    for _ in range(max(1, spec.q_candidates)):
        q = _random_scalar_poly(spec.n, spec.degree, rng, zbar_only=zbar_only,
                                min_degree=spec.q_min_degree)
        score = _roughness(q, chart)
        if score > best_score:
            best, best_score = q, score
    return _normalized_scalar(best, chart)


def _scalar_times_matrix(q: MatrixPolynomial, m: np.ndarray) -> MatrixPolynomial:
    r = m.shape[0]
    out = MatrixPolynomial(q.n, r)
    for key, coeff in q.terms.items():
        out._accumulate(key, coeff[0, 0] * m)
    return out


def _build_frame(spec: ProblemSpec, chart: GridChart, rng):
    """Frame polynomial A and its exact inverse for one attempt."""
    r, n = spec.r, spec.n
    identity = MatrixPolynomial.identity(n, r)
    if spec.generator == "nilpotent":
        if r < 2:
            raise ValueError("the nilpotent generator needs rank >= 2")
        q = _draw_scalar(spec, chart, rng, zbar_only=True)
        nil = _scalar_times_matrix(q, spec.amplitude * _elementary(r, 0, 1))
        return identity + nil, identity - nil
    if spec.generator == "exp-polynomial":
        if r < 2:
            raise ValueError("the exp-polynomial generator needs rank >= 2")
        pairs = []
        while len(pairs) < spec.nfactors:
            i, k = (len(pairs) % r, (len(pairs) + 1) % r)
            pairs.append((i, k))
        a = identity
        a_inv = identity
        for (i, k) in pairs:
            q = _draw_scalar(spec, chart, rng)
            nil = _scalar_times_matrix(q, spec.amplitude * _elementary(r, i, k))
            a = a @ (identity + nil)
            a_inv = (identity - nil) @ a_inv
        return a, a_inv
    if spec.generator == "custom-file":
        if not spec.custom_file:
            raise ValueError("custom-file generator needs spec.custom_file")
        with open(spec.custom_file, "r", encoding="utf-8") as fh:
            a = MatrixPolynomial.from_json(fh.read())
        a_inv, exact = a.inverse(cap=4 * max(a.degree(), 1))
        if not exact:
            import warnings
            warnings.warn("custom frame inverse truncated; the manufactured "
                          "connection is integrable only to series accuracy",
                          stacklevel=2)
        return a, a_inv
    raise ValueError(f"unknown generator {spec.generator!r}")


def manufacture_problem(spec: ProblemSpec,
                        chart: GridChart | None = None
                        ) -> tuple[ConnectionForm, MatrixField]:
    """Build (omega_0, A_true) on the chart of the spec.

    Retries with fresh draws (same stream) until the frame satisfies
    sigma_min >= 1 - 2 * amplitude on the masked ball, at most 5 attempts.
    """
    if chart is None:
        chart = build_grid(spec.n, spec.rho0, spec.resolution)
    rng = np.random.default_rng(spec.seed)
    if spec.amplitude == 0:
        a_true = MatrixField.identity(chart, spec.r)
        return ConnectionForm.zero(chart, spec.r), a_true

    bound = 1.0 - 2.0 * spec.amplitude
    for _attempt in range(5):
        a_poly, a_inv_poly = _build_frame(spec, chart, rng)
        a_vals = a_poly.evaluate(chart)
        smin = float(np.linalg.svd(a_vals[chart.mask],
                                   compute_uv=False)[..., -1].min())
        if smin >= bound:
            break
    else:
        raise ManufactureError(
            f"no draw reached sigma_min >= {bound:.4f} in 5 attempts")

    comps = []
    for alpha in range(1, spec.n):
        gamma = (a_inv_poly @ a_poly.xbar_op(alpha)).scaled(-1.0)
        comps.append(MatrixField.from_polynomial(gamma, chart))
    omega0 = ConnectionForm(chart=chart, components=tuple(comps))
    a_true = MatrixField(chart=chart, values=a_vals, valid=chart.mask,
                         poly=a_poly)
    return omega0, a_true
