"""Exact polynomial backend for matrix-valued fields on the hyperquadric.

A ``MatrixPolynomial`` stores a polynomial in the graph variables
(z', conj(z'), x^n) with r x r complex matrix coefficients, keyed by the
exponent tuple (s_1..s_{n-1}, rbar_1..rbar_{n-1}, m):

    term = coeff * z'^S * conj(z')^Rbar * (x^n)^m.

All calculus on this representation is exact (up to float rounding of the
coefficients), which is what manufactured problems and jet normalization
need; the finite-difference grid backend is validated against it.

Only h = 0 is supported here: the tangential fields on a general graph have
non-polynomial coefficients.
"""

from __future__ import annotations

import json

import numpy as np

__all__ = ["MatrixPolynomial", "random_matrix_polynomial"]


def _zero_key(n: int) -> tuple[int, ...]:
    return (0,) * (2 * (n - 1) + 1)


class MatrixPolynomial:
    """Sparse matrix-coefficient polynomial in (z', conj(z'), x^n)."""

    __slots__ = ("n", "r", "terms")

    def __init__(self, n: int, r: int, terms: dict | None = None):
        if n < 2:
            raise ValueError(f"need at least one z' variable, got n={n}")
        if r < 1:
            raise ValueError(f"rank must be >= 1, got {r}")
        self.n = n
        self.r = r
        self.terms: dict[tuple[int, ...], np.ndarray] = {}
        if terms:
            for key, coeff in terms.items():
                self._accumulate(tuple(int(e) for e in key), coeff)

    # -- construction -------------------------------------------------------

    @classmethod
    def zero(cls, n: int, r: int) -> "MatrixPolynomial":
        return cls(n, r)

    @classmethod
    def identity(cls, n: int, r: int) -> "MatrixPolynomial":
        return cls(n, r, {_zero_key(n): np.eye(r, dtype=complex)})

    @classmethod
    def constant(cls, matrix, n: int) -> "MatrixPolynomial":
        m = np.asarray(matrix, dtype=complex)
        if m.ndim == 0:
            m = m.reshape(1, 1)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"constant coefficient must be square, got {m.shape}")
        return cls(n, m.shape[0], {_zero_key(n): m})

    @classmethod
    def monomial(cls, n: int, coeff, S=(), R=(), m: int = 0) -> "MatrixPolynomial":
        """coeff * z'^S * conj(z')^R * t^m with S, R multi-indices."""
        c = np.asarray(coeff, dtype=complex)
        if c.ndim == 0:
            c = c.reshape(1, 1)
        S = tuple(S) + (0,) * (n - 1 - len(S))
        R = tuple(R) + (0,) * (n - 1 - len(R))
        if len(S) != n - 1 or len(R) != n - 1:
            raise ValueError("multi-index length exceeds n-1")
        if any(e < 0 for e in S + R) or m < 0:
            raise ValueError("exponents must be nonnegative")
        return cls(n, c.shape[0], {S + R + (int(m),): c})

    def _accumulate(self, key: tuple[int, ...], coeff) -> None:
        c = np.asarray(coeff, dtype=complex)
        if c.shape != (self.r, self.r):
            raise ValueError(f"coefficient shape {c.shape} != ({self.r},{self.r})")
        if key in self.terms:
            self.terms[key] = self.terms[key] + c
        else:
            self.terms[key] = c.copy()

    def copy(self) -> "MatrixPolynomial":
        return MatrixPolynomial(self.n, self.r,
                                {k: v.copy() for k, v in self.terms.items()})

    # -- ring structure -----------------------------------------------------

    def __add__(self, other: "MatrixPolynomial") -> "MatrixPolynomial":
        self._check_compatible(other)
        out = self.copy()
        for key, coeff in other.terms.items():
            out._accumulate(key, coeff)
        return out.prune()

    def __sub__(self, other: "MatrixPolynomial") -> "MatrixPolynomial":
        return self + (-other)

    def __neg__(self) -> "MatrixPolynomial":
        return self.scaled(-1.0)

    def scaled(self, scalar: complex) -> "MatrixPolynomial":
        return MatrixPolynomial(self.n, self.r,
                                {k: scalar * v for k, v in self.terms.items()})

    def __matmul__(self, other: "MatrixPolynomial") -> "MatrixPolynomial":
        return self.matmul(other)

    def matmul(self, other: "MatrixPolynomial",
               max_degree: int | None = None) -> "MatrixPolynomial":
        """Matrix product; coefficient polynomials convolve."""
        self._check_compatible(other)
        npairs = len(self.terms) * len(other.terms)
        if npairs > 4096:
            return self._matmul_vectorized(other, max_degree)
        out = MatrixPolynomial(self.n, self.r)
        for ka, ca in self.terms.items():
            for kb, cb in other.terms.items():
                key = tuple(a + b for a, b in zip(ka, kb))
                if max_degree is not None and sum(key) > max_degree:
                    continue
                out._accumulate(key, ca @ cb)
        return out.prune()

    def _matmul_vectorized(self, other: "MatrixPolynomial",
                           max_degree: int | None) -> "MatrixPolynomial":
        ka = np.array(list(self.terms), dtype=np.int64)
        kb = np.array(list(other.terms), dtype=np.int64)
        ca = np.stack(list(self.terms.values()))
        cb = np.stack(list(other.terms.values()))
        keys = (ka[:, None, :] + kb[None, :, :]).reshape(-1, ka.shape[1])
        prods = np.einsum("aij,bjk->abik", ca, cb).reshape(-1, self.r, self.r)
        if max_degree is not None:
            keep = keys.sum(axis=1) <= max_degree
            keys, prods = keys[keep], prods[keep]
        uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
        coeffs = np.zeros((len(uniq), self.r, self.r), dtype=complex)
        np.add.at(coeffs, inverse.reshape(-1), prods)
        out = MatrixPolynomial(self.n, self.r)
        for key, coeff in zip(uniq, coeffs):
            if np.abs(coeff).max() > 0:
                out.terms[tuple(int(e) for e in key)] = coeff
        return out

    def _check_compatible(self, other: "MatrixPolynomial") -> None:
        if self.n != other.n or self.r != other.r:
            raise ValueError(
                f"incompatible polynomials: (n={self.n}, r={self.r}) vs "
                f"(n={other.n}, r={other.r})")

    def adjoint(self) -> "MatrixPolynomial":
        """Complex conjugate transpose; swaps z' and conj(z') exponents."""
        nb = self.n - 1
        out = MatrixPolynomial(self.n, self.r)
        for key, coeff in self.terms.items():
            swapped = key[nb:2 * nb] + key[:nb] + key[2 * nb:]
            out._accumulate(swapped, np.conj(coeff).T)
        return out

    def prune(self, tol: float = 0.0) -> "MatrixPolynomial":
        self.terms = {k: v for k, v in self.terms.items()
                      if np.max(np.abs(v)) > tol}
        return self

    def prune_relative(self, rel: float = 1e-16) -> "MatrixPolynomial":
        """Drop terms below ``rel`` times the largest coefficient."""
        return self.prune(tol=rel * self.coeff_max())

    # -- grading ------------------------------------------------------------

    @staticmethod
    def key_degree(key: tuple[int, ...]) -> int:
        return sum(key)

    def key_weight(self, key: tuple[int, ...]) -> int:
        """Anisotropic weight: z', conj(z') count 1 and x^n counts 2."""
        return sum(key[:-1]) + 2 * key[-1]

    def degree(self) -> int:
        return max((sum(k) for k in self.terms), default=0)

    def grade_part(self, s: int, weighted: bool = False) -> "MatrixPolynomial":
        """Homogeneous component of ordinary degree (or weight) s."""
        grade = self.key_weight if weighted else self.key_degree
        return MatrixPolynomial(
            self.n, self.r,
            {k: v for k, v in self.terms.items() if grade(k) == s})

    def truncated(self, max_degree: int) -> "MatrixPolynomial":
        return MatrixPolynomial(
            self.n, self.r,
            {k: v for k, v in self.terms.items() if sum(k) <= max_degree})

    def min_grade(self, weighted: bool = False) -> int:
        grade = self.key_weight if weighted else self.key_degree
        return min((grade(k) for k in self.terms), default=0)

    def coeff_max(self) -> float:
        return max((float(np.max(np.abs(v))) for v in self.terms.values()),
                   default=0.0)

    def is_zero(self, tol: float = 0.0) -> bool:
        return self.coeff_max() <= tol

    # -- calculus ------------------------------------------------------------

    def d_z(self, alpha: int) -> "MatrixPolynomial":
        """Holomorphic coordinate derivative d/dz^alpha (alpha is 1-based)."""
        return self._shift_down(alpha - 1)

    def d_zbar(self, alpha: int) -> "MatrixPolynomial":
        """Antiholomorphic derivative d/d(conj z^alpha)."""
        return self._shift_down(self.n - 1 + alpha - 1)

    def d_t(self) -> "MatrixPolynomial":
        return self._shift_down(2 * (self.n - 1))

    def _shift_down(self, pos: int) -> "MatrixPolynomial":
        out = MatrixPolynomial(self.n, self.r)
        for key, coeff in self.terms.items():
            e = key[pos]
            if e == 0:
                continue
            nk = key[:pos] + (e - 1,) + key[pos + 1:]
            out._accumulate(nk, e * coeff)
        return out

    def mul_var(self, pos: int) -> "MatrixPolynomial":
        out = MatrixPolynomial(self.n, self.r)
        for key, coeff in self.terms.items():
            nk = key[:pos] + (key[pos] + 1,) + key[pos + 1:]
            out._accumulate(nk, coeff)
        return out

    def mul_z(self, alpha: int) -> "MatrixPolynomial":
        return self.mul_var(alpha - 1)

    def mul_zbar(self, alpha: int) -> "MatrixPolynomial":
        return self.mul_var(self.n - 1 + alpha - 1)

    def xbar_op(self, alpha: int) -> "MatrixPolynomial":
        """Tangential X_bar_alpha = d/d(conj z^alpha) - i z^alpha d/dx^n."""
        return self.d_zbar(alpha) - self.d_t().mul_z(alpha).scaled(1j)

    def x_op(self, alpha: int) -> "MatrixPolynomial":
        """Tangential X_alpha = d/dz^alpha + i conj(z^alpha) d/dx^n."""
        return self.d_z(alpha) + self.d_t().mul_zbar(alpha).scaled(1j)

    def t_op(self) -> "MatrixPolynomial":
        return self.d_t()

    def fs_derivative(self, m: int, S, R) -> "MatrixPolynomial":
        """T^m X^S Xbar^R, applied right to left (Xbar first)."""
        out = self
        for alpha in range(self.n - 1, 0, -1):
            for _ in range(R[alpha - 1] if alpha - 1 < len(R) else 0):
                out = out.xbar_op(alpha)
        for alpha in range(self.n - 1, 0, -1):
            for _ in range(S[alpha - 1] if alpha - 1 < len(S) else 0):
                out = out.x_op(alpha)
        for _ in range(m):
            out = out.d_t()
        return out

    # -- scaling -------------------------------------------------------------

    def dilated(self, kappa: float) -> "MatrixPolynomial":
        """Substitute (z', x^n) -> (sqrt(kappa) z', kappa x^n)."""
        if kappa <= 0:
            raise ValueError(f"dilation scale must be positive, got {kappa}")
        root = np.sqrt(kappa)
        out = MatrixPolynomial(self.n, self.r)
        for key, coeff in self.terms.items():
            zdeg = sum(key[:-1])
            out._accumulate(key, (root**zdeg) * (kappa ** key[-1]) * coeff)
        return out

    # -- inversion -----------------------------------------------------------

    def inverse(self, cap: int = 16) -> tuple["MatrixPolynomial", bool]:
        """(I + N)^{-1}-type inverse by a Neumann series in the part
        vanishing at 0.

        Returns (inverse, exact).  ``exact`` is True when the series
        terminates (nilpotent correction); otherwise the result is the exact
        inverse modulo terms of degree > cap.
        """
        key0 = _zero_key(self.n)
        a0 = self.terms.get(key0)
        if a0 is None:
            raise np.linalg.LinAlgError("polynomial vanishes at 0, not invertible")
        a0_inv = np.linalg.inv(a0)
        correction = MatrixPolynomial(
            self.n, self.r,
            {k: a0_inv @ v for k, v in self.terms.items() if k != key0})
        inv = MatrixPolynomial.identity(self.n, self.r)
        power = MatrixPolynomial.identity(self.n, self.r)
        exact = True
        for _ in range(cap + 1):
            power = (-power) @ correction
            if not power.terms:
                break
            truncated = power.truncated(cap)
            if len(truncated.terms) < len(power.terms):
                exact = False
            power = truncated
            # terms below the series scale at machine precision contribute
            # nothing representable to the inverse
            nbefore = len(power.terms)
            power.prune(tol=1e-17 * max(inv.coeff_max(), 1.0))
            if len(power.terms) < nbefore:
                exact = False
            if not power.terms:
                break
            inv = inv + power
        scale = MatrixPolynomial.constant(a0_inv, self.n)
        return inv @ scale, exact

    # -- evaluation ----------------------------------------------------------

    def evaluate(self, chart) -> np.ndarray:
        """Values on the full lattice of a chart, shape chart.shape + (r, r)."""
        z = chart.zprime
        zb = tuple(np.conj(v) for v in z)
        t = chart.xn
        out = np.zeros(chart.shape + (self.r, self.r), dtype=complex)
        nb = self.n - 1
        pow_cache: dict[tuple[int, int], np.ndarray] = {}

        def power(var: int, e: int) -> np.ndarray:
            if (var, e) not in pow_cache:
                base = z[var] if var < nb else (zb[var - nb] if var < 2 * nb else t)
                pow_cache[(var, e)] = base ** e
            return pow_cache[(var, e)]

        for key, coeff in self.terms.items():
            mono = None
            for var, e in enumerate(key):
                if e:
                    p = power(var, e)
                    mono = p if mono is None else mono * p
            if mono is None:
                out += coeff
            else:
                out += mono[..., None, None] * coeff
        return out

    def evaluate_at(self, points: np.ndarray) -> np.ndarray:
        """Values at arbitrary graph-coordinate points, shape (..., 2n-1)."""
        pts = np.asarray(points, dtype=float)
        nb = self.n - 1
        if pts.shape[-1] != 2 * nb + 1:
            raise ValueError(f"points must have {2 * nb + 1} coordinates")
        z = [pts[..., 2 * a] + 1j * pts[..., 2 * a + 1] for a in range(nb)]
        t = pts[..., -1]
        out = np.zeros(pts.shape[:-1] + (self.r, self.r), dtype=complex)
        for key, coeff in self.terms.items():
            mono = np.ones(pts.shape[:-1], dtype=complex)
            for a in range(nb):
                if key[a]:
                    mono = mono * z[a] ** key[a]
                if key[nb + a]:
                    mono = mono * np.conj(z[a]) ** key[nb + a]
            if key[-1]:
                mono = mono * t ** key[-1]
            out += mono[..., None, None] * coeff
        return out

    # -- serialization -------------------------------------------------------

    def to_json(self) -> str:
        entries = []
        for key in sorted(self.terms):
            coeff = self.terms[key]
            entries.append({"exp": list(key),
                            "re": np.real(coeff).tolist(),
                            "im": np.imag(coeff).tolist()})
        return json.dumps({"n": self.n, "r": self.r, "terms": entries})

    @classmethod
    def from_json(cls, text: str) -> "MatrixPolynomial":
        data = json.loads(text)
        out = cls(int(data["n"]), int(data["r"]))
        for entry in data["terms"]:
            coeff = np.asarray(entry["re"], dtype=float) \
                + 1j * np.asarray(entry["im"], dtype=float)
            out._accumulate(tuple(entry["exp"]), coeff)
        return out

    def __repr__(self) -> str:
        return (f"MatrixPolynomial(n={self.n}, r={self.r}, "
                f"nterms={len(self.terms)}, degree={self.degree()})")


def random_matrix_polynomial(n: int, r: int, degree: int, rng,
                             nterms: int | None = None,
                             scale: float = 1.0) -> MatrixPolynomial:
    """Seeded random polynomial with complex Gaussian matrix coefficients.

    Draws ``nterms`` exponent keys (default: one per total degree <= degree
    slot, capped at 3 * degree + 3) uniformly over total degree <= degree.
    """
    nb = n - 1
    nvars = 2 * nb + 1
    if nterms is None:
        nterms = 3 * degree + 3
    out = MatrixPolynomial(n, r)
    draws = 0
    while draws < nterms:
        exps = rng.integers(0, degree + 1, size=nvars)
        if exps.sum() > degree:
            continue
        draws += 1
        coeff = scale * (rng.standard_normal((r, r))
                         + 1j * rng.standard_normal((r, r))) / np.sqrt(2.0)
        out._accumulate(tuple(int(e) for e in exps), coeff)
    return out.prune()
