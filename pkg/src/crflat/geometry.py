"""Graph coordinates, Heisenberg balls, anisotropic dilations, grids.

Everything lives in the graph coordinates (Re z^1, Im z^1, ..., Re z^{n-1},
Im z^{n-1}, x^n) of the hypersurface  y^n = |z'|^2 + h(z', x^n).  A chart is
a uniform lattice over the bounding box of the gauge ball

    D_rho = { |z'|^4 + (x^n)^2 <= rho^2 },

masked by membership.  Restriction to a smaller radius tightens the mask on
the same lattice, so field arrays indexed on a parent chart stay valid on
every restriction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class Point:
    """A point of M in graph coordinates: z' in C^{n-1} and x^n real."""

    zprime: tuple[complex, ...]
    xn: float

    @property
    def n(self) -> int:
        return len(self.zprime) + 1

    def yn(self, h=None) -> float:
        """Height of the graph, y^n = |z'|^2 + h(z', x^n)."""
        base = sum(abs(z) ** 2 for z in self.zprime)
        if h is not None:
            base += h(self.zprime, self.xn)
        return base

    def gauge(self) -> float:
        """Homogeneous (Koranyi) gauge (|z'|^4 + (x^n)^2)^{1/4}."""
        zsq = sum(abs(z) ** 2 for z in self.zprime)
        return (zsq * zsq + self.xn**2) ** 0.25


@dataclass(frozen=True)
class Dilation:
    """Non-isotropic scaling (z', z^n) -> (sqrt(kappa) z', kappa z^n)."""

    kappa: float

    def __post_init__(self):
        if self.kappa <= 0:
            raise ValueError(f"dilation scale must be positive, got {self.kappa}")

    def __call__(self, p: Point) -> Point:
        s = np.sqrt(self.kappa)
        return Point(tuple(s * z for z in p.zprime), self.kappa * p.xn)

    def compose(self, other: "Dilation") -> "Dilation":
        return Dilation(self.kappa * other.kappa)

    def inverse(self) -> "Dilation":
        return Dilation(1.0 / self.kappa)


def dilate(p: Point, kappa: float) -> Point:
    """Apply the non-isotropic dilation of scale kappa to a point.

    Maps the unit hypersurface onto the one of radius kappa: gauge balls are
    carried to gauge balls, gauge(dilate(p, k)) = sqrt(k) * gauge(p).
    """
    return Dilation(kappa)(p)


@dataclass(frozen=True)
class RadiusSchedule:
    """Shrinking radii rho_{j+1} = rho_j (1 - sigma_j), sigma_j = 2^{-j-1}.

    The radii decrease to a positive limit rho_inf = rho_0 * prod(1 - 2^{-j-1});
    numerically the infinite product is exhausted after ~60 factors.
    """

    rho0: float
    rhos: np.ndarray
    sigmas: np.ndarray
    rho_infinity: float

    def __len__(self) -> int:
        return len(self.rhos)

    def rho(self, j: int) -> float:
        return float(self.rhos[j])

    def sigma(self, j: int) -> float:
        return float(self.sigmas[j])


#: prod_{j>=0} (1 - 2^{-j-1}); double precision is saturated by 61 factors.
_LIMIT_FRACTION = float(np.prod(1.0 - 0.5 ** np.arange(1, 62)))


def radius_schedule(rho0: float, jmax: int) -> RadiusSchedule:
    """Radii rho_0 .. rho_jmax of the shrinking-domain schedule."""
    if rho0 <= 0:
        raise ValueError(f"rho0 must be positive, got {rho0}")
    if jmax < 1:
        raise ValueError(f"jmax must be >= 1, got {jmax}")
    sigmas = 0.5 ** (np.arange(jmax, dtype=float) + 1.0)
    rhos = np.empty(jmax + 1)
    rhos[0] = rho0
    for j in range(jmax):
        rhos[j + 1] = rhos[j] * (1.0 - sigmas[j])
    return RadiusSchedule(rho0=rho0, rhos=rhos, sigmas=sigmas,
                          rho_infinity=rho0 * _LIMIT_FRACTION)


def _cross_structure(ndim: int) -> np.ndarray:
    s = np.zeros((3,) * ndim, dtype=bool)
    center = (1,) * ndim
    s[center] = True
    for ax in range(ndim):
        for off in (0, 2):
            idx = list(center)
            idx[ax] = off
            s[tuple(idx)] = True
    return s


@dataclass(frozen=True, eq=False)
class GridChart:
    """Masked uniform lattice over the bounding box of D_{box_rho}.

    ``rho`` is the current mask radius; ``box_rho`` fixes the lattice (its
    bounding box), so restrictions share coordinates with their parent.
    Axis order: (Re z^1, Im z^1, ..., Re z^{n-1}, Im z^{n-1}, x^n), with
    x^n the last (fastest-varying in C order) axis.
    """

    n: int
    resolution: int
    rho: float
    box_rho: float
    axes: tuple[np.ndarray, ...] = field(repr=False)
    mask: np.ndarray = field(repr=False)

    @property
    def ndim(self) -> int:
        return 2 * self.n - 1

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.resolution,) * self.ndim

    @property
    def spacing(self) -> np.ndarray:
        return np.array([ax[1] - ax[0] for ax in self.axes])

    @property
    def origin_index(self) -> tuple[int, ...]:
        return (self.resolution // 2,) * self.ndim

    @cached_property
    def coords(self) -> tuple[np.ndarray, ...]:
        """Broadcast coordinate arrays, one per axis, each of full shape."""
        grids = np.meshgrid(*self.axes, indexing="ij", sparse=True)
        return tuple(np.broadcast_to(g, self.shape) for g in grids)

    @cached_property
    def zprime(self) -> tuple[np.ndarray, ...]:
        """Complex coordinates z^alpha = Re + i Im on the full lattice."""
        c = self.coords
        return tuple(c[2 * a] + 1j * c[2 * a + 1] for a in range(self.n - 1))

    @cached_property
    def xn(self) -> np.ndarray:
        return self.coords[-1]

    @cached_property
    def gauge_sq(self) -> np.ndarray:
        """|z'|^4 + (x^n)^2 on the full lattice (squared Koranyi gauge)."""
        zsq = np.zeros(self.shape)
        for z in self.zprime:
            zsq = zsq + np.abs(z) ** 2
        return zsq * zsq + self.xn**2

    def valid(self, levels: int = 1) -> np.ndarray:
        """Mask eroded so central stencils of the given depth stay inside."""
        if levels < 0:
            raise ValueError("erosion level must be >= 0")
        if levels == 0:
            return self.mask
        cache = self._valid_cache
        if levels not in cache:
            structure = _cross_structure(self.ndim)
            m = self.valid(levels - 1)
            cache[levels] = ndimage.binary_erosion(m, structure=structure,
                                                   border_value=0)
        return cache[levels]

    @cached_property
    def _valid_cache(self) -> dict:
        return {}

    def masked_count(self) -> int:
        return int(self.mask.sum())

    def same_lattice(self, other: "GridChart") -> bool:
        return (self.n == other.n and self.resolution == other.resolution
                and self.box_rho == other.box_rho)

    def point_at(self, index: tuple[int, ...]) -> Point:
        zp = tuple(complex(self.axes[2 * a][index[2 * a]],
                           self.axes[2 * a + 1][index[2 * a + 1]])
                   for a in range(self.n - 1))
        return Point(zp, float(self.axes[-1][index[-1]]))


def build_grid(n: int, rho: float, resolution: int) -> GridChart:
    """Uniform lattice over the bounding box of D_rho with the ball mask.

    The box is [-sqrt(rho), sqrt(rho)] on each z'-axis and [-rho, rho] on the
    x^n axis.  Resolution must be odd so that the origin is a lattice point.
    """
    if n < 3:
        raise ValueError(f"ambient complex dimension must be >= 3, got {n}")
    if rho <= 0:
        raise ValueError(f"rho must be positive, got {rho}")
    if resolution < 3 or resolution % 2 == 0:
        raise ValueError(
            f"resolution must be odd and >= 3 (centered stencils at 0), got {resolution}")
    half_z = np.sqrt(rho)
    ax_z = np.linspace(-half_z, half_z, resolution)
    ax_t = np.linspace(-rho, rho, resolution)
    axes = tuple([ax_z] * (2 * n - 2)) + (ax_t,)
    shape = (resolution,) * (2 * n - 1)
    grids = np.meshgrid(*axes, indexing="ij", sparse=True)
    zsq = np.zeros(shape)
    for a in range(n - 1):
        zsq = zsq + grids[2 * a] ** 2 + grids[2 * a + 1] ** 2
    gauge_sq = zsq * zsq + np.broadcast_to(grids[-1], shape) ** 2
    chart = GridChart(n=n, resolution=resolution, rho=rho, box_rho=rho,
                      axes=axes, mask=gauge_sq <= rho * rho)
    chart.__dict__["gauge_sq"] = gauge_sq
    return chart


def restrict(chart: GridChart, rho_new: float) -> GridChart:
    """Tighten the mask to D_{rho_new} on the same lattice."""
    if rho_new <= 0:
        raise ValueError(f"rho must be positive, got {rho_new}")
    if rho_new > chart.rho:
        raise ValueError(
            f"restriction radius {rho_new} exceeds chart radius {chart.rho}")
    # Reuse the parent gauge values so nested restrictions compare identical
    # floats; the child mask is then an exact sub-mask of the parent mask.
    child = GridChart(n=chart.n, resolution=chart.resolution, rho=rho_new,
                      box_rho=chart.box_rho, axes=chart.axes,
                      mask=chart.gauge_sq <= rho_new * rho_new)
    for key in ("gauge_sq", "coords", "zprime", "xn"):
        if key in chart.__dict__ or key == "gauge_sq":
            child.__dict__[key] = getattr(chart, key)
    return child
