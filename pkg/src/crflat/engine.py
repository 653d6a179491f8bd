"""Rapid-convergence iteration on shrinking Heisenberg balls.

Each step solves for B_{j+1} = -P(omega_j), forms A_{j+1} = I + B_{j+1},
updates the connection through the exact discrete gauge law

    omega_{j+1} = (dbar_M A_{j+1} + A_{j+1} omega_j) A_{j+1}^{-1},

restricts to the next radius of the schedule, and accumulates the frame
G_{j+1} = A_{j+1} G_j.  Because the update reuses the same discrete dbar_M
as the solver, the one-step error obeys the quadratic bound

    delta_{j+1} <= (residual_j + ||B|| delta_j) * ||A^{-1}||

exactly at the discrete level; the trace records every bookkeeping quantity
(delta_j^(s), measured eta_hat_j, alpha_j, zeta_j, Holder norms of B) so the
contraction can be audited after the fact.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .calculus import (ConnectionForm, MatrixField, TangentialFrame,
                       erode_valid, gauge_transform, grid_xbar,
                       integrability_residual, restrict_field, restrict_form)
from .errors import (DivergedError, FrameDegenerateError,
                     SmallnessViolationError)
from .geometry import GridChart, RadiusSchedule, radius_schedule, restrict
from .normalization import dilation_prescale, normalize_to_order
from .norms import NormReport, alpha_j, ck_norm, holder_seminorm, pointwise_opnorm
from .solver import SolverConfig, solve_P

__all__ = ["EngineConfig", "IterationState", "TraceRow", "IterationTrace",
           "RunResult", "kam_step", "run", "verify_solution",
           "convergence_diagnostics", "DiagnosticsReport"]


@dataclass
class EngineConfig:
    """Iteration parameters.

    ``k`` is the highest norm order tracked in the trace (the contraction
    itself is driven in C^0).  ``tol`` is the absolute stopping value for
    delta_j^(0); None selects tol_rel * delta_0.  ``c_tilde`` is the product
    constant of the driving norm (exactly 1 for the pointwise operator
    2-norm at k = 0).
    """

    k: int = 1
    alpha: float = 0.5
    normalization: str = "taylor"   # taylor | fs | dilation | none
    norm_order: int = 1
    prescale_kappa: float = 0.25
    jmax: int = 10
    tol: float | None = None
    tol_rel: float = 1e-7
    c_tilde: float = 1.0
    max_restarts: int = 3
    integrability_tol: float = 1e-8
    holder_pair_budget: int = 20000
    solver: SolverConfig = field(default_factory=SolverConfig)
    seed: int = 0


@dataclass
class IterationState:
    """Mutable state of one run at step j.

    ``factors`` collects the gauge factors innermost first (the initial
    normalization gauge, then A_1, A_2, ...); when every factor carries
    polynomial data the flatness of the product can be verified with an
    exact product-rule derivative.
    """

    j: int
    chart: GridChart
    omega: ConnectionForm
    G: MatrixField
    frame: TangentialFrame
    schedule: RadiusSchedule
    omega0: ConnectionForm
    factors: list = field(default_factory=list)


@dataclass
class TraceRow:
    j: int
    rho: float
    sigma: float
    deltas: tuple[float, ...]
    eta_hat: float = math.nan
    alpha_j: float = math.nan
    zeta_j: float = math.nan
    norm_b: float = math.nan
    norm_b_holder: float = math.nan
    residual: float = math.nan
    extras: dict = field(default_factory=dict)


@dataclass
class IterationTrace:
    k: int
    rows: list[TraceRow] = field(default_factory=list)

    def deltas(self, s: int = 0) -> np.ndarray:
        return np.array([row.deltas[s] if s < len(row.deltas) else math.nan
                         for row in self.rows])

    def to_csv(self) -> str:
        out = io.StringIO()
        delta_cols = ",".join(f"delta{s}" for s in range(self.k + 1))
        out.write(f"j,rho,sigma,{delta_cols},eta_hat,alpha_j,zeta_j,"
                  "normB,normB_holder,residual\n")
        for row in self.rows:
            deltas = ",".join(f"{d:.17g}" for d in row.deltas)
            out.write(f"{row.j},{row.rho:.17g},{row.sigma:.17g},{deltas},"
                      f"{row.eta_hat:.17g},{row.alpha_j:.17g},{row.zeta_j:.17g},"
                      f"{row.norm_b:.17g},{row.norm_b_holder:.17g},"
                      f"{row.residual:.17g}\n")
        return out.getvalue()


@dataclass
class RunResult:
    G: MatrixField
    trace: IterationTrace
    converged: bool
    status: str
    steps: int
    final_delta: float
    invertibility_margin: float
    min_singular_value: float
    normalization: str
    prescale_kappa: float | None
    omega_used: ConnectionForm
    a_norm: MatrixField | None = None
    gauge_factors: list | None = None


def _measure_deltas(omega: ConnectionForm, k: int, rho: float) -> tuple[float, ...]:
    out = []
    for s in range(k + 1):
        try:
            out.append(ck_norm(omega, s, rho=rho).value)
        except ValueError:
            out.append(math.nan)
    return tuple(out)


def kam_step(state: IterationState, cfg: EngineConfig) -> tuple[IterationState, TraceRow]:
    """One gauge step; returns the advanced state and its trace row.

    Raises ``SmallnessViolationError`` when the measured correction breaks
    the contraction predicate c~ ||B|| < 1/2 (callers may prescale harder
    and restart).
    """
    j = state.j
    sched = state.schedule
    rho_j, sigma_j = sched.rho(j), sched.sigma(j)
    rho_next = sched.rho(j + 1)
    deltas = _measure_deltas(state.omega, cfg.k, rho_j)
    delta0 = deltas[0]

    target = restrict(state.chart, rho_next)
    B_t, report = solve_P(state.omega, target, cfg.solver, state.frame, k=0)
    # keep the full-mask solution for the gauge update
    B = MatrixField(chart=state.chart, values=B_t.values,
                    valid=state.chart.mask, poly=B_t.poly)
    norm_b = ck_norm(B, 0, rho=rho_next).value
    if cfg.c_tilde * norm_b >= 0.5:
        raise SmallnessViolationError(
            f"step {j}: c~ ||B|| = {cfg.c_tilde * norm_b:.3f} >= 1/2",
            norms={"norm_b": norm_b, "delta0": delta0, "eta_hat": report.eta_hat})
    holder = holder_seminorm(B_t, 0, cfg.alpha, rho=rho_next,
                             pair_budget=cfg.holder_pair_budget, seed=cfg.seed)
    a_poly = None
    if B_t.poly is not None and state.frame.is_heisenberg:
        from .polynomial import MatrixPolynomial
        a_poly = MatrixPolynomial.identity(state.chart.n, B.r) + B_t.poly
    a_field = MatrixField(
        chart=state.chart,
        values=B.values + np.eye(B.r, dtype=complex),
        valid=B.valid, poly=a_poly)
    omega_full = gauge_transform(state.omega, a_field, state.frame,
                                 backend="mixed" if a_poly is not None
                                 else "grid")
    omega_next = restrict_form(omega_full, target)
    if a_poly is None:
        # Grid path: keep only points whose full stencil stays inside the
        # shrunk ball, so every point the norms see is covered by equations
        # of the next solve.  The exact path needs no stencil margin.
        interior = target.valid(1)
        for comp in omega_next.components:
            comp.valid = comp.valid & interior
    g_next = MatrixField(chart=state.chart,
                         values=a_field.values @ state.G.values,
                         valid=a_field.valid & state.G.valid)

    row = TraceRow(
        j=j, rho=rho_j, sigma=sigma_j, deltas=deltas,
        eta_hat=report.eta_hat,
        alpha_j=alpha_j(state.chart.n, 0, j),
        zeta_j=alpha_j(state.chart.n, 0, j) * report.eta_hat * delta0,
        norm_b=norm_b,
        norm_b_holder=norm_b + holder.value,
        residual=report.residual,
        extras={"valid_count": int(omega_next.valid.sum())})
    row.extras["gauge_defect"] = _gauge_identity_defect(
        g_next, state.omega0, omega_next, state.frame)
    state_next = IterationState(j=j + 1, chart=target, omega=omega_next,
                                G=g_next, frame=state.frame, schedule=sched,
                                omega0=state.omega0,
                                factors=state.factors + [a_field])
    return state_next, row


def _gauge_identity_defect(G: MatrixField, omega0: ConnectionForm,
                           omega_j: ConnectionForm,
                           frame: TangentialFrame) -> float:
    """sup | dbar G + G omega_0 - omega_j G | over common valid points."""
    chart = G.chart
    valid = erode_valid(G.valid, 1) & omega0.valid & omega_j.valid
    if not valid.any():
        return math.nan
    worst = 0.0
    for alpha in range(1, chart.n):
        vals = grid_xbar(G.values, alpha, chart, frame) \
            + G.values @ omega0.components[alpha - 1].values \
            - omega_j.components[alpha - 1].values @ G.values
        worst = max(worst, float(pointwise_opnorm(vals[valid]).max()))
    return worst


def _apply_normalization(omega0: ConnectionForm, cfg: EngineConfig,
                         frame: TangentialFrame):
    """Initial-smallness gauge; returns (omega, A_norm or None, kappa or None)."""
    if cfg.normalization == "none":
        return omega0, None, None
    if cfg.normalization == "taylor":
        a_norm, om = normalize_to_order(omega0, cfg.norm_order, "ordinary", frame)
        return om, a_norm, None
    if cfg.normalization == "fs":
        a_norm, om = normalize_to_order(omega0, cfg.norm_order, "weighted", frame)
        return om, a_norm, None
    if cfg.normalization == "dilation":
        om, _achieved = dilation_prescale(omega0, cfg.prescale_kappa, frame)
        return om, None, cfg.prescale_kappa
    raise ValueError(f"unknown normalization {cfg.normalization!r}")


def run(omega0: ConnectionForm, cfg: EngineConfig | None = None,
        frame: TangentialFrame | None = None) -> RunResult:
    """Full iteration: normalize, contract until tol or jmax, certify G.

    Divergence (delta growing on two consecutive steps) raises
    ``DivergedError`` carrying the trace; a smallness violation triggers the
    restart policy (stronger prescale or one more normalization order), at
    most ``max_restarts`` times.
    """
    if cfg is None:
        cfg = EngineConfig()
    if frame is None:
        from .calculus import heisenberg_surface, tangential_frame
        frame = tangential_frame(heisenberg_surface(omega0.chart.n))

    resid = integrability_residual(omega0, frame)
    base_norm = ck_norm(omega0, 0).value
    if base_norm > 0 and resid.max_abs() > cfg.integrability_tol * max(base_norm, 1.0):
        import warnings
        warnings.warn(
            f"initial connection integrability residual {resid.max_abs():.2e} "
            "exceeds threshold; the flattening problem may be unsolvable",
            stacklevel=2)

    attempt_cfg = cfg
    last_error = None
    for attempt in range(cfg.max_restarts + 1):
        try:
            return _run_once(omega0, attempt_cfg, frame)
        except SmallnessViolationError as exc:
            last_error = exc
            if attempt_cfg.normalization in ("taylor", "fs"):
                attempt_cfg = replace(attempt_cfg,
                                      norm_order=attempt_cfg.norm_order + 1)
            elif attempt_cfg.normalization == "dilation":
                attempt_cfg = replace(attempt_cfg,
                                      prescale_kappa=attempt_cfg.prescale_kappa / 4.0)
            else:
                raise
    raise last_error


def _run_once(omega0: ConnectionForm, cfg: EngineConfig,
              frame: TangentialFrame) -> RunResult:
    omega_used, a_norm, kappa = _apply_normalization(omega0, cfg, frame)
    chart0 = omega_used.chart
    sched = radius_schedule(chart0.rho, max(cfg.jmax, 1))
    delta0 = ck_norm(omega_used, 0).value
    tol = cfg.tol if cfg.tol is not None else cfg.tol_rel * max(delta0, 1e-300)

    g0 = MatrixField.identity(chart0, omega_used.r)
    if a_norm is not None:
        g0 = MatrixField(chart=chart0, values=a_norm.poly.evaluate(chart0)
                         if a_norm.poly is not None else a_norm.values,
                         valid=chart0.mask, poly=a_norm.poly)
    state = IterationState(j=0, chart=chart0, omega=omega_used, G=g0,
                           frame=frame, schedule=sched, omega0=omega_used,
                           factors=[g0])
    trace = IterationTrace(k=cfg.k)
    norm_b_sum = 0.0
    converged = False
    status = "jmax"
    increases = 0
    while True:
        delta_now = _measure_deltas(state.omega, 0, state.chart.rho)[0]
        if math.isnan(delta_now):
            status = "domain-exhausted"
            break
        if delta_now <= tol:
            converged = True
            status = "converged"
            break
        if state.j >= cfg.jmax:
            break
        if len(trace.rows) >= 2:
            d_prev2, d_prev1 = trace.rows[-2].deltas[0], trace.rows[-1].deltas[0]
            if delta_now > d_prev1 > d_prev2:
                raise DivergedError(
                    f"delta increased on two consecutive steps at j={state.j}",
                    trace=trace)
        state, row = kam_step(state, cfg)
        norm_b_sum += (2.0 * cfg.c_tilde) ** (state.j - 1) * row.norm_b
        row.extras["margin"] = 1.0 - norm_b_sum
        trace.rows.append(row)

    # terminal row: final norms, no solve data
    final_deltas = _measure_deltas(state.omega, cfg.k, state.chart.rho)
    trace.rows.append(TraceRow(
        j=state.j, rho=sched.rho(state.j), sigma=sched.sigma(state.j)
        if state.j < len(sched.sigmas) else math.nan,
        deltas=final_deltas))

    margin = 1.0 - norm_b_sum
    g_valid = state.G.valid & state.chart.mask
    if g_valid.any():
        min_sigma = float(np.linalg.svd(state.G.values[g_valid],
                                        compute_uv=False)[..., -1].min())
    else:
        min_sigma = math.nan
    if converged and (not math.isfinite(min_sigma) or min_sigma <= 1e-9):
        raise FrameDegenerateError(
            f"accumulated frame lost invertibility (sigma_min={min_sigma:.2e})")

    return RunResult(
        G=state.G, trace=trace, converged=converged, status=status,
        steps=state.j, final_delta=float(final_deltas[0]),
        invertibility_margin=margin, min_singular_value=min_sigma,
        normalization=cfg.normalization, prescale_kappa=kappa,
        omega_used=omega_used,
        a_norm=g0 if a_norm is not None else None,
        gauge_factors=state.factors)


def _dbar_of_product(factors: list[MatrixField], alpha: int,
                     chart) -> np.ndarray:
    """Exact Xbar_alpha of a product of polynomial gauge factors.

    factors are innermost first: G = A_N ... A_1 A_0; the product rule
    expands the derivative into N+1 terms, each an exact polynomial
    derivative evaluated pointwise.
    """
    nfac = len(factors)
    suffix = [None] * nfac      # suffix[j] = A_{j-1} ... A_0 values
    run = None
    for j in range(nfac):
        suffix[j] = run
        run = factors[j].values if run is None else factors[j].values @ run
    prefix = [None] * nfac      # prefix[j] = A_N ... A_{j+1} values
    run = None
    for j in range(nfac - 1, -1, -1):
        prefix[j] = run
        run = run @ factors[j].values if run is not None else factors[j].values
    out = None
    for j in range(nfac):
        term = factors[j].poly.xbar_op(alpha).evaluate(chart)
        if suffix[j] is not None:
            term = term @ suffix[j]
        if prefix[j] is not None:
            term = prefix[j] @ term
        out = term if out is None else out + term
    return out


def verify_solution(omega0: ConnectionForm, G: MatrixField,
                    frame: TangentialFrame,
                    factors: list[MatrixField] | None = None) -> NormReport:
    """Recompute || dbar G + G omega_0 || from scratch on the final domain.

    The value is the raw residual; the breakdown also carries the
    gauge-normalized residual  || (dbar G + G omega_0) G^{-1} ||.

    Three derivative routes, most accurate available first: G carries an
    exact polynomial; G is a product of polynomial ``factors`` (the
    derivative expands by the product rule with each factor differentiated
    exactly); otherwise plain central differences on the grid values.
    """
    chart = G.chart
    use_factors = bool(factors) and all(f.poly is not None for f in factors)
    exact = G.poly is not None or use_factors
    valid = (G.valid if exact else erode_valid(G.valid, 1)) \
        & omega0.valid & chart.mask
    if not valid.any():
        raise ValueError("no valid points to verify on")
    g_inv = np.zeros_like(G.values)
    g_inv[valid] = np.linalg.inv(G.values[valid])
    raw = 0.0
    normalized = 0.0
    for alpha in range(1, chart.n):
        if G.poly is not None:
            dg = G.poly.xbar_op(alpha).evaluate(chart)
        elif use_factors:
            dg = _dbar_of_product(factors, alpha, chart)
        else:
            dg = grid_xbar(G.values, alpha, chart, frame)
        vals = dg + G.values @ omega0.components[alpha - 1].values
        raw = max(raw, float(pointwise_opnorm(vals[valid]).max()))
        normalized = max(normalized, float(
            pointwise_opnorm((vals @ g_inv)[valid]).max()))
    return NormReport(kind="ck", k=0, alpha=0.0, rho=chart.rho, value=raw,
                      breakdown={"raw": raw, "gauge_normalized": normalized})


@dataclass
class DiagnosticsReport:
    p_hat: float
    p_hat_per_step: dict
    zeta0: float
    zeta_chain: list[bool]
    zeta_chain_ok: bool
    j1: int | None
    holder_ratios: list[float]
    holder_ratio_bound: float
    quadratic: bool


def convergence_diagnostics(trace: IterationTrace,
                            steps: tuple[int, int] | None = None) -> DiagnosticsReport:
    """Contraction-quality report from a recorded trace.

    * p_hat: mean of log delta_{j+1} / log delta_j over usable steps
      (delta < 1, both finite and positive), optionally limited to the
      half-open step range ``steps``;
    * zeta chain: zeta_{j+1} <= zeta_j^2 checks with measured eta_hat;
    * j1: first index from which the tracked delta^(1) decreases through
      the end of the trace;
    * Holder ratios ||B_{j+1}||_{0,1/2} / delta_j^(0) per step.
    """
    if len(trace.rows) < 3:
        raise ValueError("trace too short for diagnostics (need >= 3 rows)")
    d0 = trace.deltas(0)
    ratios = {}
    for j in range(len(d0) - 1):
        if steps is not None and not (steps[0] <= j < steps[1]):
            continue
        a, b = d0[j], d0[j + 1]
        if 0 < a < 1 and 0 < b:
            ratios[j] = math.log(b) / math.log(a)
    p_hat = float(np.mean(list(ratios.values()))) if ratios else math.nan

    zetas = [(row.j, row.zeta_j) for row in trace.rows
             if math.isfinite(row.zeta_j)]
    chain = []
    for (j0, z0), (j1_, z1) in zip(zetas, zetas[1:]):
        if j1_ == j0 + 1:
            chain.append(bool(z1 <= z0 * z0 + 1e-15))
    zeta0 = zetas[0][1] if zetas else math.nan

    j1 = None
    if trace.k >= 1:
        d1 = trace.deltas(1)
        good = np.isfinite(d1)
        for start in range(len(d1) - 1):
            seg = d1[start:][good[start:]]
            if len(seg) >= 2 and np.all(np.diff(seg) < 0):
                j1 = start
                break

    holder_ratios = [row.norm_b_holder / row.deltas[0] for row in trace.rows
                     if math.isfinite(row.norm_b_holder) and row.deltas[0] > 0]
    return DiagnosticsReport(
        p_hat=p_hat, p_hat_per_step=ratios, zeta0=float(zeta0),
        zeta_chain=chain, zeta_chain_ok=bool(chain) and all(chain),
        j1=j1, holder_ratios=holder_ratios,
        holder_ratio_bound=max(holder_ratios, default=math.nan),
        quadratic=bool(p_hat >= 1.5) if math.isfinite(p_hat) else False)
