"""Operator calculus and contraction solver for the local perturbation problem.

Given a free base map, a plateau cutoff a, and a small symmetric residual f
supported where a = 1, the solver produces u = a^2 v with
d_i(F0+u) . d_j(F0+u) = d_iF0 . d_jF0 + f_ij, via the fixed point of
Phi(v) = -E(P(v), f/2 - Q(v)/2).  A time-family variant solves a curve of
residuals slice by slice and reports stability diagnostics.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field as dc_field

import numpy as np

from .freemaps import FreeMapRecord, free_map_record, freeness_margin, jet_rows
from .grids import (
    BallGrid,
    ScalarField,
    SymTensorField,
    VectorField,
    cm_alpha_norm,
    sym_index,
    sym_pairs,
)
from .oscillate import recursion_bound
from .poisson import apply_laplacian, dirichlet_solve

RIGHT_INVERSE_TOL = 1e-10    # max |A Theta - I| over non-exterior nodes
GATE_DEFAULT = 1e-2          # contraction gate on ||E|| * |E(0,f)|
PROBE_COUNT = 32             # random fields for the operator norm lower bound
PLATEAU_TOL = 1e-12          # slack on the a^2 f = f plateau identity


def _grad_a(a: ScalarField) -> np.ndarray:
    if a.grad is not None:
        return np.asarray(a.grad, dtype=float)
    grid = a.grid
    return np.stack(
        [grid.apply_op(grid.d1(i), a.values) for i in range(grid.n)], axis=1
    )


def _c2a(grid: BallGrid, values: np.ndarray, alpha: float) -> float:
    return cm_alpha_norm(grid, values, 2, alpha).value


# ---------------------------------------------------------------------------
# Pointwise operators


def op_N(a: ScalarField, v: VectorField, i: int) -> ScalarField:
    """2 d_i a (Lap v . v) + a (Lap v . d_i v); supported inside supp(a)."""
    grid = a.grid
    lap = apply_laplacian(grid, v.values)
    dvi = grid.apply_op(grid.d1(i), v.values)
    vals = 2.0 * _grad_a(a)[:, i] * np.sum(lap * v.values, axis=1)
    vals += a.values * np.sum(lap * dvi, axis=1)
    return ScalarField(grid, vals)


def _poisson_blocks(a: ScalarField, v: VectorField):
    """N_i fields, their Dirichlet solves w_i, and the derivative stacks."""
    grid = a.grid
    n = grid.n
    N = np.stack([op_N(a, v, i).values for i in range(n)], axis=1)
    w = dirichlet_solve(grid, N)
    dw = np.stack([grid.apply_op(grid.d1(i), w) for i in range(n)], axis=1)
    dv = np.stack([grid.apply_op(grid.d1(i), v.values) for i in range(n)], axis=1)
    return N, w, dw, dv


def _u_pair(a: ScalarField, v: VectorField):
    """u^(1) and u^(2) coefficient fields for all index pairs, (P, nn)."""
    grid = a.grid
    n = grid.n
    _, w, dw, dv = _poisson_blocks(a, v)
    ga = _grad_a(a)
    av = a.values
    vv = np.sum(v.values * v.values, axis=1)
    nn = n * (n + 1) // 2
    u1 = np.empty((grid.P, nn))
    u2 = np.empty((grid.P, nn))
    for k, (i, j) in enumerate(sym_pairs(n)):
        u1[:, k] = (
            av * dw[:, i, j]
            + av * dw[:, j, i]
            + 3.0 * ga[:, i] * w[:, j]
            + 3.0 * ga[:, j] * w[:, i]
        )
        u2[:, k] = (
            4.0 * ga[:, i] * ga[:, j] * vv
            + 2.0 * av * ga[:, i] * np.sum(dv[:, j] * v.values, axis=1)
            + 2.0 * av * ga[:, j] * np.sum(dv[:, i] * v.values, axis=1)
            + av * av * np.sum(dv[:, i] * dv[:, j], axis=1)
        )
    return u1, u2


def op_u1_ij(a: ScalarField, v: VectorField, i: int, j: int) -> ScalarField:
    u1, _ = _u_pair(a, v)
    return ScalarField(a.grid, u1[:, sym_index(i, j, a.grid.n)])


def op_u2_ij(a: ScalarField, v: VectorField, i: int, j: int) -> ScalarField:
    _, u2 = _u_pair(a, v)
    return ScalarField(a.grid, u2[:, sym_index(i, j, a.grid.n)])


def op_M(a: ScalarField, v: VectorField, i: int, j: int) -> ScalarField:
    """Discrete Laplacian of u_ij = u^(2) - u^(1).

    Built this way round, the inverse-Laplacian of M is u_ij identically at
    the discrete level, which is exactly what the solver's algebra uses."""
    u1, u2 = _u_pair(a, v)
    k = sym_index(i, j, a.grid.n)
    return ScalarField(a.grid, apply_laplacian(a.grid, u2[:, k] - u1[:, k]))


def op_P(a: ScalarField, v: VectorField) -> list[ScalarField]:
    """(a * inverse-Laplacian of N_i), one scalar field per direction."""
    _, w, _, _ = _poisson_blocks(a, v)
    return [ScalarField(a.grid, a.values * w[:, i]) for i in range(a.grid.n)]


def op_Q(a: ScalarField, v: VectorField) -> list[ScalarField]:
    """u_ij fields in lexicographic order; equals inverse-Laplacian of M."""
    u1, u2 = _u_pair(a, v)
    return [
        ScalarField(a.grid, u2[:, k] - u1[:, k])
        for k in range(a.grid.n * (a.grid.n + 1) // 2)
    ]


# ---------------------------------------------------------------------------
# The right inverse of the jet rows


@dataclass
class EOperator:
    """Per-node least-norm right inverse of the stacked jet rows."""

    grid: BallGrid
    rows: np.ndarray         # (P, nL, q) first then second derivatives
    theta: np.ndarray        # (P, q, nL), zero at exterior nodes
    identity_defect: float

    def apply(self, h: np.ndarray | None, f: np.ndarray) -> np.ndarray:
        n = self.grid.n
        f = np.asarray(f, dtype=float)
        if h is None:
            h = np.zeros((self.grid.P, n))
        z = np.concatenate([np.asarray(h, dtype=float), f], axis=1)
        return np.einsum("pql,pl->pq", self.theta, z)

    def norm_lower_bound(self, alpha: float, seed: int = 20240,
                         count: int = PROBE_COUNT) -> float:
        """Max output/input C^{2,alpha} ratio over seeded smooth probes."""
        grid = self.grid
        n = grid.n
        nL = self.rows.shape[1]
        x = grid.coords
        basis = [np.ones(grid.P)]
        for i in range(n):
            basis += [x[:, i], x[:, i] ** 2,
                      np.sin(np.pi * x[:, i]), np.cos(np.pi * x[:, i])]
        for i in range(n):
            for j in range(i + 1, n):
                basis.append(x[:, i] * x[:, j])
        B = np.stack(basis, axis=1)
        rng = np.random.default_rng(seed)
        best = 0.0
        for _ in range(count):
            z = B @ rng.standard_normal((B.shape[1], nL))
            out = self.apply(z[:, :n], z[:, n:])
            denom = _c2a(grid, z, alpha)
            if denom == 0.0:
                continue
            best = max(best, _c2a(grid, out, alpha) / denom)
        return best


def build_E(record: FreeMapRecord, rank_tol: float = 1e-10) -> EOperator:
    """Theta = A^T (A A^T)^{-1} nodewise, verified as a right inverse."""
    grid = record.grid
    margins = freeness_margin(record.jet)
    sel = grid.nonext_mask
    if margins[sel].min() <= rank_tol:
        node = int(np.flatnonzero(sel)[np.argmin(margins[sel])])
        raise ValueError(
            f"jet family is numerically rank deficient at node {node} "
            f"(margin {margins[node]:.3e})"
        )
    A = jet_rows(record.jet)
    nL = A.shape[1]
    theta = np.zeros((grid.P, record.q, nL))
    G = A[sel] @ np.swapaxes(A[sel], 1, 2)
    theta[sel] = np.swapaxes(np.linalg.solve(G, A[sel]), 1, 2)
    defect = np.abs(np.einsum("pkq,pql->pkl", A[sel], theta[sel])
                    - np.eye(nL)[None]).max()
    if defect > RIGHT_INVERSE_TOL:
        raise FloatingPointError(
            f"right-inverse identity fails: |A Theta - I| = {defect:.3e}"
        )
    return EOperator(grid=grid, rows=A, theta=theta, identity_defect=float(defect))


# ---------------------------------------------------------------------------
# Fixed point problem


@dataclass
class PerturbationProblem:
    """Free base map, plateau cutoff, and localized residual tensor.

    The cutoff must equal 1 on the residual's support (checked through the
    identity a^2 f = f) and vanish at and beyond the unit sphere."""

    record: FreeMapRecord
    a: ScalarField
    f: SymTensorField
    alpha: float = 0.5
    tol: float = 1e-9
    max_iter: int = 40
    gate_threshold: float = GATE_DEFAULT

    def __post_init__(self):
        grid = self.record.grid
        for other in (self.a.grid, self.f.grid):
            if other is not grid and (other.n != grid.n or other.N != grid.N):
                raise ValueError("cutoff, residual, and map live on different grids")
        r2 = np.sum(grid.coords**2, axis=1)
        if np.any(self.a.values[r2 >= 1.0 - 1e-12] != 0.0):
            raise ValueError("cutoff must vanish at and beyond the unit sphere")
        fv = self.f.values
        gap = np.abs(self.a.values[:, None] ** 2 * fv - fv).max()
        if gap > PLATEAU_TOL * (1.0 + np.abs(fv).max()):
            raise ValueError(
                "cutoff is not a plateau over the residual support "
                f"(|a^2 f - f| = {gap:.3e})"
            )
        margins = freeness_margin(self.record.jet)
        if margins[grid.nonext_mask].min() <= 0.0:
            raise ValueError("base map is not free on the grid")

    def residual_budget(self, solution_scale: float) -> float:
        """O(h^2) discrete product-rule defect plus iteration slack.

        The defect grows with the solution, not the data, so the budget is
        anchored at |E(0,f)|, which bounds the fixed point's norm."""
        grid = self.record.grid
        scale = float(np.abs(self.f.values).max()) + solution_scale
        return 5.0 * grid.h**2 * scale + 10.0 * self.tol


def op_Phi(problem: PerturbationProblem, v: VectorField,
           operator: EOperator | None = None) -> VectorField:
    """-E(P(v), f/2 - Q(v)/2), one application."""
    E = operator if operator is not None else build_E(problem.record)
    a = problem.a
    _, w, _, _ = _poisson_blocks(a, v)
    u1, u2 = _u_pair(a, v)
    h = a.values[:, None] * w
    rhs = 0.5 * problem.f.values - 0.5 * (u2 - u1)
    return VectorField(problem.record.grid, -E.apply(h, rhs))


@dataclass
class FixedPointTrace:
    """Iteration ledger of one contraction solve."""

    gate_value: float
    gate_ok: bool
    e_norm_bound: float
    e0f_norm: float
    iterate_norms: list = dc_field(default_factory=list)
    step_norms: list = dc_field(default_factory=list)
    ratios: list = dc_field(default_factory=list)
    converged: bool = False
    iterations: int = 0
    recursion_ok: bool | None = None
    bound_ratio_v: float = 0.0
    bound_ratio_u: float = 0.0
    residual_max: float = 0.0
    residual_budget: float = 0.0
    assembled_margin: float = 0.0

    def as_dict(self) -> dict:
        return {
            "gate_value": self.gate_value,
            "gate_ok": self.gate_ok,
            "e_norm_bound": self.e_norm_bound,
            "e0f_norm": self.e0f_norm,
            "iterate_norms": list(self.iterate_norms),
            "step_norms": list(self.step_norms),
            "ratios": list(self.ratios),
            "converged": self.converged,
            "iterations": self.iterations,
            "recursion_ok": self.recursion_ok,
            "bound_ratio_v": self.bound_ratio_v,
            "bound_ratio_u": self.bound_ratio_u,
            "residual_max": self.residual_max,
            "residual_budget": self.residual_budget,
            "assembled_margin": self.assembled_margin,
        }


def fixed_point_solve(problem: PerturbationProblem,
                      v_start: VectorField | None = None,
                      operator: EOperator | None = None):
    """Iterate Phi from v_start (default 0) and assemble F0 + a^2 v.

    Returns (v, u = a^2 v, trace).  Divergence (three consecutive step
    ratios >= 1) raises; loss of freeness of the assembled map raises."""
    grid = problem.record.grid
    E = operator if operator is not None else build_E(problem.record)
    alpha = problem.alpha
    e0 = E.apply(None, problem.f.values)
    e0f_norm = _c2a(grid, e0, alpha)
    e_bound = E.norm_lower_bound(alpha)
    gate = e_bound * e0f_norm
    gate_ok = gate <= problem.gate_threshold
    trace = FixedPointTrace(
        gate_value=float(gate),
        gate_ok=bool(gate_ok),
        e_norm_bound=float(e_bound),
        e0f_norm=float(e0f_norm),
    )
    if not gate_ok:
        warnings.warn(
            f"contraction gate exceeded ({gate:.3e} > "
            f"{problem.gate_threshold:.3e}); iterating anyway",
            stacklevel=2,
        )
    if v_start is None:
        vals = np.zeros((grid.P, problem.record.q))
    else:
        vals = np.array(v_start.values, dtype=float)
    trace.iterate_norms.append(_c2a(grid, vals, alpha) if vals.any() else 0.0)
    for it in range(1, problem.max_iter + 1):
        new = op_Phi(problem, VectorField(grid, vals), operator=E).values
        step = _c2a(grid, new - vals, alpha)
        trace.step_norms.append(float(step))
        trace.iterate_norms.append(float(_c2a(grid, new, alpha)))
        if len(trace.step_norms) >= 2 and trace.step_norms[-2] > 0.0:
            trace.ratios.append(float(step / trace.step_norms[-2]))
        vals = new
        trace.iterations = it
        if step <= problem.tol:
            trace.converged = True
            break
        if len(trace.ratios) >= 3 and all(r >= 1.0 for r in trace.ratios[-3:]):
            raise FloatingPointError(
                "fixed point iteration diverges: step ratios "
                f"{[f'{r:.3f}' for r in trace.ratios[-3:]]}"
            )
    if gate_ok and len(trace.iterate_norms) >= 2:
        try:
            recursion_bound(np.array(trace.iterate_norms), e0f_norm)
            trace.recursion_ok = True
        except ValueError:
            trace.recursion_ok = False
    u_vals = (problem.a.values**2)[:, None] * vals
    if e0f_norm > 0.0:
        trace.bound_ratio_v = float(trace.iterate_norms[-1] / e0f_norm)
        trace.bound_ratio_u = float(_c2a(grid, u_vals, alpha) / e0f_norm)
    assembled = free_map_record(grid, problem.record.values + u_vals)
    margins = freeness_margin(assembled.jet)
    trace.assembled_margin = float(margins[grid.nonext_mask].min())
    if trace.assembled_margin <= 0.0:
        raise FloatingPointError(
            "perturbed map lost its freeness margin "
            f"({trace.assembled_margin:.3e})"
        )
    old, new_jet = problem.record.jet, assembled.jet
    sel = grid.nonext_mask
    res = 0.0
    for k, (i, j) in enumerate(sym_pairs(grid.n)):
        got = np.sum(new_jet.d1[:, i] * new_jet.d1[:, j], axis=1)
        base = np.sum(old.d1[:, i] * old.d1[:, j], axis=1)
        res = max(res, float(
            np.abs(got - base - problem.f.values[:, k])[sel].max()
        ))
    trace.residual_max = res
    trace.residual_budget = problem.residual_budget(e0f_norm)
    return VectorField(grid, vals), VectorField(grid, u_vals), trace


# ---------------------------------------------------------------------------
# Time families


@dataclass
class FamilyReport:
    """Slice-by-slice solves of a residual curve with stability diagnostics."""

    times: np.ndarray
    vs: list                       # VectorField per slice
    us: list                       # VectorField per slice
    traces: list                   # FixedPointTrace per slice
    stability_ratios: list         # adjacent-slice (step vs E-difference) ratios
    warm_cold_gaps: list
    dt1_sup: float
    dt2_sup: float

    def as_dict(self) -> dict:
        return {
            "times": [float(t) for t in self.times],
            "stability_ratios": list(self.stability_ratios),
            "warm_cold_gaps": list(self.warm_cold_gaps),
            "dt1_sup": self.dt1_sup,
            "dt2_sup": self.dt2_sup,
            "slices": [t.as_dict() for t in self.traces],
        }


def family_solve(record: FreeMapRecord, a: ScalarField, ghat: list,
                 times: np.ndarray | None = None, alpha: float = 0.5,
                 tol: float = 1e-9, max_iter: int = 40,
                 gate_threshold: float = GATE_DEFAULT,
                 warm_start: bool = True) -> FamilyReport:
    """Solve the perturbation problem along a curve of residual tensors.

    ghat[0] must vanish identically (the curve starts at the base map).  Each
    slice is solved warm-started from the previous one and, when warm_start
    is set, re-solved cold as a uniqueness check; adjacent slices are tested
    against the linear stability bound and finite differences in t of the
    fixed points are reported up to second order."""
    if len(ghat) < 2:
        raise ValueError("a family needs at least two time slices")
    grid = record.grid
    if times is None:
        times = np.linspace(0.0, 1.0, len(ghat))
    times = np.asarray(times, dtype=float)
    if times.shape != (len(ghat),):
        raise ValueError("times must match the number of slices")
    dts = np.diff(times)
    if not np.all(dts > 0.0) or np.abs(dts - dts[0]).max() > 1e-12 * dts[0]:
        raise ValueError("time grid must be uniform and increasing")
    if ghat[0].values.any():
        raise ValueError("the family must start at a vanishing residual")
    E = build_E(record)
    vs, us, traces = [], [], []
    gaps, ratios = [], []
    prev_v = None
    for idx, slice_f in enumerate(ghat):
        problem = PerturbationProblem(
            record, a, slice_f, alpha=alpha, tol=tol,
            max_iter=max_iter, gate_threshold=gate_threshold,
        )
        try:
            v, u, trace = fixed_point_solve(
                problem, v_start=prev_v if warm_start else None, operator=E
            )
            if warm_start and idx > 0:
                v_cold, _, _ = fixed_point_solve(problem, operator=E)
                gaps.append(float(_c2a(grid, v.values - v_cold.values, alpha)))
        except (ValueError, FloatingPointError) as exc:
            raise type(exc)(f"time slice t={times[idx]:.6g}: {exc}") from exc
        vs.append(v)
        us.append(u)
        traces.append(trace)
        if idx > 0:
            diff = _c2a(grid, v.values - vs[idx - 1].values, alpha)
            bound = _c2a(
                grid,
                E.apply(None, slice_f.values - ghat[idx - 1].values),
                alpha,
            )
            if bound > 0.0:
                ratios.append(float(diff / bound))
            elif diff > 10.0 * tol:
                raise FloatingPointError(
                    f"time slice t={times[idx]:.6g}: fixed point moved "
                    f"({diff:.3e}) under an unchanged residual"
                )
        prev_v = v
    dt = float(dts[0])
    dt1 = dt2 = 0.0
    for idx in range(1, len(ghat) - 1):
        c1 = (vs[idx + 1].values - vs[idx - 1].values) / (2.0 * dt)
        c2 = (vs[idx + 1].values - 2.0 * vs[idx].values
              + vs[idx - 1].values) / dt**2
        dt1 = max(dt1, _c2a(grid, c1, alpha))
        dt2 = max(dt2, _c2a(grid, c2, alpha))
    return FamilyReport(
        times=times,
        vs=vs,
        us=us,
        traces=traces,
        stability_ratios=ratios,
        warm_cold_gaps=gaps,
        dt1_sup=float(dt1),
        dt2_sup=float(dt2),
    )
