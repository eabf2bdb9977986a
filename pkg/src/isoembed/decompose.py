"""Decomposition of symmetric tensor fields into rank-one primitives.

A positive tensor field h is written as a finite sum of primitive terms
a^4 (dl)^2 with fixed linear forms l and smooth, compactly supported
amplitudes a.  Three stages: a perturbed cone frame around h(center)
yields strictly positive coefficient fields on a ball, Cholesky factors
of the frame generators supply the linear-form dictionary, and a quartic
partition of unity localizes each term into a PrimitiveTensor.

Bump amplitudes carry closed-form gradients so that supports stay exact:
no finite-difference leakage past the support ball.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .grids import (
    BallGrid,
    ScalarField,
    SymTensorField,
    csv_to_field,
    field_to_csv,
    sym_index,
    sym_pairs,
)
from .linear import cholesky_upper, perturbed_cone_frame

COEFF_TOL_SCALE = 1e-6          # coeff_tol = this * ||h(center)||_F
MIN_BALL_STEPS = 2              # rho below 2h is refused
RECONSTRUCTION_TOL = 1e-10


# ---------------------------------------------------------------------------
# smooth cutoffs with closed-form gradients

def smooth_step(t: np.ndarray) -> np.ndarray:
    """C-infinity transition: 0 for t <= 0, 1 for t >= 1, strictly
    monotone in between.  T(t) = b(t) / (b(t) + b(1-t)) with b = exp(-1/t)."""
    t = np.asarray(t, dtype=float)
    out = np.zeros(t.shape)
    out[t >= 1.0] = 1.0
    mid = (t > 0.0) & (t < 1.0)
    tm = t[mid]
    b1 = np.exp(-1.0 / tm)
    b2 = np.exp(-1.0 / (1.0 - tm))
    out[mid] = b1 / (b1 + b2)
    return out


def smooth_step_d(t: np.ndarray) -> np.ndarray:
    """Derivative of smooth_step; identically zero outside (0, 1)."""
    t = np.asarray(t, dtype=float)
    out = np.zeros(t.shape)
    mid = (t > 0.0) & (t < 1.0)
    tm = t[mid]
    b1 = np.exp(-1.0 / tm)
    b2 = np.exp(-1.0 / (1.0 - tm))
    # d/dt [b1/(b1+b2)] = (b1' b2 + b1 b2') / (b1+b2)^2, b'(t) = b(t)/t^2
    num = b1 * b2 * (tm ** -2 + (1.0 - tm) ** -2)
    out[mid] = num / (b1 + b2) ** 2
    return out


@dataclass(frozen=True)
class ExpBump:
    """exp(-1/(1 - (|x-c|/r)^2)) inside the ball |x-c| < r, zero outside."""

    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        if self.radius <= 0.0:
            raise ValueError("bump radius must be positive")

    def values(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        s2 = np.sum((points - self.center) ** 2, axis=-1) / self.radius ** 2
        out = np.zeros(s2.shape)
        inside = s2 < 1.0
        out[inside] = np.exp(-1.0 / (1.0 - s2[inside]))
        return out

    def grads(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        d = points - self.center
        s2 = np.sum(d ** 2, axis=-1) / self.radius ** 2
        out = np.zeros(points.shape)
        inside = s2 < 1.0
        rem = 1.0 - s2[inside]
        # underflow in exp kills the 1/rem^2 growth before it matters
        with np.errstate(under="ignore"):
            scale = -np.exp(-1.0 / rem) / rem ** 2 * (2.0 / self.radius ** 2)
        out[inside] = scale[..., None] * d[inside]
        return out

    def on_grid(self, grid: BallGrid) -> ScalarField:
        return ScalarField(grid, self.values(grid.coords), self.grads(grid.coords))


@dataclass(frozen=True)
class PlateauBump:
    """Identically 1 on |x-c| <= r_inner, zero outside |x-c| >= r_outer,
    a smooth_step transition in the annulus."""

    center: np.ndarray
    r_inner: float
    r_outer: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        if not 0.0 < self.r_inner < self.r_outer:
            raise ValueError("need 0 < r_inner < r_outer")

    def _tau(self, points: np.ndarray) -> np.ndarray:
        dist = np.linalg.norm(points - self.center, axis=-1)
        return (self.r_outer - dist) / (self.r_outer - self.r_inner)

    def values(self, points: np.ndarray) -> np.ndarray:
        return smooth_step(self._tau(np.asarray(points, dtype=float)))

    def grads(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        d = points - self.center
        dist = np.linalg.norm(d, axis=-1)
        tau = (self.r_outer - dist) / (self.r_outer - self.r_inner)
        out = np.zeros(points.shape)
        mid = (tau > 0.0) & (tau < 1.0)     # annulus only; dist > 0 there
        scale = -smooth_step_d(tau[mid]) / (self.r_outer - self.r_inner)
        out[mid] = (scale / dist[mid])[..., None] * d[mid]
        return out

    def on_grid(self, grid: BallGrid) -> ScalarField:
        return ScalarField(grid, self.values(grid.coords), self.grads(grid.coords))


# ---------------------------------------------------------------------------
# sym-vector <-> matrix

def sym_to_matrix(vec: np.ndarray, n: int) -> np.ndarray:
    """Expand i <= j storage (... , n(n+1)/2) to full matrices (..., n, n)."""
    vec = np.asarray(vec, dtype=float)
    out = np.zeros(vec.shape[:-1] + (n, n))
    for k, (i, j) in enumerate(sym_pairs(n)):
        out[..., i, j] = vec[..., k]
        out[..., j, i] = vec[..., k]
    return out


def matrix_to_sym(mat: np.ndarray) -> np.ndarray:
    """Inverse of sym_to_matrix (reads the upper triangle)."""
    mat = np.asarray(mat, dtype=float)
    n = mat.shape[-1]
    return np.stack([mat[..., i, j] for i, j in sym_pairs(n)], axis=-1)


# ---------------------------------------------------------------------------
# rank-one dictionary from Cholesky rows

def cholesky_seed(h0: np.ndarray) -> list[tuple[float, np.ndarray]]:
    """Split an SPD matrix into rank-one squares of linear forms: the rows
    c_k of the upper Cholesky factor give h0 = sum_k c_k c_k^T.  Returns
    [(1.0, c_k)] pairs."""
    h0 = np.asarray(h0, dtype=float)
    try:
        C = cholesky_upper(h0)
    except ValueError as e:
        raise ValueError(f"matrix is not positive definite ({e})") from e
    return [(1.0, C[k].copy()) for k in range(h0.shape[0])]


# ---------------------------------------------------------------------------
# cone decomposition

@dataclass
class ConeRepresentation:
    """Positive-coefficient rank-one representation on a ball.

    coefficients[:, m] is the field attached to forms[m]; on nodes within
    rho of center, sum_m coefficients[:, m] * forms[m] forms[m]^T equals
    the input tensor to roundoff.
    """

    grid: BallGrid
    coefficients: np.ndarray            # (P, m)
    forms: np.ndarray                   # (m, n)
    center: np.ndarray                  # (n,)
    rho: float
    coeff_tol: float = 0.0
    frame: np.ndarray | None = None     # (nn, nn) generator columns
    gamma: np.ndarray | None = None     # (P, nn) per-generator fields

    def __post_init__(self):
        self.coefficients = np.atleast_2d(np.asarray(self.coefficients, dtype=float))
        self.forms = np.atleast_2d(np.asarray(self.forms, dtype=float))
        self.center = np.asarray(self.center, dtype=float)
        if self.coefficients.shape != (self.grid.P, self.forms.shape[0]):
            raise ValueError("coefficients must be (P, m) matching m forms")

    def ball_mask(self) -> np.ndarray:
        dist = np.linalg.norm(self.grid.coords - self.center, axis=1)
        return (dist <= self.rho + 1e-12) & self.grid.nonext_mask

    def reconstruct(self) -> np.ndarray:
        """sum_m coef_m(x) * f_m f_m^T in i <= j storage, shape (P, nn)."""
        outer = np.stack(
            [self.forms[:, i] * self.forms[:, j] for i, j in sym_pairs(self.grid.n)],
            axis=1,
        )                                # (m, nn)
        return self.coefficients @ outer


def cone_decompose(
    h: SymTensorField,
    center: np.ndarray | None = None,
    rho_init: float = 0.5,
    coeff_tol: float | None = None,
) -> ConeRepresentation:
    """Positive rank-one representation of h near ``center``.

    Builds a perturbed cone frame around z = h(center) in sym-matrix space,
    Cholesky-factors each generator into squares of linear forms, and keeps
    the largest ball radius rho <= rho_init on which the frame coefficients
    gamma(x) = V^-1 h(x) all stay above coeff_tol.
    """
    grid = h.grid
    n = grid.n
    nn = n * (n + 1) // 2
    if center is None:
        center = np.zeros(n)
    center = np.asarray(center, dtype=float)

    offsets = np.linalg.norm(grid.coords - center, axis=1)
    c_idx = int(np.argmin(offsets))
    if offsets[c_idx] > 1e-9:
        raise ValueError("center must be a grid node")

    z = h.values[c_idx]
    z_mat = sym_to_matrix(z, n)
    eigs = np.linalg.eigvalsh(z_mat)
    if eigs[0] <= 0.0:
        raise ValueError(
            f"tensor is not positive definite at center (min eigenvalue {eigs[0]:.3e})"
        )
    if coeff_tol is None:
        coeff_tol = COEFF_TOL_SCALE * float(np.linalg.norm(z_mat))

    # spread eps = lambda_min/2 keeps every generator PD: the vec->matrix map
    # at most doubles Frobenius norms, so the generators stay within
    # sqrt(2)*eps/2 < lambda_min of z in the spectral norm
    eps = 0.5 * float(eigs[0])
    frame = perturbed_cone_frame(z, eps)

    forms = []
    owner = []                           # generator index per form
    for j in range(nn):
        gen = sym_to_matrix(frame[:, j], n)
        gen_eigs = np.linalg.eigvalsh(gen)
        if gen_eigs[0] <= 0.0:
            raise ValueError("cone frame generator lost positive definiteness")
        for _, row in cholesky_seed(gen):
            forms.append(row)
            owner.append(j)
    forms = np.asarray(forms)

    gamma = np.linalg.solve(frame, h.values.T).T        # (P, nn)

    # largest grid ball on which every gamma component clears coeff_tol;
    # rho_init itself is a candidate so constant inputs return it exactly
    steps = int(np.floor(rho_init / grid.h + 1e-9))
    candidates = [rho_init] + [k * grid.h for k in range(steps, MIN_BALL_STEPS - 1, -1)]
    rho = None
    for cand in candidates:
        if cand > rho_init + 1e-12 or cand < MIN_BALL_STEPS * grid.h - 1e-12:
            continue
        mask = (offsets <= cand + 1e-12) & grid.nonext_mask
        if np.all(gamma[mask] > coeff_tol):
            rho = float(cand)
            break
    if rho is None:
        small = (offsets <= MIN_BALL_STEPS * grid.h + 1e-12) & grid.nonext_mask
        worst = float(gamma[small].min()) if small.any() else float("nan")
        raise ValueError(
            f"cone ball shrank below {MIN_BALL_STEPS}h: min coefficient {worst:.3e} "
            f"vs tolerance {coeff_tol:.3e} already within radius {MIN_BALL_STEPS}*h"
        )

    coefficients = gamma[:, owner]
    rep = ConeRepresentation(
        grid=grid,
        coefficients=coefficients,
        forms=forms,
        center=center,
        rho=rho,
        coeff_tol=coeff_tol,
        frame=frame,
        gamma=gamma,
    )
    err = np.abs(rep.reconstruct()[rep.ball_mask()] - h.values[rep.ball_mask()]).max()
    if err > RECONSTRUCTION_TOL:
        raise FloatingPointError(f"cone reconstruction error {err:.3e} on the ball")
    return rep


# ---------------------------------------------------------------------------
# primitives

def form_rotation(c: np.ndarray) -> np.ndarray:
    """Chart rotation A in GL(n) whose inverse has first column c; in chart
    coordinates y = A x the form c.x becomes |c|^2 y^1."""
    c = np.asarray(c, dtype=float)
    n = c.shape[0]
    if np.linalg.norm(c) == 0.0:
        raise ValueError("linear form must be nonzero")
    if n == 1:
        return np.array([[1.0 / c[0]]])
    # complete c to a basis with canonical vectors, orthonormalize the rest
    cols = [c]
    skip = int(np.argmax(np.abs(c)))
    cols += [np.eye(n)[:, k] for k in range(n) if k != skip]
    Q, _ = np.linalg.qr(np.stack(cols, axis=1))
    # fix column signs so the result is platform independent
    signs = np.sign(Q[np.abs(Q).argmax(axis=0), np.arange(n)])
    signs[signs == 0.0] = 1.0
    B = np.column_stack([c, (Q * signs)[:, 1:]])
    return np.linalg.inv(B)


@dataclass
class PrimitiveTensor:
    """One rank-one term a^4(x) c_i c_j with compactly supported amplitude."""

    field: ScalarField                  # amplitude a, closed-form grad when known
    form: np.ndarray                    # c, (n,)
    rotation: np.ndarray                # A with A^-1 first column c
    support_center: np.ndarray
    support_radius: float

    def __post_init__(self):
        self.form = np.asarray(self.form, dtype=float)
        self.rotation = np.asarray(self.rotation, dtype=float)
        self.support_center = np.asarray(self.support_center, dtype=float)
        if np.linalg.norm(self.form) == 0.0:
            raise ValueError("linear form must be nonzero")
        grid = self.field.grid
        binv = np.linalg.inv(self.rotation)
        if np.abs(binv[:, 0] - self.form).max() > 1e-9:
            raise ValueError("rotation inverse must carry the form in column one")
        collar = np.linalg.norm(grid.coords, axis=1) >= 1.0 - grid.h - 1e-12
        if np.abs(self.field.values[collar]).max() > 0.0:
            raise ValueError("amplitude must vanish on a collar inside the ball")

    def tensor_values(self) -> np.ndarray:
        """a^4 c_i c_j at every node, i <= j storage, shape (P, nn)."""
        n = self.field.grid.n
        a4 = self.field.values ** 4
        return np.stack(
            [a4 * self.form[i] * self.form[j] for i, j in sym_pairs(n)], axis=1
        )


@dataclass
class DecompositionResult:
    primitives: list[PrimitiveTensor]
    residual: np.ndarray | None         # (P, nn): target - sum of primitives
    max_error: float
    grid: BallGrid = field(repr=False, default=None)

    def total(self) -> np.ndarray:
        out = np.zeros((self.grid.P, self.grid.n * (self.grid.n + 1) // 2))
        for p in self.primitives:
            out += p.tensor_values()
        return out


def localize_primitives(
    rep: ConeRepresentation, cutoffs: list[ScalarField]
) -> DecompositionResult:
    """Turn a cone representation into compactly supported primitives.

    Each cutoff psi and dictionary entry (coef, c) contributes one
    PrimitiveTensor with amplitude a = psi * coef^(1/4); the sum of all
    primitives equals (sum psi^4) times the represented tensor nodewise.
    """
    grid = rep.grid
    primitives = []
    weight = np.zeros(grid.P)
    for psi in cutoffs:
        if psi.grid is not grid:
            raise ValueError("cutoff lives on a different grid")
        supp = psi.values != 0.0
        weight += psi.values ** 4
        for m in range(rep.forms.shape[0]):
            coef = rep.coefficients[:, m]
            bad = supp & (coef < max(rep.coeff_tol, 0.0))
            if bad.any():
                node = int(np.flatnonzero(bad)[0])
                raise ValueError(
                    f"coefficient {coef[node]:.3e} below tolerance on the cutoff "
                    f"support at node {grid.coords[node]}"
                )
            a_vals = np.zeros(grid.P)
            a_vals[supp] = psi.values[supp] * coef[supp] ** 0.25
            a_grad = None
            if psi.grad is not None:
                # product rule; the coef gradient is finite-difference but both
                # terms carry a psi factor, so exact support is preserved
                dcoef = np.stack(
                    [grid.apply_op(grid.d1(a), coef) for a in range(grid.n)], axis=1
                )
                a_grad = np.zeros((grid.P, grid.n))
                a_grad[supp] = (
                    psi.grad[supp] * coef[supp, None] ** 0.25
                    + 0.25
                    * psi.values[supp, None]
                    * coef[supp, None] ** -0.75
                    * dcoef[supp]
                )
            c = rep.forms[m]
            center, radius = _support_ball(grid, a_vals, rep.center, rep.rho)
            primitives.append(
                PrimitiveTensor(
                    field=ScalarField(grid, a_vals, a_grad),
                    form=c,
                    rotation=form_rotation(c),
                    support_center=center,
                    support_radius=radius,
                )
            )
    target = weight[:, None] * rep.reconstruct()
    total = np.zeros_like(target)
    for p in primitives:
        total += p.tensor_values()
    residual = target - total
    max_error = float(np.abs(residual[grid.nonext_mask]).max()) if primitives else 0.0
    return DecompositionResult(
        primitives=primitives, residual=residual, max_error=max_error, grid=grid
    )


def _support_ball(grid, values, fallback_center, fallback_radius):
    supp = np.flatnonzero(values != 0.0)
    if supp.size == 0:
        return fallback_center.copy(), float(fallback_radius)
    pts = grid.coords[supp]
    center = 0.5 * (pts.min(axis=0) + pts.max(axis=0))
    radius = float(np.linalg.norm(pts - center, axis=1).max()) + grid.h
    return center, radius


# ---------------------------------------------------------------------------
# quartic partition of unity

def quartic_partition(
    grid: BallGrid,
    regions: list[tuple[np.ndarray, float]],
    mask: np.ndarray | None = None,
) -> list[ScalarField]:
    """Cutoffs psi_i with sum psi_i^4 = 1 on the covered set.

    regions are (center, radius) balls; each gets the standard exp bump
    phi_i, normalized by (sum phi_j^4)^(1/4).  Every node of ``mask``
    (non-exterior nodes by default) must lie inside some region.
    """
    if mask is None:
        mask = grid.nonext_mask
    bumps = [ExpBump(center, radius) for center, radius in regions]
    phis = np.stack([b.values(grid.coords) for b in bumps], axis=1)       # (P, m)
    dphis = np.stack([b.grads(grid.coords) for b in bumps], axis=2)       # (P, n, m)
    S = np.sum(phis ** 4, axis=1)
    uncovered = mask & (S == 0.0)
    if uncovered.any():
        node = int(np.flatnonzero(uncovered)[0])
        raise ValueError(f"node {grid.coords[node]} is not covered by any region")
    covered = S > 0.0
    dS = 4.0 * np.einsum("pm,pnm->pn", phis[covered] ** 3, dphis[covered])
    out = []
    for i in range(len(bumps)):
        vals = np.zeros(grid.P)
        grads = np.zeros((grid.P, grid.n))
        vals[covered] = phis[covered, i] * S[covered] ** -0.25
        grads[covered] = (
            dphis[covered, :, i] * S[covered, None] ** -0.25
            - 0.25 * phis[covered, i, None] * S[covered, None] ** -1.25 * dS
        )
        out.append(ScalarField(grid, vals, grads))
    return out


# ---------------------------------------------------------------------------
# serialization

def decomposition_to_json(result: DecompositionResult, out_dir: str) -> str:
    """Write primitives.json plus one amplitude CSV per primitive; returns
    the JSON path."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for k, p in enumerate(result.primitives):
        csv_name = f"amplitude_{k:03d}.csv"
        field_to_csv(p.field.grid, p.field.values, os.path.join(out_dir, csv_name))
        entries.append(
            {
                "support_center": [float(v) for v in p.support_center],
                "support_radius": float(p.support_radius),
                "linear_form": [float(v) for v in p.form],
                "rotation": [float(v) for v in p.rotation.ravel()],
                "coefficient_field": csv_name,
            }
        )
    path = os.path.join(out_dir, "primitives.json")
    with open(path, "w") as f:
        json.dump({"max_error": result.max_error, "primitives": entries}, f, indent=1)
    return path


def decomposition_from_json(grid: BallGrid, path: str) -> DecompositionResult:
    """Load a serialized decomposition; amplitude gradients are not stored
    and come back as None."""
    with open(path) as f:
        data = json.load(f)
    base = os.path.dirname(path)
    primitives = []
    for e in data["primitives"]:
        vals = csv_to_field(grid, os.path.join(base, e["coefficient_field"]))
        form = np.asarray(e["linear_form"], dtype=float)
        primitives.append(
            PrimitiveTensor(
                field=ScalarField(grid, vals),
                form=form,
                rotation=np.asarray(e["rotation"], dtype=float).reshape(grid.n, grid.n),
                support_center=np.asarray(e["support_center"], dtype=float),
                support_radius=float(e["support_radius"]),
            )
        )
    return DecompositionResult(
        primitives=primitives,
        residual=None,
        max_error=float(data["max_error"]),
        grid=grid,
    )
