"""Oscillatory embedding stage.

Adds a fast circular oscillation to a free base map so that the pullback
metric gains a^4 in the first coordinate direction, then cancels the error
order by order through corrector fields.  The stage is organised as

  build_profiles      the tilted-circle speed/turning profiles and the
                      inverse phase of their arclength,
  periodic_immersion  closed-form immersions of the n-torus used to steer
                      the oscillation direction,
  build_frames        the projected frame orthogonal to the base jet and the
                      orthonormal oscillation plane (u, v),
  build_u1            the first oscillation field a^2 (alpha1 u + alpha2 v),
  corrector_u2        the second-order corrector pair,
  step_Fk             the generic higher-order step with its two-regime
                      amplitude split,
  substitute          evaluation of the fast variable at the slow coordinate,
  injectivity_margin  separated-pair injectivity of a sampled map.

Every level field is stored as a coefficient of an exact polynomial in the
step parameter eps, so residual orders are algebraic statements checked by
evaluating the same coefficient fields at different eps, never by fitting.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .decompose import smooth_step
from .grids import (
    BallGrid,
    Jet2,
    PeriodicProfile,
    ScalarField,
    periodic_quadrature,
    periodic_ts,
    fourier_eval,
    spectral_antiderivative,
    spectral_derivative,
    sym_index,
    sym_pairs,
)
from .linear import RankDeficiencyError, gram_det, least_norm_solve, project_complement
from .freemaps import FreeMapRecord, free_map_record, freeness_margin, standard_free_map_point

SQ3 = np.sqrt(3.0)

IDENTITY_TOL = 1e-8          # orthogonality / energy identities of the oscillation
ORTHO_TOL = 1e-10            # Gram-Schmidt postconditions
FRAME_CERT_FLOOR = 1e-6      # relative Gram margin for the tilted frame families
STEP_CERT_FLOOR = 1e-10      # relative Gram margin for the split-step row systems
IMMERSION_CERT_FLOOR = 1e-6  # relative Gram margin for torus immersion ranks
SUBSTITUTE_TOL = 1e-9        # agreement of the two residual routes
OSC_FACTOR = 8.0             # grid resolves the fast phase when h <= OSC_FACTOR*eps^2
OSC_MASK_FRAC = 0.2          # relative |a| level below which the 1/a^2 target is zeroed
NEWTON_TOL = 1e-12
NEWTON_MAX = 80
DELTA_LADDER = (0.9, 0.7, 0.5, 0.35, 0.25, 0.18, 0.12, 0.08, 0.05)


# ---------------------------------------------------------------------------
# Profiles


def _alpha_samples(ts: np.ndarray):
    """Closed forms of the two profile components and their t-derivatives."""
    a1 = np.cos(ts) - np.cos(3.0 * ts) / SQ3
    a2 = np.sin(ts) + np.sin(3.0 * ts) / SQ3
    da1 = -np.sin(ts) + SQ3 * np.sin(3.0 * ts)
    da2 = np.cos(ts) + SQ3 * np.cos(3.0 * ts)
    dda1 = -np.cos(ts) + 3.0 * SQ3 * np.cos(3.0 * ts)
    dda2 = -np.sin(ts) - 3.0 * SQ3 * np.sin(3.0 * ts)
    return a1, a2, da1, da2, dda1, dda2


@dataclass
class ProfilePack:
    """Sampled oscillation profiles with speed rho, its antiderivative split
    into mean*t plus a periodic part, and the sampled inverse phase beta."""

    M: int
    alpha1: PeriodicProfile
    alpha2: PeriodicProfile
    d_alpha1: PeriodicProfile
    d_alpha2: PeriodicProfile
    dd_alpha1: PeriodicProfile
    dd_alpha2: PeriodicProfile
    rho: PeriodicProfile
    wronskian: PeriodicProfile
    p_mean: float
    p_periodic: PeriodicProfile
    beta_interval: tuple[float, float]
    beta_ts: np.ndarray
    beta_samples: np.ndarray

    def rho_at(self, t) -> np.ndarray:
        """Oscillation speed; closed form, positive everywhere."""
        t = np.asarray(t, dtype=float)
        return np.sqrt(4.0 + 2.0 * SQ3 * np.cos(4.0 * t))

    def p_at(self, t) -> np.ndarray:
        """Antiderivative of rho with p_at(0) = 0; strictly increasing."""
        t = np.asarray(t, dtype=float)
        per = fourier_eval(self.p_periodic.samples, t)
        return self.p_mean * t + per - self.p_periodic.samples[0]

    def beta_at(self, t):
        """Inverse of p_at, by bracketed Newton.  Accepts any real t."""
        t = np.asarray(t, dtype=float)
        tt = np.atleast_1d(t).astype(float).ravel()
        span = 2.0 * float(np.abs(self.p_periodic.samples).max()) + 1.0
        lo = (tt - span) / self.p_mean
        hi = (tt + span) / self.p_mean
        x = tt / self.p_mean
        for _ in range(NEWTON_MAX):
            r = self.p_at(x) - tt
            if np.all(np.abs(r) <= NEWTON_TOL * (1.0 + np.abs(tt))):
                break
            hi = np.where(r > 0.0, np.minimum(hi, x), hi)
            lo = np.where(r < 0.0, np.maximum(lo, x), lo)
            x = x - r / self.rho_at(x)
            off = (x <= lo) | (x >= hi)
            x = np.where(off, 0.5 * (lo + hi), x)
        else:
            raise RuntimeError("inverse-phase Newton did not converge")
        out = x.reshape(t.shape)
        return out if t.shape else float(out)

    def beta_deriv_at(self, t):
        return 1.0 / self.rho_at(self.beta_at(t))


def build_profiles(M_samples: int = 512, beta_interval=(-10.0, 10.0)) -> ProfilePack:
    """Sample the tilted-circle profiles on M uniform points of one period.

    The speed rho = sqrt(a1'^2 + a2'^2) is positive with min sqrt(4 - 2*sqrt3)
    and the turning a1'a2'' - a2'a1'' stays below 2*sqrt3 - 8 < 0, so the
    oscillation never degenerates and its phase is invertible."""
    M = int(M_samples)
    if M < 64 or (M & (M - 1)):
        raise ValueError("M_samples must be a power of two, >= 64")
    ts = periodic_ts(M)
    a1, a2, da1, da2, dda1, dda2 = _alpha_samples(ts)
    rho = np.sqrt(da1 * da1 + da2 * da2)
    closed = 8.0 * SQ3 * (np.sin(ts) ** 4 + np.cos(ts) ** 4) - 6.0 * SQ3 + 4.0
    if np.abs(rho * rho - closed).max() > 1e-12 * 8.0:
        raise FloatingPointError("speed samples disagree with their closed form")
    wron = da1 * dda2 - da2 * dda1
    if wron.max() > 2.0 * SQ3 - 8.0 + 1e-9:
        raise FloatingPointError("turning profile lost its sign margin")
    p_mean = float(rho.mean())
    p_per = spectral_antiderivative(rho)
    pack = ProfilePack(
        M=M,
        alpha1=PeriodicProfile(M, a1),
        alpha2=PeriodicProfile(M, a2),
        d_alpha1=PeriodicProfile(M, da1),
        d_alpha2=PeriodicProfile(M, da2),
        dd_alpha1=PeriodicProfile(M, dda1),
        dd_alpha2=PeriodicProfile(M, dda2),
        rho=PeriodicProfile(M, rho),
        wronskian=PeriodicProfile(M, wron),
        p_mean=p_mean,
        p_periodic=PeriodicProfile(M, p_per),
        beta_interval=(float(beta_interval[0]), float(beta_interval[1])),
        beta_ts=np.empty(0),
        beta_samples=np.empty(0),
    )
    pack.beta_ts = np.linspace(pack.beta_interval[0], pack.beta_interval[1], 1025)
    pack.beta_samples = pack.beta_at(pack.beta_ts)
    err = np.abs(pack.p_at(pack.beta_samples) - pack.beta_ts)
    if err.max() > 1e-10 * (1.0 + np.abs(pack.beta_ts).max()):
        raise RuntimeError("inverse phase failed its round trip on the working interval")
    return pack


# ---------------------------------------------------------------------------
# Periodic immersions of the torus


def _immersion_eval(x: np.ndarray, eps_levels: tuple):
    """Value, sphere companion and their first derivatives for the recursive
    torus immersion; x has shape (..., m)."""
    m = x.shape[-1]
    c = np.cos(x[..., 0])
    s = np.sin(x[..., 0])
    if m == 1:
        F = np.stack([c, s], axis=-1)
        dF = np.stack([-s, c], axis=-1)[..., None, :]
        return F, F.copy(), dF, dF.copy()
    F0, Fh0, dF0, dFh0 = _immersion_eval(x[..., 1:], eps_levels)
    eps = eps_levels[m - 2]
    ce = c[..., None]
    se = s[..., None]
    F = np.concatenate([eps * ce, F0 + eps * se * Fh0], axis=-1)
    Fh = np.concatenate([ce, se * Fh0], axis=-1)
    d1F = np.concatenate([-eps * se, eps * ce * Fh0], axis=-1)[..., None, :]
    d1Fh = np.concatenate([-se, ce * Fh0], axis=-1)[..., None, :]
    zcol = np.zeros(x.shape[:-1] + (m - 1, 1))
    restF = np.concatenate([zcol, dF0 + eps * se[..., None] * dFh0], axis=-1)
    restFh = np.concatenate([zcol, se[..., None] * dFh0], axis=-1)
    return (
        F,
        Fh,
        np.concatenate([d1F, restF], axis=-2),
        np.concatenate([d1Fh, restFh], axis=-2),
    )


@dataclass(frozen=True)
class PeriodicImmersion:
    """Closed-form immersion of the n-torus into R^{n+1}, 2*pi-periodic in
    every argument, with component l independent of arguments past l."""

    n: int
    eps_levels: tuple
    cert_margin: float

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n:
            raise ValueError(f"points must have {self.n} coordinates")
        return x

    def value(self, x) -> np.ndarray:
        return _immersion_eval(self._check(x), self.eps_levels)[0]

    def hat_value(self, x) -> np.ndarray:
        return _immersion_eval(self._check(x), self.eps_levels)[1]

    def jacobian(self, x) -> np.ndarray:
        """Rows indexed by the derivative axis: (..., n, n+1)."""
        return _immersion_eval(self._check(x), self.eps_levels)[2]

    def hat_jacobian(self, x) -> np.ndarray:
        return _immersion_eval(self._check(x), self.eps_levels)[3]


def _rel_margin(rows: np.ndarray) -> np.ndarray:
    """Gram determinant normalised by the product of squared row norms."""
    g = gram_det(rows)
    norms = np.sum(rows * rows, axis=-1)
    denom = np.prod(norms, axis=-1)
    g = np.atleast_1d(np.asarray(g, dtype=float))
    denom = np.atleast_1d(np.asarray(denom, dtype=float))
    out = np.zeros_like(g)
    ok = denom > 0.0
    out[ok] = g[ok] / denom[ok]
    return out


def _immersion_lattice(m: int) -> np.ndarray:
    side = periodic_ts(8)
    mesh = np.meshgrid(*([side] * m), indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=-1)


def periodic_immersion(n: int) -> PeriodicImmersion:
    """Construct the level-n torus immersion, fixing the first mixing
    amplitude at 1/2 and choosing later ones by margin bisection."""
    n = int(n)
    if n < 1:
        raise ValueError("n must be >= 1")
    eps_levels: list[float] = []
    cert = 1.0
    for m in range(2, n + 1):
        lattice = _immersion_lattice(m)

        def margin(cand: float) -> float:
            rows = _immersion_eval(lattice, tuple(eps_levels) + (cand,))[2]
            return float(_rel_margin(rows).min())

        if m == 2:
            # fixed amplitude pins the classical half-tube around the circle
            got = margin(0.5)
            if got < IMMERSION_CERT_FLOOR:
                raise RuntimeError("level-2 immersion failed rank certification")
            eps_levels.append(0.5)
            cert = min(cert, got)
            continue
        cand = 0.5
        tries = 0
        while margin(cand) < IMMERSION_CERT_FLOOR:
            cand *= 0.5
            tries += 1
            if tries > 50:
                raise RuntimeError(
                    f"immersion level {m} could not be certified by margin bisection"
                )
        if tries:
            # enlarge back toward the last failing amplitude while certified
            low, high = cand, 2.0 * cand
            for _ in range(8):
                mid = 0.5 * (low + high)
                if margin(mid) >= IMMERSION_CERT_FLOOR:
                    low = mid
                else:
                    high = mid
            cand = low
        eps_levels.append(cand)
        cert = min(cert, margin(cand))
    return PeriodicImmersion(n=n, eps_levels=tuple(eps_levels), cert_margin=cert)


# ---------------------------------------------------------------------------
# Frames


@dataclass
class FrameFields:
    """Projected frame orthogonal to the base jet directions, with the
    orthonormalised oscillation plane (u, v) and its certification margin."""

    grid: BallGrid
    e: np.ndarray            # (P, n+5, q)
    u: np.ndarray            # (P, q), unit
    v: np.ndarray            # (P, q), unit, orthogonal to u
    f_ref: np.ndarray        # (5, q) reference complement directions
    eps_frame: float
    cert_margin: float
    proj_rows: np.ndarray    # (P, nL, q) rows spanning the projected-out space


def _base_span_rows(jet: Jet2) -> np.ndarray:
    """First derivatives plus second derivatives not involving the first axis."""
    n = jet.grid.n
    rows = [jet.d1[:, i] for i in range(n)]
    rows += [jet.second(i, j) for i, j in sym_pairs(n) if i >= 1]
    return np.stack(rows, axis=1)


def padded_standard_map(grid: BallGrid, extra: int = 5) -> FreeMapRecord:
    """Coordinates-and-products free map padded with zero coordinates so a
    frame of extra reference directions fits alongside the jet span."""
    base = standard_free_map_point(grid.n, grid.coords)
    values = np.concatenate([base, np.zeros((grid.P, extra))], axis=1)
    return free_map_record(grid, values)


def build_frames(record: FreeMapRecord, eps_frame: float) -> FrameFields:
    """Frame fields for the oscillation stage.

    The first n frame fields are projections of second derivatives of the
    base map, the last five are projected reference directions; u and v mix
    the frame through the torus immersion evaluated at eps_frame^{-2} x and
    are returned orthonormalised.  A lattice of tilted families
    {u, v, e_i + s P(a du_i + b dv_i)} is certified for linear independence."""
    grid = record.grid
    n, q = grid.n, record.q
    if q < n * (n + 3) // 2 + 5:
        raise ValueError(f"frame construction needs q >= {n * (n + 3) // 2 + 5}")
    if not eps_frame > 0.0:
        raise ValueError("eps_frame must be positive")
    jet = record.jet
    rows_L = _base_span_rows(jet)
    sel = grid.nonext_mask
    if float(_rel_margin(rows_L)[sel].min()) <= 1e-12:
        raise ValueError("base jet directions are degenerate; cannot project a frame")

    def assemble(f_ref: np.ndarray) -> np.ndarray:
        # exterior nodes carry zero jets; project only where the span exists
        # and keep the raw direction outside (those nodes never host fields)
        e = np.empty((grid.P, n + 5, q))
        e[:, 0] = 0.5 * jet.second(0, 0)
        e[sel, 0] = 0.5 * project_complement(jet.second(0, 0)[sel], rows_L[sel])
        for i in range(1, n):
            e[:, i] = jet.second(0, i)
            e[sel, i] = project_complement(jet.second(0, i)[sel], rows_L[sel])
        for j in range(5):
            ref = np.broadcast_to(f_ref[j], (grid.P, q))
            e[:, n + j] = ref
            e[sel, n + j] = project_complement(ref[sel], rows_L[sel])
        return e

    f_ref = np.eye(q)[q - 5:]
    e = assemble(f_ref)
    if float(_rel_margin(e)[sel].min()) <= 1e-10:
        rng = np.random.default_rng(20240)
        f_ref = np.linalg.qr(rng.standard_normal((q, 5)))[0].T
        e = assemble(f_ref)
        if float(_rel_margin(e)[sel].min()) <= 1e-10:
            raise ValueError("could not find independent reference directions")

    imm = periodic_immersion(n)
    phases = imm.value(grid.coords / eps_frame**2)        # (P, n+1)
    u_raw = e[:, n + 3].copy()
    v_raw = e[:, n + 4].copy()
    for l in range(1, n + 2):
        u_raw += eps_frame * phases[:, l - 1, None] * e[:, l]
        v_raw += eps_frame * phases[:, l - 1, None] * e[:, l + 1]
    u_hat = u_raw / np.linalg.norm(u_raw, axis=1, keepdims=True)
    v_mid = v_raw - np.sum(u_hat * v_raw, axis=1, keepdims=True) * u_hat
    v_hat = v_mid / np.linalg.norm(v_mid, axis=1, keepdims=True)
    ortho = max(
        float(np.abs(np.sum(u_hat * u_hat, axis=1) - 1.0).max()),
        float(np.abs(np.sum(v_hat * v_hat, axis=1) - 1.0).max()),
        float(np.abs(np.sum(u_hat * v_hat, axis=1)).max()),
    )
    if ortho > ORTHO_TOL:
        raise FloatingPointError("oscillation plane failed orthonormalisation")

    # certify on interior nodes: their difference stencils never read the
    # unprojected exterior frame values, and the stage solves stay interior
    du = np.stack([grid.apply_op(grid.d1(i), u_hat) for i in range(n)], axis=1)
    dv = np.stack([grid.apply_op(grid.d1(i), v_hat) for i in range(n)], axis=1)
    core = grid.interior_mask
    cert = np.inf
    for s in (0.0, 0.5, -0.5, 1.0, -1.0, 2.0, -2.0):
        angles = [0.0] if s == 0.0 else (2.0 * np.pi * np.arange(8) / 8.0)
        for th in angles:
            a_c, b_c = np.cos(th), np.sin(th)
            fam = [u_hat[core], v_hat[core]]
            for i in range(n):
                tilt = project_complement(
                    a_c * du[core, i] + b_c * dv[core, i], rows_L[core]
                )
                fam.append(e[core, i] + s * tilt)
            got = float(_rel_margin(np.stack(fam, axis=1)).min())
            cert = min(cert, got)
    if cert < FRAME_CERT_FLOOR:
        raise RuntimeError(
            f"tilted frame families not certified at eps_frame={eps_frame:g} "
            f"(margin {cert:.3e}); try a smaller eps_frame"
        )
    return FrameFields(
        grid=grid,
        e=e,
        u=u_hat,
        v=v_hat,
        f_ref=np.asarray(f_ref, dtype=float),
        eps_frame=float(eps_frame),
        cert_margin=cert,
        proj_rows=rows_L,
    )


# ---------------------------------------------------------------------------
# Step state and the first oscillation field


@dataclass
class StepState:
    """All fields of the oscillatory stage on one grid.

    Level m coefficient fields live in Gs[m] with shape (M, P, q); their
    x-derivatives in dGs[m] (M, P, n, q) and t-derivatives in Ts[m].  The
    map at step parameter eps is values0 + sum_m eps^m Gs[m]."""

    record: FreeMapRecord
    a: ScalarField
    a_grad: np.ndarray         # (P, n)
    profiles: ProfilePack
    frames: FrameFields
    A: np.ndarray              # (P, q)  a^2 u
    B: np.ndarray              # (P, q)  a^2 v
    dA: np.ndarray             # (P, n, q)
    dB: np.ndarray             # (P, n, q)
    K_mask: np.ndarray         # (P,) bool, fixed support collar
    amax: float
    Gs: dict = dc_field(default_factory=dict)
    dGs: dict = dc_field(default_factory=dict)
    Ts: dict = dc_field(default_factory=dict)
    h2: np.ndarray | None = None   # (M, P, n) antiderivative fields of the u2 stage
    k: int = 1
    step_logs: list = dc_field(default_factory=list)

    @property
    def q(self) -> int:
        return self.record.q


def _shifted(arr: np.ndarray, axis: int, s: int) -> np.ndarray:
    """arr sampled at index+s along axis, zero beyond the ends."""
    out = np.zeros_like(arr)
    src = [slice(None)] * arr.ndim
    dst = [slice(None)] * arr.ndim
    if s > 0:
        src[axis] = slice(s, None)
        dst[axis] = slice(None, -s)
    elif s < 0:
        src[axis] = slice(None, s)
        dst[axis] = slice(-s, None)
    out[tuple(dst)] = arr[tuple(src)]
    return out


def _fd_x(grid: BallGrid, vals: np.ndarray, axis: int) -> np.ndarray:
    """Fourth-order central x-derivative of t-stacked fields (M, P, ...).

    Valid only for fields supported strictly inside the lattice box (all
    corrector-stage fields are); the zero fill beyond the box is then exact.
    The high order keeps the discrete product-rule defect of the residual
    bookkeeping at O(h^4)."""
    M = vals.shape[0]
    n, N = grid.n, grid.N
    arr = vals.reshape((M,) + (N,) * n + vals.shape[2:])
    ax = 1 + axis
    out = (
        _shifted(arr, ax, -2)
        - 8.0 * _shifted(arr, ax, -1)
        + 8.0 * _shifted(arr, ax, 1)
        - _shifted(arr, ax, 2)
    ) / (12.0 * grid.h)
    return out.reshape(vals.shape)


def _dilate_mask(grid: BallGrid, mask: np.ndarray, steps: int) -> np.ndarray:
    """Nodes within steps*h (euclidean) of the mask."""
    if not mask.any():
        return np.zeros(grid.P, dtype=bool)
    src = grid.coords[mask]
    reach = (steps * grid.h) ** 2 * (1.0 + 1e-12)
    out = np.zeros(grid.P, dtype=bool)
    chunk = max(1, 2_000_000 // max(src.shape[0], 1))
    for start in range(0, grid.P, chunk):
        block = grid.coords[start:start + chunk]
        d2 = ((block[:, None, :] - src[None, :, :]) ** 2).sum(axis=2)
        out[start:start + chunk] = d2.min(axis=1) <= reach
    return out


def build_u1(
    record: FreeMapRecord,
    a: ScalarField,
    frames: FrameFields,
    profiles: ProfilePack,
    collar_steps: int = 4,
) -> StepState:
    """First oscillation field u1 = a^2 (alpha1 u + alpha2 v).

    collar_steps sizes the working region K around supp(a).  Each x-derivative
    of a corrector field widens its support by two lattice steps, so the
    default of 4 covers residual orders through k+1 = 4; chains that build the
    k = 4 step need 6.

    Verifies the stage identities: u1 and its t-derivative are orthogonal to
    the base first derivatives and to second derivatives not involving the
    first axis; |d_t u1|^2 = a^4 rho^2; and the t-averages of the mixing
    products vanish nodewise.  Violations raise, naming the frame as the
    culprit, since every identity is algebraic once the frame is right."""
    grid = record.grid
    if a.grid is not grid and (a.grid.n != grid.n or a.grid.N != grid.N):
        raise ValueError("cutoff and map live on different grids")
    if np.any(a.values[~grid.nonext_mask] != 0.0):
        raise ValueError("cutoff must vanish outside the unit ball")
    n, q = grid.n, record.q
    a_vals = a.values
    if a.grad is not None:
        a_grad = np.asarray(a.grad, dtype=float)
    else:
        a_grad = np.stack(
            [grid.apply_op(grid.d1(i), a_vals) for i in range(n)], axis=1
        )
    u_hat, v_hat = frames.u, frames.v
    a2 = a_vals * a_vals
    A = a2[:, None] * u_hat
    B = a2[:, None] * v_hat
    du = np.stack([grid.apply_op(grid.d1(i), u_hat) for i in range(n)], axis=1)
    dv = np.stack([grid.apply_op(grid.d1(i), v_hat) for i in range(n)], axis=1)
    two_a_da = 2.0 * a_vals[:, None] * a_grad    # (P, n)
    dA = two_a_da[:, :, None] * u_hat[:, None, :] + a2[:, None, None] * du
    dB = two_a_da[:, :, None] * v_hat[:, None, :] + a2[:, None, None] * dv

    jet = record.jet
    scale = 1.0 + float(np.abs(A).max(initial=0.0) + np.abs(B).max(initial=0.0))
    worst = 0.0
    for W in (A, B):
        worst = max(worst, float(np.abs(np.einsum("piq,pq->pi", jet.d1, W)).max()))
        for i, j in sym_pairs(n):
            if i >= 1:
                worst = max(worst, float(np.abs(np.sum(jet.second(i, j) * W, axis=1)).max()))
    if worst > IDENTITY_TOL * scale:
        raise FloatingPointError(
            f"frame construction bug: base-jet orthogonality off by {worst:.3e}"
        )
    a4 = a2 * a2
    en_scale = 1.0 + float(a4.max(initial=0.0))
    energy = max(
        float(np.abs(np.sum(A * A, axis=1) - a4).max()),
        float(np.abs(np.sum(B * B, axis=1) - a4).max()),
        float(np.abs(np.sum(A * B, axis=1)).max()),
    )
    if energy > IDENTITY_TOL * en_scale:
        raise FloatingPointError(
            f"frame construction bug: oscillation energy off by {energy:.3e}"
        )

    # t-averages: profile factors integrate to zero exactly on these grids,
    # so the nodewise averages reduce to profile quadratures times bounded dots
    a1s, a2s = profiles.alpha1.samples, profiles.alpha2.samples
    da1s, da2s = profiles.d_alpha1.samples, profiles.d_alpha2.samples
    rhos = profiles.rho.samples
    I_da = np.array(
        [[periodic_quadrature(dr * vc) for vc in (a1s, a2s)] for dr in (da1s, da2s)]
    )
    I_rho = np.array([periodic_quadrature(vc * rhos) for vc in (a1s, a2s)])
    dots = np.empty((2, 2, grid.P, n))
    for r, R in enumerate((A, B)):
        for c, C in enumerate((dA, dB)):
            dots[r, c] = np.einsum("pq,piq->pi", R, C)
    mix = np.einsum("rc,rcpi->pi", I_da, dots)
    worst_mix = float(np.abs(mix).max(initial=0.0))
    base_dots = np.empty((2, grid.P, n, n))
    for c, C in enumerate((dA, dB)):
        base_dots[c] = np.einsum("piq,pjq->pij", jet.d1, C)
    flow = np.einsum("c,cpij->pij", I_rho, base_dots)
    worst_flow = float(np.abs(flow).max(initial=0.0))
    mix_scale = 1.0 + float(np.abs(dots).max(initial=0.0))
    flow_scale = 1.0 + float(np.abs(base_dots).max(initial=0.0))
    if worst_mix > IDENTITY_TOL * mix_scale or worst_flow > IDENTITY_TOL * flow_scale:
        raise FloatingPointError(
            "frame construction bug: oscillation averages do not vanish "
            f"({worst_mix:.3e}, {worst_flow:.3e})"
        )

    K_mask = _dilate_mask(grid, np.abs(a_vals) > 0.0, collar_steps)
    if np.any(K_mask & ~grid.interior_mask):
        raise ValueError(
            "support collar reaches the unit-ball boundary; "
            "shrink the cutoff or the collar"
        )
    G1 = a1s[:, None, None] * A[None] + a2s[:, None, None] * B[None]
    dG1 = a1s[:, None, None, None] * dA[None] + a2s[:, None, None, None] * dB[None]
    T1 = da1s[:, None, None] * A[None] + da2s[:, None, None] * B[None]
    state = StepState(
        record=record,
        a=a,
        a_grad=a_grad,
        profiles=profiles,
        frames=frames,
        A=A,
        B=B,
        dA=dA,
        dB=dB,
        K_mask=K_mask,
        amax=float(np.abs(a_vals).max(initial=0.0)),
    )
    state.Gs[1] = G1
    state.dGs[1] = dG1
    state.Ts[1] = T1
    return state


# ---------------------------------------------------------------------------
# Second-order corrector


def _register_level(state: StepState, m: int, vals: np.ndarray) -> None:
    """Add a coefficient field into level m, keeping derivative caches exact."""
    grid = state.record.grid
    dvals = np.stack([_fd_x(grid, vals, i) for i in range(grid.n)], axis=2)
    tvals = spectral_derivative(vals, axis=0)
    if m in state.Gs:
        state.Gs[m] = state.Gs[m] + vals
        state.dGs[m] = state.dGs[m] + dvals
        state.Ts[m] = state.Ts[m] + tvals
    else:
        state.Gs[m] = vals
        state.dGs[m] = dvals
        state.Ts[m] = tvals


def _solve_per_t(rows_fn, rhs_fn, M: int, sel: np.ndarray, P: int, q: int,
                 label: str) -> np.ndarray:
    """Solve a nodewise least-norm system for every t-index over node set sel.

    rows_fn(m) -> (S, R, q), rhs_fn(m) -> (S, R).  Returns (M, P, q) with
    zeros off sel.  Rank loss raises with the (t, node) location."""
    out = np.zeros((M, P, q))
    idx = np.flatnonzero(sel)
    if idx.size == 0:
        return out
    for m in range(M):
        rows = rows_fn(m)
        rel = _rel_margin(rows)
        if float(rel.min()) < STEP_CERT_FLOOR:
            bad = int(idx[int(np.argmin(rel))])
            raise RankDeficiencyError(
                f"{label} rows lost rank at t-index {m}, node {bad} "
                f"(relative margin {float(rel.min()):.3e}) despite frame certification",
                batch_index=(m, bad),
                rel_det=float(rel.min()),
            )
        try:
            out[m, idx] = least_norm_solve(rows, rhs_fn(m))
        except RankDeficiencyError as exc:
            where = idx[exc.batch_index[0]] if exc.batch_index else None
            raise RankDeficiencyError(
                f"{label} solve lost rank at t-index {m}, node {where}",
                batch_index=(m, where),
                rel_det=exc.rel_det,
            ) from exc
    return out


def corrector_u2(state: StepState):
    """Second-order corrector pair (u2-hat, v2-hat).

    The t-antiderivative fields h_i of the mixing terms are integrated
    spectrally after asserting their zero t-average; u2-hat solves the full
    second-order row system, v2-hat the follow-up system whose last right
    side carries |d_t u2-hat|^2 / (2 a^2) with masked division."""
    if state.k != 1:
        raise ValueError("corrector_u2 must run on a freshly built first-order state")
    grid = state.record.grid
    n, q, P = grid.n, state.q, grid.P
    pro = state.profiles
    M = pro.M
    jet = state.record.jet
    a1s, a2s = pro.alpha1.samples, pro.alpha2.samples
    da1s, da2s = pro.d_alpha1.samples, pro.d_alpha2.samples
    dda1s, dda2s = pro.dd_alpha1.samples, pro.dd_alpha2.samples
    rhos = pro.rho.samples
    A, B, dA, dB = state.A, state.B, state.dA, state.dB
    u_hat, v_hat = state.frames.u, state.frames.v

    du1 = state.dGs[1]                                   # (M, P, n, q)
    dtu1 = state.Ts[1]                                   # (M, P, q)
    d1F0 = jet.d1                                        # (P, n, q)

    rhs_t = np.empty((M, P, n))
    base_dot = np.einsum("piq,mpjq->mpij", d1F0, du1)    # d_iF0 . d_ju1
    mix_dot = np.einsum("mpq,mpiq->mpi", dtu1, du1)      # d_tu1 . d_iu1
    rho_col = rhos[:, None]
    rhs_t[:, :, 0] = -rho_col * base_dot[:, :, 0, 0] - mix_dot[:, :, 0]
    for i in range(1, n):
        rhs_t[:, :, i] = (
            -rho_col * base_dot[:, :, 0, i]
            - rho_col * base_dot[:, :, i, 0]
            - mix_dot[:, :, i]
        )
    means = rhs_t.mean(axis=0)
    mean_scale = 1.0 + float(np.abs(rhs_t).max(initial=0.0))
    if float(np.abs(means).max(initial=0.0)) > IDENTITY_TOL * mean_scale:
        raise FloatingPointError(
            "frame construction bug: mixing terms have nonzero t-average "
            f"({float(np.abs(means).max()):.3e})"
        )
    h = spectral_antiderivative(rhs_t, axis=0)           # (M, P, n)
    dh = np.stack([_fd_x(grid, h, i) for i in range(n)], axis=2)  # (M, P, n_axis, n_field)

    sel = state.K_mask
    idx = np.flatnonzero(sel)
    pairs = sym_pairs(n)

    def u_rows(m: int) -> np.ndarray:
        rho = rhos[m]
        rows = [d1F0[idx, 0] + dtu1[m, idx] / rho]
        rows += [d1F0[idx, i] for i in range(1, n)]
        dt_d1 = da1s[m] * dA[idx] + da2s[m] * dB[idx]    # (S, n, q)
        rows.append(jet.second(0, 0)[idx] + 2.0 / rho * dt_d1[:, 0])
        rows += [jet.second(0, i)[idx] + dt_d1[:, i] / rho for i in range(1, n)]
        rows += [jet.second(i, j)[idx] for i, j in pairs if i >= 1]
        rows.append(da1s[m] * u_hat[idx] + da2s[m] * v_hat[idx])
        rows.append(dda1s[m] * u_hat[idx] + dda2s[m] * v_hat[idx])
        return np.stack(rows, axis=1)

    def u_rhs(m: int) -> np.ndarray:
        du1_m = du1[m, idx]                              # (S, n, q)
        cols = [h[m, idx, 0]]
        cols += [h[m, idx, i] for i in range(1, n)]
        cols.append(0.5 * (np.sum(du1_m[:, 0] ** 2, axis=1) + 2.0 * dh[m, idx, 0, 0]))
        cols += [
            0.5 * (
                np.sum(du1_m[:, 0] * du1_m[:, i], axis=1)
                + dh[m, idx, 0, i]
                + dh[m, idx, i, 0]
            )
            for i in range(1, n)
        ]
        cols += [
            0.5 * (
                np.sum(du1_m[:, i] * du1_m[:, j], axis=1)
                + dh[m, idx, i, j]
                + dh[m, idx, j, i]
            )
            for i, j in pairs
            if i >= 1
        ]
        cols.append(np.zeros(idx.size))
        cols.append(np.zeros(idx.size))
        return np.stack(cols, axis=1)

    u2_hat = _solve_per_t(u_rows, u_rhs, M, sel, P, q, "second-order corrector")

    # The quotient |d_t u2|^2 / (2a^2) is only discretely trustworthy where
    # a still dominates the finite-difference tail of u2.  Near the support
    # edge the tail scales with a two steps inward, not locally, and dividing
    # it by a vanishing a^2 manufactures a spike that feeds straight into the
    # next residual order.  Zeroing the target there costs the residual only
    # |d_t u2|^2 at those nodes, quadratic in the (small) tail.
    dt_u2 = spectral_derivative(u2_hat, axis=0)
    floor = (OSC_MASK_FRAC * state.amax) ** 2
    a2 = state.a.values ** 2
    osc_rhs = np.zeros((M, P))
    live = a2 > floor
    osc_rhs[:, live] = np.sum(dt_u2[:, live] ** 2, axis=2) / (2.0 * a2[live])

    def v_rows(m: int) -> np.ndarray:
        rho = rhos[m]
        rows = [d1F0[idx, 0] + dtu1[m, idx] / rho]
        rows += [d1F0[idx, i] for i in range(1, n)]
        rows.append(da1s[m] * u_hat[idx] + da2s[m] * v_hat[idx])
        rows.append(dda1s[m] * u_hat[idx] + dda2s[m] * v_hat[idx])
        return np.stack(rows, axis=1)

    def v_rhs(m: int) -> np.ndarray:
        du1_m = du1[m, idx]
        u2_m = u2_hat[m, idx]
        cols = [-np.sum(du1_m[:, 0] * u2_m, axis=1)]
        cols += [-np.sum(du1_m[:, i] * u2_m, axis=1) for i in range(1, n)]
        cols.append(np.zeros(idx.size))
        cols.append(osc_rhs[m, idx])
        return np.stack(cols, axis=1)

    v2_hat = _solve_per_t(v_rows, v_rhs, M, sel, P, q, "corrector follow-up")

    _register_level(state, 2, u2_hat)
    _register_level(state, 3, v2_hat)
    state.h2 = h
    state.k = 2
    return u2_hat, v2_hat


# ---------------------------------------------------------------------------
# Residual bookkeeping


def _level_terms(state: StepState, upto: int):
    """D1[m] = d_1 G_m + rho^{-1} d_t G_{m+1} and Y[i][m] = d_i G_m for
    m = 0..upto; level 0 is the t-independent base map."""
    grid = state.record.grid
    n = grid.n
    M = state.profiles.M
    rho = state.profiles.rho.samples[:, None, None]
    jet = state.record.jet
    D1 = {}
    Y = {i: {} for i in range(n)}
    for m in range(upto + 1):
        if m == 0:
            x0 = np.broadcast_to(jet.d1[None, :, 0, :], (M, grid.P, state.q))
        elif m in state.dGs:
            x0 = state.dGs[m][:, :, 0]
        else:
            x0 = None
        t_next = state.Ts.get(m + 1)
        if x0 is None and t_next is None:
            continue
        term = 0.0 if x0 is None else x0
        if t_next is not None:
            term = term + t_next / rho
        D1[m] = term
        for i in range(n):
            if m == 0:
                Y[i][m] = np.broadcast_to(jet.d1[None, :, i, :], (M, grid.P, state.q))
            elif m in state.dGs:
                Y[i][m] = state.dGs[m][:, :, i]
    return D1, Y


def _metric_base(state: StepState) -> np.ndarray:
    """Target first-order products: base metric plus a^4 on the (1,1) slot.

    Uses the same elementwise-product-then-sum reduction as the residual
    routes so a vanishing cutoff yields bitwise-zero defects."""
    jet = state.record.jet
    n = state.record.grid.n
    nn = n * (n + 1) // 2
    out = np.empty((state.record.grid.P, nn))
    for k, (i, j) in enumerate(sym_pairs(n)):
        out[:, k] = np.sum(jet.d1[:, i] * jet.d1[:, j], axis=1)
    out[:, sym_index(0, 0, n)] += state.a.values ** 4
    return out


def residual_coefficients(state: StepState, s_max: int | None = None) -> np.ndarray:
    """Exact eps-polynomial coefficients of the metric defect, shape
    (s_max+1, M, P, nn).  Coefficients 1..k vanish to solve tolerance; the
    entry at k+1 is the next step's target."""
    n = state.record.grid.n
    if s_max is None:
        s_max = state.k + 1
    top = max([0] + list(state.Gs.keys()))
    D1, Y = _level_terms(state, top)
    M = state.profiles.M
    P = state.record.grid.P
    nn = n * (n + 1) // 2
    base = _metric_base(state)
    out = np.zeros((s_max + 1, M, P, nn))
    for s in range(s_max + 1):
        acc = np.zeros((M, P, nn))
        for m in range(s + 1):
            mp = s - m
            for k, (i, j) in enumerate(sym_pairs(n)):
                if i == 0 and j == 0:
                    if m in D1 and mp in D1:
                        acc[:, :, k] += np.sum(D1[m] * D1[mp], axis=2)
                elif i == 0:
                    if m in D1 and mp in Y[j]:
                        acc[:, :, k] += np.sum(D1[m] * Y[j][mp], axis=2)
                else:
                    if m in Y[i] and mp in Y[j]:
                        acc[:, :, k] += np.sum(Y[i][m] * Y[j][mp], axis=2)
        if s == 0:
            acc -= base[None]
        out[s] = acc
    return out


@dataclass
class ResidualReport:
    """Map values and scaled metric defect at one step parameter."""

    eps: float
    order: int
    values: np.ndarray        # (M, P, q)
    residual: np.ndarray      # (M, P, nn), defect / eps^order
    sup: float


def evaluate_residual(state: StepState, eps: float, k_use: int | None = None) -> ResidualReport:
    """Assemble the map at eps and divide its metric defect by eps^{k+1}."""
    if k_use is None:
        k_use = state.k
    if not 0.0 < eps <= 1.0:
        raise ValueError("eps must lie in (0, 1]")
    grid = state.record.grid
    n = grid.n
    top = k_use + 1
    D1, Y = _level_terms(state, top)
    M = state.profiles.M
    D = np.zeros((M, grid.P, state.q))
    Yi = [np.zeros((M, grid.P, state.q)) for _ in range(n)]
    values = np.broadcast_to(state.record.values[None], (M, grid.P, state.q)).copy()
    for m in range(top + 1):
        if m in D1:
            D += eps**m * D1[m]
        for i in range(n):
            if m in Y[i]:
                Yi[i] += eps**m * Y[i][m]
        if m >= 1 and m in state.Gs:
            values += eps**m * state.Gs[m]
    base = _metric_base(state)
    nn = n * (n + 1) // 2
    res = np.empty((M, grid.P, nn))
    for k, (i, j) in enumerate(sym_pairs(n)):
        if i == 0 and j == 0:
            res[:, :, k] = np.sum(D * D, axis=2)
        elif i == 0:
            res[:, :, k] = np.sum(D * Yi[j], axis=2)
        else:
            res[:, :, k] = np.sum(Yi[i] * Yi[j], axis=2)
    res -= base[None]
    res /= eps ** (k_use + 1)
    return ResidualReport(
        eps=float(eps),
        order=k_use + 1,
        values=values,
        residual=res,
        sup=float(np.abs(res).max()),
    )


def step_F2(state: StepState, eps: float) -> ResidualReport:
    """Map and order-3 scaled defect of the two-level construction."""
    if state.k < 2:
        raise ValueError("second-order corrector not built yet")
    rep = evaluate_residual(state, eps, k_use=2)
    outside = rep.residual[:, ~state.K_mask]
    if outside.size and float(np.abs(outside).max()) > 1e-10 * (1.0 + rep.sup):
        raise FloatingPointError("residual leaked outside the support collar")
    return rep


# ---------------------------------------------------------------------------
# Generic higher-order step


@dataclass
class StepKReport:
    """Diagnostics of one higher-order step."""

    k_built: int
    delta: float
    h_sup: float
    nodes_low: int
    nodes_high: int
    tried_deltas: tuple


def step_Fk(state: StepState, k: int) -> StepKReport:
    """One induction step: extract the next defect coefficient, split it by
    amplitude, solve the two regime systems and push the map one order up.

    The low regime keeps rows that stay independent where the cutoff
    vanishes; the high regime swaps in oscillation rows scaled by a^2 and is
    solved only where |a| > delta/2.  delta walks down a fixed ladder until
    both regimes certify their Gram margins."""
    if k < 2:
        raise ValueError("higher-order steps start at k = 2")
    if k != state.k:
        raise ValueError(f"state is at order {state.k}, cannot step k={k}")
    grid = state.record.grid
    n, q, P = grid.n, state.q, grid.P
    pro = state.profiles
    M = pro.M
    jet = state.record.jet
    a1s, a2s = pro.alpha1.samples, pro.alpha2.samples
    da1s, da2s = pro.d_alpha1.samples, pro.d_alpha2.samples
    dda1s, dda2s = pro.dd_alpha1.samples, pro.dd_alpha2.samples
    rhos = pro.rho.samples
    A, B, dA, dB = state.A, state.B, state.dA, state.dB
    u_hat, v_hat = state.frames.u, state.frames.v
    dtu1 = state.Ts[1]
    d1F0 = jet.d1
    pairs = sym_pairs(n)

    h = residual_coefficients(state, s_max=k + 1)[k + 1]      # (M, P, nn)
    h_sup = float(np.abs(h).max(initial=0.0))
    if h_sup == 0.0:
        _register_level(state, k + 1, np.zeros((M, P, q)))
        _register_level(state, k + 2, np.zeros((M, P, q)))
        state.k = k + 1
        report = StepKReport(k + 1, 0.0, 0.0, 0, 0, ())
        state.step_logs.append(report)
        return report

    # rows shared by both regimes
    dt_u2 = state.Ts[2]
    corr = spectral_derivative(dt_u2 / rhos[:, None, None], axis=0) / rhos[:, None, None]

    def shared_slices(m: int, idx: np.ndarray):
        rho = rhos[m]
        row_d1 = d1F0[idx, 0] + dtu1[m, idx] / rho
        dt_d1 = da1s[m] * dA[idx] + da2s[m] * dB[idx]
        row_11 = jet.second(0, 0)[idx] + 2.0 / rho * dt_d1[:, 0] + corr[m, idx]
        mixed = [jet.second(0, i)[idx] + dt_d1[:, i] / rho for i in range(1, n)]
        dtv1 = da1s[m] * u_hat[idx] + da2s[m] * v_hat[idx]
        dt2v1 = dda1s[m] * u_hat[idx] + dda2s[m] * v_hat[idx]
        du1_m = a1s[m] * dA[idx] + a2s[m] * dB[idx]
        d11 = du1_m[:, 0] + dt_u2[m, idx] / rho
        return row_d1, row_11, mixed, dtv1, dt2v1, du1_m, d11

    def solve_regime(phi: np.ndarray, sel: np.ndarray, wide: bool, dnm: str):
        idx = np.flatnonzero(sel)
        hsel = phi[None, :, None] * h

        def uh_rows(m: int) -> np.ndarray:
            row_d1, row_11, mixed, dtv1, dt2v1, _, _ = shared_slices(m, idx)
            rows = [d1F0[idx, i] for i in range(1, n)]
            rows.append(row_d1)
            rows += [jet.second(i, j)[idx] for i, j in pairs if i >= 1]
            rows += mixed
            if wide:
                rows.append(dda1s[m] * A[idx] + dda2s[m] * B[idx])
                rows.append(dtv1)
            else:
                rows.append(row_11)
                rows.append(dtv1)
                rows.append(dt2v1)
            return np.stack(rows, axis=1)

        def uh_rhs(m: int) -> np.ndarray:
            cols = [np.zeros(idx.size) for _ in range(n)]
            cols += [
                0.5 * hsel[m, idx, sym_index(i, j, n)] for i, j in pairs if i >= 1
            ]
            cols += [0.5 * hsel[m, idx, sym_index(0, i, n)] for i in range(1, n)]
            if wide:
                cols.append(np.zeros(idx.size))
                cols.append(np.zeros(idx.size))
            else:
                cols.append(0.5 * hsel[m, idx, sym_index(0, 0, n)])
                cols.append(np.zeros(idx.size))
                cols.append(np.zeros(idx.size))
            return np.stack(cols, axis=1)

        u_new = _solve_per_t(uh_rows, uh_rhs, M, sel, P, q, f"order-{k + 1} {dnm}")

        def vh_rows(m: int) -> np.ndarray:
            row_d1, row_11, _, dtv1, dt2v1, _, _ = shared_slices(m, idx)
            rows = [d1F0[idx, i] for i in range(1, n)]
            rows.append(row_d1)
            if wide:
                rho = rhos[m]
                dt2u1 = dda1s[m] * A[idx] + dda2s[m] * B[idx]
                rows.append(dt2u1 / rho**2)
                rows.append(dtv1)
            else:
                rows.append(dtv1)
                rows.append(dt2v1)
            return np.stack(rows, axis=1)

        def vh_rhs(m: int) -> np.ndarray:
            row_d1, row_11, _, _, _, du1_m, d11 = shared_slices(m, idx)
            un = u_new[m, idx]
            cols = [-np.sum(du1_m[:, i] * un, axis=1) for i in range(1, n)]
            cols.append(-np.sum(d11 * un, axis=1))
            if wide:
                cols.append(
                    0.5 * hsel[m, idx, sym_index(0, 0, n)]
                    - np.sum(row_11 * un, axis=1)
                )
                cols.append(np.zeros(idx.size))
            else:
                cols.append(np.zeros(idx.size))
                cols.append(np.zeros(idx.size))
            return np.stack(cols, axis=1)

        v_new = _solve_per_t(vh_rows, vh_rhs, M, sel, P, q, f"order-{k + 1} {dnm} follow-up")
        return u_new, v_new

    a_abs = np.abs(state.a.values)
    tried = []
    last_err: Exception | None = None
    for frac in DELTA_LADDER:
        delta = frac * state.amax
        tried.append(delta)
        phi2 = smooth_step((a_abs - 0.5 * delta) / (0.5 * delta))
        phi1 = 1.0 - phi2
        sel1 = state.K_mask & (phi1 > 0.0)
        sel2 = phi2 > 0.0
        try:
            u_low, v_low = solve_regime(phi1, sel1, wide=False, dnm="low-amplitude system")
            u_high, v_high = solve_regime(phi2, sel2, wide=True, dnm="high-amplitude system")
        except RankDeficiencyError as exc:
            last_err = exc
            continue
        break
    else:
        raise RuntimeError(
            f"no amplitude threshold certified the split systems "
            f"(tried {len(tried)} deltas down from {tried[0]:.3g}); last failure: {last_err}"
        )

    u_next = u_low + u_high
    v_next = v_low + v_high
    if np.any(u_next[:, ~state.K_mask] != 0.0) or np.any(v_next[:, ~state.K_mask] != 0.0):
        raise FloatingPointError("corrector escaped the support collar")
    _register_level(state, k + 1, u_next)
    _register_level(state, k + 2, v_next)
    state.k = k + 1
    report = StepKReport(
        k_built=k + 1,
        delta=float(delta),
        h_sup=h_sup,
        nodes_low=int(sel1.sum()),
        nodes_high=int(sel2.sum()),
        tried_deltas=tuple(tried),
    )
    state.step_logs.append(report)
    return report


# ---------------------------------------------------------------------------
# Substitution of the fast variable


@dataclass
class SubstitutionResult:
    """Slow-variable map with analytic-in-t jets and its scaled defect."""

    record: FreeMapRecord
    eps: float
    order: int
    residual: np.ndarray      # (P, nn), defect / eps^order
    residual_sup: float
    displacement: float       # max |F - F0| / eps
    t_star: np.ndarray        # (P,)


def _eval_at_tstar(grid: BallGrid, vals: np.ndarray, t_cols: np.ndarray) -> np.ndarray:
    """Evaluate t-sampled fields at the per-column phase t_cols[i0]; the
    phase only depends on the first coordinate, which is the slowest axis."""
    N = grid.N
    block = grid.P // N
    out = np.empty(vals.shape[1:])
    for i0 in range(N):
        cols = slice(i0 * block, (i0 + 1) * block)
        out[cols] = fourier_eval(vals[:, cols], float(t_cols[i0]), axis=0)
    return out


def substitute(state: StepState, eps: float) -> SubstitutionResult:
    """Evaluate the staged map at the fast phase beta(x1/eps).

    Jets are assembled with analytic t-derivatives and FD x-derivatives of
    the coefficient fields, then certified free; the first-order metric
    defect of the result equals the staged defect evaluated at the phase,
    which is checked as a consistency condition."""
    if state.k < 2:
        raise ValueError("substitute needs at least the second-order corrector")
    if not 0.0 < eps <= 1.0:
        raise ValueError("eps must lie in (0, 1]")
    grid = state.record.grid
    if grid.h > OSC_FACTOR * eps * eps:
        raise ValueError(
            f"grid too coarse for the oscillation: h={grid.h:.4g} exceeds "
            f"{OSC_FACTOR:g}*eps^2={OSC_FACTOR * eps * eps:.4g}; refine the grid or raise eps"
        )
    n, q, P = grid.n, state.q, grid.P
    pro = state.profiles
    rho_s = pro.rho.samples[:, None, None]
    t_cols = np.asarray(pro.beta_at(grid.xs / eps), dtype=float)
    t_star = np.repeat(t_cols, P // grid.N)
    rho_star = pro.rho_at(t_star)
    pairs = sym_pairs(n)
    nn = len(pairs)
    jet0 = state.record.jet

    values = state.record.values.copy()
    d1 = jet0.d1.copy()
    d2 = jet0.d2.copy()
    for m in sorted(state.Gs):
        G = state.Gs[m]
        dG = state.dGs[m]
        T = state.Ts[m]
        dT = np.stack([spectral_derivative(dG[:, :, i], axis=0) for i in range(n)], axis=2)
        TT = spectral_derivative(T / rho_s, axis=0) / rho_s
        d2G = np.stack([_fd_x(grid, dG[:, :, j], i) for i, j in pairs], axis=2)
        stacked = np.concatenate(
            [G[:, :, None, :], dG, T[:, :, None, :], d2G, dT, TT[:, :, None, :]],
            axis=2,
        )
        star = _eval_at_tstar(grid, stacked, t_cols)       # (P, C, q)
        pos = 0
        G_s = star[:, pos]; pos += 1
        dG_s = star[:, pos:pos + n]; pos += n
        T_s = star[:, pos]; pos += 1
        d2G_s = star[:, pos:pos + nn]; pos += nn
        dT_s = star[:, pos:pos + n]; pos += n
        TT_s = star[:, pos]; pos += 1

        em = eps**m
        values += em * G_s
        d1[:, 0] += em * (dG_s[:, 0] + T_s / (eps * rho_star[:, None]))
        for i in range(1, n):
            d1[:, i] += em * dG_s[:, i]
        for kk, (i, j) in enumerate(pairs):
            term = d2G_s[:, kk].copy()
            if i == 0 and j == 0:
                term += 2.0 / (eps * rho_star[:, None]) * dT_s[:, 0]
                term += TT_s / (eps * eps)
            elif i == 0:
                term += dT_s[:, j] / (eps * rho_star[:, None])
            d2[:, kk] += em * term

    jet = Jet2(grid=grid, value=values, d1=d1, d2=d2)
    margins = freeness_margin(jet)
    record = FreeMapRecord(
        grid=grid,
        values=values,
        jet=jet,
        margins=margins,
        min_margin=float(margins[grid.nonext_mask].min()),
    )

    base = _metric_base(state)
    res = np.empty((P, nn))
    for kk, (i, j) in enumerate(pairs):
        res[:, kk] = np.sum(d1[:, i] * d1[:, j], axis=1) - base[:, kk]
    res /= eps ** (state.k + 1)

    staged = evaluate_residual(state, eps)
    res_check = _eval_at_tstar(grid, staged.residual, t_cols)
    gap = float(np.abs(res - res_check).max())
    if gap > SUBSTITUTE_TOL * (1.0 + float(np.abs(res_check).max())):
        raise FloatingPointError(
            f"substituted defect disagrees with the staged defect by {gap:.3e}; "
            f"the t-sampling (M={pro.M}) does not resolve the corrector spectra "
            f"at order {state.k}, rebuild the profiles with more samples"
        )
    disp = float(np.linalg.norm(values - state.record.values, axis=1).max()) / eps
    return SubstitutionResult(
        record=record,
        eps=float(eps),
        order=state.k + 1,
        residual=res,
        residual_sup=float(np.abs(res).max()),
        displacement=disp,
        t_star=t_star,
    )


# ---------------------------------------------------------------------------
# Injectivity and trace utilities


@dataclass(frozen=True)
class InjectivityReport:
    """Minimum image distance over separated node pairs, plus the smallest
    first-derivative singular value as the close-pair certificate."""

    value: float
    immersion: float
    pairs: int


def injectivity_margin(record: FreeMapRecord, delta_L: float) -> InjectivityReport:
    """min |F(x) - F(y)| over non-exterior pairs with |x - y| >= delta_L.

    Returns inf when no pair is that far apart.  Close pairs are covered by
    the immersion margin: the minimum singular value of the first-derivative
    rows over the same nodes."""
    if not delta_L > 0.0:
        raise ValueError("delta_L must be positive")
    grid = record.grid
    sel = grid.nonext_mask
    pts = grid.coords[sel]
    vals = record.values[sel]
    sigma = float(np.linalg.svd(record.jet.d1[sel], compute_uv=False)[..., -1].min())
    thresh = delta_L - 1e-12 * max(1.0, delta_L)
    best = np.inf
    count = 0
    S = pts.shape[0]
    chunk = max(1, 4_000_000 // max(S, 1))
    for start in range(0, S, chunk):
        dx = np.linalg.norm(pts[start:start + chunk, None, :] - pts[None, :, :], axis=2)
        far = dx >= thresh
        count += int(far.sum())
        if not far.any():
            continue
        dF = np.linalg.norm(vals[start:start + chunk, None, :] - vals[None, :, :], axis=2)
        best = min(best, float(dF[far].min()))
    return InjectivityReport(value=best, immersion=sigma, pairs=count // 2)


def recursion_bound(trace, C: float) -> float:
    """Check the averaged-decay recursion a_{k+1} <= (a_k + C)/2 along a
    logged trace and return the uniform bound a_0 + C it implies."""
    a = np.asarray(trace, dtype=float)
    if a.ndim != 1 or a.size < 1:
        raise ValueError("trace must be a nonempty 1-D sequence")
    if np.any(a < 0.0) or C < 0.0:
        raise ValueError("trace and C must be nonnegative")
    scale = 1e-12 * (1.0 + float(a.max(initial=0.0)) + C)
    for k in range(a.size - 1):
        if a[k + 1] > 0.5 * (a[k] + C) + scale:
            raise ValueError(
                f"recursion hypothesis fails at step {k}: "
                f"{a[k + 1]:.6g} > ({a[k]:.6g} + {C:.6g})/2"
            )
    bound = float(a[0] + C)
    if np.any(a > bound + scale):
        raise FloatingPointError("trace escaped its implied bound")
    return bound
