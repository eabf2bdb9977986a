"""Cartesian grids on the closed unit ball, finite-difference jets, Hölder norms,
periodic sample grids, and CSV field exchange.

Nodes live on the tensor lattice of ``numpy.linspace(-1, 1, N)`` per axis.  A node
is *interior* when it lies strictly inside the unit sphere, *boundary-adjacent*
when it is not interior but has at least one axis neighbor that is, and
*exterior* otherwise.  Fields are stored over the full lattice in lexicographic
order (first coordinate slowest) with exterior entries pinned to zero.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field as dc_field
from itertools import combinations_with_replacement

import numpy as np
import scipy.sparse as sp

# Nodes within this distance of the sphere (squared radius) count as non-interior.
SPHERE_TOL = 1e-12

INTERIOR, BOUNDARY_ADJACENT, EXTERIOR = 0, 1, 2


def sym_index(i: int, j: int, n: int) -> int:
    """Position of the (i, j) entry, i <= j, in the lexicographic upper-triangle list."""
    if i > j:
        i, j = j, i
    return i * n - i * (i - 1) // 2 + (j - i)


def sym_pairs(n: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(n) for j in range(i, n)]


@dataclass
class BallGrid:
    """Lattice covering [-1, 1]^n with ball classification and cached FD operators."""

    n: int
    N: int
    h: float
    xs: np.ndarray                 # (N,) per-axis coordinates
    coords: np.ndarray             # (P, n) node coordinates, lexicographic
    classification: np.ndarray     # (P,) int, one of INTERIOR/BOUNDARY_ADJACENT/EXTERIOR
    _d1: dict = dc_field(default_factory=dict, repr=False)
    _d2: dict = dc_field(default_factory=dict, repr=False)
    _dist_cache: dict = dc_field(default_factory=dict, repr=False)

    @property
    def P(self) -> int:
        return self.coords.shape[0]

    @property
    def interior_mask(self) -> np.ndarray:
        return self.classification == INTERIOR

    @property
    def badj_mask(self) -> np.ndarray:
        return self.classification == BOUNDARY_ADJACENT

    @property
    def nonext_mask(self) -> np.ndarray:
        return self.classification != EXTERIOR

    @property
    def strides(self) -> np.ndarray:
        return np.array([self.N ** (self.n - 1 - a) for a in range(self.n)], dtype=int)

    def neighbor(self, p: int, axis: int, step: int) -> int:
        """Flat index of the node ``step`` lattice moves along ``axis``, or -1 off-lattice."""
        idx = (p // self.strides[axis]) % self.N + step
        if idx < 0 or idx >= self.N:
            return -1
        return p + step * self.strides[axis]

    def d1(self, axis: int) -> sp.csr_matrix:
        if axis not in self._d1:
            self._build_axis_ops(axis)
        return self._d1[axis]

    def d2(self, axis: int) -> sp.csr_matrix:
        if axis not in self._d2:
            self._build_axis_ops(axis)
        return self._d2[axis]

    def dmix(self, i: int, j: int) -> sp.csr_matrix:
        if i == j:
            return self.d2(i)
        key = (min(i, j), max(i, j))
        if key not in self._d2:
            self._d2[key] = (self.d1(key[0]) @ self.d1(key[1])).tocsr()
        return self._d2[key]

    def _build_axis_ops(self, axis: int) -> None:
        nonext = self.nonext_mask
        rows1, cols1, vals1 = [], [], []
        rows2, cols2, vals2 = [], [], []
        h = self.h

        def ok(q: int) -> bool:
            return q >= 0 and nonext[q]

        for p in np.nonzero(nonext)[0]:
            left = self.neighbor(p, axis, -1)
            right = self.neighbor(p, axis, +1)
            if ok(left) and ok(right):
                rows1 += [p, p]
                cols1 += [left, right]
                vals1 += [-0.5 / h, 0.5 / h]
                rows2 += [p, p, p]
                cols2 += [left, p, right]
                vals2 += [1.0 / h**2, -2.0 / h**2, 1.0 / h**2]
                continue
            d = +1 if ok(right) else (-1 if ok(left) else 0)
            if d == 0:
                continue
            q1 = self.neighbor(p, axis, d)
            q2 = self.neighbor(p, axis, 2 * d)
            q3 = self.neighbor(p, axis, 3 * d)
            if ok(q2):
                rows1 += [p, p, p]
                cols1 += [p, q1, q2]
                vals1 += [-1.5 * d / h, 2.0 * d / h, -0.5 * d / h]
                if ok(q3):
                    rows2 += [p, p, p, p]
                    cols2 += [p, q1, q2, q3]
                    vals2 += [2.0 / h**2, -5.0 / h**2, 4.0 / h**2, -1.0 / h**2]
                else:
                    rows2 += [p, p, p]
                    cols2 += [p, q1, q2]
                    vals2 += [1.0 / h**2, -2.0 / h**2, 1.0 / h**2]
            else:
                rows1 += [p, p]
                cols1 += [p, q1]
                vals1 += [-1.0 * d / h, 1.0 * d / h]
        P = self.P
        self._d1[axis] = sp.csr_matrix((vals1, (rows1, cols1)), shape=(P, P))
        self._d2[axis] = sp.csr_matrix((vals2, (rows2, cols2)), shape=(P, P))

    def apply_op(self, op: sp.csr_matrix, values: np.ndarray) -> np.ndarray:
        """Apply a P x P operator to (P,) or (P, C) values."""
        if values.ndim == 1:
            return op @ values
        return op @ values

    def pair_dist_alpha(self, alpha: float) -> np.ndarray:
        """|x - y|^alpha over non-exterior node pairs, cached. Only for small grids."""
        key = round(alpha, 12)
        if key not in self._dist_cache:
            pts = self.coords[self.nonext_mask]
            if pts.shape[0] > 4200:
                raise ValueError("pairwise cache limited to 4200 nodes")
            diff = pts[:, None, :] - pts[None, :, :]
            d = np.sqrt(np.sum(diff * diff, axis=-1))
            np.fill_diagonal(d, 1.0)
            self._dist_cache[key] = d ** alpha
        return self._dist_cache[key]


def make_ball_grid(n: int, N: int) -> BallGrid:
    if n not in (1, 2, 3):
        raise ValueError(f"dimension n must be 1, 2 or 3, got {n}")
    if N < 3 or N % 2 == 0:
        raise ValueError(f"axis node count N must be odd and >= 3, got {N}")
    xs = np.linspace(-1.0, 1.0, N)
    grids = np.meshgrid(*([xs] * n), indexing="ij")
    coords = np.stack([g.ravel() for g in grids], axis=-1)
    r2 = np.sum(coords * coords, axis=1)
    interior = r2 < 1.0 - SPHERE_TOL

    P = coords.shape[0]
    classification = np.full(P, EXTERIOR, dtype=np.int8)
    classification[interior] = INTERIOR
    strides = np.array([N ** (n - 1 - a) for a in range(n)], dtype=int)
    non_interior = np.nonzero(~interior)[0]
    for p in non_interior:
        for a in range(n):
            idx = (p // strides[a]) % N
            for step in (-1, +1):
                if 0 <= idx + step < N and interior[p + step * strides[a]]:
                    classification[p] = BOUNDARY_ADJACENT
                    break
            if classification[p] == BOUNDARY_ADJACENT:
                break
    h = 2.0 / (N - 1)
    return BallGrid(n=n, N=N, h=h, xs=xs, coords=coords, classification=classification)


# ---------------------------------------------------------------------------
# Fields


@dataclass
class ScalarField:
    grid: BallGrid
    values: np.ndarray                  # (P,)
    grad: np.ndarray | None = None      # optional closed-form gradient, (P, n)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.P,):
            raise ValueError("scalar field values must have shape (P,)")


@dataclass
class VectorField:
    grid: BallGrid
    values: np.ndarray                  # (P, q)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.shape[0] != self.grid.P:
            raise ValueError("vector field values must have shape (P, q)")


@dataclass
class SymTensorField:
    """Symmetric 2-tensor stored as the i <= j upper triangle, lexicographic."""

    grid: BallGrid
    values: np.ndarray                  # (P, n(n+1)/2)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        m = self.grid.n * (self.grid.n + 1) // 2
        if self.values.shape != (self.grid.P, m):
            raise ValueError(f"sym tensor values must have shape (P, {m})")

    def entry(self, i: int, j: int) -> np.ndarray:
        return self.values[:, sym_index(i, j, self.grid.n)]


@dataclass
class Jet2:
    """Values with first and second FD derivatives at every non-exterior node."""

    grid: BallGrid
    value: np.ndarray       # (P, C)
    d1: np.ndarray          # (P, n, C)
    d2: np.ndarray          # (P, n(n+1)/2, C), i <= j lexicographic

    def first(self, a: int) -> np.ndarray:
        return self.d1[:, a, :]

    def second(self, i: int, j: int) -> np.ndarray:
        return self.d2[:, sym_index(i, j, self.grid.n), :]


def fd_jet(grid: BallGrid, values: np.ndarray) -> Jet2:
    """Finite-difference 2-jet: central stencils where both axis neighbors exist,
    one-sided second-order stencils toward the available side otherwise."""
    vals = np.asarray(values, dtype=float)
    squeeze = vals.ndim == 1
    if squeeze:
        vals = vals[:, None]
    n = grid.n
    P, C = vals.shape
    d1 = np.empty((P, n, C))
    for a in range(n):
        d1[:, a, :] = grid.d1(a) @ vals
    pairs = sym_pairs(n)
    d2 = np.empty((P, len(pairs), C))
    for k, (i, j) in enumerate(pairs):
        d2[:, k, :] = grid.dmix(i, j) @ vals
    return Jet2(grid=grid, value=vals, d1=d1, d2=d2)


# ---------------------------------------------------------------------------
# Hölder norms

SEMINORM_EXHAUSTIVE_MAX = 5000


@dataclass
class HolderNorm:
    alpha: float
    m: int
    value: float
    breakdown: dict
    sampled: bool = False


def holder_seminorm(
    grid: BallGrid,
    values: np.ndarray,
    alpha: float,
    seed: int = 0,
    n_samples: int = 200_000,
    mask: np.ndarray | None = None,
) -> tuple[float, bool]:
    """Discrete Hölder seminorm sup |u(x)-u(y)| / |x-y|^alpha over non-exterior pairs.

    Exhaustive up to SEMINORM_EXHAUSTIVE_MAX nodes; seeded pair sampling beyond
    that, in which case the returned value is a lower bound and flagged.  An
    optional node mask restricts the pair set (intersected with non-exterior)."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    mask = grid.nonext_mask if mask is None else (mask & grid.nonext_mask)
    pts = grid.coords[mask]
    u = np.asarray(values, dtype=float)[mask]
    P = pts.shape[0]
    if P < 2:
        return 0.0, False
    if P <= SEMINORM_EXHAUSTIVE_MAX:
        best = 0.0
        chunk = max(1, int(2e7) // P)
        for lo in range(0, P, chunk):
            hi = min(P, lo + chunk)
            diff = pts[lo:hi, None, :] - pts[None, :, :]
            d = np.sqrt(np.sum(diff * diff, axis=-1))
            d[d == 0.0] = np.inf
            ratio = np.abs(u[lo:hi, None] - u[None, :]) / d**alpha
            best = max(best, float(ratio.max()))
        return best, False
    rng = np.random.default_rng(seed)
    ii = rng.integers(0, P, size=n_samples)
    jj = rng.integers(0, P, size=n_samples)
    keep = ii != jj
    ii, jj = ii[keep], jj[keep]
    d = np.sqrt(np.sum((pts[ii] - pts[jj]) ** 2, axis=-1))
    ratio = np.abs(u[ii] - u[jj]) / d**alpha
    return float(ratio.max()), True


def _derivative_fields(grid: BallGrid, vals: np.ndarray, m: int) -> list[np.ndarray]:
    """All order-m FD derivatives of a (P,) field, one per multi-index (sorted axes)."""
    if m == 0:
        return [vals]
    out = []
    for axes in combinations_with_replacement(range(grid.n), m):
        w = vals
        if m >= 2:
            w = grid.dmix(axes[-2], axes[-1]) @ w
            rest = axes[:-2]
        else:
            rest = axes[:-1]
            w = grid.d1(axes[-1]) @ w
        for a in rest:
            w = grid.d1(a) @ w
        out.append(w)
    return out


def cm_alpha_norm(
    grid: BallGrid,
    values: np.ndarray,
    m: int,
    alpha: float,
    seed: int = 0,
    mask: np.ndarray | None = None,
) -> HolderNorm:
    """Hölder norm: C^{0,alpha} part of the field plus C^{0,alpha} parts of all
    order-m derivatives.  Multi-component fields contribute the sum of their
    component norms.  An optional node mask restricts the measurement region
    (derivatives are still formed on the full grid)."""
    if m < 0 or m > 3:
        raise ValueError("derivative order m must lie in 0..3")
    vals = np.asarray(values, dtype=float)
    if vals.ndim == 1:
        vals = vals[:, None]
    region = grid.nonext_mask if mask is None else (mask & grid.nonext_mask)
    total = 0.0
    sampled = False
    breakdown: dict = {"components": []}
    for c in range(vals.shape[1]):
        u = vals[:, c]
        sup0 = float(np.abs(u[region]).max())
        sem0, fl = holder_seminorm(grid, u, alpha, seed=seed, mask=region)
        sampled |= fl
        comp = sup0 + sem0
        deriv = 0.0
        if m >= 1:
            for w in _derivative_fields(grid, u, m):
                sup = float(np.abs(w[region]).max())
                sem, fl = holder_seminorm(grid, w, alpha, seed=seed, mask=region)
                sampled |= fl
                deriv += sup + sem
        breakdown["components"].append(
            {"zero_order": comp, "top_derivatives": deriv}
        )
        total += comp + deriv
    return HolderNorm(alpha=alpha, m=m, value=total, breakdown=breakdown, sampled=sampled)


# ---------------------------------------------------------------------------
# Periodic sample grids and spectral helpers


@dataclass
class PeriodicProfile:
    """Samples of a 2*pi-periodic function on a uniform grid of M points."""

    M: int
    samples: np.ndarray

    def __post_init__(self):
        if self.M & (self.M - 1) or self.M < 4:
            raise ValueError("M must be a power of two, >= 4")
        self.samples = np.asarray(self.samples, dtype=float)
        if self.samples.shape != (self.M,):
            raise ValueError("samples must have shape (M,)")

    @property
    def ts(self) -> np.ndarray:
        return periodic_ts(self.M)


def periodic_ts(M: int) -> np.ndarray:
    return 2.0 * np.pi * np.arange(M) / M


def periodic_quadrature(samples: np.ndarray):
    """Trapezoid rule over one period (spectrally accurate on smooth data).

    Integrates along the last axis; returns a float for 1-D input."""
    samples = np.asarray(samples, dtype=float)
    out = samples.mean(axis=-1) * 2.0 * np.pi
    return float(out) if samples.ndim == 1 else out


def spectral_derivative(samples: np.ndarray, order: int = 1, axis: int = -1) -> np.ndarray:
    """Differentiate periodic samples along ``axis`` via FFT."""
    samples = np.asarray(samples, dtype=float)
    M = samples.shape[axis]
    k = np.fft.rfftfreq(M, d=1.0 / M)
    mult = (1j * k) ** order
    if order % 2 == 1 and M % 2 == 0:
        mult[-1] = 0.0
    coeff = np.fft.rfft(samples, axis=axis)
    shape = [1] * samples.ndim
    shape[axis] = k.shape[0]
    return np.fft.irfft(coeff * mult.reshape(shape), n=M, axis=axis)


def spectral_antiderivative(samples: np.ndarray, axis: int = -1) -> np.ndarray:
    """Zero-mean periodic antiderivative; the mean mode of the input is discarded."""
    samples = np.asarray(samples, dtype=float)
    M = samples.shape[axis]
    k = np.fft.rfftfreq(M, d=1.0 / M)
    coeff = np.fft.rfft(samples, axis=axis)
    mult = np.zeros_like(k, dtype=complex)
    mult[1:] = 1.0 / (1j * k[1:])
    if M % 2 == 0:
        mult[-1] = 0.0
    shape = [1] * samples.ndim
    shape[axis] = k.shape[0]
    out = np.fft.irfft(coeff * mult.reshape(shape), n=M, axis=axis)
    return out


def fourier_eval(samples: np.ndarray, t, axis: int = -1) -> np.ndarray:
    """Evaluate the trigonometric interpolant of periodic samples at points ``t``.

    The sampled axis is removed and the shape of ``t`` is appended at the end."""
    samples = np.asarray(samples, dtype=float)
    t = np.asarray(t, dtype=float)
    tflat = np.atleast_1d(t).ravel()
    moved = np.moveaxis(samples, axis, -1)
    M = moved.shape[-1]
    coeff = np.fft.rfft(moved, axis=-1) / M
    K = coeff.shape[-1]
    weights = np.full(K, 2.0)
    weights[0] = 1.0
    if M % 2 == 0:
        weights[-1] = 1.0
    phases = np.exp(1j * tflat[:, None] * np.arange(K)[None, :])    # (T, K)
    vals = np.real((coeff * weights) @ phases.T)                    # (..., T)
    return vals.reshape(moved.shape[:-1] + t.shape)


# ---------------------------------------------------------------------------
# CSV exchange


def field_to_csv(grid: BallGrid, values: np.ndarray, path: str) -> None:
    """Write one row per non-exterior node, lexicographic order, repr floats."""
    vals = np.asarray(values, dtype=float)
    if vals.ndim == 1:
        vals = vals[:, None]
    header = [f"x{a + 1}" for a in range(grid.n)] + [f"c{c}" for c in range(vals.shape[1])]
    mask = grid.nonext_mask
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for p in np.nonzero(mask)[0]:
            row = [repr(float(x)) for x in grid.coords[p]] + [
                repr(float(v)) for v in vals[p]
            ]
            writer.writerow(row)


def csv_to_field(grid: BallGrid, path: str) -> np.ndarray:
    """Read a field written by field_to_csv back onto the grid (exterior rows zero)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n = sum(1 for name in header if name.startswith("x"))
        if n != grid.n:
            raise ValueError(f"csv has {n} coordinate columns, grid has {grid.n}")
        C = len(header) - n
        rows = list(reader)
    mask_idx = np.nonzero(grid.nonext_mask)[0]
    if len(rows) != mask_idx.shape[0]:
        raise ValueError("csv row count does not match non-exterior node count")
    out = np.zeros((grid.P, C))
    for p, row in zip(mask_idx, rows):
        xs = np.array([float(v) for v in row[:n]])
        if not np.array_equal(xs, grid.coords[p]):
            raise ValueError(f"csv coordinates do not match grid at node {p}")
        out[p] = [float(v) for v in row[n:]]
    return out if C > 1 else out[:, 0]
