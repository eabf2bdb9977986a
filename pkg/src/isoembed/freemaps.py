"""Free maps into R^q, their Gram freeness margins, projection-based dimension
reduction for sampled submanifolds, and headroom scaling against a target
metric.

A map F is free at a node when its n first-derivative and n(n+1)/2
second-derivative vectors are linearly independent; the margin is the Gram
determinant of that jet family."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .grids import BallGrid, Jet2, fd_jet, sym_index, sym_pairs
from .linear import gram_det, project_complement

MARGIN_FLOOR = 1e-3
HEADROOM_SAFETY = 0.5


@dataclass
class FreeMapRecord:
    grid: BallGrid
    values: np.ndarray          # (P, q)
    jet: Jet2
    margins: np.ndarray         # (P,) Gram dets, zero at exterior nodes
    min_margin: float

    @property
    def q(self) -> int:
        return self.values.shape[1]


@dataclass
class SampledSubmanifold:
    """Point samples of a d-manifold in R^q with tangent frames and optional
    second-order (jet) frames."""

    points: np.ndarray                    # (S, q)
    tangents: np.ndarray                  # (S, d, q)
    jets: np.ndarray | None = None        # (S, d2, q) second-order vectors

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        self.tangents = np.asarray(self.tangents, dtype=float)
        if self.points.shape[0] < 2:
            raise ValueError("need at least 2 sample points")
        if self.jets is not None:
            self.jets = np.asarray(self.jets, dtype=float)

    @property
    def q(self) -> int:
        return self.points.shape[1]


def jet_rows(jet: Jet2) -> np.ndarray:
    """Stack the jet vectors as rows: first derivatives then second, (P, k, q)."""
    return np.concatenate([jet.d1, jet.d2], axis=1)


def freeness_margin(jet: Jet2) -> np.ndarray:
    """Per-node Gram determinant of the jet family; exterior nodes get zero."""
    rows = jet_rows(jet)
    margins = gram_det(rows)
    margins = np.where(jet.grid.nonext_mask, margins, 0.0)
    return margins


def free_map_record(grid: BallGrid, values: np.ndarray) -> FreeMapRecord:
    values = np.asarray(values, dtype=float)
    q_min = grid.n * (grid.n + 3) // 2
    if values.shape[1] < q_min:
        raise ValueError(f"free map needs q >= {q_min} ambient dimensions")
    jet = fd_jet(grid, values)
    margins = freeness_margin(jet)
    min_margin = float(margins[grid.nonext_mask].min())
    return FreeMapRecord(
        grid=grid, values=values, jet=jet, margins=margins, min_margin=min_margin
    )


def standard_free_map_point(n: int, x: np.ndarray) -> np.ndarray:
    """(x^1..x^n, x^i x^j for i <= j) at arbitrary points; x has shape (..., n)."""
    x = np.asarray(x, dtype=float)
    quads = [x[..., i] * x[..., j] for i, j in sym_pairs(n)]
    return np.concatenate([x, np.stack(quads, axis=-1)], axis=-1)


def standard_free_map(grid: BallGrid) -> FreeMapRecord:
    """The coordinate-and-products map, free everywhere with polynomial jets."""
    values = standard_free_map_point(grid.n, grid.coords)
    return free_map_record(grid, values)


def projection_margins(
    sub: SampledSubmanifold, v: np.ndarray
) -> tuple[float, float, float | None]:
    """Safety margins of projecting along direction v.

    secant: min over sample pairs of the sine of the angle between v and the
    secant; tangent: min over samples of the component of v-hat orthogonal to
    the tangent span; jet: same against the tangent+second-order span (None
    when the submanifold carries no jet frames).  All margins vanish exactly
    when v hits a secant / tangent / jet direction."""
    v = np.asarray(v, dtype=float)
    nv = float(np.linalg.norm(v))
    if nv == 0.0:
        raise ValueError("projection direction must be nonzero")
    vhat = v / nv

    pts = sub.points
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.linalg.norm(diff, axis=-1)
    iu = np.triu_indices(pts.shape[0], k=1)
    sec = diff[iu]
    sec_len = dist[iu]
    keep = sec_len > 0.0
    sec = sec[keep] / sec_len[keep, None]
    cosines = sec @ vhat
    secant = float(np.sqrt(np.maximum(0.0, 1.0 - cosines**2)).min())

    def span_margin(frames: np.ndarray) -> float:
        rem = project_complement(np.broadcast_to(vhat, (frames.shape[0], vhat.shape[0])), frames)
        return float(np.linalg.norm(rem, axis=-1).min())

    tangent = span_margin(sub.tangents)
    jet = None
    if sub.jets is not None:
        jet = span_margin(np.concatenate([sub.tangents, sub.jets], axis=1))
    return secant, tangent, jet


def projection_matrix(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orthogonal projection P onto v-perp and an isometry W: v-perp -> R^{q-1}.

    Returns (W, P) with W of shape (q-1, q), P = W^T W = I - vhat vhat^T."""
    v = np.asarray(v, dtype=float)
    vhat = v / np.linalg.norm(v)
    q = v.shape[0]
    basis = np.linalg.qr(np.concatenate([vhat[:, None], np.eye(q)], axis=1))[0]
    W = basis[:, 1:q].T
    P = np.eye(q) - np.outer(vhat, vhat)
    return W, P


def project_submanifold(sub: SampledSubmanifold, v: np.ndarray) -> SampledSubmanifold:
    W, _ = projection_matrix(v)
    return SampledSubmanifold(
        points=sub.points @ W.T,
        tangents=sub.tangents @ W.T,
        jets=None if sub.jets is None else sub.jets @ W.T,
    )


def reduce_dimension(
    sub: SampledSubmanifold,
    q_target: int,
    trials: int = 64,
    seed: int = 0,
    margin_floor: float = MARGIN_FLOOR,
) -> tuple[SampledSubmanifold, list[dict]]:
    """Repeatedly project along the best of ``trials`` random unit directions
    until the ambient dimension reaches q_target.  Every accepted step must
    keep all margins at or above margin_floor, otherwise a ValueError reports
    the best margin found."""
    if q_target > sub.q:
        raise ValueError("q_target exceeds current ambient dimension")
    rng = np.random.default_rng(seed)
    steps: list[dict] = []
    while sub.q > q_target:
        best_v, best_min, best_margins = None, -np.inf, None
        for _ in range(trials):
            v = rng.normal(size=sub.q)
            v /= np.linalg.norm(v)
            margins = projection_margins(sub, v)
            mmin = min(m for m in margins if m is not None)
            if mmin > best_min:
                best_v, best_min, best_margins = v, mmin, margins
        if best_min < margin_floor:
            raise ValueError(
                f"no projection direction reached margin floor {margin_floor:g} "
                f"at ambient dimension {sub.q}; best margin {best_min:.3e}"
            )
        sub = project_submanifold(sub, best_v)
        steps.append(
            {
                "from_q": sub.q + 1,
                "direction": best_v,
                "secant": best_margins[0],
                "tangent": best_margins[1],
                "jet": best_margins[2],
            }
        )
    return sub, steps


def pullback_metric(jet: Jet2) -> np.ndarray:
    """Nodewise first fundamental form of the map, (P, n(n+1)/2) i <= j."""
    n = jet.grid.n
    pairs = sym_pairs(n)
    out = np.empty((jet.grid.P, len(pairs)))
    for k, (i, j) in enumerate(pairs):
        out[:, k] = np.sum(jet.first(i) * jet.first(j), axis=-1)
    return out


def _sym_full(vals: np.ndarray, n: int) -> np.ndarray:
    """Expand (P, n(n+1)/2) upper-triangle storage to full (P, n, n)."""
    P = vals.shape[0]
    full = np.empty((P, n, n))
    for i, j in sym_pairs(n):
        full[:, i, j] = vals[:, sym_index(i, j, n)]
        full[:, j, i] = vals[:, sym_index(i, j, n)]
    return full


def max_metric_ratio(pullback: np.ndarray, g: np.ndarray, n: int) -> float:
    """Largest generalized eigenvalue of the pullback against g over all nodes."""
    A = _sym_full(pullback, n)
    B = _sym_full(g, n)
    if n == 1:
        ratios = A[:, 0, 0] / B[:, 0, 0]
        return float(ratios.max())
    if n == 2:
        # det(A - lam B) = 0: quadratic det(B) lam^2 - tr(adj(B) A) lam + det(A)
        detB = B[:, 0, 0] * B[:, 1, 1] - B[:, 0, 1] ** 2
        detA = A[:, 0, 0] * A[:, 1, 1] - A[:, 0, 1] ** 2
        mid = (
            A[:, 0, 0] * B[:, 1, 1]
            + A[:, 1, 1] * B[:, 0, 0]
            - 2.0 * A[:, 0, 1] * B[:, 0, 1]
        )
        disc = np.sqrt(np.maximum(0.0, mid**2 - 4.0 * detB * detA))
        lam = (mid + disc) / (2.0 * detB)
        return float(lam.max())
    best = -np.inf
    for p in range(A.shape[0]):
        lam = scipy.linalg.eigh(A[p], B[p], eigvals_only=True)
        best = max(best, float(lam[-1]))
    return best


def headroom_scale(
    record: FreeMapRecord, g: np.ndarray, safety: float = HEADROOM_SAFETY
) -> tuple[FreeMapRecord, float]:
    """Scale F so its pullback fits strictly under the target metric g.

    Returns (record of sqrt(eps0) * F, eps0) with eps0 = safety / m*, where m*
    is the largest nodewise generalized eigenvalue of F's pullback against g;
    g - eps0 * pullback is then positive definite with factor 1 - safety."""
    grid = record.grid
    mask = grid.nonext_mask
    pb = pullback_metric(record.jet)
    mstar = max_metric_ratio(pb[mask], np.asarray(g, dtype=float)[mask], grid.n)
    if mstar <= 0.0:
        raise ValueError("pullback is degenerate against the target metric")
    eps0 = safety / mstar
    return free_map_record(grid, np.sqrt(eps0) * record.values), eps0
