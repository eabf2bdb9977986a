import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from isoembed.freemaps import (
    SampledSubmanifold,
    free_map_record,
    freeness_margin,
    headroom_scale,
    max_metric_ratio,
    projection_margins,
    projection_matrix,
    project_submanifold,
    pullback_metric,
    reduce_dimension,
    standard_free_map,
    standard_free_map_point,
)
from isoembed.grids import fd_jet, make_ball_grid


def circle_submanifold(q: int, S: int = 64, with_jets: bool = True) -> SampledSubmanifold:
    theta = 2.0 * np.pi * np.arange(S) / S
    pts = np.zeros((S, q))
    pts[:, 0], pts[:, 1] = np.cos(theta), np.sin(theta)
    tan = np.zeros((S, 1, q))
    tan[:, 0, 0], tan[:, 0, 1] = -np.sin(theta), np.cos(theta)
    jets = None
    if with_jets:
        jets = np.zeros((S, 1, q))
        jets[:, 0, 0], jets[:, 0, 1] = -np.cos(theta), -np.sin(theta)
    return SampledSubmanifold(points=pts, tangents=tan, jets=jets)


def test_standard_free_map_point_examples():
    assert np.allclose(standard_free_map_point(1, np.array([2.0])), [2.0, 4.0])
    assert np.allclose(
        standard_free_map_point(2, np.array([1.0, 1.0])), [1.0, 1.0, 1.0, 1.0, 1.0]
    )


def test_standard_free_map_1d_margin_constant_four():
    grid = make_ball_grid(1, 129)
    rec = standard_free_map(grid)
    mask = grid.nonext_mask
    assert np.abs(rec.margins[mask] - 4.0).max() < 1e-9
    # spot check the Gram matrix entries at one node
    x = grid.coords[5, 0]
    rows = np.stack([rec.jet.d1[5, 0], rec.jet.d2[5, 0]])
    G = rows @ rows.T
    assert np.allclose(G, [[1 + 4 * x**2, 4 * x], [4 * x, 4.0]], atol=1e-9)


def test_standard_free_map_2d_margin_positive():
    grid = make_ball_grid(2, 17)
    rec = standard_free_map(grid)
    assert rec.min_margin > 0.0


def test_freeness_margin_scaling():
    grid = make_ball_grid(2, 9)
    rec = standard_free_map(grid)
    c = 1.5
    scaled = free_map_record(grid, c * rec.values)
    k = grid.n + grid.n * (grid.n + 1) // 2
    mask = grid.nonext_mask
    assert np.allclose(
        scaled.margins[mask], c ** (2 * k) * rec.margins[mask], rtol=1e-9
    )


def test_freeness_margin_affine_is_zero():
    grid = make_ball_grid(1, 17)
    x = grid.coords[:, 0]
    values = np.stack([1.0 + 2.0 * x, -x], axis=1)
    jet = fd_jet(grid, values)
    margins = freeness_margin(jet)
    assert np.abs(margins[grid.nonext_mask]).max() < 1e-12


def test_projection_margins_circle_vertical():
    sub = circle_submanifold(3)
    secant, tangent, jet = projection_margins(sub, np.array([0.0, 0.0, 1.0]))
    assert abs(secant - 1.0) < 1e-12
    assert abs(tangent - 1.0) < 1e-12
    assert abs(jet - 1.0) < 1e-12


def test_projection_margins_in_plane_direction():
    sub = circle_submanifold(3)  # even sample count: antipodal pairs present
    secant, _, _ = projection_margins(sub, np.array([1.0, 0.0, 0.0]))
    assert secant < 1e-12


def test_projection_margins_sign_invariant():
    sub = circle_submanifold(4)
    v = np.array([0.3, -0.2, 0.9, 0.1])
    assert projection_margins(sub, v) == projection_margins(sub, -v)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-4, 0.05))
def test_projection_margins_lipschitz(seed, delta):
    sub = circle_submanifold(3, S=16)
    rng = np.random.default_rng(seed)
    v = rng.normal(size=3)
    v /= np.linalg.norm(v)
    dv = rng.normal(size=3)
    dv *= delta / np.linalg.norm(dv)
    m1 = projection_margins(sub, v)
    m2 = projection_margins(sub, v + dv)
    for a, b in zip(m1, m2):
        assert abs(a - b) <= 2.0 * delta + 1e-12


def test_projection_matrix_properties():
    v = np.array([1.0, 2.0, -1.0, 0.5])
    W, P = projection_matrix(v)
    assert np.allclose(P @ P, P, atol=1e-12)
    assert np.allclose(W @ W.T, np.eye(3), atol=1e-12)
    assert np.abs(W @ v).max() < 1e-12
    rng = np.random.default_rng(0)
    for x in rng.normal(size=(10, 4)):
        assert np.linalg.norm(P @ x) <= np.linalg.norm(x) + 1e-12
        assert abs(np.linalg.norm(W @ x) - np.linalg.norm(P @ x)) < 1e-12


def test_reduce_dimension_circle_to_r3():
    sub = circle_submanifold(5)
    out, steps = reduce_dimension(sub, 3, trials=64, seed=11)
    assert out.q == 3
    assert len(steps) == 2
    for step in steps:
        assert step["secant"] >= 1e-3
        assert step["tangent"] >= 1e-3
        assert step["jet"] >= 1e-3


def test_reduce_dimension_identity():
    sub = circle_submanifold(5)
    out, steps = reduce_dimension(sub, 5, seed=0)
    assert steps == []
    assert np.array_equal(out.points, sub.points)


def test_reduce_dimension_reports_failure():
    rng = np.random.default_rng(3)
    pts = rng.normal(size=(200, 3))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    tangents = np.empty((200, 2, 3))
    for s, p in enumerate(pts):
        basis = np.linalg.qr(np.concatenate([p[:, None], np.eye(3)], axis=1))[0]
        tangents[s] = basis[:, 1:3].T
    sphere = SampledSubmanifold(points=pts, tangents=tangents)
    # dense sphere samples leave every direction within ~1/sqrt(S) of a tangent
    # plane, so a floor of 0.5 is unreachable and the search must abort
    with pytest.raises(ValueError, match="best margin"):
        reduce_dimension(sphere, 2, trials=16, seed=5, margin_floor=0.5)


def test_headroom_scale_exact_pullback():
    grid = make_ball_grid(1, 33)
    rec = standard_free_map(grid)
    g = pullback_metric(rec.jet)
    scaled, eps0 = headroom_scale(rec, g, safety=0.5)
    assert abs(eps0 - 0.5) < 1e-12
    assert np.allclose(scaled.values, np.sqrt(0.5) * rec.values)


def test_headroom_scale_leaves_headroom():
    grid = make_ball_grid(2, 9)
    rec = standard_free_map(grid)
    mask = grid.nonext_mask
    g = np.zeros((grid.P, 3))
    g[:, 0] = 1.0
    g[:, 2] = 1.0  # flat metric
    scaled, eps0 = headroom_scale(rec, g)
    pb = pullback_metric(scaled.jet)
    # g - pullback must stay positive definite on every non-exterior node
    a, b, c = (g - pb)[mask].T
    assert np.all(a > 0.0)
    assert np.all(a * c - b**2 > 0.0)
    ratio = max_metric_ratio(pb[mask], g[mask], 2)
    assert ratio <= 0.5 + 1e-12


def test_free_map_record_rejects_small_q():
    grid = make_ball_grid(2, 9)
    with pytest.raises(ValueError):
        free_map_record(grid, np.zeros((grid.P, 4)))


def test_project_submanifold_keeps_frames():
    sub = circle_submanifold(4)
    out = project_submanifold(sub, np.array([0.0, 0.0, 0.0, 1.0]))
    assert out.q == 3
    assert out.tangents.shape == (64, 1, 3)
    # the e4 component is dropped and the rest mapped isometrically
    assert np.allclose(out.points @ out.points.T, sub.points[:, :3] @ sub.points[:, :3].T, atol=1e-12)
