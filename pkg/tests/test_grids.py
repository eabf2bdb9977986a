import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from isoembed.grids import (
    BOUNDARY_ADJACENT,
    EXTERIOR,
    INTERIOR,
    cm_alpha_norm,
    csv_to_field,
    fd_jet,
    field_to_csv,
    fourier_eval,
    holder_seminorm,
    make_ball_grid,
    periodic_quadrature,
    periodic_ts,
    spectral_antiderivative,
    spectral_derivative,
    sym_index,
)


def test_ball_grid_1d_5():
    g = make_ball_grid(1, 5)
    assert g.h == 0.5
    interior = g.coords[g.interior_mask][:, 0]
    assert np.array_equal(interior, [-0.5, 0.0, 0.5])
    badj = g.coords[g.badj_mask][:, 0]
    assert np.array_equal(badj, [-1.0, 1.0])
    assert not np.any(g.classification == EXTERIOR)


def test_ball_grid_2d_3():
    g = make_ball_grid(2, 3)
    assert g.P == 9
    interior = g.coords[g.interior_mask]
    assert interior.shape == (1, 2)
    assert np.array_equal(interior[0], [0.0, 0.0])
    badj = {tuple(c) for c in g.coords[g.badj_mask]}
    assert badj == {(-1.0, 0.0), (1.0, 0.0), (0.0, -1.0), (0.0, 1.0)}
    ext = {tuple(c) for c in g.coords[g.classification == EXTERIOR]}
    assert ext == {(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)}


def test_ball_grid_2d_65_interior_count():
    g = make_ball_grid(2, 65)
    count = int(g.interior_mask.sum())
    # independent enumeration oracle: lattice points |x| < 1 at spacing 1/32
    oracle = sum(
        1
        for i in range(65)
        for j in range(65)
        if (i - 32) ** 2 + (j - 32) ** 2 < 32**2
    )
    assert oracle == 3205
    assert count == oracle
    # density anchor pi/4*(N-1)^2 (node density 1/h^2); the count sits within 0.4%
    anchor = np.pi / 4.0 * 64**2
    assert abs(count - anchor) / anchor < 0.02


def test_ball_grid_origin_is_node():
    for n in (1, 2, 3):
        g = make_ball_grid(n, 5)
        assert np.any(np.all(g.coords == 0.0, axis=1))


def test_ball_grid_rejects_bad_args():
    with pytest.raises(ValueError):
        make_ball_grid(4, 5)
    with pytest.raises(ValueError):
        make_ball_grid(2, 6)


def test_fd_jet_square():
    g = make_ball_grid(1, 9)
    x = g.coords[:, 0]
    jet = fd_jet(g, x**2)
    mask = g.nonext_mask
    assert np.allclose(jet.second(0, 0)[mask, 0], 2.0, atol=1e-12)
    assert np.allclose(jet.first(0)[mask, 0], 2 * x[mask], atol=1e-12)


def test_fd_jet_constant():
    g = make_ball_grid(2, 9)
    jet = fd_jet(g, np.ones(g.P))
    mask = g.nonext_mask
    assert np.allclose(jet.d1[mask], 0.0, atol=1e-13)
    assert np.allclose(jet.d2[mask], 0.0, atol=1e-13)


def test_fd_jet_mixed():
    g = make_ball_grid(2, 9)
    x, y = g.coords[:, 0], g.coords[:, 1]
    jet = fd_jet(g, x * y)
    mask = g.nonext_mask
    assert np.allclose(jet.second(0, 1)[mask, 0], 1.0, atol=1e-12)


@pytest.mark.parametrize("n,N", [(1, 5), (2, 5), (2, 9), (3, 5)])
def test_fd_jet_exact_on_quadratics(n, N):
    g = make_ball_grid(n, N)
    rng = np.random.default_rng(7)
    coef0 = rng.normal()
    coef1 = rng.normal(size=n)
    coef2 = rng.normal(size=(n, n))
    coef2 = coef2 + coef2.T
    x = g.coords
    u = coef0 + x @ coef1 + np.einsum("pi,ij,pj->p", x, coef2, x)
    jet = fd_jet(g, u)
    mask = g.nonext_mask
    for a in range(n):
        expect = coef1[a] + 2.0 * (x @ coef2[a])
        assert np.allclose(jet.first(a)[mask, 0], expect[mask], atol=1e-11)
    for i in range(n):
        for j in range(i, n):
            expect = 2.0 * coef2[i, j] if i != j else 2.0 * coef2[i, i]
            assert np.allclose(jet.second(i, j)[mask, 0], expect, atol=1e-11)


def test_holder_seminorm_linear():
    g = make_ball_grid(1, 65)
    val, sampled = holder_seminorm(g, g.coords[:, 0], 0.5)
    assert not sampled
    assert abs(val - np.sqrt(2.0)) < 1e-12


def test_cm_alpha_norm_linear():
    g = make_ball_grid(1, 65)
    norm = cm_alpha_norm(g, g.coords[:, 0], m=1, alpha=0.5)
    assert abs(norm.value - (2.0 + np.sqrt(2.0))) < 1e-12
    assert norm.m == 1 and norm.alpha == 0.5
    assert not norm.sampled


def test_cm_alpha_norm_vector_sums_components():
    g = make_ball_grid(1, 33)
    u = g.coords[:, 0]
    single = cm_alpha_norm(g, u, m=1, alpha=0.5).value
    double = cm_alpha_norm(g, np.stack([u, u], axis=1), m=1, alpha=0.5).value
    assert abs(double - 2.0 * single) < 1e-12


def test_holder_product_bound_zero_order():
    g = make_ball_grid(2, 17)
    x, y = g.coords[:, 0], g.coords[:, 1]
    u = np.sin(2 * x) + y
    v = x * y + 0.3
    nuv = cm_alpha_norm(g, u * v, m=0, alpha=0.5).value
    nu = cm_alpha_norm(g, u, m=0, alpha=0.5).value
    nv = cm_alpha_norm(g, v, m=0, alpha=0.5).value
    assert nuv <= nu * nv + 1e-12


def test_holder_product_bound_second_order():
    g = make_ball_grid(1, 65)
    x = g.coords[:, 0]
    u = np.sin(2 * x)
    v = np.cos(x)
    m = 2
    nuv = cm_alpha_norm(g, u * v, m=m, alpha=0.5).value
    nu = cm_alpha_norm(g, u, m=m, alpha=0.5).value
    nv = cm_alpha_norm(g, v, m=m, alpha=0.5).value
    nu0 = cm_alpha_norm(g, u, m=0, alpha=0.5).value
    nv0 = cm_alpha_norm(g, v, m=0, alpha=0.5).value
    assert nuv <= 2.0 * (nu * nv0 + nu0 * nv)


def test_seminorm_sampled_flag():
    g = make_ball_grid(2, 129)
    u = g.coords[:, 0]
    val, sampled = holder_seminorm(g, u, 0.5, seed=3)
    assert sampled
    assert val <= np.sqrt(2.0) + 1e-12  # lower bound can't exceed the true value


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(0.1, 0.9))
def test_seminorm_symmetry_translation(seed, shift, alpha):
    g = make_ball_grid(1, 17)
    rng = np.random.default_rng(seed)
    u = rng.normal(size=g.P)
    base, _ = holder_seminorm(g, u, alpha)
    neg, _ = holder_seminorm(g, -u, alpha)
    shifted, _ = holder_seminorm(g, u + shift, alpha)
    assert abs(base - neg) < 1e-12
    assert abs(base - shifted) < 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_seminorm_triangle(seed):
    g = make_ball_grid(1, 17)
    rng = np.random.default_rng(seed)
    u = rng.normal(size=g.P)
    v = rng.normal(size=g.P)
    su, _ = holder_seminorm(g, u, 0.5)
    sv, _ = holder_seminorm(g, v, 0.5)
    suv, _ = holder_seminorm(g, u + v, 0.5)
    assert suv <= su + sv + 1e-12


def test_periodic_quadrature_sin_squared():
    ts = periodic_ts(64)
    val = periodic_quadrature(np.sin(ts) ** 2)
    assert abs(val - np.pi) < 1e-12


def test_periodic_quadrature_odd_profile():
    ts = periodic_ts(128)
    assert abs(periodic_quadrature(np.sin(3 * ts))) < 1e-12


def test_spectral_derivative():
    ts = periodic_ts(64)
    d = spectral_derivative(np.sin(ts))
    assert np.allclose(d, np.cos(ts), atol=1e-12)
    d2 = spectral_derivative(np.sin(2 * ts), order=2)
    assert np.allclose(d2, -4.0 * np.sin(2 * ts), atol=1e-11)


def test_spectral_antiderivative():
    ts = periodic_ts(64)
    a = spectral_antiderivative(np.cos(ts))
    assert np.allclose(a, np.sin(ts), atol=1e-12)
    assert abs(a.mean()) < 1e-14


def test_fourier_eval():
    ts = periodic_ts(32)
    samples = np.cos(ts) + 0.5 * np.sin(3 * ts)
    t = np.array([0.3, 1.7, 5.0])
    expect = np.cos(t) + 0.5 * np.sin(3 * t)
    assert np.allclose(fourier_eval(samples, t), expect, atol=1e-12)
    stacked = np.stack([samples, 2 * samples])
    out = fourier_eval(stacked, t)
    assert out.shape == (2, 3)
    assert np.allclose(out[1], 2 * expect, atol=1e-12)


def test_csv_round_trip(tmp_path):
    g = make_ball_grid(2, 9)
    rng = np.random.default_rng(11)
    vals = rng.normal(size=(g.P, 3))
    vals[0, 0] = np.pi
    vals[1, 1] = 1.0 / 3.0
    vals[~g.nonext_mask] = 0.0
    path = tmp_path / "field.csv"
    field_to_csv(g, vals, str(path))
    back = csv_to_field(g, str(path))
    assert np.array_equal(back, vals)
    header = path.read_text().splitlines()[0]
    assert header == "x1,x2,c0,c1,c2"


def test_csv_scalar_round_trip(tmp_path):
    g = make_ball_grid(1, 5)
    vals = np.array([1e-300, 0.1, -2.5, 3.0, 7.0])
    path = tmp_path / "s.csv"
    field_to_csv(g, vals, str(path))
    back = csv_to_field(g, str(path))
    assert back.shape == (g.P,)
    assert np.array_equal(back, vals)


def test_csv_lexicographic_order(tmp_path):
    g = make_ball_grid(2, 3)
    vals = np.arange(g.P, dtype=float)
    path = tmp_path / "lex.csv"
    field_to_csv(g, vals, str(path))
    lines = path.read_text().splitlines()[1:]
    xs = [tuple(float(v) for v in line.split(",")[:2]) for line in lines]
    assert xs == sorted(xs)


def test_sym_index():
    assert sym_index(0, 0, 2) == 0
    assert sym_index(0, 1, 2) == 1
    assert sym_index(1, 1, 2) == 2
    assert sym_index(1, 0, 2) == 1
    assert sym_index(2, 2, 3) == 5
