"""Factored forward operators against dense elementwise oracles."""

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from pnkr.forward import (
    LinearFactor,
    apply_H_all,
    apply_Hr,
    apply_Hr_T,
    apply_M,
    apply_Zs,
    build_forward_system,
    dense_equation_matrix,
    dense_stacked_operator,
    identity_kernel,
    make_smoothing_kernel,
    moment_norm,
    moments_from_samples,
    rho_estimate,
    sample_norm,
    samples_from_moments,
    solve_M,
    synthesize_datacube,
    triangle_kernel,
)
from pnkr.grid_basis import build_gram_matrices, make_basis, uniform_axis
from pnkr.templates import build_template_grid, kernel_theta_integrals


def small_basis(s):
    omega = (uniform_axis(-1.0, 1.0, 4), uniform_axis(-1.0, 1.0, 4))
    theta = (
        uniform_axis(-1000.0, 1000.0, 4),
        uniform_axis(-2.0, 0.0, 3),
        uniform_axis(1.0, 13.0, 3),
    )
    return make_basis(s, omega, theta, beta=0.3 if s == 1 else 0.0)


def small_system(s, R=5, seed=0):
    basis = small_basis(s)
    grams = build_gram_matrices(basis)
    rng = np.random.default_rng(seed)
    Q = rng.standard_normal((basis.L, R))
    return build_forward_system(basis, Q, grams=grams), grams


def dense_Hr_elementwise(system, r):
    N, L = system.N, system.L
    Gd = system.G.toarray()
    H = np.zeros((N, N * L))
    for j in range(N):
        for n in range(N):
            for l in range(L):
                H[j, n * L + l] = Gd[j, n] * system.Q[l, r - 1]
    return H


def dense_M_elementwise(system):
    N, L = system.N, system.L
    Psid = system.Psi.toarray()
    Phid = system.Phi.toarray()
    M = np.zeros((N * L, N * L))
    for n in range(N):
        for l in range(L):
            for np_ in range(N):
                for lp in range(L):
                    M[n * L + l, np_ * L + lp] = Psid[n, np_] * Phid[l, lp]
    return M


@pytest.mark.parametrize("s", [0, 1])
def test_apply_Hr_matches_elementwise_dense(s):
    system, _ = small_system(s)
    rng = np.random.default_rng(1)
    for r in (1, 3, system.R):
        H = dense_Hr_elementwise(system, r)
        np.testing.assert_allclose(dense_equation_matrix(system, r), H, rtol=0, atol=1e-14)
        for _ in range(5):
            u = rng.standard_normal(system.N * system.L)
            got = apply_Hr(system, u, r)
            want = H @ u
            np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12 * np.abs(want).max())


@pytest.mark.parametrize("s", [0, 1])
def test_apply_Hr_T_matches_dense_transpose(s):
    system, _ = small_system(s)
    rng = np.random.default_rng(2)
    for r in (2, system.R):
        H = dense_Hr_elementwise(system, r)
        for _ in range(5):
            w = rng.standard_normal(system.N)
            got = apply_Hr_T(system, w, r)
            want = H.T @ w
            np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12 * np.abs(want).max())


@pytest.mark.parametrize("s", [0, 1])
def test_adjointness_random(s):
    system, _ = small_system(s)
    rng = np.random.default_rng(3)
    M = system.N * system.L
    for _ in range(100):
        u = rng.standard_normal(M)
        w = rng.standard_normal(system.N)
        r = int(rng.integers(1, system.R + 1))
        lhs = float(apply_Hr(system, u, r) @ w)
        rhs = float(u @ apply_Hr_T(system, w, r))
        assert abs(lhs - rhs) / (np.linalg.norm(u) * np.linalg.norm(w)) <= 1e-10


@pytest.mark.parametrize("s", [0, 1])
def test_apply_M_and_solve_M_match_elementwise_dense(s):
    system, _ = small_system(s)
    Md = dense_M_elementwise(system)
    rng = np.random.default_rng(4)
    for _ in range(5):
        u = rng.standard_normal(system.N * system.L)
        want = Md @ u
        np.testing.assert_allclose(apply_M(system, u), want, rtol=1e-10, atol=1e-12 * np.abs(want).max())
        z = rng.standard_normal(system.N * system.L)
        want = np.linalg.solve(Md, z)
        np.testing.assert_allclose(solve_M(system, z), want, rtol=1e-10, atol=1e-10 * np.abs(want).max())


@pytest.mark.parametrize("s", [0, 1])
def test_solve_M_roundtrip(s):
    system, _ = small_system(s)
    rng = np.random.default_rng(5)
    u = rng.standard_normal(system.N * system.L)
    np.testing.assert_allclose(solve_M(system, apply_M(system, u)), u, rtol=1e-8, atol=1e-10)


def test_solve_M_s0_is_entrywise_division():
    system, grams = small_system(0)
    c_Psi = grams.Psi.diagonal()[0]
    c_Phi = grams.Phi.diagonal()[0]
    np.testing.assert_allclose(grams.Psi.diagonal(), c_Psi, rtol=1e-12)
    np.testing.assert_allclose(grams.Phi.diagonal(), c_Phi, rtol=1e-12)
    rng = np.random.default_rng(6)
    z = rng.standard_normal(system.N * system.L)
    np.testing.assert_allclose(solve_M(system, z), z / (c_Psi * c_Phi), rtol=1e-12)


@pytest.mark.parametrize("s", [0, 1])
def test_linearity_and_zero(s):
    system, _ = small_system(s)
    M = system.N * system.L
    assert np.all(apply_Hr(system, np.zeros(M), 1) == 0.0)
    assert np.all(synthesize_datacube(system, np.zeros(M)) == 0.0)
    rng = np.random.default_rng(7)
    u1 = rng.standard_normal(M)
    u2 = rng.standard_normal(M)
    lhs = synthesize_datacube(system, u1 + u2)
    rhs = synthesize_datacube(system, u1) + synthesize_datacube(system, u2)
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12 * np.abs(rhs).max())
    W = apply_H_all(system, u1)
    for r in range(1, system.R + 1):
        np.testing.assert_allclose(W[:, r - 1], apply_Hr(system, u1, r), rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("s", [0, 1])
def test_nonnegative_cube_from_kernel_table(s):
    basis = small_basis(s)
    template = build_template_grid(480.0, 570.0, 16, 1100.0, np.linspace(-2.6, 0.3, 5), np.linspace(0.5, 14.0, 6))
    table = kernel_theta_integrals(template, basis)
    assert np.all(table.Q >= 0.0)
    system = build_forward_system(basis, table, grams=build_gram_matrices(basis))
    rng = np.random.default_rng(8)
    u = rng.random(basis.N * basis.L)
    assert np.all(synthesize_datacube(system, u) >= 0.0)
    assert np.all(apply_H_all(system, u) >= -1e-13)


@pytest.mark.parametrize("s", [0, 1])
def test_sample_and_moment_norms_agree(s):
    system, _ = small_system(s)
    rng = np.random.default_rng(9)
    d = rng.standard_normal(system.N)
    w = moments_from_samples(system, d)
    assert abs(moment_norm(system, w) - sample_norm(system, d)) <= 1e-10 * sample_norm(system, d)
    np.testing.assert_allclose(samples_from_moments(system, w), d, rtol=1e-10, atol=1e-13)
    D = rng.standard_normal((system.N, 4))
    norms = sample_norm(system, D)
    assert norms.shape == (4,)
    for j in range(4):
        np.testing.assert_allclose(norms[j], sample_norm(system, D[:, j]), rtol=1e-12)
    if s == 0:
        np.testing.assert_allclose(sample_norm(system, d), np.sqrt(system.c_N) * np.linalg.norm(d), rtol=1e-12)


@pytest.mark.parametrize("s", [0, 1])
def test_rho_estimate_matches_dense_eigenvalues(s):
    system, _ = small_system(s)
    Md = dense_M_elementwise(system)
    Ninv = np.linalg.inv(system.G.toarray())
    Minv = np.linalg.inv(Md)
    per_eq = []
    normal = np.zeros_like(Md)
    for r in range(1, system.R + 1):
        H = dense_Hr_elementwise(system, r)
        HtNH = H.T @ Ninv @ H
        per_eq.append(np.max(np.linalg.eigvals(Minv @ HtNH).real))
        normal += HtNH
    np.testing.assert_allclose(rho_estimate(system), max(per_eq), rtol=1e-6)
    want_stacked = np.max(np.linalg.eigvals(Minv @ normal).real)
    np.testing.assert_allclose(rho_estimate(system, stacked=True), want_stacked, rtol=1e-6)


def test_input_validation():
    system, _ = small_system(0)
    M = system.N * system.L
    with pytest.raises(ValueError):
        apply_Hr(system, np.zeros(M + 1), 1)
    with pytest.raises(ValueError):
        apply_Hr(system, np.zeros(M), 0)
    with pytest.raises(ValueError):
        apply_Hr(system, np.zeros(M), system.R + 1)
    with pytest.raises(ValueError):
        apply_Hr_T(system, np.zeros(system.N + 2), 1)
    with pytest.raises(ValueError):
        build_forward_system(system.basis, np.zeros((3, 4)))


def test_linear_factor_paths():
    d = np.array([2.0, 0.5, 4.0])
    f = LinearFactor(sp.diags(d).tocsc())
    assert f.is_diagonal
    np.testing.assert_allclose(f.solve(np.ones(3)), 1.0 / d, rtol=0, atol=0)
    A = sp.diags([[-1.0, -1.0], [4.0, 4.0, 4.0], [-1.0, -1.0]], [-1, 0, 1]).tocsc()
    f = LinearFactor(A)
    assert not f.is_diagonal
    rng = np.random.default_rng(10)
    b = rng.standard_normal(3)
    np.testing.assert_allclose(f.solve(b), np.linalg.solve(A.toarray(), b), rtol=1e-12)
    with pytest.raises(ValueError):
        LinearFactor(sp.diags([0.0, 1.0]).tocsc())
    with pytest.raises(ValueError):
        LinearFactor(sp.csc_matrix((2, 3)))


# -- smoothing stencil -------------------------------------------------------


def zs_basis():
    omega = (uniform_axis(-1.0, 1.0, 4), uniform_axis(-1.0, 1.0, 4))
    theta = (
        uniform_axis(-1000.0, 1000.0, 5),
        uniform_axis(-2.0, 0.0, 4),
        uniform_axis(1.0, 13.0, 4),
    )
    return make_basis(0, omega, theta)


def test_smoothing_kernel_validation():
    with pytest.raises(ValueError):
        make_smoothing_kernel([0.5, 0.5])
    with pytest.raises(ValueError):
        make_smoothing_kernel([-0.5, 2.0, -0.5])
    with pytest.raises(ValueError):
        make_smoothing_kernel([0.2, 0.5, 0.3])
    with pytest.raises(ValueError):
        make_smoothing_kernel([0.3, 0.3, 0.3])
    with pytest.raises(ValueError):
        make_smoothing_kernel([[1.0], [1.0]])


def test_apply_Zs_identity_and_constant():
    basis = zs_basis()
    rng = np.random.default_rng(11)
    u = rng.standard_normal(basis.N * basis.L)
    np.testing.assert_array_equal(apply_Zs(u, basis, identity_kernel()), u)
    const = np.full(basis.N * basis.L, 3.25)
    np.testing.assert_allclose(apply_Zs(const, basis, triangle_kernel()), const, rtol=0, atol=1e-13)


def test_apply_Zs_impulse_pattern():
    basis = zs_basis()
    u5 = np.zeros(basis.shape5)
    u5[1, 1, 2, 1, 1] = 1.0
    out = apply_Zs(u5.reshape(-1), basis, triangle_kernel()).reshape(basis.shape5)
    tap = np.array([0.25, 0.5, 0.25])
    want = np.einsum("a,b,c,d,e->abcde", *([tap] * 5))
    np.testing.assert_allclose(out[0:3, 0:3, 1:4, 0:3, 0:3], want, rtol=0, atol=1e-15)
    assert abs(out.sum() - 1.0) <= 1e-12


def test_apply_Zs_preserves_sum_with_triangle():
    basis = zs_basis()
    rng = np.random.default_rng(12)
    u = rng.random(basis.N * basis.L)
    out = apply_Zs(u, basis, triangle_kernel())
    np.testing.assert_allclose(out.sum(), u.sum(), rtol=1e-10)


def test_apply_Zs_width_error():
    omega = (uniform_axis(-1.0, 1.0, 4), uniform_axis(-1.0, 1.0, 4))
    theta = (uniform_axis(-1000.0, 1000.0, 4), uniform_axis(-2.0, 0.0, 3), uniform_axis(1.0, 13.0, 3))
    basis = make_basis(0, omega, theta)
    with pytest.raises(ValueError):
        apply_Zs(np.zeros(basis.N * basis.L), basis, triangle_kernel())


@settings(max_examples=25, deadline=None)
@given(
    a=st.floats(-3.0, 3.0, allow_nan=False),
    b=st.floats(-3.0, 3.0, allow_nan=False),
    seed=st.integers(0, 2**31 - 1),
)
def test_apply_Zs_is_linear(a, b, seed):
    basis = zs_basis()
    rng = np.random.default_rng(seed)
    u1 = rng.standard_normal(basis.N * basis.L)
    u2 = rng.standard_normal(basis.N * basis.L)
    kernel = triangle_kernel()
    lhs = apply_Zs(a * u1 + b * u2, basis, kernel)
    rhs = a * apply_Zs(u1, basis, kernel) + b * apply_Zs(u2, basis, kernel)
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-10 * max(1.0, np.abs(rhs).max()))
