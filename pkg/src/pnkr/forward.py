"""Discrete forward operators for the block inverse problem.

One wavelength channel ``r`` contributes the moment-matching equation

    H_r u = w_r,    H_r = G (x) q_r^T,

where ``G`` is the spatial L2 Gram matrix, ``q_r`` is column ``r`` of the
kernel-integral table, and ``u`` stores the coefficient tensor ``U`` of
shape ``(N, L)`` position-major (``U[n, l] = u[n * L + l]`` with 0-based
``n``, ``l``; the population-kinematic index ``l`` is fastest).  That
layout is the single source of truth for every reshape in the package:
under it the reconstruction-space Gram factors as ``M = Psi (x) Phi`` and
every operator here reduces to small matrix products with ``U``.

The data-space (noise) Gram is ``G`` itself, so residual norms in the
``N``-induced metric collapse to plain sample-space quadratic forms and
the per-equation update direction is the rank-one matrix

    M^-1 H_r^T N^-1 d = (Psi^-1 G d) (Phi^-1 q_r)^T

for a sample-space residual ``d``.  ``Phi^-1 q_r`` is iterate
independent and precomputed once per system.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.ndimage import convolve1d
from scipy.sparse.linalg import splu

from .grid_basis import DiscreteBasis, GramMatrices, build_gram_matrices
from .templates import KernelIntegralTable

__all__ = [
    "LinearFactor",
    "ForwardSystem",
    "SmoothingKernel",
    "build_forward_system",
    "apply_Hr",
    "apply_Hr_T",
    "apply_H_all",
    "synthesize_datacube",
    "apply_M",
    "solve_M",
    "sample_norm",
    "moment_norm",
    "moments_from_samples",
    "samples_from_moments",
    "rho_estimate",
    "dense_equation_matrix",
    "dense_stacked_operator",
    "identity_kernel",
    "triangle_kernel",
    "make_smoothing_kernel",
    "apply_Zs",
]


class LinearFactor:
    """Solve-ready factorization of a symmetric positive definite matrix.

    Diagonal matrices keep only their reciprocal diagonal; everything
    else goes through a sparse LU factorization whose triangular factors
    are stored once and reused.  Explicit inverses are never formed.

    Parameters
    ----------
    A : sparse matrix
        Symmetric positive definite matrix to factor.

    Raises
    ------
    ValueError
        If the matrix is not square, has a non-positive diagonal entry,
        or the factorization detects singularity.
    """

    def __init__(self, A: sp.spmatrix) -> None:
        A = sp.csc_matrix(A)
        if A.shape[0] != A.shape[1]:
            raise ValueError("matrix to factor must be square")
        d = A.diagonal()
        if np.any(d <= 0.0) or not np.all(np.isfinite(d)):
            raise ValueError("matrix to factor must have a positive diagonal")
        self.matrix = A
        self.n = A.shape[0]
        off = (A - sp.diags(d)).tocsr()
        off.eliminate_zeros()
        if off.nnz == 0:
            self._recip = 1.0 / d
            self._lu = None
        else:
            self._recip = None
            try:
                self._lu = splu(A)
            except RuntimeError as exc:
                raise ValueError(f"matrix factorization failed: {exc}") from exc

    @property
    def is_diagonal(self) -> bool:
        return self._recip is not None

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Solve ``A x = b`` for one vector or a stack of columns."""
        b = np.asarray(b, dtype=float)
        if b.shape[0] != self.n:
            raise ValueError(f"right-hand side has leading dimension {b.shape[0]}, expected {self.n}")
        if self._recip is not None:
            return b * (self._recip if b.ndim == 1 else self._recip[:, None])
        return self._lu.solve(np.ascontiguousarray(b))


@dataclass(frozen=True, eq=False)
class ForwardSystem:
    """Assembled forward operator for one discretization and template table.

    Attributes
    ----------
    basis : DiscreteBasis
    G : csc_matrix, (N, N)
        Spatial L2 Gram; doubles as the data-space Gram.
    Q : ndarray, (L, R)
        Kernel integrals of every population-kinematic basis function
        against every observed wavelength channel.
    Psi_inv_factor, Phi_inv_factor : LinearFactor
        Factorizations of the reconstruction-space Gram factors.
    G_inv_factor : LinearFactor
        Factorization of ``G`` for data-space norms and conversions.
    c_N : float
        Mean diagonal of ``G`` (the common cell volume for ``s = 0`` on
        uniform spatial grids).
    Phi_inv_Q : ndarray, (L, R)
        Precomputed ``Phi^-1 Q``; column ``r`` is the iterate-independent
        factor of equation ``r``'s update direction.
    q_Phi_q : ndarray, (R,)
        Quadratic forms ``q_r^T Phi^-1 q_r``.
    """

    basis: DiscreteBasis
    G: sp.csc_matrix
    Q: np.ndarray
    Psi_inv_factor: LinearFactor
    Phi_inv_factor: LinearFactor
    G_inv_factor: LinearFactor
    c_N: float
    Phi_inv_Q: np.ndarray = field(repr=False)
    q_Phi_q: np.ndarray = field(repr=False)

    @property
    def N(self) -> int:
        return self.basis.N

    @property
    def L(self) -> int:
        return self.basis.L

    @property
    def R(self) -> int:
        return self.Q.shape[1]

    @property
    def Psi(self) -> sp.csc_matrix:
        return self.Psi_inv_factor.matrix

    @property
    def Phi(self) -> sp.csc_matrix:
        return self.Phi_inv_factor.matrix


def build_forward_system(
    basis: DiscreteBasis,
    table: KernelIntegralTable | np.ndarray,
    grams: GramMatrices | None = None,
    quad_points: int = 50,
) -> ForwardSystem:
    """Assemble Gram factorizations and kernel columns into a system.

    Parameters
    ----------
    basis : DiscreteBasis
    table : KernelIntegralTable or ndarray
        Kernel integrals, shape ``(L, R)``.
    grams : GramMatrices, optional
        Previously assembled Gram matrices; assembled here if omitted.
    quad_points : int
        Quadrature resolution for the Gram assembly when it happens here.
    """
    Q = table.Q if isinstance(table, KernelIntegralTable) else np.asarray(table, dtype=float)
    if Q.ndim != 2 or Q.shape[0] != basis.L:
        raise ValueError(f"kernel table has shape {Q.shape}, expected ({basis.L}, R)")
    if not np.all(np.isfinite(Q)):
        raise ValueError("kernel table contains non-finite entries")
    if grams is None:
        grams = build_gram_matrices(basis, quad_points)
    Psi_f = LinearFactor(grams.Psi)
    Phi_f = LinearFactor(grams.Phi)
    G_f = LinearFactor(grams.G)
    Phi_inv_Q = Phi_f.solve(Q)
    q_Phi_q = np.einsum("lr,lr->r", Q, Phi_inv_Q)
    return ForwardSystem(
        basis=basis,
        G=grams.G,
        Q=Q,
        Psi_inv_factor=Psi_f,
        Phi_inv_factor=Phi_f,
        G_inv_factor=G_f,
        c_N=grams.c_N,
        Phi_inv_Q=Phi_inv_Q,
        q_Phi_q=q_Phi_q,
    )


def _as_coefficients(system: ForwardSystem, u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.shape != (system.N * system.L,):
        raise ValueError(f"coefficient vector has shape {u.shape}, expected ({system.N * system.L},)")
    return u


def _check_r(system: ForwardSystem, r: int) -> int:
    r = int(r)
    if not 1 <= r <= system.R:
        raise ValueError(f"wavelength index r={r} outside 1..{system.R}")
    return r


def apply_Hr(system: ForwardSystem, u: np.ndarray, r: int) -> np.ndarray:
    """Moment vector of channel ``r``: ``G (U q_r)``.

    ``r`` is 1-based like the channel numbering in the data files.
    """
    r = _check_r(system, r)
    U = _as_coefficients(system, u).reshape(system.N, system.L)
    return system.G @ (U @ system.Q[:, r - 1])


def apply_Hr_T(system: ForwardSystem, w: np.ndarray, r: int) -> np.ndarray:
    """Exact transpose of :func:`apply_Hr`: ``vec((G w) q_r^T)``."""
    r = _check_r(system, r)
    w = np.asarray(w, dtype=float)
    if w.shape != (system.N,):
        raise ValueError(f"moment vector has shape {w.shape}, expected ({system.N},)")
    return np.outer(system.G @ w, system.Q[:, r - 1]).reshape(-1)


def apply_H_all(system: ForwardSystem, u: np.ndarray) -> np.ndarray:
    """All R moment vectors at once, as columns of an ``(N, R)`` array."""
    U = _as_coefficients(system, u).reshape(system.N, system.L)
    return system.G @ (U @ system.Q)


def synthesize_datacube(system: ForwardSystem, u: np.ndarray) -> np.ndarray:
    """Data-space samples of the modeled cube, shape ``(N, R)``.

    Samples live at the spatial sites, so converting the moment vectors
    ``G (U q_r)`` back to sample space cancels ``G`` and the cube is just
    ``U Q``.
    """
    U = _as_coefficients(system, u).reshape(system.N, system.L)
    return U @ system.Q


def apply_M(system: ForwardSystem, u: np.ndarray) -> np.ndarray:
    """Reconstruction-space Gram product ``vec(Psi U Phi)``."""
    U = _as_coefficients(system, u).reshape(system.N, system.L)
    return np.asarray((system.Psi @ (system.Phi @ U.T).T)).reshape(-1)


def solve_M(system: ForwardSystem, zvec: np.ndarray) -> np.ndarray:
    """Apply ``M^-1 = Psi^-1 (x) Phi^-1`` through the stored factors.

    Solves ``Psi X Phi = Z`` with ``Z = reshape(zvec, (N, L))`` by one
    factored solve per Kronecker factor; never forms ``M``.
    """
    Z = _as_coefficients(system, zvec).reshape(system.N, system.L)
    X = system.Psi_inv_factor.solve(Z)
    X = system.Phi_inv_factor.solve(X.T).T
    return np.ascontiguousarray(X).reshape(-1)


def sample_norm(system: ForwardSystem, d: np.ndarray) -> float | np.ndarray:
    """L2(Omega) norm of data-space sample vectors: ``sqrt(d^T G d)``.

    A 2D input is treated as one sample vector per column and returns
    one norm per column.
    """
    d = np.asarray(d, dtype=float)
    if d.shape[0] != system.N:
        raise ValueError(f"sample vector has leading dimension {d.shape[0]}, expected {system.N}")
    q = np.einsum("n...,n...->...", d, system.G @ d)
    return np.sqrt(q)


def moment_norm(system: ForwardSystem, w: np.ndarray) -> float | np.ndarray:
    """Noise-metric norm of moment vectors: ``sqrt(w^T G^-1 w)``."""
    w = np.asarray(w, dtype=float)
    if w.shape[0] != system.N:
        raise ValueError(f"moment vector has leading dimension {w.shape[0]}, expected {system.N}")
    q = np.einsum("n...,n...->...", w, system.G_inv_factor.solve(w))
    return np.sqrt(q)


def moments_from_samples(system: ForwardSystem, samples: np.ndarray) -> np.ndarray:
    """Moment vectors ``w = G y`` of per-site samples (vector or cube)."""
    samples = np.asarray(samples, dtype=float)
    if samples.shape[0] != system.N:
        raise ValueError(f"sample array has leading dimension {samples.shape[0]}, expected {system.N}")
    return system.G @ samples


def samples_from_moments(system: ForwardSystem, w: np.ndarray) -> np.ndarray:
    """Inverse of :func:`moments_from_samples`."""
    w = np.asarray(w, dtype=float)
    if w.shape[0] != system.N:
        raise ValueError(f"moment array has leading dimension {w.shape[0]}, expected {system.N}")
    return system.G_inv_factor.solve(w)


def _power_lambda(apply_B, inner, n: int, iters: int, tol: float, seed: int) -> float:
    # power iteration for an operator self-adjoint and nonnegative in the
    # metric behind `inner`; returns its largest eigenvalue estimate
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(iters):
        y = apply_B(x)
        num = inner(x, y)
        den = inner(x, x)
        lam_new = num / den
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return 0.0
        x = y / ny
        if abs(lam_new - lam) <= tol * max(abs(lam_new), 1e-300):
            return lam_new
        lam = lam_new
    return lam


def rho_estimate(
    system: ForwardSystem,
    stacked: bool = False,
    iters: int = 200,
    tol: float = 1e-12,
    seed: int = 0,
) -> float:
    """Estimate the largest preconditioned operator eigenvalue.

    With ``stacked=False`` (the per-equation case that bounds Kaczmarz
    stepsizes) the operator ``M^-1 H_r^T N^-1 H_r`` factors as
    ``(Psi^-1 G) (x) (Phi^-1 q_r q_r^T)``, so its largest eigenvalue is
    ``lambda_max(Psi^-1 G) * max_r q_r^T Phi^-1 q_r`` with only the
    spatial factor needing power iteration.  With ``stacked=True`` the
    full normal operator ``M^-1 sum_r H_r^T N^-1 H_r`` is
    ``(Psi^-1 G) (x) (Phi^-1 Q Q^T)`` and the second factor is power
    iterated as well.  Stable stepsizes are ``omega < 2 / rho``.
    """
    G = system.G
    lam_psi = _power_lambda(
        lambda x: system.Psi_inv_factor.solve(G @ x),
        lambda a, b: float(a @ (G @ b)),
        system.N,
        iters,
        tol,
        seed,
    )
    if not stacked:
        return lam_psi * float(np.max(system.q_Phi_q))
    Q = system.Q
    Phi = system.Phi
    lam_phi = _power_lambda(
        lambda x: system.Phi_inv_factor.solve(Q @ (Q.T @ x)),
        lambda a, b: float(a @ (Phi @ b)),
        system.L,
        iters,
        tol,
        seed + 1,
    )
    return lam_psi * lam_phi


def dense_equation_matrix(system: ForwardSystem, r: int) -> np.ndarray:
    """Materialize ``H_r = G (x) q_r^T`` as a dense ``(N, N L)`` array."""
    r = _check_r(system, r)
    return np.kron(system.G.toarray(), system.Q[:, r - 1][None, :])


def dense_stacked_operator(system: ForwardSystem) -> np.ndarray:
    """Stack every ``H_r`` into one dense ``(N R, N L)`` array."""
    return np.vstack([dense_equation_matrix(system, r) for r in range(1, system.R + 1)])


# -- separable smoothing stencil ---------------------------------------------


@dataclass(frozen=True, eq=False)
class SmoothingKernel:
    """Separable 5D convolution stencil, one tap vector per axis.

    Each tap vector must have odd length, nonnegative entries, mirror
    symmetry, and unit sum to 1e-12; those conditions make the stencil a
    local averaging that fixes constants under replicate-edge handling.
    """

    taps: tuple

    def __post_init__(self) -> None:
        if len(self.taps) != 5:
            raise ValueError("a smoothing kernel needs one tap vector per axis (5)")
        for t in self.taps:
            if t.ndim != 1 or t.size % 2 == 0:
                raise ValueError("each tap vector must be 1D with odd length")
            if not np.all(np.isfinite(t)) or np.any(t < 0.0):
                raise ValueError("tap entries must be finite and nonnegative")
            if not np.allclose(t, t[::-1], rtol=0.0, atol=1e-12):
                raise ValueError("tap vectors must be symmetric")
            if abs(float(t.sum()) - 1.0) > 1e-12:
                raise ValueError("tap vectors must sum to 1")


def make_smoothing_kernel(taps) -> SmoothingKernel:
    """Build a kernel from one shared tap vector or five per-axis ones."""
    first = np.asarray(taps[0], dtype=float) if len(taps) > 0 else None
    if first is not None and first.ndim == 0:
        shared = np.asarray(taps, dtype=float)
        per_axis = [shared.copy() for _ in range(5)]
    else:
        if len(taps) != 5:
            raise ValueError("expected one tap vector or a sequence of five")
        per_axis = [np.asarray(t, dtype=float) for t in taps]
    return SmoothingKernel(taps=tuple(per_axis))


def identity_kernel() -> SmoothingKernel:
    """Stencil with a single unit tap per axis; leaves inputs unchanged."""
    return make_smoothing_kernel([1.0])


def triangle_kernel() -> SmoothingKernel:
    """Default smoothing stencil: [1/4, 1/2, 1/4] along every axis."""
    return make_smoothing_kernel([0.25, 0.5, 0.25])


def apply_Zs(u: np.ndarray, basis: DiscreteBasis, kernel: SmoothingKernel) -> np.ndarray:
    """Convolve the coefficient lattice with the separable stencil.

    The vector is reshaped to the 5D lattice, each axis is convolved
    with its tap vector under replicate-edge boundary handling, and the
    result is flattened back.  Linear in ``u``.
    """
    u = np.asarray(u, dtype=float)
    shape5 = basis.shape5
    if u.shape != (basis.N * basis.L,):
        raise ValueError(f"coefficient vector has shape {u.shape}, expected ({basis.N * basis.L},)")
    arr = u.reshape(shape5)
    for ax, tap in enumerate(kernel.taps):
        if tap.size > shape5[ax]:
            raise ValueError(f"tap vector of length {tap.size} is wider than axis {ax} (size {shape5[ax]})")
        if tap.size == 1:
            if tap[0] != 1.0:
                arr = arr * tap[0]
            continue
        arr = convolve1d(arr, tap, axis=ax, mode="nearest")
    return np.ascontiguousarray(arr).reshape(-1)
