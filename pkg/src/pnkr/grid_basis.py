"""Axis grids, tensor-product bases, and Gram matrix assembly.

The reconstruction space is spanned by products ``psi_n(x1, x2) *
phi_l(v, z, t)``.  Both factors use the same per-axis construction:
piecewise-constant indicators on cells (``s = 0``) or continuous
piecewise-linear hats centered on cell midpoints (``s = 1``).  Hats at the
two ends of an axis continue with the constant value 1 across the strip
between the domain edge and the outermost midpoint, so the family sums to
one everywhere and interpolates nodal values at the midpoints.

A :class:`DiscreteBasis` carries the grids of both domains together with
the smoothness order ``s`` and the gradient-penalty weights ``beta``.
Gram matrices are assembled axis by axis with a composite trapezoid rule
applied piecewise between the kinks of the integrands, then combined as
Kronecker products.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "AxisGrid",
    "uniform_axis",
    "geometric_axis",
    "explicit_axis",
    "DiscreteBasis",
    "make_basis",
    "GramMatrices",
    "assemble_gram",
    "build_gram_matrices",
    "split_index",
    "flat_index",
    "eval_axis_basis",
    "axis_weights",
    "axis_first_moments",
    "basis_integral_weights",
    "coefficients_to_function",
    "AxisSpec",
    "GridSpec",
    "parse_grid_spec",
    "read_grid_spec",
    "format_grid_spec",
    "write_grid_spec",
    "build_basis",
]

AXIS_NAMES = ("x1", "x2", "v", "z", "t")


@dataclass(frozen=True, eq=False)
class AxisGrid:
    """One coordinate axis, described by the ordered cell boundaries.

    Attributes
    ----------
    nodes : ndarray
        Strictly increasing cell boundaries, length ``n_cells + 1``.
    uniform : bool
        True when all cell widths agree to relative precision 1e-12.
    """

    nodes: np.ndarray
    uniform: bool

    @property
    def n_cells(self) -> int:
        return len(self.nodes) - 1

    @property
    def lo(self) -> float:
        return float(self.nodes[0])

    @property
    def hi(self) -> float:
        return float(self.nodes[-1])

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.nodes)

    @property
    def centers(self) -> np.ndarray:
        """Cell midpoints; these are the sample sites of both bases."""
        return 0.5 * (self.nodes[:-1] + self.nodes[1:])

    @property
    def spacing(self) -> float:
        if not self.uniform:
            raise ValueError("spacing is defined only for uniform axes")
        return (self.hi - self.lo) / self.n_cells


def _validated_nodes(nodes: Sequence[float]) -> np.ndarray:
    arr = np.asarray(nodes, dtype=float)
    if arr.ndim != 1 or arr.size < 2:
        raise ValueError("an axis needs at least two nodes")
    if not np.all(np.isfinite(arr)):
        raise ValueError("axis nodes must be finite")
    if not np.all(np.diff(arr) > 0):
        raise ValueError("axis nodes must be strictly increasing")
    return arr


def uniform_axis(lo: float, hi: float, count: int) -> AxisGrid:
    """Axis with ``count`` equally spaced nodes from ``lo`` to ``hi``."""
    if count < 2:
        raise ValueError("count must be at least 2")
    if not hi > lo:
        raise ValueError("need hi > lo")
    return AxisGrid(nodes=np.linspace(lo, hi, count), uniform=True)


def geometric_axis(lo: float, hi: float, count: int) -> AxisGrid:
    """Axis with ``count`` nodes in geometric progression; requires lo > 0."""
    if count < 2:
        raise ValueError("count must be at least 2")
    if lo <= 0:
        raise ValueError("geometric spacing needs lo > 0")
    if not hi > lo:
        raise ValueError("need hi > lo")
    return AxisGrid(nodes=np.geomspace(lo, hi, count), uniform=False)


def explicit_axis(values: Sequence[float]) -> AxisGrid:
    """Axis from explicitly listed nodes."""
    arr = _validated_nodes(values)
    w = np.diff(arr)
    uniform = bool(np.all(np.abs(w - w[0]) <= 1e-12 * np.abs(w[0])))
    return AxisGrid(nodes=arr, uniform=uniform)


@dataclass(frozen=True, eq=False)
class DiscreteBasis:
    """Tensor-product discretization of the five coordinate axes.

    Attributes
    ----------
    s : int
        Smoothness order, 0 (cell indicators) or 1 (midpoint hats).
    omega_grids : tuple of AxisGrid
        Spatial axes ``(x1, x2)``.
    theta_grids : tuple of AxisGrid
        Population-kinematic axes ``(v, z, t)``.
    beta : ndarray, shape (5,)
        Gradient-penalty weights per axis, in the order
        ``(x1, x2, v, z, t)``.  Only meaningful for ``s = 1``.
    """

    s: int
    omega_grids: tuple[AxisGrid, AxisGrid]
    theta_grids: tuple[AxisGrid, AxisGrid, AxisGrid]
    beta: np.ndarray

    @property
    def N(self) -> int:
        g1, g2 = self.omega_grids
        return g1.n_cells * g2.n_cells

    @property
    def L(self) -> int:
        gv, gz, gt = self.theta_grids
        return gv.n_cells * gz.n_cells * gt.n_cells

    @property
    def grids(self) -> tuple[AxisGrid, ...]:
        return self.omega_grids + self.theta_grids

    @property
    def shape5(self) -> tuple[int, int, int, int, int]:
        """Cell counts per axis; coefficient arrays reshape to this."""
        return tuple(g.n_cells for g in self.grids)  # type: ignore[return-value]


def make_basis(
    s: int,
    omega_grids: Sequence[AxisGrid],
    theta_grids: Sequence[AxisGrid],
    beta: float | Sequence[float] = 0.0,
) -> DiscreteBasis:
    """Validate and assemble a :class:`DiscreteBasis`."""
    if s not in (0, 1):
        raise ValueError("s must be 0 or 1")
    og = tuple(omega_grids)
    tg = tuple(theta_grids)
    if len(og) != 2 or len(tg) != 3:
        raise ValueError("expected two spatial and three kinematic axes")
    b = np.asarray(beta, dtype=float)
    if b.ndim == 0:
        b = np.full(5, float(b))
    if b.shape != (5,):
        raise ValueError("beta must be a scalar or a length-5 sequence")
    if np.any(b < 0):
        raise ValueError("beta weights must be nonnegative")
    return DiscreteBasis(s=int(s), omega_grids=og, theta_grids=tg, beta=b)


def split_index(m: int | np.ndarray, L: int) -> tuple:
    """Map the 1-based flat index ``m`` to the 1-based pair ``(n, l)``.

    The flat layout is spatial-major: ``m = (n - 1) * L + l``.
    """
    marr = np.asarray(m)
    n = (marr - 1) // L + 1
    l = (marr - 1) % L + 1
    if marr.ndim == 0:
        return int(n), int(l)
    return n, l


def flat_index(n: int | np.ndarray, l: int | np.ndarray, L: int) -> int | np.ndarray:
    """Inverse of :func:`split_index`; all indices 1-based."""
    narr = np.asarray(n)
    out = (narr - 1) * L + np.asarray(l)
    if narr.ndim == 0 and np.ndim(l) == 0:
        return int(out)
    return out


# -- per-axis machinery ------------------------------------------------------


def _breakpoints(grid: AxisGrid, s: int) -> np.ndarray:
    if s == 0:
        return grid.nodes
    return np.concatenate(([grid.lo], grid.centers, [grid.hi]))


def _axis_pieces(grid: AxisGrid, s: int) -> Iterator[tuple]:
    """Smooth pieces of the axis basis.

    Yields ``(a, b, active)`` where ``active`` is a list of
    ``(index, value_at_a, value_at_b)`` for every basis function that is
    nonzero on ``[a, b]``.  All basis functions are linear on a piece, so
    the two endpoint values determine them completely.
    """
    n = grid.n_cells
    if s == 0:
        for i in range(n):
            yield grid.nodes[i], grid.nodes[i + 1], [(i, 1.0, 1.0)]
        return
    bp = _breakpoints(grid, 1)
    yield bp[0], bp[1], [(0, 1.0, 1.0)]
    for j in range(1, n):
        yield bp[j], bp[j + 1], [(j - 1, 1.0, 0.0), (j, 0.0, 1.0)]
    yield bp[n], bp[n + 1], [(n - 1, 1.0, 1.0)]


def _trapezoid_weights(a: float, b: float, q: int) -> tuple[np.ndarray, np.ndarray]:
    x = np.linspace(a, b, q)
    w = np.full(q, (b - a) / (q - 1))
    w[0] *= 0.5
    w[-1] *= 0.5
    return x, w


def _axis_factors(grid: AxisGrid, s: int, quad_points: int) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """1D mass and gradient Gram factors of one axis.

    The mass factor uses a ``quad_points``-point composite trapezoid rule
    on every smooth piece.  Basis derivatives are constant per piece, so
    the gradient factor is exact regardless of ``quad_points``.
    """
    if quad_points < 2:
        raise ValueError("quad_points must be at least 2")
    n = grid.n_cells
    A = np.zeros((n, n))
    B = np.zeros((n, n))
    for a, b, active in _axis_pieces(grid, s):
        xq, wq = _trapezoid_weights(a, b, quad_points)
        frac = (xq - a) / (b - a)
        vals = np.array([va + (vb - va) * frac for (_, va, vb) in active])
        ders = np.array([(vb - va) / (b - a) for (_, va, vb) in active])
        idx = [i for (i, _, _) in active]
        A[np.ix_(idx, idx)] += (vals * wq) @ vals.T
        B[np.ix_(idx, idx)] += np.outer(ders, ders) * (b - a)
    return sp.csr_matrix(A), sp.csr_matrix(B)


def eval_axis_basis(grid: AxisGrid, s: int, x: np.ndarray) -> np.ndarray:
    """Values of all axis basis functions at ``x``; shape ``(len(x), n_cells)``.

    Points outside ``[lo, hi]`` give all-zero rows; both boundaries are
    included in the domain.
    """
    xarr = np.atleast_1d(np.asarray(x, dtype=float))
    n = grid.n_cells
    out = np.zeros((xarr.size, n))
    inside = (xarr >= grid.lo) & (xarr <= grid.hi)
    if s == 0:
        idx = np.clip(np.searchsorted(grid.nodes, xarr, side="right") - 1, 0, n - 1)
        out[inside, idx[inside]] = 1.0
        return out
    bp = _breakpoints(grid, 1)
    piece = np.clip(np.searchsorted(bp, xarr, side="right") - 1, 0, n)
    lo_strip = inside & (piece == 0)
    hi_strip = inside & (piece == n)
    out[lo_strip, 0] = 1.0
    out[hi_strip, n - 1] = 1.0
    mid = inside & ~lo_strip & ~hi_strip
    j = piece[mid]
    g = bp[j + 1] - bp[j]
    rise = (xarr[mid] - bp[j]) / g
    out[mid, j] = rise
    out[mid, j - 1] = 1.0 - rise
    return out


def eval_axis_basis_on_panel(
    grid: AxisGrid, s: int, x: np.ndarray, panel_mid: float
) -> np.ndarray:
    """Basis values on a quadrature panel that lies inside one smooth piece.

    Point evaluation at a breakpoint is ambiguous for the discontinuous
    ``s = 0`` family; quadrature panels therefore resolve ownership by the
    panel midpoint and evaluate the piece's own polynomial at the panel
    points, endpoints included.
    """
    xarr = np.asarray(x, dtype=float)
    n = grid.n_cells
    out = np.zeros((xarr.size, n))
    if s == 0:
        i = int(np.clip(np.searchsorted(grid.nodes, panel_mid, side="right") - 1, 0, n - 1))
        out[:, i] = 1.0
        return out
    bp = _breakpoints(grid, 1)
    j = int(np.clip(np.searchsorted(bp, panel_mid, side="right") - 1, 0, n))
    if j == 0:
        out[:, 0] = 1.0
    elif j == n:
        out[:, n - 1] = 1.0
    else:
        rise = (xarr - bp[j]) / (bp[j + 1] - bp[j])
        out[:, j] = rise
        out[:, j - 1] = 1.0 - rise
    return out


def axis_weights(grid: AxisGrid, s: int) -> np.ndarray:
    """Exact integrals of the axis basis functions."""
    n = grid.n_cells
    w = np.zeros(n)
    for a, b, active in _axis_pieces(grid, s):
        for i, va, vb in active:
            w[i] += 0.5 * (va + vb) * (b - a)
    return w


def axis_first_moments(grid: AxisGrid, s: int) -> np.ndarray:
    """Exact integrals of ``x * basis_i(x)`` along one axis."""
    n = grid.n_cells
    m = np.zeros(n)
    # 2-point Gauss is exact for the quadratic integrand x * linear
    gp = 0.5 / np.sqrt(3.0)
    for a, b, active in _axis_pieces(grid, s):
        h = b - a
        xg = np.array([a + h * (0.5 - gp), a + h * (0.5 + gp)])
        frac = (xg - a) / h
        for i, va, vb in active:
            vals = va + (vb - va) * frac
            m[i] += 0.5 * h * np.sum(xg * vals)
    return m


def basis_integral_weights(basis: DiscreteBasis) -> tuple[np.ndarray, np.ndarray]:
    """Integral weights ``(w_omega, w_theta)`` of the two factor bases.

    ``w_omega`` has length ``N`` and ``w_theta`` length ``L``; the integral
    of the expansion with coefficients ``u`` is ``(w_omega x w_theta) . u``.
    """
    wo = [axis_weights(g, basis.s) for g in basis.omega_grids]
    wt = [axis_weights(g, basis.s) for g in basis.theta_grids]
    w_omega = np.kron(wo[0], wo[1])
    w_theta = np.kron(np.kron(wt[0], wt[1]), wt[2])
    return w_omega, w_theta


# -- Gram assembly -----------------------------------------------------------


def _kron_chain(mats: Sequence[sp.spmatrix]) -> sp.spmatrix:
    out = mats[0]
    for m in mats[1:]:
        out = sp.kron(out, m, format="csr")
    return out


def assemble_gram(
    basis: DiscreteBasis,
    domain: str = "omega",
    inner_product: str = "L2",
    quad_points: int = 50,
) -> sp.csc_matrix:
    """Gram matrix of one factor basis.

    Parameters
    ----------
    basis : DiscreteBasis
    domain : {"omega", "theta"}
        Which factor to assemble: the spatial basis (N x N) or the
        population-kinematic basis (L x L).
    inner_product : {"L2", "Hs_beta"}
        Plain L2, or L2 plus the beta-weighted gradient terms.  For
        ``s = 0`` the two coincide: cellwise constants carry no broken
        gradient, so the weights never contribute and the result stays
        exactly diagonal.
    quad_points : int
        Trapezoid points per smooth piece and axis.  Entries converge at
        second order in ``1 / quad_points``.
    """
    if domain == "omega":
        grids = basis.omega_grids
        betas = basis.beta[:2]
    elif domain == "theta":
        grids = basis.theta_grids
        betas = basis.beta[2:]
    else:
        raise ValueError("domain must be 'omega' or 'theta'")
    if inner_product not in ("L2", "Hs_beta"):
        raise ValueError("inner_product must be 'L2' or 'Hs_beta'")
    factors = [_axis_factors(g, basis.s, quad_points) for g in grids]
    A = [f[0] for f in factors]
    out = _kron_chain(A)
    if inner_product == "Hs_beta" and basis.s == 1:
        B = [f[1] for f in factors]
        for k in range(len(grids)):
            if betas[k] == 0.0:
                continue
            out = out + betas[k] * _kron_chain([B[k] if i == k else A[i] for i in range(len(grids))])
    return out.tocsc()


@dataclass(frozen=True, eq=False)
class GramMatrices:
    """The three Gram matrices of one discretization.

    Attributes
    ----------
    Psi : csc_matrix, (N, N)
        Spatial factor of the reconstruction-space inner product.
    Phi : csc_matrix, (L, L)
        Population-kinematic factor of the reconstruction-space inner
        product.
    G : csc_matrix, (N, N)
        Plain L2 Gram of the spatial basis; this is also the data-space
        Gram matrix (``Nmat`` is an alias).
    c_N : float
        Mean diagonal of ``G``.  On uniform spatial grids with ``s = 0``
        it is the common cell volume and ``G == c_N * I`` exactly.
    """

    Psi: sp.csc_matrix
    Phi: sp.csc_matrix
    G: sp.csc_matrix
    c_N: float

    @property
    def Nmat(self) -> sp.csc_matrix:
        return self.G


def build_gram_matrices(basis: DiscreteBasis, quad_points: int = 50) -> GramMatrices:
    """Assemble ``Psi``, ``Phi``, and ``G`` for a basis."""
    G = assemble_gram(basis, "omega", "L2", quad_points)
    if basis.s == 0:
        Psi = G.copy()
        Phi = assemble_gram(basis, "theta", "L2", quad_points)
    else:
        Psi = assemble_gram(basis, "omega", "Hs_beta", quad_points)
        Phi = assemble_gram(basis, "theta", "Hs_beta", quad_points)
    c_N = float(np.mean(G.diagonal()))
    return GramMatrices(Psi=Psi, Phi=Phi, G=G, c_N=c_N)


def coefficients_to_function(
    u: np.ndarray, basis: DiscreteBasis, points: np.ndarray
) -> float | np.ndarray:
    """Evaluate the expansion with coefficients ``u`` at physical points.

    Parameters
    ----------
    u : ndarray
        Flat coefficient vector of length ``N * L``.
    points : array-like
        A single point ``(x1, x2, v, z, t)`` or an array of shape
        ``(P, 5)``.

    Returns
    -------
    float or ndarray
        Function value per point; zero outside the domain box.
    """
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.shape[1] != 5:
        raise ValueError("points must have 5 columns (x1, x2, v, z, t)")
    u5 = np.asarray(u, dtype=float).reshape(basis.shape5)
    mats = [eval_axis_basis(g, basis.s, pts[:, k]) for k, g in enumerate(basis.grids)]
    out = np.einsum("abcde,pa,pb,pc,pd,pe->p", u5, *mats, optimize=True)
    return float(out[0]) if single else out


# -- plain-text grid specification files -------------------------------------


@dataclass(eq=False)
class AxisSpec:
    """One axis block of a grid-specification file."""

    name: str
    spacing: str
    min: float | None = None
    max: float | None = None
    count: int | None = None
    values: np.ndarray | None = None

    def to_grid(self) -> AxisGrid:
        if self.spacing == "explicit":
            if self.values is None:
                raise ValueError(f"axis {self.name}: explicit spacing needs values")
            return explicit_axis(self.values)
        if self.min is None or self.max is None or self.count is None:
            raise ValueError(f"axis {self.name}: need min, max, and count")
        if self.spacing == "uniform":
            return uniform_axis(self.min, self.max, self.count)
        if self.spacing == "geometric":
            return geometric_axis(self.min, self.max, self.count)
        raise ValueError(f"axis {self.name}: unknown spacing {self.spacing!r}")


@dataclass(eq=False)
class GridSpec:
    """Parsed grid-specification file: five axes plus the wavelength window."""

    axes: dict[str, AxisSpec] = field(default_factory=dict)
    lambda_min: float | None = None
    lambda_max: float | None = None
    lambda_count: int | None = None

    def axis_grids(self) -> dict[str, AxisGrid]:
        return {name: self.axes[name].to_grid() for name in AXIS_NAMES}


def parse_grid_spec(text: str) -> GridSpec:
    """Parse the plain-text ``key = value`` grid-specification format.

    Blocks start with an ``axis = <name>`` line; ``#`` begins a comment.
    Every one of ``x1, x2, v, z, t`` must be described.  The optional
    ``lambda_min``, ``lambda_max``, ``lambda_count`` keys describe the
    observed wavelength window.
    """
    spec = GridSpec()
    current: AxisSpec | None = None

    def finish(ax: AxisSpec | None) -> None:
        if ax is None:
            return
        if ax.name in spec.axes:
            raise ValueError(f"duplicate axis {ax.name!r}")
        ax.to_grid()  # validate eagerly
        spec.axes[ax.name] = ax

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        key = key.lower()
        if key == "axis":
            finish(current)
            name = val.lower()
            if name not in AXIS_NAMES:
                raise ValueError(f"line {lineno}: unknown axis {val!r}")
            current = AxisSpec(name=name, spacing="uniform")
        elif key in ("min", "max", "count", "spacing", "values"):
            if current is None:
                raise ValueError(f"line {lineno}: {key!r} outside an axis block")
            if key == "min":
                current.min = float(val)
            elif key == "max":
                current.max = float(val)
            elif key == "count":
                current.count = int(val)
            elif key == "spacing":
                current.spacing = val.lower()
            else:
                parts = [p for p in re.split(r"[,\s]+", val) if p]
                current.values = np.array([float(p) for p in parts])
        elif key == "lambda_min":
            spec.lambda_min = float(val)
        elif key == "lambda_max":
            spec.lambda_max = float(val)
        elif key == "lambda_count":
            spec.lambda_count = int(val)
        else:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
    finish(current)
    missing = [name for name in AXIS_NAMES if name not in spec.axes]
    if missing:
        raise ValueError(f"grid spec is missing axes: {', '.join(missing)}")
    return spec


def read_grid_spec(path) -> GridSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_grid_spec(fh.read())


def format_grid_spec(spec: GridSpec) -> str:
    """Serialize a :class:`GridSpec` back to the plain-text format."""
    lines: list[str] = []
    for name in AXIS_NAMES:
        ax = spec.axes[name]
        lines.append(f"axis = {ax.name}")
        lines.append(f"spacing = {ax.spacing}")
        if ax.spacing == "explicit":
            vals = ", ".join(format(v, ".17g") for v in ax.values)
            lines.append(f"values = {vals}")
        else:
            lines.append(f"min = {ax.min:.17g}")
            lines.append(f"max = {ax.max:.17g}")
            lines.append(f"count = {ax.count:d}")
        lines.append("")
    if spec.lambda_min is not None:
        lines.append(f"lambda_min = {spec.lambda_min:.17g}")
    if spec.lambda_max is not None:
        lines.append(f"lambda_max = {spec.lambda_max:.17g}")
    if spec.lambda_count is not None:
        lines.append(f"lambda_count = {spec.lambda_count:d}")
    return "\n".join(lines).rstrip() + "\n"


def write_grid_spec(spec: GridSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_grid_spec(spec))


def build_basis(spec: GridSpec, s: int, beta: float | Sequence[float] = 0.0) -> DiscreteBasis:
    """Build the :class:`DiscreteBasis` described by a grid specification."""
    grids = spec.axis_grids()
    return make_basis(
        s,
        (grids["x1"], grids["x2"]),
        (grids["v"], grids["z"], grids["t"]),
        beta,
    )
