"""Iterative reconstruction by gated, accelerated Kaczmarz sweeps.

One sweep visits every wavelength equation in a configured order.  An
equation whose data-space residual at the current iterate already sits
below ``tau`` times its noise level is skipped; an active equation takes
the momentum point

    z_k = u_k + ((k_R - 1) / (k_R + 2)) (u_k - u_{k-1}),

then the projected preconditioned step

    u_{k+1} = max(z_k + omega M^-1 H_r^T N^-1 (w_r - H_r z_k), 0),

which the Kronecker structure collapses to a rank-one correction of the
coefficient matrix.  The loop counter ``k_R`` driving the momentum
factor advances once per sweep; skipped equations advance nothing.  The
run terminates on the first sweep that makes no update, at which point
every equation satisfies the discrepancy bound simultaneously, or when
the loop budget runs out (reported as truncation, not an error).

Baselines share the machinery: the Kaczmarz variant without momentum,
the full-stack iteration that sums every equation's correction before
projecting, and the reduced variant that trades the Kronecker solve for
an explicit separable smoothing of the unpreconditioned step on the
piecewise-constant basis.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .forward import (
    ForwardSystem,
    SmoothingKernel,
    apply_H_all,
    apply_Zs,
    rho_estimate,
    sample_norm,
    triangle_kernel,
)

__all__ = [
    "VARIANTS",
    "SolverConfig",
    "SolveData",
    "SolverState",
    "HistoryRow",
    "RunResult",
    "threshold",
    "nesterov_extrapolate",
    "equation_residual_norm",
    "resolve_omega",
    "as_solve_data",
    "pnkr_equation_update",
    "reduced_equation_update",
    "pnkr_sweep",
    "reduced_pnkr_sweep",
    "landweber_step",
    "baseline_step",
    "run",
    "write_coefficients",
    "read_coefficients",
    "write_history",
    "read_history",
]

VARIANTS = ("pnkr", "reduced_pnkr", "landweber_kaczmarz", "landweber")
ORDERINGS = ("cyclic", "random_permutation")

_PNKU_MAGIC = b"PNKU"
_PNKU_VERSION = 1


@dataclass(eq=False)
class SolverConfig:
    """Everything a run needs beyond the assembled system and data.

    ``omega is None`` selects the automatic stepsize ``1 / rho`` with
    ``rho`` the power-iteration estimate of the largest preconditioned
    operator eigenvalue (per equation for sweep methods, full stack for
    the summed iteration).  ``stencil is None`` gives the reduced
    variant its default triangle smoothing; the identity stencil makes
    it coincide with the plain Kaczmarz update up to a constant.
    """

    variant: str = "pnkr"
    s: int = 1
    beta: float = 0.0
    omega: float | None = None
    tau: float = 1.2
    max_loops: int = 100
    ordering: str = "random_permutation"
    seed: int = 0
    initial_guess: np.ndarray | None = None
    stencil: SmoothingKernel | None = None

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.s not in (0, 1):
            raise ValueError("s must be 0 or 1")
        if self.beta < 0.0:
            raise ValueError("beta must be nonnegative")
        if self.omega is not None and not self.omega > 0.0:
            raise ValueError("omega must be positive")
        if not self.tau > 1.0:
            raise ValueError("tau must exceed 1")
        if self.max_loops < 1:
            raise ValueError("max_loops must be at least 1")
        if self.ordering not in ORDERINGS:
            raise ValueError(f"unknown ordering {self.ordering!r}; expected one of {ORDERINGS}")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")
        if self.variant == "reduced_pnkr" and self.s != 0:
            raise ValueError("the reduced variant runs on the piecewise-constant basis only (s=0)")


@dataclass(frozen=True, eq=False)
class SolveData:
    """Observed samples and per-channel noise levels."""

    y: np.ndarray
    delta_r: np.ndarray


def as_solve_data(data) -> SolveData:
    """Coerce a datacube-like object into :class:`SolveData`.

    Accepts :class:`SolveData`, anything with ``samples`` and
    ``delta_r`` (datacube files), or anything with ``y_noisy`` and
    ``delta_r`` (freshly generated noise sets).
    """
    if isinstance(data, SolveData):
        return data
    y = getattr(data, "samples", None)
    if y is None:
        y = getattr(data, "y_noisy", None)
    delta_r = getattr(data, "delta_r", None)
    if y is None or delta_r is None:
        raise TypeError("data must carry samples (or y_noisy) and delta_r")
    return SolveData(y=np.asarray(y, dtype=float), delta_r=np.asarray(delta_r, dtype=float))


@dataclass(eq=False)
class SolverState:
    """Mutable iteration state threaded through the sweeps."""

    u_k: np.ndarray
    u_km1: np.ndarray
    k: int = 0
    k_R: int = 1
    permutation: np.ndarray | None = None
    dp_satisfied: np.ndarray | None = None
    history: list = field(default_factory=list)


@dataclass(frozen=True, eq=False)
class HistoryRow:
    """Per-sweep bookkeeping.

    ``res`` and ``error`` are NaN when no reference coefficients were
    provided.  ``seconds`` is wall time and therefore excluded from
    reproducibility comparisons.
    """

    loop: int
    updates: int
    data_residual: float
    res: float
    error: float
    seconds: float


@dataclass(frozen=True, eq=False)
class RunResult:
    """Final iterate plus the full convergence record."""

    u: np.ndarray
    history: list
    converged: bool
    truncated: bool
    loops: int
    total_updates: int
    omega: float


def threshold(u: np.ndarray) -> np.ndarray:
    """Entrywise projection onto the nonnegative orthant."""
    return np.maximum(u, 0.0)


def nesterov_extrapolate(u_k: np.ndarray, u_km1: np.ndarray, k_R: int) -> np.ndarray:
    """Momentum point ``u_k + ((k_R - 1) / (k_R + 2)) (u_k - u_km1)``."""
    if k_R < 1:
        raise ValueError("loop counter k_R must be at least 1")
    factor = (k_R - 1.0) / (k_R + 2.0)
    return u_k + factor * (u_k - u_km1)


def equation_residual_norm(system: ForwardSystem, u: np.ndarray, data, r: int) -> float:
    """Data-space residual norm of one equation at ``u``.

    Computed on sample vectors, where the noise-metric quadratic form of
    the moment residual reduces to the plain data-space norm.
    """
    data = as_solve_data(data)
    if not 1 <= r <= system.R:
        raise ValueError(f"wavelength index r={r} outside 1..{system.R}")
    U = np.asarray(u, dtype=float).reshape(system.N, system.L)
    d = data.y[:, r - 1] - U @ system.Q[:, r - 1]
    return float(sample_norm(system, d))


def resolve_omega(config: SolverConfig, system: ForwardSystem) -> float:
    """The stepsize a run will actually use.

    An explicit ``config.omega`` wins; otherwise the reciprocal of the
    estimated preconditioned operator norm, which keeps every variant
    inside its stability window on any grid scale.
    """
    if config.omega is not None:
        return float(config.omega)
    return 1.0 / rho_estimate(system, stacked=config.variant == "landweber")


def _sweep_order(config: SolverConfig, R: int, loop: int) -> np.ndarray:
    if config.ordering == "cyclic":
        return np.arange(1, R + 1)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([config.seed, loop])))
    return rng.permutation(R) + 1


def pnkr_equation_update(system: ForwardSystem, z: np.ndarray, y_r: np.ndarray, r: int, omega: float) -> np.ndarray:
    """One projected preconditioned step of equation ``r`` taken at ``z``.

    The correction ``M^-1 H_r^T N^-1 (w_r - H_r z)`` is the rank-one
    matrix ``(Psi^-1 G d) (Phi^-1 q_r)^T`` with ``d`` the sample-space
    residual, so the update costs two small solves and one outer
    product.
    """
    if not 1 <= r <= system.R:
        raise ValueError(f"wavelength index r={r} outside 1..{system.R}")
    Z = z.reshape(system.N, system.L)
    d = y_r - Z @ system.Q[:, r - 1]
    a = system.Psi_inv_factor.solve(system.G @ d)
    out = Z + omega * np.outer(a, system.Phi_inv_Q[:, r - 1])
    return threshold(out.reshape(-1))


def reduced_equation_update(
    system: ForwardSystem,
    u: np.ndarray,
    y_r: np.ndarray,
    r: int,
    omega: float,
    kernel: SmoothingKernel,
) -> np.ndarray:
    """One reduced step: smoothed unpreconditioned correction at ``u``.

    Applies ``omega c_N^-1 Z_s(H_r^T (w_r - H_r u))`` and projects; the
    separable stencil stands in for the Kronecker solve on the
    piecewise-constant basis.
    """
    U = u.reshape(system.N, system.L)
    d = y_r - U @ system.Q[:, r - 1]
    w_resid = system.G @ d
    raw = np.outer(system.G @ w_resid, system.Q[:, r - 1]).reshape(-1)
    step = (omega / system.c_N) * apply_Zs(raw, system.basis, kernel)
    return threshold(u + step)


def _check_finite(u_new: np.ndarray, omega: float) -> None:
    if not np.all(np.isfinite(u_new)):
        raise RuntimeError(f"iterate became non-finite; the stepsize omega={omega:g} is too large for this system")


def pnkr_sweep(state: SolverState, config: SolverConfig, data, system: ForwardSystem, omega: float | None = None, momentum: bool = True) -> int:
    """One gated sweep over all equations; returns the update count.

    The gate tests the residual at ``u_k`` while the step is taken at
    the momentum point; with ``momentum=False`` the step is taken at
    ``u_k`` itself, which is the plain Kaczmarz baseline.
    """
    data = as_solve_data(data)
    if omega is None:
        omega = resolve_omega(config, system)
    if state.dp_satisfied is None:
        state.dp_satisfied = np.zeros(system.R, dtype=bool)
    order = state.permutation if state.permutation is not None else np.arange(1, system.R + 1)
    updates = 0
    # an oversized stepsize overflows to inf/nan; the finite check raises, not the FPU
    with np.errstate(over="ignore", invalid="ignore"):
        for r in order:
            U = state.u_k.reshape(system.N, system.L)
            d = data.y[:, r - 1] - U @ system.Q[:, r - 1]
            satisfied = float(sample_norm(system, d)) <= config.tau * data.delta_r[r - 1]
            state.dp_satisfied[r - 1] = satisfied
            if satisfied:
                continue
            z = nesterov_extrapolate(state.u_k, state.u_km1, state.k_R) if momentum else state.u_k
            u_new = pnkr_equation_update(system, z, data.y[:, r - 1], r, omega)
            _check_finite(u_new, omega)
            state.u_km1 = state.u_k
            state.u_k = u_new
            state.k += 1
            updates += 1
    state.k_R += 1
    return updates


def reduced_pnkr_sweep(state: SolverState, config: SolverConfig, data, system: ForwardSystem, omega: float | None = None, kernel: SmoothingKernel | None = None) -> int:
    """One gated sweep of the reduced variant (piecewise-constant basis)."""
    if system.basis.s != 0:
        raise ValueError("the reduced variant runs on the piecewise-constant basis only (s=0)")
    data = as_solve_data(data)
    if omega is None:
        omega = resolve_omega(config, system)
    if kernel is None:
        kernel = config.stencil if config.stencil is not None else triangle_kernel()
    if state.dp_satisfied is None:
        state.dp_satisfied = np.zeros(system.R, dtype=bool)
    order = state.permutation if state.permutation is not None else np.arange(1, system.R + 1)
    updates = 0
    with np.errstate(over="ignore", invalid="ignore"):
        for r in order:
            U = state.u_k.reshape(system.N, system.L)
            d = data.y[:, r - 1] - U @ system.Q[:, r - 1]
            satisfied = float(sample_norm(system, d)) <= config.tau * data.delta_r[r - 1]
            state.dp_satisfied[r - 1] = satisfied
            if satisfied:
                continue
            u_new = reduced_equation_update(system, state.u_k, data.y[:, r - 1], r, omega, kernel)
            _check_finite(u_new, omega)
            state.u_km1 = state.u_k
            state.u_k = u_new
            state.k += 1
            updates += 1
    state.k_R += 1
    return updates


def landweber_step(state: SolverState, config: SolverConfig, data, system: ForwardSystem, omega: float | None = None) -> int:
    """One full-stack step: every equation's correction summed, then projected.

    Gating is per equation for bookkeeping, but the step only happens
    while at least one equation is out of tolerance, and then it sums
    over all of them.
    """
    data = as_solve_data(data)
    if omega is None:
        omega = resolve_omega(config, system)
    with np.errstate(over="ignore", invalid="ignore"):
        U = state.u_k.reshape(system.N, system.L)
        D = data.y - U @ system.Q
        norms = np.atleast_1d(sample_norm(system, D))
        state.dp_satisfied = norms <= config.tau * data.delta_r
        if np.all(state.dp_satisfied):
            state.k_R += 1
            return 0
        A = system.Psi_inv_factor.solve(system.G @ D)
        u_new = threshold((U + omega * A @ system.Phi_inv_Q.T).reshape(-1))
    _check_finite(u_new, omega)
    state.u_km1 = state.u_k
    state.u_k = u_new
    state.k += 1
    state.k_R += 1
    return 1


def baseline_step(state: SolverState, config: SolverConfig, data, system: ForwardSystem, variant: str, omega: float | None = None) -> int:
    """Dispatch one loop of a baseline method by name."""
    if variant == "landweber":
        return landweber_step(state, config, data, system, omega)
    if variant == "landweber_kaczmarz":
        return pnkr_sweep(state, config, data, system, omega, momentum=False)
    raise ValueError(f"unknown baseline variant {variant!r}")


def _data_residual(system: ForwardSystem, u: np.ndarray, data: SolveData) -> float:
    U = u.reshape(system.N, system.L)
    D = data.y - U @ system.Q
    norms = np.atleast_1d(sample_norm(system, D))
    return float(np.sqrt(np.sum(norms**2)))


def run(config: SolverConfig, data, system: ForwardSystem, u_star: np.ndarray | None = None) -> RunResult:
    """Sweep until every equation meets the discrepancy bound.

    Parameters
    ----------
    config : SolverConfig
    data : SolveData or datacube-like
        Observed samples plus ``delta_r``.
    system : ForwardSystem
    u_star : ndarray, optional
        Reference coefficients; when given, each history row carries the
        stacked moment-space residual ``res`` and the relative error.

    Returns
    -------
    RunResult
        ``converged`` means a sweep passed with zero updates, so every
        equation satisfied its bound simultaneously; ``truncated`` means
        the loop budget ran out first.

    Raises
    ------
    RuntimeError
        If an iterate leaves the finite range or its norm grows by a
        factor 1e6 over the first nonzero iterate, both symptoms of an
        oversized stepsize.
    """
    data = as_solve_data(data)
    if data.y.shape != (system.N, system.R):
        raise ValueError(f"data cube has shape {data.y.shape}, expected ({system.N}, {system.R})")
    if data.delta_r.shape != (system.R,):
        raise ValueError(f"delta_r has shape {data.delta_r.shape}, expected ({system.R},)")
    if config.s != system.basis.s:
        raise ValueError(f"config requests s={config.s} but the system basis has s={system.basis.s}")
    M = system.N * system.L
    if config.initial_guess is not None:
        u0 = np.array(config.initial_guess, dtype=float)
        if u0.shape != (M,):
            raise ValueError(f"initial guess has shape {u0.shape}, expected ({M},)")
    else:
        u0 = np.zeros(M)
    omega = resolve_omega(config, system)
    state = SolverState(u_k=u0, u_km1=u0.copy())
    state.dp_satisfied = np.zeros(system.R, dtype=bool)
    if u_star is not None:
        u_star = np.asarray(u_star, dtype=float)
        if u_star.shape != (M,):
            raise ValueError(f"reference coefficients have shape {u_star.shape}, expected ({M},)")
        star_norm = float(np.linalg.norm(u_star))
    ref_norm = float(np.linalg.norm(u0)) or None
    converged = False
    total_updates = 0
    loops = 0
    with np.errstate(over="ignore", invalid="ignore"):
        for loop in range(1, config.max_loops + 1):
            t0 = time.perf_counter()
            state.permutation = _sweep_order(config, system.R, loop)
            if config.variant == "pnkr":
                updates = pnkr_sweep(state, config, data, system, omega, momentum=True)
            elif config.variant == "landweber_kaczmarz":
                updates = pnkr_sweep(state, config, data, system, omega, momentum=False)
            elif config.variant == "reduced_pnkr":
                updates = reduced_pnkr_sweep(state, config, data, system, omega)
            else:
                updates = landweber_step(state, config, data, system, omega)
            seconds = time.perf_counter() - t0
            loops = loop
            total_updates += updates
            if u_star is not None:
                diff = u_star - state.u_k
                res = float(np.linalg.norm(apply_H_all(system, diff)))
                error = float(np.linalg.norm(diff)) / star_norm if star_norm > 0 else np.nan
            else:
                res = np.nan
                error = np.nan
            state.history.append(
                HistoryRow(
                    loop=loop,
                    updates=updates,
                    data_residual=_data_residual(system, state.u_k, data),
                    res=res,
                    error=error,
                    seconds=seconds,
                )
            )
            u_norm = float(np.linalg.norm(state.u_k))
            if ref_norm is None:
                ref_norm = u_norm or None
            elif u_norm > 1e6 * ref_norm:
                raise RuntimeError(f"iterate norm grew by more than 1e6; the stepsize omega={omega:g} is too large")
            if updates == 0:
                converged = True
                break
    return RunResult(
        u=state.u_k,
        history=state.history,
        converged=converged,
        truncated=not converged,
        loops=loops,
        total_updates=total_updates,
        omega=omega,
    )


# -- coefficient and history files -------------------------------------------


@dataclass(frozen=True, eq=False)
class CoefficientSet:
    """Coefficient vector with the dimensions needed to interpret it."""

    u: np.ndarray
    N: int
    L: int
    s: int


def write_coefficients(u: np.ndarray, N: int, L: int, s: int, path) -> None:
    """Serialize a coefficient vector in the PNKU binary layout."""
    u = np.asarray(u, dtype=float)
    if u.shape != (N * L,):
        raise ValueError(f"coefficient vector has shape {u.shape}, expected ({N * L},)")
    with open(path, "wb") as fh:
        fh.write(_PNKU_MAGIC)
        np.array([_PNKU_VERSION, N, L, s], dtype="<u4").tofile(fh)
        u.astype("<f8").tofile(fh)


def read_coefficients(path) -> CoefficientSet:
    """Read a PNKU file back into a :class:`CoefficientSet`."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _PNKU_MAGIC:
            raise ValueError(f"not a coefficient file: bad magic {magic!r}")
        version, N, L, s = np.fromfile(fh, dtype="<u4", count=4)
        if version != _PNKU_VERSION:
            raise ValueError(f"unsupported coefficient file version {version}")
        u = np.fromfile(fh, dtype="<f8", count=int(N) * int(L))
    if u.size != int(N) * int(L):
        raise ValueError("coefficient file truncated")
    return CoefficientSet(u=u, N=int(N), L=int(L), s=int(s))


def write_history(history, path) -> None:
    """Write the convergence table plus a wall-time sidecar.

    The main table carries only deterministic columns so that identical
    runs produce identical files; per-loop seconds go to ``<path>.timing``.
    """
    with open(path, "w") as fh:
        fh.write("loop updates data_residual res error\n")
        for row in history:
            fh.write(f"{row.loop} {row.updates} {row.data_residual:.17g} {row.res:.17g} {row.error:.17g}\n")
    with open(f"{path}.timing", "w") as fh:
        fh.write("loop seconds\n")
        for row in history:
            fh.write(f"{row.loop} {row.seconds:.6f}\n")


def read_history(path) -> list[HistoryRow]:
    """Read a convergence table; seconds come back as NaN."""
    rows = []
    with open(path) as fh:
        header = fh.readline().split()
        if header[:3] != ["loop", "updates", "data_residual"]:
            raise ValueError("not a history table")
        for line in fh:
            parts = line.split()
            rows.append(
                HistoryRow(
                    loop=int(parts[0]),
                    updates=int(parts[1]),
                    data_residual=float(parts[2]),
                    res=float(parts[3]),
                    error=float(parts[4]),
                    seconds=float("nan"),
                )
            )
    return rows
