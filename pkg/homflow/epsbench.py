"""
Finite-epsilon lake equations and their convergence to the homogenized limit.

The resolved problem lives on the unit torus with depth b(x / eps), 1/eps
an integer. Each stage of the shared SSP-RK3 stepper solves
div(b_eps^-1 grad s) = w by a pseudo-spectral conjugate gradient and
transports w with u_eps = b_eps^-1 J grad s.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy import fft, ndimage
from scipy.sparse.linalg import LinearOperator, cg

from .cellsolve import CorrectorSolution, solve_lake_corrector
from .efftensor import homogenized_tensor_lake
from .exceptions import ConvergenceStudyError, GeometryError, SolverConvergenceError
from .fields import ScalarField, grid_coordinates
from .macroflow import (
    FourierSeries,
    HomogenizedModel,
    MacroRun,
    MacroSolver,
    MacroState,
    SpectralTransportStepper,
    integrate,
)
from .microgeom import DepthSpec, build_depth_field
from .operators import centered_gradient, derivative_wavenumbers, integer_modes, rotate, spectral_gradient

logger = logging.getLogger(__name__)

NODES_PER_CELL = 16
LOW_PASS_MODES = 4
DEFAULT_FLOOR = 1e-9
MONOTONE_COLUMNS = ("error_a", "error_b", "reconstruction")
RECONSTRUCTION_WINDOW = 0.25


def check_epsilon(eps: float) -> int:
    """Number of periodicity cells per unit length; 1/eps must be a positive integer."""
    if not eps > 0:
        raise ValueError(f"Epsilon must be positive, got {eps}")
    cells = int(round(1.0 / eps))
    if cells < 1 or abs(cells * eps - 1.0) > 1e-9:
        raise ValueError(f"1/eps must be a positive integer, got eps={eps}")
    return cells


def resolved_grid(eps: float, minimum: int = 64) -> int:
    """Smallest even grid of at least ``minimum`` nodes made of whole eps-cells of NODES_PER_CELL or more nodes."""
    cells = check_epsilon(eps)
    per_cell = max(NODES_PER_CELL, -(-minimum // cells))
    if (per_cell * cells) % 2:
        per_cell += 1
    return per_cell * cells


class EpsEllipticSolver:
    """
    Pseudo-spectral operator s -> -D . (b^-1 D s) on the unit torus, with
    Nyquist derivatives zeroed, inverted by CG preconditioned with the
    constant coefficient mean(b^-1).
    """

    def __init__(self, depth: np.ndarray, length: float = 1.0, tol: float = 1e-10, max_iterations: int = 5000):
        self.n = depth.shape[-1]
        self.length = length
        self.inverse_depth = 1.0 / depth
        self.tol = tol
        self.max_iterations = max_iterations
        self.k1, self.k2 = derivative_wavenumbers(self.n, length)
        symbol = float(np.mean(self.inverse_depth)) * (self.k1 ** 2 + self.k2 ** 2)
        with np.errstate(divide="ignore"):
            self._inverse_symbol = np.where(symbol > 0, 1.0 / np.where(symbol > 0, symbol, 1.0), 0.0)
        size = self.n * self.n
        self.operator = LinearOperator((size, size), matvec=self._apply, dtype=np.float64)
        self.preconditioner = LinearOperator((size, size), matvec=self._precondition, dtype=np.float64)
        self._last: Optional[np.ndarray] = None
        self.last_residual = 0.0

    def _gradient(self, s: np.ndarray) -> np.ndarray:
        return spectral_gradient(fft.rfft2(s), self.n, self.length)

    def _apply(self, x: np.ndarray) -> np.ndarray:
        s = x.reshape(self.n, self.n)
        flux_hat = fft.rfft2(self.inverse_depth * self._gradient(s), axes=(1, 2))
        div = fft.irfft2(1j * self.k1 * flux_hat[0] + 1j * self.k2 * flux_hat[1], s=(self.n, self.n))
        return -div.ravel()

    def _precondition(self, r: np.ndarray) -> np.ndarray:
        r_hat = fft.rfft2(r.reshape(self.n, self.n))
        return fft.irfft2(r_hat * self._inverse_symbol, s=(self.n, self.n)).ravel()

    def solve(self, w: np.ndarray) -> np.ndarray:
        """Mean-zero s with div(b^-1 grad s) = w, warm-started from the previous solve."""
        rhs = -(w - w.mean()).ravel()
        norm = np.linalg.norm(rhs)
        if norm == 0:
            self.last_residual = 0.0
            return np.zeros((self.n, self.n))
        x0 = self._last.ravel() if self._last is not None else None
        residuals: List[float] = []
        solution, info = cg(self.operator, rhs, x0=x0, rtol=self.tol, atol=0.0, maxiter=self.max_iterations,
                            M=self.preconditioner,
                            callback=lambda xk: residuals.append(
                                float(np.linalg.norm(rhs - self._apply(xk)) / norm)))
        if info != 0:
            logger.error(f"Epsilon elliptic solve failed after {len(residuals)} iterations")
            raise SolverConvergenceError(f"Elliptic solve did not reach tol={self.tol}", residuals)
        s = solution.reshape(self.n, self.n)
        s = s - s.mean()
        self._last = s
        self.last_residual = float(np.linalg.norm(rhs - self._apply(s.ravel())) / norm)
        return s

    def velocity(self, s: np.ndarray) -> np.ndarray:
        """u_eps = b^-1 J grad s."""
        return self.inverse_depth * rotate(self._gradient(s))


class EpsSolver(SpectralTransportStepper):
    """SSP-RK3 stepper of the resolved lake vorticity equation."""

    def __init__(self, depth: np.ndarray, forcing: Optional[FourierSeries] = None, tol: float = 1e-10,
                 allow_nonzero_forcing_mean: bool = False):
        n = depth.shape[-1]
        super().__init__(n, 1.0, forcing, allow_nonzero_forcing_mean)
        self.depth = depth
        self.elliptic = EpsEllipticSolver(depth, 1.0, tol)

    def transport(self, w_hat: np.ndarray) -> np.ndarray:
        w = fft.irfft2(w_hat, s=(self.n, self.n))
        return self.elliptic.velocity(self.elliptic.solve(w))

    def diagnostics(self, state: MacroState) -> Dict[str, float]:
        s = self.elliptic.solve(state.w)
        u = self.elliptic.velocity(s)
        cell = state.length ** 2 / state.n ** 2
        return {
            "energy": 0.5 * float(np.sum(self.depth * (u[0] ** 2 + u[1] ** 2))) * cell,
            "integral_w": float(np.sum(state.w)) * cell,
            "integral_w2": float(np.sum(state.w ** 2)) * cell,
            "max_w": float(np.max(np.abs(state.w))),
            "l1_w": float(np.sum(np.abs(state.w))) * cell,
            "elliptic_residual": self.elliptic.last_residual,
        }


@dataclass
class EpsRun:
    """
    Resolved lake run at one epsilon.

    Attributes:
        eps (float): scale separation
        depth (np.ndarray): b(x / eps) on the M_eps grid
        run (MacroRun): states and diagnostics
        stream (np.ndarray): s_eps at the final time
        velocity (np.ndarray): u_eps at the final time
        elliptic_residual (float): relative residual of the final elliptic solve
    """

    eps: float
    depth: np.ndarray
    run: MacroRun
    stream: np.ndarray
    velocity: np.ndarray
    elliptic_residual: float

    @property
    def n(self) -> int:
        return self.depth.shape[-1]

    @property
    def final(self) -> MacroState:
        return self.run.final

    def divergence_residual(self) -> float:
        """max |div(b_eps u_eps)| computed spectrally."""
        k1, k2 = derivative_wavenumbers(self.n, 1.0)
        flux_hat = fft.rfft2(self.depth * self.velocity, axes=(1, 2))
        div = fft.irfft2(1j * k1 * flux_hat[0] + 1j * k2 * flux_hat[1], s=(self.n, self.n))
        return float(np.max(np.abs(div)))


def oscillating_depth(spec: DepthSpec, eps: float, n: int) -> np.ndarray:
    """Sample b(x / eps) on the unit torus."""
    if not spec.is_smooth:
        raise GeometryError("The resolved lake solver needs a smooth depth (constant, laminate or trigonometric)")
    check_epsilon(eps)
    x1, x2 = grid_coordinates(n)
    depth = spec.evaluate(x1 / eps, x2 / eps)
    if depth.min() < 1.0 / spec.bound or depth.max() > spec.bound:
        raise GeometryError("Oscillating depth leaves its bounds")
    return depth


def solve_lake_eps(spec: DepthSpec, eps: float, w0: Union[FourierSeries, np.ndarray], duration: float, dt: float,
                   n: Optional[int] = None, forcing: Optional[FourierSeries] = None, tol: float = 1e-10,
                   diagnostics_every: int = 1) -> EpsRun:
    """
    Resolved lake vorticity run on the unit torus.

    Raises:
        GeometryError: two-phase depth
        ValueError: 1/eps not an integer or M_eps < 16/eps
        SolverConvergenceError, CFLViolationError: from the stepper
    """
    cells = check_epsilon(eps)
    n = resolved_grid(eps) if n is None else n
    if n < NODES_PER_CELL * cells:
        raise ValueError(f"Grid {n} does not resolve eps={eps}: need at least {NODES_PER_CELL * cells} nodes")
    depth = oscillating_depth(spec, eps, n)
    state = MacroState.initial(w0, n, 1.0)
    solver = EpsSolver(depth, forcing, tol)
    started = time.perf_counter()
    result = integrate(state, solver, duration, dt, diagnostics_every)
    stream = solver.elliptic.solve(result.final.w)
    velocity = solver.elliptic.velocity(stream)
    logger.info(f"eps={eps:.4g} (M={n}) finished in {time.perf_counter() - started:.2f}s")
    return EpsRun(
        eps=eps,
        depth=depth,
        run=result,
        stream=stream,
        velocity=velocity,
        elliptic_residual=solver.elliptic.last_residual,
    )


def low_pass(f: np.ndarray, modes: int = LOW_PASS_MODES) -> np.ndarray:
    """Keep Fourier modes with integer |m| <= modes."""
    n = f.shape[-1]
    m1, m2 = integer_modes(n)
    keep = m1 ** 2 + m2 ** 2 <= modes ** 2
    return fft.irfft2(fft.rfft2(f) * keep, s=(n, n))


def cell_average(f: np.ndarray, cells: int) -> np.ndarray:
    """Arithmetic mean over each eps-cell; trailing axes must be divisible by ``cells``."""
    n = f.shape[-1]
    if n % cells:
        raise ValueError(f"Grid {n} is not divisible into {cells} cells")
    block = n // cells
    shape = f.shape[:-2] + (cells, block, cells, block)
    return f.reshape(shape).mean(axis=(-3, -1))


def _l2(f: np.ndarray, cell_area: float) -> float:
    return float(np.sqrt(np.sum(f ** 2) * cell_area))


def corrector_velocity(sol: CorrectorSolution, depth_cell: ScalarField) -> np.ndarray:
    """Cell fields R_i = b^-1 J(e_i + grad psi_i); shape (direction, component, N, N)."""
    fields = []
    for i in (0, 1):
        gradient = centered_gradient(sol.potentials[i], sol.spacing)
        gradient[i] += 1.0
        fields.append(rotate(gradient) / depth_cell.values)
    return np.stack(fields)


def corrector_reconstruction_error(eps_run: EpsRun, sol: CorrectorSolution, depth_cell: ScalarField,
                                   stream_velocity: np.ndarray,
                                   window: float = RECONSTRUCTION_WINDOW) -> Dict[str, float]:
    """
    L2 defect of u_eps + sum_i (J v)_i R_i(x / eps) over [-window, window]^2,
    with v = b_bar u the homogenized stream velocity at the same time and grid.
    Returns the defect and the norm of u_eps over the window.
    """
    if sol.variant != "lake":
        raise ValueError("Reconstruction needs a lake corrector")
    n = eps_run.n
    if stream_velocity.shape != (2, n, n):
        raise ValueError(f"Homogenized velocity grid {stream_velocity.shape} does not match M_eps={n}")
    cell_fields = corrector_velocity(sol, depth_cell)
    x1, x2 = grid_coordinates(n)
    y1 = x1 / eps_run.eps
    y2 = x2 / eps_run.eps
    idx = np.stack([(y1 + 0.5) / sol.spacing, (y2 + 0.5) / sol.spacing])
    rotated_v = rotate(stream_velocity)
    reconstruction = np.zeros((2, n, n))
    for i in (0, 1):
        for c in (0, 1):
            sampled = ndimage.map_coordinates(cell_fields[i, c], idx, order=3, mode="grid-wrap")
            reconstruction[c] -= rotated_v[i] * sampled
    inside = (np.abs(x1) <= window) & (np.abs(x2) <= window)
    cell = 1.0 / n ** 2
    defect = eps_run.velocity - reconstruction
    return {
        "defect": _l2(defect[:, inside], cell),
        "velocity_norm": _l2(eps_run.velocity[:, inside], cell),
    }


def _monotone(values: Sequence[float], floor: float) -> bool:
    for previous, current in zip(values, values[1:]):
        if current < previous:
            continue
        if previous <= floor and current <= floor:
            continue
        return False
    return True


def monotone_verdicts(table: pd.DataFrame, floor: float = DEFAULT_FLOOR) -> Dict[str, bool]:
    """
    Strict-decrease-or-floor verdict for each error column of a study table.

    Rows must be ordered by decreasing eps.

    Args:
        table (pd.DataFrame): study table holding the MONOTONE_COLUMNS
        floor (float): relative floor, scaled by max(max |column|, 1)

    Returns:
        Dict[str, bool]: column name to verdict
    """
    verdicts = {}
    for column in MONOTONE_COLUMNS:
        scale = max(float(table[column].abs().max()), 1.0)
        verdicts[column] = _monotone(list(table[column]), floor * scale)
    return verdicts


@dataclass
class ConvergenceStudy:
    """
    Error table of an epsilon sweep and its monotonicity verdicts.

    Wall-clock seconds per eps are kept in ``timings`` so the table stays
    deterministic.
    """

    table: pd.DataFrame
    monotone: Dict[str, bool] = field(default_factory=dict)
    timings: Dict[str, float] = field(default_factory=dict)


def convergence_study(spec: DepthSpec, eps_list: Sequence[float], w0: FourierSeries, duration: float, dt: float,
                      cell_n: int = 128, forcing: Optional[FourierSeries] = None, tol: float = 1e-10,
                      floor: float = DEFAULT_FLOOR, require_monotone: bool = True) -> ConvergenceStudy:
    """
    Compare resolved runs with the homogenized lake run on the same grid.

    Columns: eps, M, error_a (low-pass vorticity), error_b (eps-cell
    averaged b_eps u_eps against v = b_bar u), reconstruction defect and
    the velocity norm it is measured against. error_a, error_b and
    reconstruction must decrease strictly along the list unless both
    neighbours sit at the floor (floor times the column scale).

    Raises:
        ConvergenceStudyError: a monotone column is violated
    """
    eps_list = sorted(eps_list, reverse=True)
    depth_cell = build_depth_field(spec, cell_n)
    sol = solve_lake_corrector(depth_cell, min(tol * 100, 1e-8))
    tensors = homogenized_tensor_lake(depth_cell, sol)
    model = HomogenizedModel.from_tensors(tensors)

    rows = []
    timings = {}
    for eps in eps_list:
        started = time.perf_counter()
        n = resolved_grid(eps)
        eps_run = solve_lake_eps(spec, eps, w0, duration, dt, n, forcing, tol)
        reference = integrate(MacroState.initial(w0, n, 1.0), MacroSolver(model, n, 1.0, forcing), duration, dt)
        macro = MacroSolver(model, n, 1.0)
        v = macro.stream_velocity(fft.rfft2(reference.final.w) * macro.mask)

        cell = 1.0 / n ** 2
        error_a = _l2(low_pass(eps_run.final.w - reference.final.w), cell)
        cells = check_epsilon(eps)
        averaged = cell_average(eps_run.depth * eps_run.velocity, cells) - cell_average(v, cells)
        error_b = float(np.sqrt(np.sum(averaged ** 2) / cells ** 2))
        reconstruction = corrector_reconstruction_error(eps_run, sol, depth_cell, v)
        rows.append({
            "eps": eps,
            "M": n,
            "error_a": error_a,
            "error_b": error_b,
            "reconstruction": reconstruction["defect"],
            "velocity_norm": reconstruction["velocity_norm"],
        })
        timings[f"eps={eps:g}"] = time.perf_counter() - started
        logger.info(f"eps={eps:.4g}: error_a={error_a:.3e} error_b={error_b:.3e} "
                    f"reconstruction={reconstruction['defect']:.3e}")

    table = pd.DataFrame(rows)
    verdicts = monotone_verdicts(table, floor)
    study = ConvergenceStudy(table=table, monotone=verdicts, timings=timings)
    failed = [c for c, ok in verdicts.items() if not ok]
    if failed and require_monotone:
        logger.error(f"Convergence study not monotone in {failed}")
        raise ConvergenceStudyError(f"Errors not decreasing in eps for columns {failed}", table)
    return study
