"""
Periodic corrector cell problems.

Solves div(a (grad phi + e_i)) = 0 on the unit cell for both unit
directions with a spectrally preconditioned conjugate gradient. The lake
corrector uses a = 1/b; stiff inclusions are approached through the
penalized coefficients a_K = 1 + K chi_K along an increasing K ladder.
"""

import concurrent.futures
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import fft
from scipy.sparse.linalg import LinearOperator, cg

from .exceptions import GeometryError, PenalizationError, SolverConvergenceError
from .fields import ScalarField, grid_coordinates
from .microgeom import Microstructure, penalization_field, transition_width, validate
from .operators import face_divergence, face_gradient, fd_laplacian_symbol, harmonic_faces

logger = logging.getLogger(__name__)

DEFAULT_PENALTIES = (1e2, 1e3, 1e4, 1e5, 1e6)
DEFAULT_TOLERANCE = 1e-8
DEFAULT_MAX_ITERATIONS = 20000
RIGIDITY_FACTOR = 10.0


@dataclass
class SolveHistory:
    """Per-iteration record of one conjugate-gradient solve."""

    residuals: List[float] = field(default_factory=list)
    energies: List[float] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return max(len(self.residuals) - 1, 0)


def corrected_gradients(gradients: np.ndarray) -> np.ndarray:
    """grad phi_i + e_i for both directions; shape (direction, component, N, N)."""
    out = gradients.copy()
    out[0, 0] += 1.0
    out[1, 1] += 1.0
    return out


def weighted_tensor(faces: np.ndarray, corrected: np.ndarray) -> np.ndarray:
    """Energy tensor mean(sum_d a_d (grad phi_i + e_i)_d (grad phi_j + e_j)_d)."""
    tensor = np.empty((2, 2))
    for i in range(2):
        for j in range(2):
            tensor[i, j] = np.mean(np.sum(faces * corrected[i] * corrected[j], axis=0))
    return tensor


class CellProblem:
    """
    Discrete cell problem for one scalar conductivity field.

    The operator is phi -> -div_h(a_f D phi) with forward differences D and
    harmonic face coefficients a_f. The preconditioner is the same operator
    with the constant coefficient mean(a), inverted by real FFT.
    """

    def __init__(self, coefficient: ScalarField, tol: float = DEFAULT_TOLERANCE,
                 max_iterations: int = DEFAULT_MAX_ITERATIONS):
        if not tol > 0:
            raise ValueError(f"Tolerance must be positive, got {tol}")
        if np.min(coefficient.values) <= 0:
            raise ValueError("Conductivity must be positive")
        self.coefficient = coefficient
        self.n = coefficient.n
        self.h = coefficient.spacing
        self.tol = tol
        self.max_iterations = max_iterations
        self.faces = harmonic_faces(coefficient.values)

        size = self.n * self.n
        symbol = float(np.mean(coefficient.values)) * fd_laplacian_symbol(self.n, self.h)
        symbol[0, 0] = np.inf
        self._inverse_symbol = 1.0 / symbol
        self.operator = LinearOperator((size, size), matvec=self._apply, dtype=np.float64)
        self.preconditioner = LinearOperator((size, size), matvec=self._precondition, dtype=np.float64)

    def _apply(self, x: np.ndarray) -> np.ndarray:
        phi = x.reshape(self.n, self.n)
        return -face_divergence(self.faces * face_gradient(phi, self.h), self.h).ravel()

    def _precondition(self, r: np.ndarray) -> np.ndarray:
        r_hat = fft.rfft2(r.reshape(self.n, self.n))
        return fft.irfft2(r_hat * self._inverse_symbol, s=(self.n, self.n)).ravel()

    def right_hand_side(self, direction: int) -> np.ndarray:
        flux = np.zeros_like(self.faces)
        flux[direction] = self.faces[direction]
        rhs = face_divergence(flux, self.h).ravel()
        return rhs - rhs.mean()

    def residual_norm(self, phi: np.ndarray, direction: int) -> float:
        """Relative residual |rhs - A phi| / |rhs|, zero for a vanishing right-hand side."""
        rhs = self.right_hand_side(direction)
        scale = np.linalg.norm(rhs)
        if scale == 0:
            return 0.0
        return float(np.linalg.norm(rhs - self._apply(phi.ravel())) / scale)

    def solve(self, direction: int, initial: Optional[np.ndarray] = None) -> Tuple[np.ndarray, SolveHistory]:
        """
        Mean-zero corrector for unit direction e_{direction + 1}.

        Raises:
            SolverConvergenceError: tolerance not reached within max_iterations
        """
        rhs = self.right_hand_side(direction)
        history = SolveHistory()
        rhs_norm = np.linalg.norm(rhs)
        if rhs_norm <= 1e-14 * max(1.0, float(np.max(self.faces))) / self.h:
            history.residuals.append(0.0)
            history.energies.append(0.0)
            return np.zeros((self.n, self.n)), history

        def record(x: np.ndarray) -> None:
            ax = self._apply(x)
            history.residuals.append(float(np.linalg.norm(rhs - ax) / rhs_norm))
            history.energies.append(float(0.5 * x @ ax - rhs @ x))

        x0 = np.zeros(rhs.size) if initial is None else initial.ravel().astype(np.float64)
        record(x0)
        solution, info = cg(
            self.operator, rhs, x0=x0, rtol=self.tol, atol=0.0,
            maxiter=self.max_iterations, M=self.preconditioner, callback=record,
        )
        if info != 0:
            logger.error(
                f"CG did not converge for direction {direction + 1} after {history.iterations} iterations "
                f"(residual {history.residuals[-1]:.3e})"
            )
            raise SolverConvergenceError(
                f"Conjugate gradient failed to reach tol={self.tol} (info={info})", history.residuals
            )
        phi = solution.reshape(self.n, self.n)
        return phi - phi.mean(), history

    def solve_both(self, initial: Optional[np.ndarray] = None, workers: int = 1):
        """Solve both directions, concurrently when ``workers > 1``."""
        starts = [None, None] if initial is None else [initial[0], initial[1]]
        if workers > 1:
            with concurrent.futures.ThreadPoolExecutor(max_workers=min(workers, 2)) as executor:
                futures = [executor.submit(self.solve, d, starts[d]) for d in (0, 1)]
                results = [f.result() for f in futures]
        else:
            results = [self.solve(d, starts[d]) for d in (0, 1)]
        potentials = np.stack([r[0] for r in results])
        histories = [r[1] for r in results]
        return potentials, histories


@dataclass
class CorrectorSolution:
    """
    Correctors of both unit directions on an N x N cell grid.

    Attributes:
        variant (str): 'stiff', 'lake' or 'conductivity'
        potentials (np.ndarray): (2, N, N) mean-zero potentials
        gradients (np.ndarray): (2, 2, N, N) forward-difference gradients [direction, component]
        coefficient (np.ndarray): node conductivity of the final solve
        faces (np.ndarray): (2, N, N) harmonic face conductivities of the final solve
        penalties (Tuple[float, ...]): K ladder (stiff only)
        energies (List[Tuple[float, float]]): minimal energies (E_1, E_2) per solve
        tensors (List[np.ndarray]): weighted energy tensor per solve
        residuals (Tuple[float, float]): final relative residual per direction
        histories (List[SolveHistory]): CG histories of the final solve
        iterations (int): CG iterations summed over all solves
        rigidity (Optional[float]): max |grad phi + e| over eroded inclusion interiors
        rigidity_bound (Optional[float]): RIGIDITY_FACTOR / K_max
    """

    variant: str
    potentials: np.ndarray
    gradients: np.ndarray
    coefficient: np.ndarray
    faces: np.ndarray
    penalties: Tuple[float, ...] = ()
    energies: List[Tuple[float, float]] = field(default_factory=list)
    tensors: List[np.ndarray] = field(default_factory=list)
    residuals: Tuple[float, float] = (0.0, 0.0)
    histories: List[SolveHistory] = field(default_factory=list)
    iterations: int = 0
    rigidity: Optional[float] = None
    rigidity_bound: Optional[float] = None
    length: float = 1.0

    @property
    def n(self) -> int:
        return self.potentials.shape[-1]

    @property
    def spacing(self) -> float:
        return self.length / self.n

    @property
    def rigidity_ok(self) -> bool:
        if self.rigidity is None or self.rigidity_bound is None:
            return True
        return self.rigidity <= self.rigidity_bound

    def potential(self, direction: int) -> ScalarField:
        return ScalarField(self.potentials[direction], self.length)

    def corrected(self) -> np.ndarray:
        return corrected_gradients(self.gradients)

    def extrapolated_tensor(self) -> np.ndarray:
        """
        Richardson extrapolation over the two largest penalties assuming an
        O(1/K) error; the last tensor when the ladder has a single rung.
        """
        if len(self.tensors) < 2 or len(self.penalties) < 2:
            return self.tensors[-1].copy()
        k1, k2 = self.penalties[-2], self.penalties[-1]
        return (k2 * self.tensors[-1] - k1 * self.tensors[-2]) / (k2 - k1)

    def energy_table(self) -> pd.DataFrame:
        """Energy ladder, one row per solve."""
        rungs = list(self.penalties) if self.penalties else [float("nan")] * len(self.energies)
        return pd.DataFrame({
            "K": rungs,
            "E_1": [e[0] for e in self.energies],
            "E_2": [e[1] for e in self.energies],
        })


def _solution_from(problem: CellProblem, potentials: np.ndarray, histories: List[SolveHistory],
                   variant: str) -> CorrectorSolution:
    gradients = np.stack([face_gradient(potentials[d], problem.h) for d in (0, 1)])
    tensor = weighted_tensor(problem.faces, corrected_gradients(gradients))
    return CorrectorSolution(
        variant=variant,
        potentials=potentials,
        gradients=gradients,
        coefficient=problem.coefficient.values,
        faces=problem.faces,
        energies=[(float(tensor[0, 0]), float(tensor[1, 1]))],
        tensors=[tensor],
        residuals=tuple(problem.residual_norm(potentials[d], d) for d in (0, 1)),
        histories=histories,
        iterations=sum(h.iterations for h in histories),
        length=problem.coefficient.length,
    )


def solve_conductivity(coefficient: ScalarField, tol: float = DEFAULT_TOLERANCE,
                       max_iterations: int = DEFAULT_MAX_ITERATIONS, workers: int = 1,
                       variant: str = "conductivity") -> CorrectorSolution:
    """Correctors of div(a (grad phi + e_i)) = 0 for a positive conductivity field."""
    problem = CellProblem(coefficient, tol, max_iterations)
    potentials, histories = problem.solve_both(workers=workers)
    solution = _solution_from(problem, potentials, histories, variant)
    logger.info(
        f"Cell problem ({variant}, N={problem.n}) solved in {solution.iterations} iterations, "
        f"residuals {solution.residuals[0]:.2e} / {solution.residuals[1]:.2e}"
    )
    return solution


def solve_lake_corrector(depth: ScalarField, tol: float = DEFAULT_TOLERANCE,
                         max_iterations: int = DEFAULT_MAX_ITERATIONS, workers: int = 1) -> CorrectorSolution:
    """Lake correctors psi_i of div(b^-1 (grad psi_i + e_i)) = 0."""
    if np.min(depth.values) <= 0:
        raise ValueError("Depth must be positive")
    inverse = ScalarField(1.0 / depth.values, depth.length)
    return solve_conductivity(inverse, tol, max_iterations, workers, variant="lake")


def _check_ladder(penalties: Sequence[float]) -> Tuple[float, ...]:
    ladder = tuple(float(k) for k in penalties)
    if not ladder:
        raise ValueError("Penalty ladder is empty")
    if ladder[0] <= 0 or any(b <= a for a, b in zip(ladder, ladder[1:])):
        raise ValueError(f"Penalty ladder must be positive and strictly increasing, got {ladder}")
    return ladder


def _eroded_interior(ms: Microstructure, n: int, penalty: float) -> np.ndarray:
    depth = -ms.signed_distance(*grid_coordinates(n))
    return depth >= transition_width(n, penalty) + 2.0 / n


def solve_stiff_corrector(ms: Microstructure, n: int, penalties: Sequence[float] = DEFAULT_PENALTIES,
                          tol: float = DEFAULT_TOLERANCE, max_iterations: int = DEFAULT_MAX_ITERATIONS,
                          workers: int = 1) -> CorrectorSolution:
    """
    Penalized stiff-inclusion correctors along an increasing K ladder.

    Each rung warm-starts from the previous one. The minimal energies must
    be nondecreasing in K up to the solver tolerance.

    Raises:
        GeometryError: invalid microstructure
        PenalizationError: energy ladder decreases beyond tolerance
        SolverConvergenceError: a rung failed to converge
    """
    ladder = _check_ladder(penalties)
    report = validate(ms)
    if not report.valid:
        raise GeometryError(f"Invalid microstructure: {report.summary()}")

    energies: List[Tuple[float, float]] = []
    tensors: List[np.ndarray] = []
    iterations = 0
    potentials = None
    solution = None
    for penalty in ladder:
        problem = CellProblem(penalization_field(ms, n, penalty), tol, max_iterations)
        potentials, histories = problem.solve_both(potentials, workers)
        solution = _solution_from(problem, potentials, histories, "stiff")
        energies.extend(solution.energies)
        tensors.extend(solution.tensors)
        iterations += solution.iterations
        logger.debug(f"K={penalty:.0e}: E = ({energies[-1][0]:.10f}, {energies[-1][1]:.10f}), "
                     f"{solution.iterations} iterations")

    slack = max(10.0 * tol, 1e-10)
    for d in (0, 1):
        for k, (lower, upper) in enumerate(zip(energies, energies[1:])):
            if upper[d] < lower[d] - slack * abs(upper[d]):
                logger.error(f"Energy ladder decreases for direction {d + 1} at K={ladder[k + 1]:.0e}")
                raise PenalizationError(
                    f"Minimal energy E_{d + 1} decreased from {lower[d]:.12g} to {upper[d]:.12g} "
                    f"at K={ladder[k + 1]:.0e}"
                )

    solution.penalties = ladder
    solution.energies = energies
    solution.tensors = tensors
    solution.iterations = iterations
    solution.rigidity_bound = RIGIDITY_FACTOR / ladder[-1]
    interior = _eroded_interior(ms, n, ladder[-1]) if not ms.is_empty else np.zeros((n, n), dtype=bool)
    if interior.any():
        magnitude = np.sqrt(np.sum(solution.corrected() ** 2, axis=1))
        solution.rigidity = float(np.max(magnitude[:, interior]))
        if not solution.rigidity_ok:
            logger.warning(
                f"Rigidity {solution.rigidity:.3e} exceeds {solution.rigidity_bound:.3e} inside the inclusions"
            )
    logger.info(
        f"Stiff correctors (N={n}, K_max={ladder[-1]:.0e}) solved in {iterations} iterations, "
        f"E = ({energies[-1][0]:.8f}, {energies[-1][1]:.8f})"
    )
    return solution


@dataclass
class DiagnosticsReport:
    """
    A posteriori checks of a corrector solution.

    Attributes:
        harmonic_residual (Tuple[float, float]): max flux imbalance per
            direction outside the inclusions (lake: everywhere)
        rigidity (Optional[float]): max |grad phi + e| over eroded inclusion interiors
        fluxes (List[Tuple[float, float]]): net boundary flux per inclusion and direction
        relative_fluxes (List[Tuple[float, float]]): fluxes over max |grad phi|
        mean_gradient (np.ndarray): (2, 2) mean of grad phi_i over Q
    """

    harmonic_residual: Tuple[float, float]
    rigidity: Optional[float]
    fluxes: List[Tuple[float, float]]
    relative_fluxes: List[Tuple[float, float]]
    mean_gradient: np.ndarray

    @property
    def max_relative_flux(self) -> float:
        return max((abs(f) for pair in self.relative_fluxes for f in pair), default=0.0)


def corrector_diagnostics(sol: CorrectorSolution, ms: Optional[Microstructure] = None) -> DiagnosticsReport:
    """
    Harmonicity residual, interior rigidity, per-inclusion boundary flux
    and mean gradient of a corrector solution.

    The flux of inclusion n is h^2 times the sum of the discrete Laplacian
    over the inclusion dilated by two cells, i.e. the discrete boundary
    integral of the normal derivative.
    """
    n, h = sol.n, sol.spacing
    corrected = sol.corrected()
    x1, x2 = grid_coordinates(n, sol.length)
    outside = np.ones((n, n), dtype=bool)
    if ms is not None and not ms.is_empty:
        outside = ms.signed_distance(x1, x2) > 2.0 * h

    harmonic = []
    for d in (0, 1):
        imbalance = face_divergence(sol.faces * corrected[d], h) * h
        harmonic.append(float(np.max(np.abs(imbalance[outside]), initial=0.0)))

    rigidity = None
    fluxes: List[Tuple[float, float]] = []
    relative: List[Tuple[float, float]] = []
    if ms is not None and not ms.is_empty:
        if sol.penalties:
            interior = _eroded_interior(ms, n, sol.penalties[-1])
            if interior.any():
                rigidity = float(np.max(np.sqrt(np.sum(corrected ** 2, axis=1))[:, interior]))
        scale = max(float(np.max(np.abs(sol.gradients))), 1e-300)
        laplacians = [face_divergence(sol.gradients[d], h) for d in (0, 1)]
        for inc in ms.inclusions:
            mask = inc.signed_distance(x1, x2) <= 2.0 * h
            pair = tuple(float(h * h * np.sum(lap[mask])) for lap in laplacians)
            fluxes.append(pair)
            relative.append((pair[0] / scale, pair[1] / scale))

    return DiagnosticsReport(
        harmonic_residual=(harmonic[0], harmonic[1]),
        rigidity=rigidity,
        fluxes=fluxes,
        relative_fluxes=relative,
        mean_gradient=sol.gradients.mean(axis=(2, 3)),
    )
