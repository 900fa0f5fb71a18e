"""
Cell-scale transport dynamics.

The cell velocity R_e = J(e + grad phi_e) is a rotated gradient, so its
centered discrete divergence vanishes and its mean is J e. Trajectories are
integrated with classical RK4 on a periodic bicubic spline of the field;
rotation vectors and Birkhoff averages measure unique ergodicity.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import ndimage

from .cellsolve import CorrectorSolution, solve_stiff_corrector
from .exceptions import CFLViolationError, GeometryError
from .fields import ScalarField, VectorField
from .microgeom import Microstructure, RadiusLaw, rasterize_indicator, sample_random_hardcore
from .operators import centered_diff, centered_divergence, rotate

logger = logging.getLogger(__name__)

CFL_LIMIT = 0.5
TRAP_THRESHOLD = 1e-3
GOLDEN_RATIO = 0.5 * (1.0 + math.sqrt(5.0))

Observable = Callable[[np.ndarray, np.ndarray], np.ndarray]


def golden_direction() -> np.ndarray:
    """Unit vector with slope equal to the golden ratio."""
    e = np.array([1.0, GOLDEN_RATIO])
    return e / np.linalg.norm(e)


def default_observables() -> List[Observable]:
    """Three smooth periodic observables."""
    return [
        lambda x1, x2: np.cos(2.0 * np.pi * x1),
        lambda x1, x2: np.sin(2.0 * np.pi * x2),
        lambda x1, x2: np.cos(2.0 * np.pi * (x1 + x2)),
    ]


@dataclass
class CellVelocityField:
    """
    Cell flow for a fixed direction.

    Attributes:
        field (VectorField): R_e on the grid
        direction (np.ndarray): unit vector e
        density (ScalarField): invariant density (free-volume indicator or b)
        variant (str): 'stiff' or 'lake'
        normalization (float): 1 - lambda (stiff) or b0 (lake)
    """

    field: VectorField
    direction: np.ndarray
    density: ScalarField
    variant: str = "stiff"
    normalization: float = 1.0

    @property
    def values(self) -> np.ndarray:
        return self.field.values

    def mean(self) -> np.ndarray:
        return self.field.mean()

    def divergence(self) -> np.ndarray:
        return centered_divergence(self.field.values, self.field.spacing)

    def max_speed(self) -> float:
        return float(np.max(self.field.magnitude()))

    def reference_rotation(self) -> np.ndarray:
        """e^perp / (1 - lambda) for stiff inclusions, e^perp / b0 for the lake."""
        e = self.direction
        return np.array([-e[1], e[0]]) / self.normalization


def _unit(e: Sequence[float]) -> np.ndarray:
    e = np.asarray(e, dtype=float)
    norm = np.linalg.norm(e)
    if not norm > 0:
        raise ValueError("Direction must be nonzero")
    if abs(norm - 1.0) > 1e-12:
        raise ValueError(f"Direction must be a unit vector, got {e}")
    return e


def cell_velocity(sol: CorrectorSolution, e: Sequence[float], ms: Optional[Microstructure] = None,
                  depth: Optional[ScalarField] = None, supersampling: int = 4) -> CellVelocityField:
    """
    Cell velocity of a corrector solution in direction e.

    Stiff: R = J(e + grad phi_e) with invariant density the free-volume
    indicator. Lake: R = b^-1 J(e + grad psi_e) with invariant density b.

    Args:
        sol (CorrectorSolution): stiff or lake correctors
        e (Sequence[float]): unit direction
        ms (Microstructure, optional): inclusions of a stiff solution; pass an
            empty Microstructure for the inclusion-free cell
        depth (ScalarField, optional): depth of a lake solution
        supersampling (int): indicator supersampling for the stiff density

    Raises:
        GeometryError: stiff solution without its microstructure
        ValueError: lake solution without depth, or e not a unit vector
    """
    e = _unit(e)
    n, h = sol.n, sol.spacing
    phi_e = e[0] * sol.potentials[0] + e[1] * sol.potentials[1]
    gradient = np.stack([e[0] + centered_diff(phi_e, 0, h), e[1] + centered_diff(phi_e, 1, h)])
    velocity = rotate(gradient)
    if sol.variant == "lake":
        if depth is None:
            raise ValueError("Lake cell velocity requires the depth field")
        velocity = velocity / depth.values
        density = depth
        normalization = depth.mean()
    else:
        if ms is None:
            logger.error("Stiff cell velocity called without its microstructure")
            raise GeometryError("Stiff cell velocity requires the microstructure to weight the free volume")
        density = free_indicator(ms, n, supersampling)
        normalization = density.mean()
    return CellVelocityField(
        field=VectorField(velocity, sol.length),
        direction=e,
        density=density,
        variant=sol.variant,
        normalization=normalization,
    )


def constant_velocity(e: Sequence[float], n: int = 32) -> CellVelocityField:
    """Velocity J e of the empty cell."""
    e = _unit(e)
    values = np.empty((2, n, n))
    values[0] = -e[1]
    values[1] = e[0]
    return CellVelocityField(VectorField(values), e, ScalarField(np.ones((n, n))))


class TrajectoryIntegrator:
    """
    Fixed-step RK4 on a periodic cubic-spline interpolant of a cell velocity.

    Positions are unwrapped; the interpolant wraps them onto the cell.
    """

    def __init__(self, velocity: CellVelocityField):
        self.velocity = velocity
        self.n = velocity.field.n
        self.length = velocity.field.length
        self.h = velocity.field.spacing
        self._coefficients = [
            ndimage.spline_filter(velocity.values[c], order=3, mode="grid-wrap") for c in (0, 1)
        ]

    def _indices(self, x: np.ndarray) -> np.ndarray:
        return ((x + 0.5 * self.length) / self.h).T

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """Interpolated velocity at positions of shape (M, 2)."""
        idx = self._indices(x)
        return np.stack([
            ndimage.map_coordinates(coef, idx, order=3, mode="grid-wrap", prefilter=False)
            for coef in self._coefficients
        ], axis=-1)

    def check_step(self, dt: float) -> None:
        courant = abs(dt) * self.velocity.max_speed() / self.h
        if courant > CFL_LIMIT:
            logger.error(f"Trajectory time step {dt} gives Courant number {courant:.3f}")
            raise CFLViolationError(
                f"dt * max|R| = {courant:.3f} grid cells exceeds {CFL_LIMIT}"
            )

    def step(self, x: np.ndarray, dt: float) -> np.ndarray:
        k1 = self.evaluate(x)
        k2 = self.evaluate(x + 0.5 * dt * k1)
        k3 = self.evaluate(x + 0.5 * dt * k2)
        k4 = self.evaluate(x + dt * k3)
        return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


@dataclass
class Trajectory:
    """
    Unwrapped trajectories of a batch of starting points.

    Attributes:
        initial (np.ndarray): (M, 2) starting points
        dt (float): time step (negative for backward runs)
        times (np.ndarray): recorded times
        positions (np.ndarray): (len(times), M, 2) recorded unwrapped positions
        final (np.ndarray): (M, 2) position at the end time
        speeds (np.ndarray): (len(times), M) interpolated |R| at recorded positions
        averages (np.ndarray): (M, n_observables) time averages of the observables
        window_speed (np.ndarray): (M,) mean speed over the final window
        trapped (np.ndarray): (M,) final-window mean speed below threshold
    """

    initial: np.ndarray
    dt: float
    times: np.ndarray
    positions: np.ndarray
    final: np.ndarray
    speeds: np.ndarray
    averages: np.ndarray
    window_speed: np.ndarray
    trapped: np.ndarray

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0]) if len(self.times) > 1 else 0.0

    def rotation_vectors(self) -> np.ndarray:
        return (self.final - self.initial) / abs(self.duration)


def advect_trajectory(velocity: CellVelocityField, x0: np.ndarray, duration: float, dt: float,
                      observables: Optional[Sequence[Observable]] = None, record_every: int = 1,
                      window: float = 1.0) -> Trajectory:
    """
    Integrate trajectories from x0 over [0, duration] (backward when dt < 0).

    Observables are averaged with the trapezoidal rule in time. A
    trajectory is trapped when its mean speed over the final ``window``
    falls below TRAP_THRESHOLD * |e|.

    Raises:
        CFLViolationError: |dt| * max|R| > 0.5 grid cells
    """
    if duration <= 0 or dt == 0:
        raise ValueError("Duration must be positive and dt nonzero")
    integrator = TrajectoryIntegrator(velocity)
    integrator.check_step(dt)
    x = np.atleast_2d(np.asarray(x0, dtype=float)).copy()
    initial = x.copy()
    steps = int(round(duration / abs(dt)))
    observables = list(observables or [])
    window_steps = max(1, min(steps, int(round(window / abs(dt)))))

    def observe(pos: np.ndarray) -> np.ndarray:
        if not observables:
            return np.zeros((pos.shape[0], 0))
        return np.stack([f(pos[:, 0], pos[:, 1]) for f in observables], axis=-1)

    sums = 0.5 * observe(x)
    speed = np.linalg.norm(integrator.evaluate(x), axis=-1)
    window_sum = np.zeros(x.shape[0])
    times: List[float] = [0.0]
    positions: List[np.ndarray] = [x.copy()]
    speeds: List[np.ndarray] = [speed]
    for k in range(1, steps + 1):
        x = integrator.step(x, dt)
        values = observe(x)
        sums = sums + (0.5 * values if k == steps else values)
        speed = np.linalg.norm(integrator.evaluate(x), axis=-1)
        if k > steps - window_steps:
            window_sum += speed
        if k % record_every == 0 or k == steps:
            times.append(k * dt)
            positions.append(x.copy())
            speeds.append(speed)

    window_speed = window_sum / window_steps
    threshold = TRAP_THRESHOLD * float(np.linalg.norm(velocity.direction))
    trapped = window_speed < threshold
    if trapped.any():
        logger.warning(f"{int(trapped.sum())} of {len(trapped)} trajectories trapped")
    return Trajectory(
        initial=initial,
        dt=dt,
        times=np.asarray(times),
        positions=np.stack(positions),
        final=x,
        speeds=np.stack(speeds),
        averages=sums / steps if observables else np.zeros((x.shape[0], 0)),
        window_speed=window_speed,
        trapped=trapped,
    )


def reversibility_error(velocity: CellVelocityField, x0: np.ndarray, duration: float, dt: float) -> float:
    """Max distance to the start after integrating forward then backward."""
    forward = advect_trajectory(velocity, x0, duration, dt, record_every=max(1, int(duration / dt)))
    backward = advect_trajectory(velocity, forward.final, duration, -dt, record_every=max(1, int(duration / dt)))
    return float(np.max(np.linalg.norm(backward.final - forward.initial, axis=-1)))


def free_starting_points(ms: Optional[Microstructure], count: int, seed: int = 0,
                         clearance: float = 0.02) -> np.ndarray:
    """Seeded uniform points at distance >= clearance from every inclusion."""
    rng = np.random.default_rng(seed)
    points: List[np.ndarray] = []
    while sum(len(p) for p in points) < count:
        candidates = rng.uniform(-0.5, 0.5, size=(4 * count, 2))
        if ms is not None and not ms.is_empty:
            candidates = candidates[ms.signed_distance(candidates[:, 0], candidates[:, 1]) >= clearance]
        points.append(candidates)
    return np.concatenate(points)[:count]


@dataclass
class ErgodicReport:
    """
    Rotation vectors and Birkhoff averages over a batch of trajectories.

    Attributes:
        rotations (np.ndarray): (M, 2) per-trajectory rotation vectors
        birkhoff (np.ndarray): (M, n_observables) time averages
        reference_rotation (np.ndarray): e^perp / (1 - lambda) or e^perp / b0
        reference_birkhoff (np.ndarray): density-weighted space averages
        dispersion (np.ndarray): standard deviation of the Birkhoff averages per observable
        rotation_error (float): max relative deviation of the rotations from the reference
        trapped (int): number of trapped trajectories
    """

    rotations: np.ndarray
    birkhoff: np.ndarray
    reference_rotation: np.ndarray
    reference_birkhoff: np.ndarray
    dispersion: np.ndarray
    rotation_error: float
    trapped: int = 0
    starts: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    @property
    def max_dispersion(self) -> float:
        return float(np.max(self.dispersion)) if self.dispersion.size else 0.0

    def to_frame(self) -> pd.DataFrame:
        data = {
            "x1_0": self.starts[:, 0],
            "x2_0": self.starts[:, 1],
            "rotation_1": self.rotations[:, 0],
            "rotation_2": self.rotations[:, 1],
            "reference_1": self.reference_rotation[0],
            "reference_2": self.reference_rotation[1],
        }
        for k in range(self.birkhoff.shape[1]):
            data[f"birkhoff_{k + 1}"] = self.birkhoff[:, k]
            data[f"reference_birkhoff_{k + 1}"] = self.reference_birkhoff[k]
            data[f"dispersion_{k + 1}"] = self.dispersion[k]
        return pd.DataFrame(data)


def space_averages(velocity: CellVelocityField, observables: Sequence[Observable]) -> np.ndarray:
    """mean(mu f) / mean(mu) for the invariant density mu."""
    mu = velocity.density.values
    x1, x2 = velocity.density.coordinates()
    return np.array([np.sum(mu * f(x1, x2)) / np.sum(mu) for f in observables])


def rotation_and_birkhoff(velocity: CellVelocityField, starts: np.ndarray, duration: float, dt: float,
                          observables: Optional[Sequence[Observable]] = None) -> ErgodicReport:
    """Long-time rotation vectors and Birkhoff averages against their ergodic reference values."""
    observables = list(observables) if observables is not None else default_observables()
    trajectory = advect_trajectory(
        velocity, starts, duration, dt, observables, record_every=max(1, int(round(duration / dt))),
    )
    rotations = trajectory.rotation_vectors()
    reference = velocity.reference_rotation()
    error = float(np.max(np.linalg.norm(rotations - reference, axis=-1)) / np.linalg.norm(reference))
    report = ErgodicReport(
        rotations=rotations,
        birkhoff=trajectory.averages,
        reference_rotation=reference,
        reference_birkhoff=space_averages(velocity, observables),
        dispersion=trajectory.averages.std(axis=0),
        rotation_error=error,
        trapped=int(trajectory.trapped.sum()),
        starts=trajectory.initial,
    )
    logger.info(
        f"Ergodic run e=({velocity.direction[0]:.4f}, {velocity.direction[1]:.4f}), T={duration}: "
        f"rotation error {error:.3e}, max dispersion {report.max_dispersion:.3e}"
    )
    return report


def invariant_residual(mu: ScalarField, velocity: CellVelocityField, max_mode: int = 3) -> float:
    """
    Weak residual of div(mu R) = 0: the maximum of |h^2 sum mu R . grad theta|
    over the Fourier test functions cos and sin of 2 pi k.x with 0 < |k|_inf <= max_mode.
    Gradients of the test functions are centered differences.
    """
    if mu.n != velocity.field.n:
        raise ValueError("Density and velocity grids differ")
    h = mu.spacing
    flux = mu.values * velocity.values
    x1, x2 = mu.coordinates()
    residual = 0.0
    for k1 in range(-max_mode, max_mode + 1):
        for k2 in range(0, max_mode + 1):
            if k2 == 0 and k1 <= 0:
                continue
            phase = 2.0 * np.pi * (k1 * x1 + k2 * x2)
            for theta in (np.cos(phase), np.sin(phase)):
                pairing = flux[0] * centered_diff(theta, 0, h) + flux[1] * centered_diff(theta, 1, h)
                residual = max(residual, abs(float(np.sum(pairing)) * h * h))
    return residual


def sampled_invariant_residual(seed: int, volume_fraction: float, hardcore: float, radius_law: RadiusLaw,
                               n: int, e: Sequence[float], penalties: Sequence[float] = (1e2, 1e3, 1e4),
                               tol: float = 1e-8) -> Tuple[float, Microstructure]:
    """Free-volume invariance residual of the cell flow of a random hardcore sample."""
    ms = sample_random_hardcore(seed, volume_fraction, hardcore, radius_law)
    sol = solve_stiff_corrector(ms, n, penalties, tol)
    velocity = cell_velocity(sol, e, ms)
    return invariant_residual(velocity.density, velocity), ms


def free_indicator(ms: Optional[Microstructure], n: int, supersampling: int = 4) -> ScalarField:
    if ms is None or ms.is_empty:
        return ScalarField(np.ones((n, n)))
    return ScalarField(1.0 - rasterize_indicator(ms, n, supersampling).values)
