"""
Corrected harmonic coordinates x -> x + phi(x) and their numerical
diffeomorphism certificates: Jacobian sign, directional speed and the
area-formula injectivity gap.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .cellsolve import CorrectorSolution
from .exceptions import GeometryError
from .fields import grid_coordinates
from .microgeom import Microstructure
from .operators import centered_diff

logger = logging.getLogger(__name__)

DEFAULT_EROSION_CELLS = 3
MIN_EROSION_CELLS = 2
SAMPLE_OFFSETS = (0.31, 0.67)


def _check_erosion(delta_cells: float) -> None:
    if not delta_cells >= MIN_EROSION_CELLS:
        logger.error(f"Erosion of {delta_cells} cells is below the {MIN_EROSION_CELLS}-cell minimum")
        raise ValueError(f"Erosion must be at least {MIN_EROSION_CELLS} grid cells, got {delta_cells}")


def eroded_complement(ms: Optional[Microstructure], n: int, delta_cells: float = DEFAULT_EROSION_CELLS,
                      length: float = 1.0) -> np.ndarray:
    """
    Nodes at distance >= delta from the inclusions.

    Args:
        ms (Microstructure, optional): inclusions; None or empty keeps every node
        n (int): grid size
        delta_cells (float): erosion depth in grid cells
        length (float): cell side

    Returns:
        (N, N) boolean mask
    """
    if ms is None or ms.is_empty:
        return np.ones((n, n), dtype=bool)
    h = length / n
    return ms.signed_distance(*grid_coordinates(n, length)) >= delta_cells * h


def _certified_mask(sol: CorrectorSolution, ms: Optional[Microstructure], delta_cells: float) -> np.ndarray:
    _check_erosion(delta_cells)
    if sol.variant != "stiff":
        return eroded_complement(None, sol.n, delta_cells, sol.length)
    if ms is None:
        logger.error("Stiff harmonic coordinates requested without the microstructure")
        raise GeometryError("Stiff harmonic coordinates require the microstructure to erode the inclusions")
    return eroded_complement(ms, sol.n, delta_cells, sol.length)


@dataclass
class CoordinateMap:
    """
    Periodic displacement phi = (phi_1, phi_2) of the map x -> x + phi(x).

    Attributes:
        displacement (np.ndarray): (2, N, N) corrector potentials
        jacobian (np.ndarray): det(Id + grad phi) by centered differences
        mask (np.ndarray): eroded complement of the inclusions
        length (float): cell side
        erosion_cells (float, optional): erosion the mask was built with;
            None when the mask is the whole cell or was supplied directly
    """

    displacement: np.ndarray
    jacobian: np.ndarray
    mask: np.ndarray
    length: float = 1.0
    erosion_cells: Optional[float] = None

    def __post_init__(self):
        if self.erosion_cells is not None:
            _check_erosion(self.erosion_cells)

    @property
    def n(self) -> int:
        return self.displacement.shape[-1]

    @property
    def spacing(self) -> float:
        return self.length / self.n

    def gradient(self) -> np.ndarray:
        """(i, j, N, N) array of d phi_i / d x_j."""
        h = self.spacing
        return np.stack([
            np.stack([centered_diff(self.displacement[i], j, h) for j in (0, 1)]) for i in (0, 1)
        ])

    def mean_jacobian_matrix(self) -> np.ndarray:
        return np.eye(2) + self.gradient().mean(axis=(2, 3))

    @classmethod
    def from_displacement(cls, displacement: np.ndarray, mask: Optional[np.ndarray] = None,
                          length: float = 1.0, erosion_cells: Optional[float] = None) -> "CoordinateMap":
        """
        Build a map and its centered-difference Jacobian from a displacement.

        Args:
            displacement (np.ndarray): (2, N, N) periodic displacement
            mask (np.ndarray, optional): nodes to certify, defaults to all
            length (float): cell side
            erosion_cells (float, optional): erosion ``mask`` was built with

        Raises:
            ValueError: erosion_cells below the two-cell minimum
        """
        displacement = np.asarray(displacement, dtype=float)
        n = displacement.shape[-1]
        h = length / n
        d = [[centered_diff(displacement[i], j, h) for j in (0, 1)] for i in (0, 1)]
        jacobian = (1.0 + d[0][0]) * (1.0 + d[1][1]) - d[0][1] * d[1][0]
        if mask is None:
            mask = np.ones((n, n), dtype=bool)
        return cls(displacement=displacement, jacobian=jacobian, mask=mask, length=length,
                   erosion_cells=erosion_cells)


def build_map(sol: CorrectorSolution, ms: Optional[Microstructure] = None,
              delta_cells: float = DEFAULT_EROSION_CELLS) -> CoordinateMap:
    """
    Harmonic coordinates of a corrector solution.

    Stiff maps are certified on the complement of the inclusions eroded by
    ``delta_cells``; lake maps use the whole cell.

    Args:
        sol (CorrectorSolution): stiff or lake correctors
        ms (Microstructure, optional): inclusions, required for stiff solutions
        delta_cells (float): erosion in grid cells, at least two

    Returns:
        CoordinateMap recording the erosion of its mask

    Raises:
        ValueError: erosion below two cells
        GeometryError: stiff solution without its microstructure
    """
    mask = _certified_mask(sol, ms, delta_cells)
    erosion = delta_cells if sol.variant == "stiff" and not ms.is_empty else None
    return CoordinateMap.from_displacement(sol.potentials, mask, sol.length, erosion)


@dataclass
class JacobianAnalysis:
    """
    Attributes:
        min_det (float): minimum of det(Id + grad phi) on the mask
        location (Tuple[float, float]): node coordinates of the minimum
        sign_changes (int): mask nodes with det <= 0
        area_gap (float): |sum |T_k| - sampled image area| / sum |T_k| over
            the piecewise-linear images T_k of the mask cells
        fold_fraction (float): fraction of covered samples hit more than once
        mask_integral (float): h^2 sum of det over the mask
        image_area (float): sampled area of the image
    """

    min_det: float
    location: Tuple[float, float]
    sign_changes: int
    area_gap: float
    fold_fraction: float
    mask_integral: float
    image_area: float


def _mask_triangles(cmap: CoordinateMap) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Images of the two triangles of every grid cell whose corners all lie in the mask."""
    n, h = cmap.n, cmap.spacing
    x1, x2 = grid_coordinates(n, cmap.length)
    phi = cmap.displacement
    mask = cmap.mask
    cells = mask & np.roll(mask, -1, 0) & np.roll(mask, -1, 1) & np.roll(mask, (-1, -1), (0, 1))

    def corner(s1: int, s2: int) -> np.ndarray:
        shifted = np.roll(phi, (-s1, -s2), axis=(1, 2))
        return np.stack([x1 + s1 * h + shifted[0], x2 + s2 * h + shifted[1]], axis=-1)[cells]

    p00, p10, p01, p11 = corner(0, 0), corner(1, 0), corner(0, 1), corner(1, 1)
    a = np.concatenate([p00, p00])
    b = np.concatenate([p10, p11])
    c = np.concatenate([p11, p01])
    return a, b, c


def _cross(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    # z-component of u x v
    return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]


def image_multiplicity(cmap: CoordinateMap, refinement: int = 4) -> Tuple[np.ndarray, np.ndarray]:
    """
    Count how many triangle images cover each sample of a refined grid.

    Every grid cell whose corners lie in the mask is split into two
    triangles and mapped through x -> x + phi(x). Samples sit at
    SAMPLE_OFFSETS inside the refined cells, off the undeformed triangle
    edges.

    Args:
        cmap (CoordinateMap): map and its mask
        refinement (int): refined samples per grid cell and axis

    Returns:
        Tuple[np.ndarray, np.ndarray]: (refinement*n, refinement*n) counts,
        and the signed area of every mapped triangle
    """
    a, b, c = _mask_triangles(cmap)
    areas = 0.5 * _cross(b - a, c - a)
    nf = refinement * cmap.n
    hf = cmap.length / nf
    half = 0.5 * cmap.length
    multiplicity = np.zeros((nf, nf), dtype=np.int64)
    if a.size == 0:
        return multiplicity, areas

    corners = np.stack([a, b, c])
    low = (corners.min(axis=0) + half) / hf - np.asarray(SAMPLE_OFFSETS)
    high = (corners.max(axis=0) + half) / hf - np.asarray(SAMPLE_OFFSETS)
    start = np.ceil(low).astype(np.int64)
    stop = np.floor(high).astype(np.int64)
    extent = np.max(stop - start, axis=0) + 1
    orientation = np.sign(areas)

    for s1 in range(max(int(extent[0]), 0)):
        for s2 in range(max(int(extent[1]), 0)):
            k = start[:, 0] + s1
            m = start[:, 1] + s2
            candidate = (k <= stop[:, 0]) & (m <= stop[:, 1]) & (orientation != 0)
            if not candidate.any():
                continue
            y = np.stack([
                -half + (k + SAMPLE_OFFSETS[0]) * hf,
                -half + (m + SAMPLE_OFFSETS[1]) * hf,
            ], axis=-1)
            w0 = _cross(b - a, y - a) * orientation
            w1 = _cross(c - b, y - b) * orientation
            w2 = _cross(a - c, y - c) * orientation
            inside = candidate & (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
            np.add.at(multiplicity, (k[inside] % nf, m[inside] % nf), 1)
    return multiplicity, areas


def jacobian_analysis(cmap: CoordinateMap, refinement: int = 4) -> JacobianAnalysis:
    """
    Sign and injectivity findings of a coordinate map on its own mask.

    The area formula compares the total area of the piecewise-linear images
    of the mask cells with the area covered at least once, sampled on a grid
    refined ``refinement`` times; the two agree exactly for injective maps.

    Args:
        cmap (CoordinateMap): map built by build_map or from_displacement
        refinement (int): sampling refinement of the image grid

    Returns:
        JacobianAnalysis over ``cmap.mask``
    """
    h = cmap.spacing
    x1, x2 = grid_coordinates(cmap.n, cmap.length)
    det = np.where(cmap.mask, cmap.jacobian, np.inf)
    index = np.unravel_index(np.argmin(det), det.shape)
    min_det = float(det[index]) if cmap.mask.any() else float("nan")

    multiplicity, areas = image_multiplicity(cmap, refinement)
    hf = cmap.length / (refinement * cmap.n)
    covered = int(np.count_nonzero(multiplicity))
    image_area = covered * hf * hf
    total = float(np.sum(np.abs(areas)))
    area_gap = abs(total - image_area) / total if total > 0 else 0.0
    folds = int(np.count_nonzero(multiplicity > 1))

    analysis = JacobianAnalysis(
        min_det=min_det,
        location=(float(x1[index]), float(x2[index])),
        sign_changes=int(np.count_nonzero(cmap.mask & (cmap.jacobian <= 0))),
        area_gap=float(area_gap),
        fold_fraction=folds / covered if covered else 0.0,
        mask_integral=float(np.sum(cmap.jacobian[cmap.mask]) * h * h),
        image_area=float(image_area),
    )
    if analysis.sign_changes:
        logger.warning(f"Jacobian changes sign at {analysis.sign_changes} nodes (min det {min_det:.3e})")
    return analysis


@dataclass(frozen=True)
class SpeedReport:
    """Slowest point of |e + grad phi_e| for one direction e."""

    direction: Tuple[float, float]
    minimum: float
    location: Tuple[float, float]


def direction_speed_min(sol: CorrectorSolution, e: Sequence[float], ms: Optional[Microstructure] = None,
                        delta_cells: float = DEFAULT_EROSION_CELLS) -> SpeedReport:
    """
    Minimum of |e + grad phi_e| over the eroded complement, with
    phi_e = e_1 phi_1 + e_2 phi_2.

    Args:
        sol (CorrectorSolution): stiff or lake correctors
        e (Sequence[float]): unit direction
        ms (Microstructure, optional): inclusions, required for stiff solutions
        delta_cells (float): erosion in grid cells, at least two

    Raises:
        ValueError: e not a unit vector or erosion below two cells
        GeometryError: stiff solution without its microstructure
    """
    e = np.asarray(e, dtype=float)
    if abs(np.linalg.norm(e) - 1.0) > 1e-12:
        raise ValueError(f"Direction must be a unit vector, got {e}")
    h = sol.spacing
    phi_e = e[0] * sol.potentials[0] + e[1] * sol.potentials[1]
    speed = np.hypot(e[0] + centered_diff(phi_e, 0, h), e[1] + centered_diff(phi_e, 1, h))
    mask = _certified_mask(sol, ms, delta_cells)
    masked = np.where(mask, speed, np.inf)
    index = np.unravel_index(np.argmin(masked), masked.shape)
    x1, x2 = grid_coordinates(sol.n, sol.length)
    return SpeedReport(
        direction=(float(e[0]), float(e[1])),
        minimum=float(masked[index]),
        location=(float(x1[index]), float(x2[index])),
    )


def direction_fan(count: int = 16) -> np.ndarray:
    """Unit directions at angles pi k / count, k = 0..count-1."""
    angles = np.pi * np.arange(count) / count
    return np.stack([np.cos(angles), np.sin(angles)], axis=-1)


def coordinate_report(sol: CorrectorSolution, ms: Optional[Microstructure] = None,
                      delta_cells: float = DEFAULT_EROSION_CELLS, directions: int = 16,
                      refinement: int = 4) -> Tuple[pd.DataFrame, JacobianAnalysis]:
    """
    Per-direction minimum speeds together with the Jacobian analysis of the map.

    Args:
        sol (CorrectorSolution): stiff or lake correctors
        ms (Microstructure, optional): inclusions, required for stiff solutions
        delta_cells (float): erosion in grid cells, at least two
        directions (int): size of the direction fan
        refinement (int): sampling refinement of the area formula

    Returns:
        (table of e1, e2, min_speed and its location per direction, JacobianAnalysis)
    """
    analysis = jacobian_analysis(build_map(sol, ms, delta_cells), refinement)
    rows = []
    for e in direction_fan(directions):
        report = direction_speed_min(sol, e, ms, delta_cells)
        rows.append({
            "e1": report.direction[0],
            "e2": report.direction[1],
            "min_speed": report.minimum,
            "min_speed_x1": report.location[0],
            "min_speed_x2": report.location[1],
            "min_det": analysis.min_det,
            "sign_changes": analysis.sign_changes,
            "area_gap": analysis.area_gap,
        })
    logger.info(
        f"Harmonic coordinates: min det {analysis.min_det:.4f}, area gap {analysis.area_gap:.2e}, "
        f"min speed {min(r['min_speed'] for r in rows):.4f}"
    )
    return pd.DataFrame(rows), analysis
