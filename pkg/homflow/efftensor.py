"""
Homogenized tensors assembled from corrector solutions.

Both energy formulas of each variant are evaluated and their gap kept as a
consistency residual. The rotated tensors m_bar = J^T a J and
b_bar = J^T a^-1 J, the dilute Clausius-Mossotti predictions and the
two-dimensional duality check live here as well.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .cellsolve import (
    DEFAULT_PENALTIES,
    DEFAULT_TOLERANCE,
    CorrectorSolution,
    solve_conductivity,
    solve_lake_corrector,
    solve_stiff_corrector,
)
from .exceptions import TensorAssemblyError, UnsupportedShapeError
from .fields import ScalarField
from .microgeom import DepthSpec, Microstructure, build_depth_field, rasterize_indicator
from .operators import J

logger = logging.getLogger(__name__)

SYMMETRY_TOLERANCE = 1e-8
DEFINITENESS_TOLERANCE = 1e-8
DILUTE_MAX_FRACTION = 0.1


@dataclass
class EffectiveTensors:
    """
    Homogenized tensor with derived quantities and consistency residuals.

    Attributes:
        variant (str): 'stiff' or 'lake'
        a_bar (np.ndarray): canonical homogenized tensor
        derived (np.ndarray): m_bar (stiff) or b_bar (lake)
        volume_fraction (Optional[float]): rasterized lambda
        b0 (Optional[float]): averaged depth (lake)
        formula_gap (float): max entry gap between the two energy formulas
        asymmetry (float): |a - a^T| / |a|
        first_formula, second_formula (np.ndarray): the two formula values
        per_penalty (list): raw per-K tensors (stiff)
        dilute (Optional[np.ndarray]): Clausius-Mossotti prediction
        dilute_gap (Optional[float]): max entry gap to the prediction
        n (int): cell grid size
        k_max (Optional[float]): largest penalty (stiff)
        sandwich_ok (bool): lake Voigt-Reuss bounds hold
    """

    variant: str
    a_bar: np.ndarray
    derived: np.ndarray
    volume_fraction: Optional[float] = None
    b0: Optional[float] = None
    formula_gap: float = 0.0
    asymmetry: float = 0.0
    first_formula: Optional[np.ndarray] = None
    second_formula: Optional[np.ndarray] = None
    per_penalty: list = field(default_factory=list)
    dilute: Optional[np.ndarray] = None
    dilute_gap: Optional[float] = None
    n: int = 0
    k_max: Optional[float] = None
    sandwich_ok: bool = True

    def attach_dilute(self, prediction: np.ndarray) -> None:
        self.dilute = prediction
        self.dilute_gap = float(np.max(np.abs(self.a_bar - prediction)))

    def to_row(self) -> Dict[str, Any]:
        """Flat record for the tensor CSV table."""
        prefix = "m" if self.variant == "stiff" else "b"
        return {
            "variant": self.variant,
            "N": self.n,
            "K_max": self.k_max,
            "lambda": self.volume_fraction,
            "b0": self.b0,
            "a11": self.a_bar[0, 0],
            "a12": self.a_bar[0, 1],
            "a21": self.a_bar[1, 0],
            "a22": self.a_bar[1, 1],
            f"{prefix}11": self.derived[0, 0],
            f"{prefix}12": self.derived[0, 1],
            f"{prefix}22": self.derived[1, 1],
            "formula_gap": self.formula_gap,
            "asymmetry": self.asymmetry,
            "dilute_gap": self.dilute_gap,
        }


def _check_spd(matrix: np.ndarray, name: str) -> None:
    matrix = np.asarray(matrix, dtype=float)
    if matrix.shape != (2, 2) or not np.all(np.isfinite(matrix)):
        raise ValueError(f"{name} must be a finite 2x2 matrix")
    scale = max(np.max(np.abs(matrix)), 1e-300)
    if np.max(np.abs(matrix - matrix.T)) > SYMMETRY_TOLERANCE * scale:
        raise ValueError(f"{name} is not symmetric")
    if np.min(np.linalg.eigvalsh(0.5 * (matrix + matrix.T))) <= 0:
        raise ValueError(f"{name} is not positive definite")


def m_bar(a_bar: np.ndarray) -> np.ndarray:
    """J^T a J, i.e. [[d, -c], [-c, a]] for a = [[a, c], [c, d]]."""
    _check_spd(a_bar, "a_bar")
    return J.T @ np.asarray(a_bar, dtype=float) @ J


def b_bar(a_bar: np.ndarray) -> np.ndarray:
    """J^T a^-1 J."""
    _check_spd(a_bar, "a_bar")
    return J.T @ np.linalg.inv(np.asarray(a_bar, dtype=float)) @ J


def _asymmetry(matrix: np.ndarray) -> float:
    return float(np.linalg.norm(matrix - matrix.T) / max(np.linalg.norm(matrix), 1e-300))


def _check_assembly(tensor: np.ndarray, shift: np.ndarray, report: Dict[str, Any]) -> None:
    asymmetry = _asymmetry(tensor)
    if asymmetry > SYMMETRY_TOLERANCE:
        logger.error(f"Assembled tensor asymmetric: {asymmetry:.3e}")
        raise TensorAssemblyError(f"Homogenized tensor asymmetric ({asymmetry:.3e})", report)
    smallest = float(np.min(np.linalg.eigvalsh(0.5 * (tensor + tensor.T) - shift)))
    if smallest < -DEFINITENESS_TOLERANCE * max(np.linalg.norm(tensor), 1.0):
        logger.error(f"Assembled tensor fails its lower bound: eigenvalue {smallest:.3e}")
        raise TensorAssemblyError(f"Homogenized tensor below its lower bound ({smallest:.3e})", report)


@dataclass(frozen=True)
class CellStatistics:
    volume_fraction: Optional[float] = None
    b0: Optional[float] = None


def cell_statistics(source: Union[Microstructure, ScalarField, None], n: int = 256,
                    supersampling: int = 4) -> CellStatistics:
    """Volume fraction of a microstructure or averaged depth of a depth field."""
    if source is None:
        return CellStatistics()
    if isinstance(source, ScalarField):
        return CellStatistics(b0=source.mean())
    if source.is_empty:
        return CellStatistics(volume_fraction=0.0)
    return CellStatistics(volume_fraction=rasterize_indicator(source, n, supersampling).mean())


def homogenized_tensor_stiff(sol: CorrectorSolution, ms: Optional[Microstructure] = None,
                             supersampling: int = 4) -> EffectiveTensors:
    """
    Stiff-inclusion tensor from penalized correctors.

    The canonical value is the Richardson-extrapolated energy tensor. The
    two unweighted formulas delta_ij + mean(grad phi_i . grad phi_j) and
    mean((grad phi_i + e_i) . (grad phi_j + e_j)) differ only by the mean
    of periodic differences.
    """
    if sol.variant != "stiff":
        raise ValueError(f"Expected a stiff corrector solution, got {sol.variant}")
    grads = sol.gradients
    corrected = sol.corrected()
    first = np.eye(2) + np.einsum("icxy,jcxy->ij", grads, grads) / sol.n ** 2
    second = np.einsum("icxy,jcxy->ij", corrected, corrected) / sol.n ** 2
    gap = float(np.max(np.abs(first - second)) / max(np.max(np.abs(second)), 1e-300))

    tensor = sol.extrapolated_tensor()
    report = {"formula_gap": gap, "asymmetry": _asymmetry(tensor), "tensor": tensor.tolist()}
    _check_assembly(tensor, np.eye(2), report)
    tensor = 0.5 * (tensor + tensor.T)

    stats = cell_statistics(ms, sol.n, supersampling) if ms is not None else CellStatistics()
    result = EffectiveTensors(
        variant="stiff",
        a_bar=tensor,
        derived=m_bar(tensor),
        volume_fraction=stats.volume_fraction,
        formula_gap=gap,
        asymmetry=report["asymmetry"],
        first_formula=first,
        second_formula=second,
        per_penalty=[t.copy() for t in sol.tensors],
        n=sol.n,
        k_max=sol.penalties[-1] if sol.penalties else None,
    )
    logger.info(f"Stiff tensor a11={tensor[0, 0]:.8f} a22={tensor[1, 1]:.8f} a12={tensor[0, 1]:.2e}")
    return result


def voigt_reuss_bounds(coefficient: ScalarField) -> Tuple[float, float]:
    """Harmonic and arithmetic means of a conductivity field."""
    values = coefficient.values
    return float(1.0 / np.mean(1.0 / values)), float(np.mean(values))


def homogenized_tensor_lake(depth: ScalarField, sol: CorrectorSolution) -> EffectiveTensors:
    """
    Lake tensor a_bar with b_bar = J^T a_bar^-1 J and b0 = mean(b).

    First formula: mean(b^-1 (grad psi_i + e_i) . (grad psi_j + e_j));
    second: e_i . mean(b^-1 (grad psi_j + e_j)). Both use the face
    coefficients of the solver.
    """
    if sol.variant != "lake":
        raise ValueError(f"Expected a lake corrector solution, got {sol.variant}")
    if depth.n != sol.n:
        raise ValueError(f"Depth grid {depth.n} does not match corrector grid {sol.n}")
    corrected = sol.corrected()
    first = sol.tensors[-1]
    second = np.array([[np.mean(sol.faces[i] * corrected[j, i]) for j in range(2)] for i in range(2)])
    gap = float(np.max(np.abs(first - second)) / max(np.max(np.abs(first)), 1e-300))

    report = {"formula_gap": gap, "asymmetry": _asymmetry(first), "tensor": first.tolist()}
    _check_assembly(first, np.zeros((2, 2)), report)
    tensor = 0.5 * (first + first.T)
    if np.min(np.linalg.eigvalsh(tensor)) <= 0:
        raise TensorAssemblyError("Lake tensor is not positive definite", report)

    b0 = depth.mean()
    lower = 1.0 / b0
    upper = float(np.mean(1.0 / depth.values))
    eigenvalues = np.linalg.eigvalsh(tensor)
    slack = 1e-8 * upper
    sandwich_ok = bool(eigenvalues[0] >= lower - slack and eigenvalues[1] <= upper + slack)
    if not sandwich_ok:
        logger.warning(
            f"Lake tensor eigenvalues {eigenvalues} leave the bounds [{lower:.8f}, {upper:.8f}]"
        )
    logger.info(f"Lake tensor a11={tensor[0, 0]:.8f} a22={tensor[1, 1]:.8f} b0={b0:.8f}")
    return EffectiveTensors(
        variant="lake",
        a_bar=tensor,
        derived=b_bar(tensor),
        b0=b0,
        formula_gap=gap,
        asymmetry=report["asymmetry"],
        first_formula=first,
        second_formula=second,
        n=sol.n,
        sandwich_ok=sandwich_ok,
    )


def dilute_cm(variant: str, volume_fraction: float, alpha: float = 1.0, beta: float = 1.0,
              shape: str = "disk") -> np.ndarray:
    """
    First-order Clausius-Mossotti tensor for dilute disks.

    stiff: (1 + 2 lambda) Id; lake: (1/alpha + lambda 2 (alpha - beta) / (alpha (alpha + beta))) Id.

    Raises:
        UnsupportedShapeError: shape other than disk
        ValueError: lambda outside [0, 0.1] or unknown variant
    """
    if shape != "disk":
        raise UnsupportedShapeError(f"Dilute formula is only available for disks, not {shape}")
    if not 0.0 <= volume_fraction <= DILUTE_MAX_FRACTION:
        raise ValueError(f"Dilute formula requires 0 <= lambda <= {DILUTE_MAX_FRACTION}, got {volume_fraction}")
    if variant == "stiff":
        return (1.0 + 2.0 * volume_fraction) * np.eye(2)
    if variant == "lake":
        if alpha <= 0 or beta <= 0:
            raise ValueError("Depths alpha and beta must be positive")
        slope = 2.0 * (alpha - beta) / (alpha * (alpha + beta))
        return (1.0 / alpha + volume_fraction * slope) * np.eye(2)
    raise ValueError(f"Unknown variant: {variant}")


def conductivity_tensor(coefficient: ScalarField, tol: float = DEFAULT_TOLERANCE,
                        workers: int = 1) -> Tuple[np.ndarray, CorrectorSolution]:
    """Homogenized tensor of an arbitrary positive conductivity field."""
    sol = solve_conductivity(coefficient, tol, workers=workers)
    tensor = sol.tensors[-1]
    return 0.5 * (tensor + tensor.T), sol


@dataclass(frozen=True)
class DualityReport:
    direct: np.ndarray
    dual: np.ndarray
    gap: float

    def holds(self, tolerance: float) -> bool:
        return self.gap <= tolerance


def duality_check(depth: ScalarField, tol: float = DEFAULT_TOLERANCE, workers: int = 1,
                  lake: Optional[EffectiveTensors] = None) -> DualityReport:
    """
    Compare direct homogenization of conductivity b with b_bar obtained
    from the lake tensor of b^-1.
    """
    if lake is None:
        lake = homogenized_tensor_lake(depth, solve_lake_corrector(depth, tol, workers=workers))
    direct, _ = conductivity_tensor(depth, tol, workers)
    gap = float(np.max(np.abs(direct - lake.derived)))
    logger.info(f"Duality gap {gap:.3e}")
    return DualityReport(direct=direct, dual=lake.derived, gap=gap)


def island_limit(ms: Microstructure, n: int, betas: Sequence[float] = (1e-1, 1e-2, 1e-3),
                 alpha: float = 1.0, penalties: Sequence[float] = DEFAULT_PENALTIES,
                 tol: float = DEFAULT_TOLERANCE, workers: int = 1,
                 bound: float = 1e4) -> pd.DataFrame:
    """
    Lake tensors of two-phase depths alpha / beta for vanishing inner
    depth, against the extrapolated stiff tensor of the same inclusions.
    Returned table has one row per beta with the tensor entries and gap.
    """
    stiff = homogenized_tensor_stiff(solve_stiff_corrector(ms, n, penalties, tol, workers=workers), ms)
    reference = alpha ** -1 * stiff.a_bar
    rows = []
    for beta in betas:
        spec = DepthSpec.two_phase(alpha, beta, ms, bound=max(bound, alpha, 1.0 / beta))
        depth = build_depth_field(spec, n)
        lake = homogenized_tensor_lake(depth, solve_lake_corrector(depth, tol, workers=workers))
        gap = float(np.max(np.abs(lake.a_bar - reference)))
        rows.append({
            "beta": beta,
            "a11": lake.a_bar[0, 0],
            "a12": lake.a_bar[0, 1],
            "a22": lake.a_bar[1, 1],
            "stiff_a11": reference[0, 0],
            "stiff_a22": reference[1, 1],
            "gap": gap,
        })
        logger.debug(f"Island limit beta={beta:.1e}: gap {gap:.3e}")
    return pd.DataFrame(rows)
