"""
Periodic grid fields.

Fields are node-centered samples on a uniform N x N grid covering the square
[-L/2, L/2)^2. Axis 0 indexes x1, axis 1 indexes x2.
"""

from dataclasses import dataclass
from typing import Tuple

import numpy as np

MIN_GRID_SIZE = 16


def grid_coordinates(n: int, length: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    """Node coordinates (x1, x2) of an n x n periodic grid, ``indexing='ij'``."""
    axis = -0.5 * length + length * np.arange(n) / n
    return np.meshgrid(axis, axis, indexing="ij")


def _check_grid(values: np.ndarray, n_components: int) -> None:
    expected_ndim = 2 if n_components == 1 else 3
    if values.ndim != expected_ndim:
        raise ValueError(f"Expected a {expected_ndim}-d sample array, got shape {values.shape}")
    n = values.shape[-1]
    if values.shape[-2] != n:
        raise ValueError(f"Grid must be square, got shape {values.shape}")
    if n_components == 2 and values.shape[0] != 2:
        raise ValueError(f"Vector field needs 2 components, got {values.shape[0]}")
    if n < MIN_GRID_SIZE or n % 2:
        raise ValueError(f"Grid size must be even and >= {MIN_GRID_SIZE}, got {n}")
    if not np.all(np.isfinite(values)):
        raise ValueError("Field contains non-finite values")


@dataclass(frozen=True)
class ScalarField:
    """
    Scalar samples on a periodic square grid.

    Attributes:
        values (np.ndarray): (N, N) samples
        length (float): side L of the periodic square
    """

    values: np.ndarray
    length: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        _check_grid(self.values, 1)
        if not self.length > 0:
            raise ValueError(f"Domain length must be positive, got {self.length}")

    components = 1

    @property
    def n(self) -> int:
        return self.values.shape[-1]

    @property
    def spacing(self) -> float:
        return self.length / self.n

    def coordinates(self) -> Tuple[np.ndarray, np.ndarray]:
        return grid_coordinates(self.n, self.length)

    def mean(self) -> float:
        return float(np.mean(self.values))

    def integral(self) -> float:
        return float(np.sum(self.values)) * self.spacing ** 2


@dataclass(frozen=True)
class VectorField:
    """
    Two-component samples on a periodic square grid.

    Attributes:
        values (np.ndarray): (2, N, N) samples
        length (float): side L of the periodic square
    """

    values: np.ndarray
    length: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        _check_grid(self.values, 2)
        if not self.length > 0:
            raise ValueError(f"Domain length must be positive, got {self.length}")

    components = 2

    @property
    def n(self) -> int:
        return self.values.shape[-1]

    @property
    def spacing(self) -> float:
        return self.length / self.n

    def coordinates(self) -> Tuple[np.ndarray, np.ndarray]:
        return grid_coordinates(self.n, self.length)

    def mean(self) -> np.ndarray:
        return self.values.mean(axis=(1, 2))

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.values[0], self.values[1])
