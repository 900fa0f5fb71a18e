"""
Discrete operators on periodic grids.

Finite differences use ``np.roll`` so every operator is exactly periodic.
Forward differences live on cell faces (i + 1/2); the conservative
divergence pairs them with backward differences, which makes
``-divergence(a * gradient)`` symmetric positive semidefinite.
Spectral helpers use the real FFT layout of ``scipy.fft.rfft2``.
"""

from typing import Tuple

import numpy as np
from scipy import fft


def forward_diff(f: np.ndarray, axis: int, h: float) -> np.ndarray:
    """
    Periodic forward difference (f[i+1] - f[i]) / h.

    Args:
        f (np.ndarray): nodal values
        axis (int): differentiation axis
        h (float): grid spacing

    Returns:
        np.ndarray: difference located on the faces i + 1/2 of ``axis``
    """
    return (np.roll(f, -1, axis=axis) - f) / h


def backward_diff(f: np.ndarray, axis: int, h: float) -> np.ndarray:
    """Periodic backward difference (f[i] - f[i-1]) / h, the negative adjoint of ``forward_diff``."""
    return (f - np.roll(f, 1, axis=axis)) / h


def centered_diff(f: np.ndarray, axis: int, h: float) -> np.ndarray:
    return (np.roll(f, -1, axis=axis) - np.roll(f, 1, axis=axis)) / (2.0 * h)


def face_gradient(f: np.ndarray, h: float) -> np.ndarray:
    """
    Forward-difference gradient of a nodal field.

    Args:
        f (np.ndarray): (n, n) nodal values
        h (float): grid spacing

    Returns:
        np.ndarray: (2, n, n) array, component d located on the d-faces
    """
    return np.stack([forward_diff(f, 0, h), forward_diff(f, 1, h)])


def centered_gradient(f: np.ndarray, h: float) -> np.ndarray:
    """Nodal gradient by centered differences, shape (2, n, n)."""
    return np.stack([centered_diff(f, 0, h), centered_diff(f, 1, h)])


def face_divergence(flux: np.ndarray, h: float) -> np.ndarray:
    """
    Conservative divergence of a face flux.

    Adjoint of ``-face_gradient`` under the plain grid inner product, so
    the sum of the result over the grid is zero to round-off.

    Args:
        flux (np.ndarray): (2, n, n) flux, component d on the d-faces
        h (float): grid spacing

    Returns:
        np.ndarray: (n, n) nodal divergence
    """
    return backward_diff(flux[0], 0, h) + backward_diff(flux[1], 1, h)


def centered_divergence(v: np.ndarray, h: float) -> np.ndarray:
    return centered_diff(v[0], 0, h) + centered_diff(v[1], 1, h)


def harmonic_faces(coef: np.ndarray) -> np.ndarray:
    """
    Face coefficients by harmonic averaging of the two adjacent nodes.

    Args:
        coef (np.ndarray): (n, n) strictly positive nodal coefficient

    Returns:
        np.ndarray: (2, n, n) face coefficients, 2 c_i c_{i+1} / (c_i + c_{i+1})
    """
    faces = []
    for axis in (0, 1):
        right = np.roll(coef, -1, axis=axis)
        faces.append(2.0 * coef * right / (coef + right))
    return np.stack(faces)


def rotate(v: np.ndarray) -> np.ndarray:
    """Apply J = [[0, -1], [1, 0]] pointwise: v -> v^perp = (-v2, v1)."""
    return np.stack([-v[1], v[0]])


J = np.array([[0.0, -1.0], [1.0, 0.0]])


def fd_laplacian_symbol(n: int, h: float) -> np.ndarray:
    """
    Symbol of ``-face_divergence(face_gradient(.))`` in the rfft2 layout.

    Args:
        n (int): grid size
        h (float): grid spacing

    Returns:
        np.ndarray: (n, n // 2 + 1) nonnegative symbol, 0 at the zero mode
    """
    m1 = np.arange(n)[:, None]
    m2 = np.arange(n // 2 + 1)[None, :]
    return (4.0 / h ** 2) * (np.sin(np.pi * m1 / n) ** 2 + np.sin(np.pi * m2 / n) ** 2)


def wavenumbers(n: int, length: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Angular wavenumbers of an n x n grid on a torus of side ``length``.

    Returns:
        Tuple[np.ndarray, np.ndarray]: k1 of shape (n, 1) and k2 of shape
        (1, n // 2 + 1), broadcastable to the rfft2 layout
    """
    d = length / n
    k1 = 2.0 * np.pi * fft.fftfreq(n, d=d)[:, None]
    k2 = 2.0 * np.pi * fft.rfftfreq(n, d=d)[None, :]
    return k1, k2


def derivative_wavenumbers(n: int, length: float) -> Tuple[np.ndarray, np.ndarray]:
    """Wavenumbers for spectral first derivatives, Nyquist modes zeroed."""
    k1, k2 = wavenumbers(n, length)
    k1 = k1.copy()
    k2 = k2.copy()
    k1[n // 2, 0] = 0.0
    k2[0, n // 2] = 0.0
    return k1, k2


def integer_modes(n: int) -> Tuple[np.ndarray, np.ndarray]:
    """Signed integer mode numbers (m1, m2) in the rfft2 layout."""
    m1 = np.rint(fft.fftfreq(n, d=1.0 / n)).astype(int)[:, None]
    m2 = np.arange(n // 2 + 1)[None, :]
    return m1, m2


def dealias_mask(n: int) -> np.ndarray:
    """Two-thirds rule: keep modes with |m1|, |m2| <= n/3."""
    m1, m2 = integer_modes(n)
    cutoff = n / 3.0
    return (np.abs(m1) <= cutoff) & (np.abs(m2) <= cutoff)


def spectral_gradient(f_hat: np.ndarray, n: int, length: float) -> np.ndarray:
    """
    Physical-space gradient of a field given by its rfft2 coefficients.

    Args:
        f_hat (np.ndarray): (n, n // 2 + 1) coefficients
        n (int): grid size
        length (float): torus side

    Returns:
        np.ndarray: (2, n, n) gradient with Nyquist derivatives dropped
    """
    k1, k2 = derivative_wavenumbers(n, length)
    return np.stack([
        fft.irfft2(1j * k1 * f_hat, s=(n, n)),
        fft.irfft2(1j * k2 * f_hat, s=(n, n)),
    ])


def spectral_divergence_hat(v: np.ndarray, length: float) -> np.ndarray:
    """Fourier coefficients of div v for a physical-space vector field."""
    n = v.shape[-1]
    k1, k2 = derivative_wavenumbers(n, length)
    return 1j * k1 * fft.rfft2(v[0]) + 1j * k2 * fft.rfft2(v[1])
