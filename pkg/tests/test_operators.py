import numpy as np
import pytest
from scipy import fft

from homflow.fields import grid_coordinates
from homflow.operators import (
    J,
    backward_diff,
    dealias_mask,
    derivative_wavenumbers,
    face_divergence,
    face_gradient,
    fd_laplacian_symbol,
    forward_diff,
    harmonic_faces,
    integer_modes,
    rotate,
    spectral_divergence_hat,
    spectral_gradient,
)


@pytest.fixture
def rng():
    return np.random.default_rng(7)


class TestFiniteDifferences:
    def test_backward_is_negative_adjoint_of_forward(self, rng):
        f, g = rng.standard_normal((2, 16, 16))
        for axis in (0, 1):
            assert np.sum(forward_diff(f, axis, 0.1) * g) == pytest.approx(-np.sum(f * backward_diff(g, axis, 0.1)))

    def test_face_divergence_is_conservative_and_adjoint(self, rng):
        f = rng.standard_normal((16, 16))
        flux = rng.standard_normal((2, 16, 16))
        h = 1.0 / 16
        assert abs(np.sum(face_divergence(flux, h))) <= 1e-10
        assert np.sum(face_gradient(f, h) * flux) == pytest.approx(-np.sum(f * face_divergence(flux, h)))

    def test_laplacian_symbol_matches_operator(self, rng):
        n, h = 16, 1.0 / 16
        f = rng.standard_normal((n, n))
        applied = -face_divergence(face_gradient(f, h), h)
        np.testing.assert_allclose(fft.rfft2(applied), fd_laplacian_symbol(n, h) * fft.rfft2(f), atol=1e-9)
        assert fd_laplacian_symbol(n, h)[0, 0] == 0.0

    def test_harmonic_faces(self):
        coef = np.ones((4, 4))
        coef[::2] = 3.0
        faces = harmonic_faces(coef)
        np.testing.assert_allclose(faces[0], 1.5)
        np.testing.assert_allclose(faces[1], coef)


class TestSpectral:
    def test_rotate_is_j(self, rng):
        v = rng.standard_normal((2, 8, 8))
        np.testing.assert_allclose(rotate(v), np.einsum("ij,jab->iab", J, v))

    def test_gradient_and_divergence_of_a_mode(self):
        n = 32
        x1, x2 = grid_coordinates(n)
        f = np.sin(2.0 * np.pi * x1) * np.cos(4.0 * np.pi * x2)
        grad = spectral_gradient(fft.rfft2(f), n, 1.0)
        np.testing.assert_allclose(grad[0], 2.0 * np.pi * np.cos(2.0 * np.pi * x1) * np.cos(4.0 * np.pi * x2),
                                   atol=1e-10)
        np.testing.assert_allclose(grad[1], -4.0 * np.pi * np.sin(2.0 * np.pi * x1) * np.sin(4.0 * np.pi * x2),
                                   atol=1e-10)
        laplacian = fft.irfft2(spectral_divergence_hat(grad, 1.0), s=(n, n))
        np.testing.assert_allclose(laplacian, -20.0 * np.pi ** 2 * f, atol=1e-8)

    def test_nyquist_derivatives_are_zero(self):
        k1, k2 = derivative_wavenumbers(8, 1.0)
        assert np.all(k1[4] == 0.0) and k2[0, 4] == 0.0

    def test_dealias_mask_keeps_two_thirds(self):
        m1, m2 = integer_modes(12)
        mask = dealias_mask(12)
        assert mask[0, 0] and mask[4, 4] and not mask[5, 0] and not mask[0, 5]
        assert np.all(np.abs(np.broadcast_to(m1, mask.shape)[mask]) <= 4)
        assert np.all(np.broadcast_to(m2, mask.shape)[mask] <= 4)
