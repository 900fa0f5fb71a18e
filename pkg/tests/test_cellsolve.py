import math

import numpy as np
import pytest

from homflow.cellsolve import (
    CellProblem,
    corrector_diagnostics,
    solve_conductivity,
    solve_lake_corrector,
    solve_stiff_corrector,
)
from homflow.exceptions import GeometryError, SolverConvergenceError
from homflow.fields import ScalarField, grid_coordinates
from homflow.microgeom import DepthSpec, Microstructure, build_depth_field
from conftest import two_disks


class TestLakeCorrector:
    def test_constant_depth_has_zero_corrector(self):
        sol = solve_lake_corrector(build_depth_field(DepthSpec.constant(2.0), 32))
        np.testing.assert_array_equal(sol.potentials, 0.0)
        assert sol.residuals == (0.0, 0.0)

    def test_laminate_matches_discrete_oracle(self, laminate_depth):
        n = 64
        depth = build_depth_field(laminate_depth, n)
        sol = solve_lake_corrector(depth, tol=1e-11)
        b = depth.values
        face_depth = 0.5 * (b + np.roll(b, -1, axis=0))
        np.testing.assert_allclose(sol.gradients[0, 0], face_depth / b.mean() - 1.0, atol=1e-8)
        np.testing.assert_allclose(sol.potentials[1], 0.0, atol=1e-12)

    @pytest.mark.slow
    def test_laminate_matches_continuous_oracle(self, laminate_depth):
        n = 512
        sol = solve_lake_corrector(build_depth_field(laminate_depth, n), tol=1e-11)
        x1, _ = grid_coordinates(n)
        exact = laminate_depth.evaluate(x1 + 0.5 / n, 0.0 * x1) - 1.0
        np.testing.assert_allclose(sol.gradients[0, 0], exact, atol=1e-4)

    def test_energy_history_decreases(self, trigonometric_depth):
        sol = solve_lake_corrector(build_depth_field(trigonometric_depth, 32), tol=1e-10)
        for history in sol.histories:
            energies = np.asarray(history.energies)
            assert np.all(np.diff(energies) <= 1e-12 * np.abs(energies).max())

    def test_threaded_solve_is_identical(self, trigonometric_depth):
        depth = build_depth_field(trigonometric_depth, 32)
        serial = solve_lake_corrector(depth, workers=1)
        threaded = solve_lake_corrector(depth, workers=2)
        np.testing.assert_array_equal(serial.potentials, threaded.potentials)

    def test_nonpositive_depth_rejected(self):
        with pytest.raises(ValueError):
            solve_lake_corrector(ScalarField(np.zeros((16, 16))))


class TestStiffCorrector:
    def test_empty_structure(self, empty_structure):
        sol = solve_stiff_corrector(empty_structure, 32, (1e2, 1e3))
        np.testing.assert_array_equal(sol.potentials, 0.0)
        assert all(e == pytest.approx((1.0, 1.0)) for e in sol.energies)
        assert sol.rigidity is None

    def test_energies_nondecreasing(self, disk_quarter):
        sol = solve_stiff_corrector(disk_quarter, 64, (1e3, 1e6))
        (low_1, low_2), (high_1, high_2) = sol.energies
        assert high_1 >= low_1 - 1e-9 and high_2 >= low_2 - 1e-9
        table = sol.energy_table()
        assert list(table["K"]) == [1e3, 1e6]

    def test_rigidity_inside_inclusion(self, disk_quarter):
        sol = solve_stiff_corrector(disk_quarter, 64, (1e2, 1e3, 1e4))
        assert sol.rigidity is not None
        assert sol.rigidity_bound == pytest.approx(1e-3)
        assert sol.rigidity < 0.1

    @pytest.mark.slow
    def test_small_disk_matches_dilute_expansion(self):
        ms = Microstructure.single_disk(0.1, hardcore=0.05)
        lam = math.pi * 0.01
        sol = solve_stiff_corrector(ms, 256)
        assert abs(sol.extrapolated_tensor()[0, 0] - (1.0 + 2.0 * lam)) <= 5.0 * lam ** 2

    def test_invalid_structure_rejected(self):
        with pytest.raises(GeometryError):
            solve_stiff_corrector(two_disks(0.01), 32, (1e2,))

    @pytest.mark.parametrize("ladder", [(), (1e3, 1e2), (0.0, 1e2)])
    def test_bad_ladder_rejected(self, disk_quarter, ladder):
        with pytest.raises(ValueError):
            solve_stiff_corrector(disk_quarter, 32, ladder)

    def test_iteration_budget_exhaustion(self, disk_quarter):
        with pytest.raises(SolverConvergenceError) as info:
            solve_stiff_corrector(disk_quarter, 64, (1e6,), tol=1e-12, max_iterations=3)
        assert len(info.value.residual_history) >= 1


class TestCellProblem:
    def test_residual_of_constant_coefficient_is_zero(self):
        problem = CellProblem(ScalarField(np.full((32, 32), 3.0)))
        assert np.linalg.norm(problem.right_hand_side(0)) == 0.0
        assert problem.residual_norm(np.zeros((32, 32)), 0) == 0.0

    def test_tolerance_must_be_positive(self):
        with pytest.raises(ValueError):
            CellProblem(ScalarField(np.ones((16, 16))), tol=0.0)

    def test_energy_identity(self, trigonometric_depth):
        coefficient = build_depth_field(trigonometric_depth, 32)
        sol = solve_conductivity(coefficient, tol=1e-12)
        corrected = sol.corrected()
        for i in (0, 1):
            flux = np.mean(sol.faces[i] * corrected[i, i])
            assert sol.tensors[-1][i, i] == pytest.approx(flux, rel=1e-8)


class TestDiagnostics:
    def test_constant_coefficient(self):
        sol = solve_lake_corrector(build_depth_field(DepthSpec.constant(1.5), 32))
        report = corrector_diagnostics(sol)
        assert max(report.harmonic_residual) <= 1e-10
        np.testing.assert_allclose(report.mean_gradient, 0.0, atol=1e-12)

    def test_mean_gradient_telescopes(self, disk_quarter):
        sol = solve_stiff_corrector(disk_quarter, 64, (1e2, 1e3))
        np.testing.assert_allclose(corrector_diagnostics(sol, disk_quarter).mean_gradient, 0.0, atol=1e-12)

    def test_inclusion_flux_is_small(self, disk_quarter):
        sol = solve_stiff_corrector(disk_quarter, 64, (1e2, 1e3, 1e4), tol=1e-10)
        report = corrector_diagnostics(sol, disk_quarter)
        assert len(report.fluxes) == 1
        assert report.max_relative_flux <= 1e-4
        assert report.rigidity == pytest.approx(sol.rigidity)
