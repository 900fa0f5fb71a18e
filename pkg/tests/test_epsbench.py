import numpy as np
import pandas as pd
import pytest
from scipy import fft

from homflow.cellsolve import solve_lake_corrector, solve_stiff_corrector
from homflow.epsbench import (
    EpsEllipticSolver,
    MONOTONE_COLUMNS,
    _monotone,
    cell_average,
    check_epsilon,
    convergence_study,
    corrector_reconstruction_error,
    low_pass,
    monotone_verdicts,
    oscillating_depth,
    resolved_grid,
    solve_lake_eps,
)
from homflow.exceptions import ConvergenceStudyError, GeometryError
from homflow.fields import grid_coordinates
from homflow.macroflow import FourierSeries, HomogenizedModel, MacroSolver, run
from homflow.microgeom import DepthSpec, build_depth_field


@pytest.fixture
def unit_vorticity():
    return FourierSeries(((0.5, 1, 0, 0.0), (0.3, 1, 1, 0.4), (0.2, 0, 2, 1.0)))


class TestGrid:
    @pytest.mark.parametrize("eps,cells", [(1.0, 1), (0.25, 4), (0.0625, 16)])
    def test_cells(self, eps, cells):
        assert check_epsilon(eps) == cells

    @pytest.mark.parametrize("eps", [0.0, -0.5, 0.3, 2.0])
    def test_rejects_non_integer_inverse(self, eps):
        with pytest.raises(ValueError):
            check_epsilon(eps)

    @pytest.mark.parametrize("eps,n", [(0.5, 64), (0.25, 64), (1.0 / 3.0, 66), (0.0625, 256)])
    def test_resolved_grid(self, eps, n):
        assert resolved_grid(eps) == n
        assert n % check_epsilon(eps) == 0


class TestEllipticSolver:
    def test_constant_depth_inverts_laplacian(self):
        n = 32
        x1, _ = grid_coordinates(n)
        w = np.cos(2.0 * np.pi * x1)
        s = EpsEllipticSolver(np.ones((n, n))).solve(w)
        np.testing.assert_allclose(s, -w / (2.0 * np.pi) ** 2, atol=1e-10)

    def test_zero_vorticity(self):
        solver = EpsEllipticSolver(np.full((16, 16), 2.0))
        np.testing.assert_array_equal(solver.solve(np.zeros((16, 16))), 0.0)
        assert solver.last_residual == 0.0


class TestResolvedRun:
    def test_constant_depth_matches_homogenized_run(self, unit_vorticity):
        eps_run = solve_lake_eps(DepthSpec.constant(1.0), 0.5, unit_vorticity, 0.05, 0.005, n=32)
        reference = run(unit_vorticity, HomogenizedModel("lake", np.eye(2), 1.0), 0.05, 0.005, n=32, length=1.0)
        np.testing.assert_allclose(eps_run.final.w, reference.final.w, atol=1e-7)

    def test_initial_velocity_is_divergence_free(self, trigonometric_depth, unit_vorticity):
        eps_run = solve_lake_eps(trigonometric_depth, 0.5, unit_vorticity, 0.0, 0.01, n=32)
        assert eps_run.divergence_residual() <= 1e-8
        assert eps_run.elliptic_residual <= 1e-8
        assert eps_run.n == 32

    def test_energy_is_conserved(self, trigonometric_depth, unit_vorticity):
        eps_run = solve_lake_eps(trigonometric_depth, 0.5, unit_vorticity, 0.05, 0.005, n=32)
        energy = eps_run.run.diagnostics["energy"]
        assert abs(energy.iloc[-1] / energy.iloc[0] - 1.0) <= 1e-4
        assert np.max(np.abs(eps_run.run.diagnostics["integral_w"])) <= 1e-10

    def test_two_phase_depth_rejected(self, disk_quarter, unit_vorticity):
        with pytest.raises(GeometryError):
            solve_lake_eps(DepthSpec.two_phase(1.0, 2.0, disk_quarter), 0.5, unit_vorticity, 0.0, 0.01)

    def test_underresolved_grid_rejected(self, trigonometric_depth, unit_vorticity):
        with pytest.raises(ValueError):
            solve_lake_eps(trigonometric_depth, 0.25, unit_vorticity, 0.0, 0.01, n=32)

    def test_oscillating_depth_is_periodic_per_cell(self, trigonometric_depth):
        depth = oscillating_depth(trigonometric_depth, 0.25, 64)
        np.testing.assert_allclose(depth[:16, :16], depth[16:32, 48:], atol=1e-12)


class TestPostprocessing:
    def test_low_pass_drops_fine_modes(self):
        x1, x2 = grid_coordinates(32)
        coarse = np.cos(2.0 * np.pi * x1)
        fine = np.sin(2.0 * np.pi * 8.0 * x2)
        np.testing.assert_allclose(low_pass(coarse + fine), coarse, atol=1e-12)

    def test_cell_average(self):
        f = np.kron(np.arange(4.0).reshape(2, 2), np.ones((3, 3)))
        np.testing.assert_allclose(cell_average(f, 2), np.arange(4.0).reshape(2, 2))
        with pytest.raises(ValueError):
            cell_average(np.zeros((10, 10)), 3)

    def test_reconstruction_of_constant_depth_is_exact(self, unit_vorticity):
        eps_run = solve_lake_eps(DepthSpec.constant(1.0), 0.5, unit_vorticity, 0.0, 0.01, n=32)
        depth_cell = build_depth_field(DepthSpec.constant(1.0), 16)
        sol = solve_lake_corrector(depth_cell)
        macro = MacroSolver(HomogenizedModel("lake", np.eye(2), 1.0), 32, 1.0)
        v = macro.stream_velocity(fft.rfft2(eps_run.final.w) * macro.mask)
        result = corrector_reconstruction_error(eps_run, sol, depth_cell, v)
        assert result["defect"] <= 1e-8 * max(result["velocity_norm"], 1.0)
        assert result["velocity_norm"] > 0.0

    def test_reconstruction_checks_inputs(self, unit_vorticity, empty_structure):
        eps_run = solve_lake_eps(DepthSpec.constant(1.0), 0.5, unit_vorticity, 0.0, 0.01, n=32)
        depth_cell = build_depth_field(DepthSpec.constant(1.0), 16)
        stiff = solve_stiff_corrector(empty_structure, 16, (1e2,))
        with pytest.raises(ValueError):
            corrector_reconstruction_error(eps_run, stiff, depth_cell, np.zeros((2, 32, 32)))
        with pytest.raises(ValueError):
            corrector_reconstruction_error(eps_run, solve_lake_corrector(depth_cell), depth_cell,
                                           np.zeros((2, 16, 16)))


class TestMonotone:
    @pytest.mark.parametrize("values,expected", [
        ([3.0, 2.0, 1.0], True),
        ([1.0, 2.0], False),
        ([1.0, 1.0], False),
        ([1e-3, 1e-10, 2e-10], True),
        ([1e-3, 1e-10, 2e-3], False),
    ])
    def test_floor(self, values, expected):
        assert _monotone(values, 1e-9) is expected

    def test_reconstruction_column_is_checked(self):
        assert "reconstruction" in MONOTONE_COLUMNS
        table = pd.DataFrame({
            "eps": [0.5, 0.25, 0.125],
            "error_a": [3e-2, 1e-2, 4e-3],
            "error_b": [2e-2, 8e-3, 3e-3],
            "reconstruction": [0.1, 0.2, 0.05],
        })
        assert monotone_verdicts(table) == {"error_a": True, "error_b": True, "reconstruction": False}


class TestConvergenceStudy:
    @pytest.fixture
    def growing_reconstruction(self, monkeypatch):
        defects = iter([0.1, 0.2])

        def fake(eps_run, sol, depth_cell, v):
            return {"defect": next(defects), "velocity_norm": 1.0}

        monkeypatch.setattr("homflow.epsbench.corrector_reconstruction_error", fake)

    def test_non_decreasing_reconstruction_fails(self, growing_reconstruction, unit_vorticity):
        with pytest.raises(ConvergenceStudyError, match="reconstruction") as info:
            convergence_study(DepthSpec.constant(1.0), [0.5, 0.25], unit_vorticity, 0.0, 0.01, cell_n=16)
        assert list(info.value.table["reconstruction"]) == [0.1, 0.2]

    def test_verdicts_and_timings_without_raising(self, growing_reconstruction, unit_vorticity):
        study = convergence_study(DepthSpec.constant(1.0), [0.25, 0.5], unit_vorticity, 0.0, 0.01, cell_n=16,
                                  require_monotone=False)
        assert study.monotone["reconstruction"] is False
        assert list(study.table["eps"]) == [0.5, 0.25]
        assert list(study.table.columns) == ["eps", "M", "error_a", "error_b", "reconstruction", "velocity_norm"]
        assert set(study.timings) == {"eps=0.5", "eps=0.25"}
        assert all(t >= 0.0 for t in study.timings.values())


@pytest.mark.slow
def test_trigonometric_lake_converges():
    spec = DepthSpec.trigonometric(1.5, [(0.25, 1, 0, 0.0), (0.25, 0, 1, 0.0)], bound=2.0)
    study = convergence_study(spec, [0.25, 0.125], FourierSeries.random(0, max_mode=3), 0.1, 0.002, cell_n=64)
    assert list(study.table["eps"]) == [0.25, 0.125]
    assert all(study.monotone.values())
    assert (study.table["reconstruction"] < study.table["velocity_norm"]).all()


@pytest.mark.slow
def test_three_level_sweep_decreases_in_every_column():
    spec = DepthSpec.trigonometric(1.5, [(0.25, 1, 0, 0.0), (0.25, 0, 1, 0.0)], bound=2.0)
    study = convergence_study(spec, [1 / 4, 1 / 8, 1 / 16], FourierSeries.random(0, max_mode=3), 0.5, 0.002,
                              cell_n=64)
    assert list(study.table["M"]) == [64, 128, 256]
    for column in ("error_a", "error_b", "reconstruction"):
        values = list(study.table[column])
        assert values[0] > values[1] > values[2], column
