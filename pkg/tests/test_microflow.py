import numpy as np
import pytest

from homflow.cellsolve import solve_lake_corrector, solve_stiff_corrector
from homflow.exceptions import CFLViolationError, GeometryError
from homflow.fields import ScalarField
from homflow.microflow import (
    advect_trajectory,
    cell_velocity,
    constant_velocity,
    default_observables,
    free_indicator,
    free_starting_points,
    golden_direction,
    invariant_residual,
    reversibility_error,
    rotation_and_birkhoff,
    space_averages,
)
from homflow.microgeom import Microstructure, build_depth_field


@pytest.fixture(scope="module")
def quarter_velocity():
    ms = Microstructure.single_disk(0.25, hardcore=0.1)
    sol = solve_stiff_corrector(ms, 64, (1e2, 1e3, 1e4))
    return ms, cell_velocity(sol, (1.0, 0.0), ms)


@pytest.fixture
def lake_velocity(trigonometric_depth):
    depth = build_depth_field(trigonometric_depth, 32)
    return cell_velocity(solve_lake_corrector(depth), golden_direction(), depth=depth)


class TestCellVelocity:
    def test_stiff_mean_is_rotated_direction(self, quarter_velocity):
        _, velocity = quarter_velocity
        np.testing.assert_allclose(velocity.mean(), (0.0, 1.0), atol=1e-12)

    def test_stiff_field_is_divergence_free(self, quarter_velocity):
        _, velocity = quarter_velocity
        assert np.max(np.abs(velocity.divergence())) <= 1e-9

    def test_stiff_reference_rotation(self, quarter_velocity):
        ms, velocity = quarter_velocity
        fraction = 1.0 - free_indicator(ms, 64).mean()
        np.testing.assert_allclose(velocity.reference_rotation(), np.array([0.0, 1.0]) / (1.0 - fraction))

    def test_lake_requires_depth(self, trigonometric_depth):
        sol = solve_lake_corrector(build_depth_field(trigonometric_depth, 16))
        with pytest.raises(ValueError):
            cell_velocity(sol, (1.0, 0.0))

    def test_stiff_requires_microstructure(self, disk_quarter):
        sol = solve_stiff_corrector(disk_quarter, 32, (1e2,))
        with pytest.raises(GeometryError):
            cell_velocity(sol, (1.0, 0.0))
        empty = solve_stiff_corrector(Microstructure(hardcore=0.1), 16, (1e2,))
        np.testing.assert_allclose(cell_velocity(empty, (1.0, 0.0), Microstructure(hardcore=0.1)).normalization, 1.0)

    @pytest.mark.parametrize("e", [(0.0, 0.0), (1.0, 1.0)])
    def test_direction_must_be_unit(self, e):
        with pytest.raises(ValueError):
            constant_velocity(e)

    def test_golden_direction(self):
        e = golden_direction()
        assert np.linalg.norm(e) == pytest.approx(1.0)
        assert e[1] / e[0] == pytest.approx(0.5 * (1.0 + np.sqrt(5.0)))


class TestTrajectories:
    def test_constant_field_is_a_translation(self):
        trajectory = advect_trajectory(constant_velocity((1.0, 0.0)), np.zeros((1, 2)), 2.0, 0.01)
        np.testing.assert_allclose(trajectory.final, [[0.0, 2.0]], atol=1e-10)
        np.testing.assert_allclose(trajectory.rotation_vectors(), [[0.0, 1.0]], atol=1e-10)
        assert not trajectory.trapped.any()

    def test_records_every_k_steps(self):
        trajectory = advect_trajectory(constant_velocity((0.0, 1.0)), np.zeros((3, 2)), 1.0, 0.01, record_every=10)
        assert len(trajectory.times) == 11
        assert trajectory.positions.shape == (11, 3, 2)
        assert trajectory.duration == pytest.approx(1.0)

    def test_cfl_violation(self):
        with pytest.raises(CFLViolationError):
            advect_trajectory(constant_velocity((1.0, 0.0), 32), np.zeros((1, 2)), 1.0, 0.1)

    def test_invalid_duration(self):
        with pytest.raises(ValueError):
            advect_trajectory(constant_velocity((1.0, 0.0)), np.zeros((1, 2)), 0.0, 0.01)

    def test_forward_backward_returns_to_start(self, lake_velocity):
        starts = free_starting_points(None, 4, seed=2)
        assert reversibility_error(lake_velocity, starts, 1.0, 0.005) <= 1e-6


class TestStartingPoints:
    def test_clearance_and_determinism(self, disk_quarter):
        points = free_starting_points(disk_quarter, 16, seed=5)
        assert points.shape == (16, 2)
        assert np.all(disk_quarter.signed_distance(points[:, 0], points[:, 1]) >= 0.02)
        np.testing.assert_array_equal(points, free_starting_points(disk_quarter, 16, seed=5))


class TestErgodic:
    def test_uniform_flow_averages(self):
        velocity = constant_velocity(golden_direction(), 16)
        starts = free_starting_points(None, 4, seed=0)
        report = rotation_and_birkhoff(velocity, starts, 60.0, 0.03)
        assert report.rotation_error <= 1e-10
        np.testing.assert_allclose(report.reference_birkhoff, 0.0, atol=1e-12)
        assert np.max(np.abs(report.birkhoff)) <= 0.05
        frame = report.to_frame()
        assert len(frame) == 4 and "birkhoff_3" in frame

    def test_space_averages_weight_by_density(self):
        velocity = constant_velocity((1.0, 0.0), 16)
        x1, _ = velocity.density.coordinates()
        velocity.density = ScalarField(1.0 + 0.5 * np.cos(2.0 * np.pi * x1))
        averages = space_averages(velocity, [lambda a, b: np.cos(2.0 * np.pi * a)])
        assert averages[0] == pytest.approx(0.25)

    @pytest.mark.slow
    def test_golden_direction_around_disk(self, disk_fifth):
        sol = solve_stiff_corrector(disk_fifth, 128, tol=1e-10)
        velocity = cell_velocity(sol, golden_direction(), disk_fifth)
        axis_velocity = cell_velocity(sol, (1.0, 0.0), disk_fifth)
        starts = free_starting_points(disk_fifth, 8, seed=0)
        dt = 0.4 * velocity.field.spacing / max(velocity.max_speed(), axis_velocity.max_speed())
        report = rotation_and_birkhoff(velocity, starts, 1000.0, dt)
        assert report.trapped == 0
        assert report.rotation_error <= 0.01
        np.testing.assert_allclose(report.reference_birkhoff, space_averages(velocity, default_observables()))
        assert np.max(np.abs(report.birkhoff - report.reference_birkhoff)) <= 0.01

        rational = rotation_and_birkhoff(axis_velocity, starts, 1000.0, dt)
        assert rational.max_dispersion >= 3.0 * report.max_dispersion


class TestInvariantMeasure:
    def test_lake_depth_is_invariant(self, lake_velocity):
        assert invariant_residual(lake_velocity.density, lake_velocity) <= 1e-12

    def test_uniform_density_for_constant_flow(self):
        velocity = constant_velocity((1.0, 0.0), 16)
        assert invariant_residual(velocity.density, velocity) <= 1e-12

    def test_grid_mismatch(self, lake_velocity):
        with pytest.raises(ValueError):
            invariant_residual(ScalarField(np.ones((16, 16))), lake_velocity)

    @pytest.mark.slow
    def test_free_volume_is_invariant_and_modulation_is_not(self, disk_fifth):
        sol = solve_stiff_corrector(disk_fifth, 512, tol=1e-10)
        velocity = cell_velocity(sol, (1.0, 0.0), disk_fifth)
        residual = invariant_residual(velocity.density, velocity, max_mode=1)
        assert residual <= 1e-3
        _, x2 = velocity.density.coordinates()
        modulated = ScalarField(velocity.density.values * (1.0 + 0.5 * np.cos(2.0 * np.pi * x2)))
        assert invariant_residual(modulated, velocity, max_mode=1) >= 10.0 * max(residual, 1e-6)
