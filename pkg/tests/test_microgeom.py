import math

import numpy as np
import pytest

from conftest import two_disks
from homflow.exceptions import GeometryError
from homflow.fields import grid_coordinates
from homflow.microgeom import (
    DepthSpec,
    Inclusion,
    Microstructure,
    RadiusLaw,
    boundary_gap,
    build_depth_field,
    penalization_field,
    rasterize_indicator,
    sample_random_hardcore,
    transition_width,
    validate,
)


class TestValidate:
    def test_close_disks_violate_hardcore_on_pair(self):
        ms = two_disks(0.05, radius=0.1, hardcore=0.1)
        report = validate(ms)
        assert not report.valid
        pairs = [v.indices for v in report.violations if v.kind == "hardcore"]
        assert pairs == [(0, 1)]
        assert report.violations[0].value == pytest.approx(0.05)

    def test_empty_structure_is_valid(self, empty_structure):
        assert validate(empty_structure).valid
        assert empty_structure.exact_volume_fraction == 0.0

    def test_quarter_disk_is_valid(self, disk_quarter):
        assert validate(disk_quarter).valid

    def test_permutation_invariant(self):
        first = Inclusion.disk((-0.2, 0.0), 0.1)
        second = Inclusion.disk((0.2, 0.1), 0.12)
        third = Inclusion.disk((0.0, 0.35), 0.1)
        ms = Microstructure((first, second, third), hardcore=0.1)
        swapped = Microstructure((third, first, second), hardcore=0.1)
        assert validate(ms).valid == validate(swapped).valid
        assert len(validate(ms).violations) == len(validate(swapped).violations)

    def test_self_overlap_through_periodicity(self):
        ms = Microstructure.single_disk(0.46, hardcore=0.1)
        kinds = {v.kind: v.indices for v in validate(ms).violations}
        assert kinds["hardcore"] == (0, 0)

    def test_thin_ellipse_breaks_ball_condition(self):
        ellipse = Inclusion((0.0, 0.0), (0.3, 0.05), shape="ellipse")
        report = validate(Microstructure((ellipse,), hardcore=0.05))
        assert any(v.kind == "ball" for v in report.violations)

    def test_gap_is_periodic(self):
        left = Inclusion.disk((-0.45, 0.0), 0.1)
        right = Inclusion.disk((0.45, 0.0), 0.1)
        assert boundary_gap(left, right) == pytest.approx(0.1 - 0.2)

    def test_disk_rejects_two_radii(self):
        with pytest.raises(GeometryError):
            Inclusion((0.0, 0.0), (0.1, 0.2), shape="disk")


class TestRasterize:
    def test_disk_area(self, disk_quarter):
        field = rasterize_indicator(disk_quarter, 256, 4)
        assert field.mean() == pytest.approx(math.pi / 16, abs=1e-3)
        assert field.values.min() >= 0.0 and field.values.max() <= 1.0

    def test_empty_structure_gives_zero_field(self, empty_structure):
        assert not rasterize_indicator(empty_structure, 64).values.any()

    def test_wraps_across_the_boundary(self):
        ms = Microstructure.single_disk(0.3, center=(0.45, 0.0), hardcore=0.1)
        values = rasterize_indicator(ms, 64).values
        assert values[0, 32] > 0.5
        assert values[-1, 32] > 0.5

    def test_rejects_invalid_supersampling(self, disk_quarter):
        with pytest.raises(ValueError):
            rasterize_indicator(disk_quarter, 64, 0)


class TestPenalization:
    def test_range_and_center_value(self, disk_quarter):
        values = penalization_field(disk_quarter, 64, 1e4).values
        assert values.min() == pytest.approx(1.0)
        assert values.max() <= 1.0 + 1e4
        assert values[32, 32] == pytest.approx(1.0 + 1e4)

    def test_zero_penalty_is_constant(self, disk_quarter):
        np.testing.assert_array_equal(penalization_field(disk_quarter, 32, 0.0).values, np.ones((32, 32)))

    def test_transition_width_is_grid_limited(self):
        assert transition_width(512, 1e6) == pytest.approx(1.0 / 256)
        assert transition_width(512, 10.0) == pytest.approx(0.1)

    def test_indicator_nondecreasing_in_penalty(self, disk_quarter):
        low = (penalization_field(disk_quarter, 64, 1e2).values - 1.0) / 1e2
        high = (penalization_field(disk_quarter, 64, 1e4).values - 1.0) / 1e4
        assert np.all(high >= low - 1e-12)

    def test_negative_penalty_rejected(self, disk_quarter):
        with pytest.raises(ValueError):
            penalization_field(disk_quarter, 32, -1.0)


class TestRandomSampler:
    def test_reaches_target_fraction(self):
        ms = sample_random_hardcore(7, 0.1, 0.05, RadiusLaw("equal", 0.05))
        assert validate(ms).valid
        assert 0.09 <= rasterize_indicator(ms, 256).mean() <= 0.11
        assert ms.provenance == "random" and ms.seed == 7

    def test_zero_fraction_is_empty(self):
        assert sample_random_hardcore(1, 0.0, 0.05).is_empty

    def test_same_seed_same_structure(self):
        law = RadiusLaw("uniform", low=0.05, high=0.08)
        first = sample_random_hardcore(3, 0.2, 0.05, law)
        second = sample_random_hardcore(3, 0.2, 0.05, law)
        assert first == second
        assert first.to_dict() == second.to_dict()

    def test_fraction_above_limit_rejected(self):
        with pytest.raises(GeometryError):
            sample_random_hardcore(0, 0.5, 0.05)

    def test_radius_below_hardcore_rejected(self):
        with pytest.raises(GeometryError):
            sample_random_hardcore(0, 0.1, 0.1, RadiusLaw("equal", 0.05))

    def test_saturation_is_flagged(self, caplog):
        ms = sample_random_hardcore(0, 0.4, 0.05, RadiusLaw("equal", 0.1), max_attempts=50)
        assert ms.saturated
        assert "saturated" in caplog.text


class TestDepth:
    def test_constant(self):
        field = build_depth_field(DepthSpec.constant(2.0), 32)
        np.testing.assert_array_equal(field.values, 2.0)
        assert field.mean() == 2.0

    @pytest.mark.parametrize("n", [16, 64, 128])
    def test_laminate_mean_is_exact(self, laminate_depth, n):
        assert build_depth_field(laminate_depth, n).mean() == pytest.approx(1.0, abs=1e-12)

    def test_two_phase_mixture_mean(self):
        ms = Microstructure.disk_with_fraction(0.2, hardcore=0.1)
        field = build_depth_field(DepthSpec.two_phase(1.0, 2.0, ms), 256)
        assert field.mean() == pytest.approx(1.2, abs=2e-3)

    def test_bounds_enforced(self):
        with pytest.raises(GeometryError):
            DepthSpec.laminate(1.0, cosines=[0.9], bound=2.0)

    def test_trigonometric_evaluation_is_periodic(self, trigonometric_depth):
        x1, x2 = grid_coordinates(32)
        np.testing.assert_allclose(trigonometric_depth.evaluate(x1 + 1.0, x2 - 2.0),
                                   trigonometric_depth.evaluate(x1, x2), atol=1e-12)

    def test_serialization(self, trigonometric_depth):
        assert DepthSpec.from_dict(trigonometric_depth.to_dict()) == trigonometric_depth

    def test_two_phase_is_not_smooth(self, disk_quarter):
        assert not DepthSpec.two_phase(1.0, 2.0, disk_quarter).is_smooth
