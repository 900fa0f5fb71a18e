import numpy as np
import pandas as pd
import pytest
from click.testing import CliRunner

from homflow.cli import main
from homflow.exceptions import ConfigError, FieldFormatError
from homflow.fields import ScalarField, VectorField
from homflow.harness.config import build_microstructure, load_config, parse_config
from homflow.harness.fieldio import HEADER, read_field, write_field
from homflow.harness.runner import MANIFEST_NAME, RunManifest, run_scenario, run_scenarios, summarize

EMPTY_CELL = {
    "scenario": "cell",
    "variant": "stiff",
    "geometry": {"hardcore": 0.1, "inclusions": []},
    "numerics": {"N": 32, "penalties": [100.0, 1000.0]},
}

LAMINATE_TENSOR = {
    "scenario": "tensor",
    "variant": "lake",
    "depth": {"kind": "laminate", "base": 1.0, "cosines": [0.5], "bound": 2.0},
    "numerics": {"N": 32, "tol": 1e-10},
}

SHORT_MACRO = {
    "scenario": "macro-flow",
    "macro_flow": {"M": 32, "duration": 0.02, "dt": 0.01, "dump_every": 1},
}


def config_for(data, out):
    return parse_config(dict(data)).with_overrides(out)


class TestConfig:
    def test_defaults_are_filled(self):
        config = parse_config(EMPTY_CELL)
        assert config.numerics["tol"] == 1e-8
        assert config.numerics["seed"] == 0
        assert config.macro_flow["M"] == 256
        assert config.eps_study["eps"] == [0.25, 0.125, 0.0625]

    def test_unknown_top_level_key(self):
        with pytest.raises(ConfigError) as info:
            parse_config({**EMPTY_CELL, "gamma": 1.0})
        assert "unknown key 'gamma'" in info.value.errors

    def test_all_violations_are_reported(self):
        data = {**EMPTY_CELL, "gamma": 1.0, "numerics": {"N": 15, "penalties": [1e3, 1e2], "speed": 2}}
        with pytest.raises(ConfigError) as info:
            parse_config(data)
        errors = info.value.errors
        assert len(errors) == 4
        assert any("strictly increasing" in e for e in errors)
        assert "numerics: unknown key 'speed'" in errors

    def test_epsilon_must_divide_the_unit(self):
        data = {
            "scenario": "eps-study",
            "depth": LAMINATE_TENSOR["depth"],
            "eps_study": {"eps": [0.25, 0.3]},
        }
        with pytest.raises(ConfigError) as info:
            parse_config(data)
        assert any("1/eps must be an integer" in e for e in info.value.errors)

    def test_eps_study_defaults_to_lake_and_needs_smooth_depth(self):
        config = parse_config({"scenario": "eps-study", "depth": LAMINATE_TENSOR["depth"]})
        assert config.variant == "lake"
        two_phase = {
            "kind": "two-phase", "alpha": 1.0, "beta": 2.0,
            "geometry": {"hardcore": 0.1, "inclusions": [{"center": [0, 0], "radii": [0.2]}]},
        }
        with pytest.raises(ConfigError):
            parse_config({"scenario": "eps-study", "depth": two_phase})

    def test_invalid_geometry_is_reported(self):
        geometry = {"hardcore": 0.1, "inclusions": [
            {"center": [-0.11, 0.0], "radii": [0.1]},
            {"center": [0.11, 0.0], "radii": [0.1]},
        ]}
        with pytest.raises(ConfigError) as info:
            parse_config({**EMPTY_CELL, "geometry": geometry})
        assert any("hardcore violation" in e for e in info.value.errors)

    @pytest.mark.parametrize("erosion,accepted", [(1.5, False), (0, False), (2, True), (3.5, True)])
    def test_erosion_needs_two_grid_cells(self, erosion, accepted):
        data = {**EMPTY_CELL, "numerics": {**EMPTY_CELL["numerics"], "erosion_cells": erosion}}
        if accepted:
            assert parse_config(data).numerics["erosion_cells"] == erosion
            return
        with pytest.raises(ConfigError) as info:
            parse_config(data)
        assert any(e.startswith("numerics.erosion_cells:") for e in info.value.errors)

    def test_lake_needs_depth(self):
        with pytest.raises(ConfigError):
            parse_config({"scenario": "cell", "variant": "lake"})

    def test_json_syntax_error_has_position(self, write_scenario):
        path = write_scenario({})
        path.write_text('{\n  "scenario": \n}')
        with pytest.raises(ConfigError) as info:
            load_config(path)
        assert "line 3, column 1" in str(info.value)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.json")

    def test_hash_ignores_output_dir_but_not_seed(self, tmp_path):
        config = parse_config(EMPTY_CELL)
        moved = config.with_overrides(tmp_path / "elsewhere")
        assert moved.config_hash == config.config_hash
        assert config.with_overrides(seed=3).config_hash != config.config_hash
        assert config.numerics["seed"] == 0
        with pytest.raises(ConfigError):
            config.with_overrides(seed=-1)

    def test_random_geometry_is_seeded(self):
        geometry = {"hardcore": 0.05, "random": {"volume_fraction": 0.1,
                                                "radius_law": {"kind": "equal", "value": 0.05}}}
        assert build_microstructure(geometry, 4) == build_microstructure(geometry, 4)
        assert build_microstructure(geometry, 4).seed == 4


class TestFieldIO:
    def test_scalar_and_vector(self, tmp_path):
        scalar = ScalarField(np.arange(256.0).reshape(16, 16), 2.0)
        vector = VectorField(np.random.default_rng(0).standard_normal((2, 16, 16)))
        read_scalar = read_field(write_field(tmp_path / "s.h2df", scalar))
        read_vector = read_field(write_field(tmp_path / "v.h2df", vector))
        np.testing.assert_array_equal(read_scalar.values, scalar.values)
        assert read_scalar.length == 2.0
        assert isinstance(read_vector, VectorField)
        np.testing.assert_array_equal(read_vector.values, vector.values)

    def test_header_size(self, tmp_path):
        path = write_field(tmp_path / "s.h2df", ScalarField(np.zeros((16, 16))))
        assert HEADER.itemsize == 20
        assert path.stat().st_size == 20 + 8 * 256

    def test_bad_magic(self, tmp_path):
        path = write_field(tmp_path / "s.h2df", ScalarField(np.zeros((16, 16))))
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(FieldFormatError):
            read_field(path)

    def test_zero_grid(self, tmp_path):
        header = np.array([(b"H2DF", 1, 1, 0, 1.0)], dtype=HEADER)
        path = tmp_path / "empty.h2df"
        path.write_bytes(header.tobytes())
        with pytest.raises(FieldFormatError, match="N = 0"):
            read_field(path)

    @pytest.mark.parametrize("keep", [10, 20 + 8 * 255])
    def test_truncated(self, tmp_path, keep):
        path = write_field(tmp_path / "s.h2df", ScalarField(np.zeros((16, 16))))
        path.write_bytes(path.read_bytes()[:keep])
        with pytest.raises(FieldFormatError):
            read_field(path)


class TestRunner:
    def test_empty_cell_gives_identity(self, tmp_path):
        manifest = run_scenario(config_for(EMPTY_CELL, tmp_path / "cell"))
        assert manifest.ok
        tensor = pd.read_csv(tmp_path / "cell" / "tensor.csv")
        assert tensor["a11 [1]"].iloc[0] == pytest.approx(1.0)
        assert tensor["a12 [1]"].iloc[0] == pytest.approx(0.0)
        for name in ("corrector_1.h2df", "corrector_2.h2df", "energies.csv", "history.csv", "diagnostics.csv"):
            assert name in manifest.artifacts
        assert (tmp_path / "cell" / MANIFEST_NAME).exists()

    def test_runs_are_reproducible(self, tmp_path):
        first, second = run_scenarios(
            [config_for(EMPTY_CELL, tmp_path / "a"), config_for(EMPTY_CELL, tmp_path / "b")], jobs=2,
        )
        assert first.config_hash == second.config_hash
        assert first.artifacts == second.artifacts

    def test_concurrent_runs_need_distinct_directories(self, tmp_path):
        config = config_for(EMPTY_CELL, tmp_path / "same")
        with pytest.raises(ValueError):
            run_scenarios([config, config], jobs=2)

    def test_lake_tensor_with_duality(self, tmp_path):
        manifest = run_scenario(config_for(LAMINATE_TENSOR, tmp_path / "tensor"))
        assert manifest.ok
        tensor = pd.read_csv(tmp_path / "tensor" / "tensor.csv")
        assert tensor["a11 [1]"].iloc[0] == pytest.approx(1.0, rel=1e-8)
        duality = pd.read_csv(tmp_path / "tensor" / "duality.csv")
        assert duality["gap [1]"].iloc[0] <= 1e-8

    def test_eps_study_table_is_reproducible(self, tmp_path):
        data = {
            "scenario": "eps-study",
            "depth": LAMINATE_TENSOR["depth"],
            "eps_study": {"eps": [0.5, 0.25], "duration": 0.01, "dt": 0.005, "cell_N": 16},
        }
        first = run_scenario(config_for(data, tmp_path / "a"))
        second = run_scenario(config_for(data, tmp_path / "b"))
        assert first.artifacts["eps_errors.csv"] == second.artifacts["eps_errors.csv"]
        table = pd.read_csv(tmp_path / "a" / "eps_errors.csv")
        assert not any(c.startswith("runtime") for c in table.columns)
        assert {"eps_study.eps=0.5", "eps_study.eps=0.25"} <= set(first.timings)

    def test_macro_flow_writes_snapshots(self, tmp_path):
        manifest = run_scenario(config_for(SHORT_MACRO, tmp_path / "macro"))
        assert manifest.ok
        assert "snapshots/w_000001.h2df" in manifest.artifacts
        assert "snapshots/w_000002.json" in manifest.artifacts
        diagnostics = pd.read_csv(tmp_path / "macro" / "diagnostics.csv")
        assert "energy [energy]" in diagnostics.columns
        assert read_field(tmp_path / "macro" / "w_final.h2df").n == 32

    def test_manifest_round_trip_and_summary(self, tmp_path):
        run_scenario(config_for(EMPTY_CELL, tmp_path / "runs" / "cell"))
        manifest = RunManifest.read(tmp_path / "runs" / "cell" / MANIFEST_NAME)
        assert manifest.scenario == "cell" and manifest.ok
        frame = summarize(tmp_path / "runs")
        assert list(frame["directory"]) == ["cell"]
        assert (tmp_path / "runs" / "summary.csv").exists()


class TestCli:
    def test_cell(self, write_scenario, tmp_path):
        path = write_scenario(EMPTY_CELL)
        result = CliRunner().invoke(main, ["cell", "--config", str(path), "--out", str(tmp_path / "out")])
        assert result.exit_code == 0, result.output
        assert "cell: ok" in result.output
        assert (tmp_path / "out" / MANIFEST_NAME).exists()

    def test_verb_must_match_scenario(self, write_scenario, tmp_path):
        path = write_scenario(EMPTY_CELL)
        result = CliRunner().invoke(main, ["tensor", "--config", str(path), "--out", str(tmp_path / "out")])
        assert result.exit_code == 1
        assert "describes 'cell'" in result.output

    def test_config_errors_are_reported(self, write_scenario):
        path = write_scenario({**EMPTY_CELL, "gamma": 2})
        result = CliRunner().invoke(main, ["cell", "--config", str(path)])
        assert result.exit_code == 1
        assert "unknown key 'gamma'" in result.output

    def test_threads_must_be_positive(self, write_scenario):
        path = write_scenario(EMPTY_CELL)
        result = CliRunner().invoke(main, ["cell", "--config", str(path), "--threads", "0"])
        assert result.exit_code == 2

    def test_report(self, write_scenario, tmp_path):
        path = write_scenario(EMPTY_CELL)
        runner = CliRunner()
        runner.invoke(main, ["cell", "--config", str(path), "--out", str(tmp_path / "runs" / "one")])
        result = runner.invoke(main, ["report", str(tmp_path / "runs")])
        assert result.exit_code == 0, result.output
        assert "1 runs, 0 failed" in result.output

    def test_version(self):
        result = CliRunner().invoke(main, ["--version"])
        assert result.exit_code == 0
        assert "0.1.0" in result.output
