"""
Scenario configuration.

Scenario files are JSON with a strict schema: unknown keys are rejected,
omitted numeric keys take their defaults, and every violation found is
reported together in a single ConfigError.
"""

import copy
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

from ..cellsolve import DEFAULT_MAX_ITERATIONS, DEFAULT_PENALTIES, DEFAULT_TOLERANCE
from ..exceptions import ConfigError, GeometryError
from ..fields import MIN_GRID_SIZE
from ..macroflow import FourierSeries
from ..microgeom import (
    DepthSpec,
    Microstructure,
    RadiusLaw,
    sample_random_hardcore,
    validate,
)

logger = logging.getLogger(__name__)

SCENARIOS = ("cell", "tensor", "coord", "micro-flow", "macro-flow", "eps-study")
CELL_VARIANTS = ("stiff", "lake")
TOP_LEVEL_KEYS = ("scenario", "variant", "geometry", "depth", "numerics", "micro_flow", "macro_flow",
                  "eps_study", "output_dir")

Validator = Callable[[Any], Optional[str]]


def _positive_int(value: Any) -> Optional[str]:
    if isinstance(value, bool) or not isinstance(value, int) or value <= 0:
        return f"expected a positive integer, got {value!r}"
    return None


def _nonnegative_int(value: Any) -> Optional[str]:
    if isinstance(value, bool) or not isinstance(value, int) or value < 0:
        return f"expected a nonnegative integer, got {value!r}"
    return None


def _positive_number(value: Any) -> Optional[str]:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value) or value <= 0:
        return f"expected a positive number, got {value!r}"
    return None


def _erosion(value: Any) -> Optional[str]:
    problem = _positive_number(value)
    if problem is None and value < 2:
        return f"expected at least 2 grid cells, got {value!r}"
    return problem


def _grid_size(value: Any) -> Optional[str]:
    problem = _positive_int(value)
    if problem:
        return problem
    if value < MIN_GRID_SIZE or value % 2:
        return f"grid size must be even and >= {MIN_GRID_SIZE}, got {value}"
    return None


def _boolean(value: Any) -> Optional[str]:
    return None if isinstance(value, bool) else f"expected true or false, got {value!r}"


def _penalty_ladder(value: Any) -> Optional[str]:
    if not isinstance(value, list) or not value:
        return f"expected a nonempty list of penalties, got {value!r}"
    for k in value:
        problem = _positive_number(k)
        if problem:
            return problem
    for previous, current in zip(value, value[1:]):
        if not current > previous:
            return f"penalty ladder must be strictly increasing: {previous} is followed by {current}"
    return None


def _direction(value: Any) -> Optional[str]:
    if value == "golden":
        return None
    if (not isinstance(value, list) or len(value) != 2
            or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)):
        return f"expected 'golden' or a pair [e1, e2], got {value!r}"
    if value[0] == 0 and value[1] == 0:
        return "direction must be nonzero"
    return None


def _epsilon_list(value: Any) -> Optional[str]:
    if not isinstance(value, list) or not value:
        return f"expected a nonempty list of epsilons, got {value!r}"
    for eps in value:
        problem = _positive_number(eps)
        if problem:
            return problem
        cells = round(1.0 / eps)
        if cells < 1 or abs(cells * eps - 1.0) > 1e-9:
            return f"1/eps must be an integer, got eps={eps}"
    return None


def _series(value: Any) -> Optional[str]:
    if value is None:
        return None
    if not isinstance(value, dict):
        return f"expected a Fourier series object, got {value!r}"
    if "random" in value:
        extra = set(value) - {"random"}
        random = value["random"]
        if extra or not isinstance(random, dict) or set(random) - {"seed", "max_mode", "amplitude"}:
            return f"random series accepts only seed, max_mode, amplitude: {value!r}"
        return None
    unknown = set(value) - {"terms", "envelope", "rate"}
    if unknown:
        return f"unknown Fourier series keys {sorted(unknown)}"
    try:
        FourierSeries.from_dict(value)
    except (TypeError, ValueError, IndexError) as e:
        return f"invalid Fourier series: {e}"
    return None


NUMERICS_SCHEMA: Dict[str, Tuple[Any, Validator]] = {
    "N": (256, _grid_size),
    "tol": (DEFAULT_TOLERANCE, _positive_number),
    "max_iterations": (DEFAULT_MAX_ITERATIONS, _positive_int),
    "penalties": (list(DEFAULT_PENALTIES), _penalty_ladder),
    "erosion_cells": (3, _erosion),
    "supersampling": (4, _positive_int),
    "refinement": (4, _positive_int),
    "directions": (16, _positive_int),
    "seed": (0, _nonnegative_int),
}

MICRO_FLOW_SCHEMA: Dict[str, Tuple[Any, Validator]] = {
    "direction": ("golden", _direction),
    "duration": (1000.0, _positive_number),
    "dt": (0.05, _positive_number),
    "starts": (8, _positive_int),
    "record_every": (10, _positive_int),
    "compare_direction": ([1.0, 0.0], _direction),
}

MACRO_FLOW_SCHEMA: Dict[str, Tuple[Any, Validator]] = {
    "M": (256, _grid_size),
    "length": (2.0 * math.pi, _positive_number),
    "duration": (1.0, _positive_number),
    "dt": (1e-3, _positive_number),
    "w0": ({"random": {"seed": 0, "max_mode": 4, "amplitude": 1.0}}, _series),
    "forcing": (None, _series),
    "diagnostics_every": (10, _positive_int),
    "dump_every": (0, _nonnegative_int),
    "allow_nonzero_forcing_mean": (False, _boolean),
}

EPS_STUDY_SCHEMA: Dict[str, Tuple[Any, Validator]] = {
    "eps": ([0.25, 0.125, 0.0625], _epsilon_list),
    "duration": (0.5, _positive_number),
    "dt": (1e-3, _positive_number),
    "cell_N": (128, _grid_size),
    "tol": (1e-10, _positive_number),
    "w0": ({"random": {"seed": 0, "max_mode": 3, "amplitude": 1.0}}, _series),
    "forcing": (None, _series),
    "floor": (1e-9, _positive_number),
}


def _section(name: str, data: Any, schema: Dict[str, Tuple[Any, Validator]], errors: List[str]) -> Dict[str, Any]:
    """Fill defaults and validate one flat section."""
    values = {key: copy.deepcopy(default) for key, (default, _) in schema.items()}
    if data is None:
        return values
    if not isinstance(data, dict):
        errors.append(f"{name}: expected an object, got {type(data).__name__}")
        return values
    for key, value in data.items():
        if key not in schema:
            errors.append(f"{name}: unknown key '{key}'")
            continue
        problem = schema[key][1](value)
        if problem:
            errors.append(f"{name}.{key}: {problem}")
        else:
            values[key] = value
    return values


def resolve_series(data: Optional[Dict[str, Any]]) -> Optional[FourierSeries]:
    """FourierSeries from an explicit term list or a {'random': {...}} request."""
    if data is None:
        return None
    if "random" in data:
        options = data["random"]
        return FourierSeries.random(options.get("seed", 0), options.get("max_mode", 4), options.get("amplitude", 1.0))
    return FourierSeries.from_dict(data)


@dataclass
class ScenarioConfig:
    """
    Validated scenario.

    Attributes:
        scenario (str): scenario kind
        variant (str): 'stiff' or 'lake'
        geometry (Optional[Dict[str, Any]]): microstructure description
        depth (Optional[Dict[str, Any]]): depth description
        numerics (Dict[str, Any]): grid, tolerances, ladder and seeds
        micro_flow, macro_flow, eps_study (Dict[str, Any]): per-scenario settings
        output_dir (Path): artifact directory
        source (Optional[Path]): file the scenario was read from
    """

    scenario: str
    variant: str = "stiff"
    geometry: Optional[Dict[str, Any]] = None
    depth: Optional[Dict[str, Any]] = None
    numerics: Dict[str, Any] = field(default_factory=dict)
    micro_flow: Dict[str, Any] = field(default_factory=dict)
    macro_flow: Dict[str, Any] = field(default_factory=dict)
    eps_study: Dict[str, Any] = field(default_factory=dict)
    output_dir: Path = Path("runs")
    source: Optional[Path] = None

    def to_dict(self) -> Dict[str, Any]:
        """Canonical content; the output directory is excluded so relocated runs hash alike."""
        return {
            "scenario": self.scenario,
            "variant": self.variant,
            "geometry": self.geometry,
            "depth": self.depth,
            "numerics": self.numerics,
            "micro_flow": self.micro_flow,
            "macro_flow": self.macro_flow,
            "eps_study": self.eps_study,
        }

    @property
    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def microstructure(self) -> Optional[Microstructure]:
        """Deterministic inclusion set, or a seeded random sample."""
        if self.geometry is None:
            return None
        return build_microstructure(self.geometry, self.numerics["seed"])

    def depth_spec(self) -> Optional[DepthSpec]:
        return DepthSpec.from_dict(self.depth) if self.depth is not None else None

    def with_overrides(self, output_dir: Optional[Union[str, Path]] = None, seed: Optional[int] = None) -> "ScenarioConfig":
        """Copy with CLI overrides applied."""
        updated = copy.deepcopy(self)
        if output_dir is not None:
            updated.output_dir = Path(output_dir)
        if seed is not None:
            if _nonnegative_int(seed):
                raise ConfigError([f"seed: {_nonnegative_int(seed)}"])
            updated.numerics["seed"] = seed
        return updated


def build_microstructure(geometry: Dict[str, Any], seed: int = 0) -> Microstructure:
    if "random" in geometry:
        options = geometry["random"]
        return sample_random_hardcore(
            seed=options.get("seed", seed),
            volume_fraction=options["volume_fraction"],
            hardcore=geometry.get("hardcore", 0.1),
            radius_law=RadiusLaw.from_dict(options.get("radius_law", {})),
        )
    return Microstructure.from_dict(geometry)


def _check_geometry(data: Any, errors: List[str]) -> None:
    if not isinstance(data, dict):
        errors.append(f"geometry: expected an object, got {type(data).__name__}")
        return
    unknown = set(data) - {"hardcore", "inclusions", "provenance", "random"}
    for key in sorted(unknown):
        errors.append(f"geometry: unknown key '{key}'")
    if "random" in data:
        options = data["random"]
        if not isinstance(options, dict) or "volume_fraction" not in options:
            errors.append("geometry.random: needs an object with volume_fraction")
            return
        for key in sorted(set(options) - {"volume_fraction", "seed", "radius_law"}):
            errors.append(f"geometry.random: unknown key '{key}'")
        return
    if unknown:
        return
    try:
        ms = Microstructure.from_dict(data)
    except (GeometryError, KeyError, TypeError, ValueError) as e:
        errors.append(f"geometry: {e}")
        return
    for violation in validate(ms).violations:
        errors.append(f"geometry: {violation.kind} violation at {list(violation.indices)} "
                      f"({violation.value:.4g} vs {violation.bound:.4g})")


def _check_depth(data: Any, errors: List[str]) -> None:
    if not isinstance(data, dict):
        errors.append(f"depth: expected an object, got {type(data).__name__}")
        return
    allowed = {"kind", "bound", "value", "alpha", "beta", "geometry", "base", "cosines", "sines", "terms"}
    unknown = set(data) - allowed
    for key in sorted(unknown):
        errors.append(f"depth: unknown key '{key}'")
    if unknown:
        return
    try:
        DepthSpec.from_dict(data)
    except (GeometryError, KeyError, TypeError, ValueError) as e:
        errors.append(f"depth: {e}")


def parse_config(data: Any, source: Optional[Path] = None) -> ScenarioConfig:
    """Validate a decoded JSON document into a ScenarioConfig."""
    errors: List[str] = []
    if not isinstance(data, dict):
        raise ConfigError([f"top level: expected an object, got {type(data).__name__}"])
    for key in data:
        if key not in TOP_LEVEL_KEYS:
            errors.append(f"unknown key '{key}'")

    scenario = data.get("scenario")
    if scenario is None:
        errors.append("scenario: required")
    elif scenario not in SCENARIOS:
        errors.append(f"scenario: expected one of {list(SCENARIOS)}, got {scenario!r}")
    variant = data.get("variant", "lake" if scenario == "eps-study" else "stiff")
    if variant not in CELL_VARIANTS:
        errors.append(f"variant: expected one of {list(CELL_VARIANTS)}, got {variant!r}")

    geometry = data.get("geometry")
    depth = data.get("depth")
    if geometry is not None:
        _check_geometry(geometry, errors)
    if depth is not None:
        _check_depth(depth, errors)
    if variant == "lake" and scenario in ("cell", "tensor", "coord", "micro-flow", "eps-study") and depth is None:
        errors.append("depth: required for the lake variant")
    if scenario == "eps-study":
        if variant != "lake":
            errors.append("variant: eps-study runs the lake equations")
        if isinstance(depth, dict) and depth.get("kind") == "two-phase":
            errors.append("depth: eps-study needs a smooth depth, got kind 'two-phase'")
    if scenario == "micro-flow" and variant == "stiff" and geometry is None:
        errors.append("geometry: required for stiff micro-flow")

    numerics = _section("numerics", data.get("numerics"), NUMERICS_SCHEMA, errors)
    micro_flow = _section("micro_flow", data.get("micro_flow"), MICRO_FLOW_SCHEMA, errors)
    macro_flow = _section("macro_flow", data.get("macro_flow"), MACRO_FLOW_SCHEMA, errors)
    eps_study = _section("eps_study", data.get("eps_study"), EPS_STUDY_SCHEMA, errors)

    output_dir = data.get("output_dir", f"runs/{scenario}")
    if not isinstance(output_dir, str) or not output_dir:
        errors.append(f"output_dir: expected a nonempty string, got {output_dir!r}")

    if errors:
        for message in errors:
            logger.error(f"Config error: {message}")
        raise ConfigError(errors)
    return ScenarioConfig(
        scenario=scenario,
        variant=variant,
        geometry=geometry,
        depth=depth,
        numerics=numerics,
        micro_flow=micro_flow,
        macro_flow=macro_flow,
        eps_study=eps_study,
        output_dir=Path(output_dir),
        source=source,
    )


def load_config(path: Union[str, Path]) -> ScenarioConfig:
    """
    Read and validate a scenario file.

    Raises:
        ConfigError: unreadable file, JSON syntax error (with line and
            column) or the complete list of schema violations
    """
    path = Path(path)
    try:
        with open(path, "r") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigError([f"{path}: file not found"])
    except json.JSONDecodeError as e:
        logger.error(f"Cannot parse {path}: {e.msg} at line {e.lineno}, column {e.colno}")
        raise ConfigError([f"{path}: line {e.lineno}, column {e.colno}: {e.msg}"]) from e
    config = parse_config(data, path)
    logger.info(f"Loaded {config.scenario} scenario from {path} (hash {config.config_hash[:12]})")
    return config
