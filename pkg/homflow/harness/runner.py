"""
Scenario orchestration: dispatch a validated config to the owning module,
write CSV tables and binary fields into the scenario directory, and record
everything in a checksummed ``manifest.yaml``.
"""

import concurrent.futures
import hashlib
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import yaml
from scipy import fft

from .. import __version__
from ..cellsolve import (
    CorrectorSolution,
    corrector_diagnostics,
    solve_lake_corrector,
    solve_stiff_corrector,
)
from ..efftensor import (
    EffectiveTensors,
    cell_statistics,
    dilute_cm,
    duality_check,
    homogenized_tensor_lake,
    homogenized_tensor_stiff,
)
from ..epsbench import convergence_study
from ..exceptions import ConvergenceStudyError, HomflowError, TensorAssemblyError
from ..fields import ScalarField
from ..harmcoord import build_map, coordinate_report
from ..macroflow import HomogenizedModel, MacroState, dump_state, run
from ..microflow import (
    cell_velocity,
    free_starting_points,
    golden_direction,
    invariant_residual,
    rotation_and_birkhoff,
)
from ..microgeom import Microstructure, build_depth_field
from .config import ScenarioConfig, resolve_series
from .fieldio import write_field

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.yaml"
SUMMARY_NAME = "summary.csv"
FLOAT_FORMAT = "%.17g"


@dataclass
class RunManifest:
    """
    Record of one scenario run.

    Attributes:
        scenario (str): scenario kind
        config_hash (str): sha256 of the canonical config
        version (str): homflow version
        status (str): 'ok' or 'failed' (acceptance-relevant failure)
        failures (List[str]): acceptance failures
        artifacts (Dict[str, str]): relative path -> sha256 of every artifact
        timings (Dict[str, float]): wall-clock seconds per stage
    """

    scenario: str
    config_hash: str
    version: str = __version__
    status: str = "ok"
    failures: List[str] = field(default_factory=list)
    artifacts: Dict[str, str] = field(default_factory=dict)
    timings: Dict[str, float] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def write(self, directory: Path) -> Path:
        path = directory / MANIFEST_NAME
        with open(path, "w") as f:
            yaml.safe_dump(self.to_dict(), f, sort_keys=False)
        return path

    @classmethod
    def read(cls, path: Union[str, Path]) -> "RunManifest":
        with open(path, "r") as f:
            data = yaml.safe_load(f)
        return cls(**data)


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_table(frame: pd.DataFrame, path: Path, units: Optional[Dict[str, str]] = None) -> Path:
    """CSV with a 'name [unit]' header row; columns without a unit are dimensionless."""
    units = units or {}
    labelled = frame.rename(columns={c: f"{c} [{units.get(c, '1')}]" for c in frame.columns})
    path.parent.mkdir(parents=True, exist_ok=True)
    labelled.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def tensor_frame(a_bar: np.ndarray, **extra: Any) -> pd.DataFrame:
    return pd.DataFrame([{**extra, "a11": a_bar[0, 0], "a12": a_bar[0, 1], "a21": a_bar[1, 0], "a22": a_bar[1, 1]}])


class ScenarioRunner:
    """
    Runs one validated scenario into its output directory.

    Args:
        config (ScenarioConfig): validated scenario
        threads (int): scipy.fft workers and corrector thread-pool size
    """

    def __init__(self, config: ScenarioConfig, threads: int = 1):
        self.config = config
        self.threads = max(1, int(threads))
        self.out = Path(config.output_dir)
        self.manifest = RunManifest(scenario=config.scenario, config_hash=config.config_hash)
        self.handlers: Dict[str, Callable[[], None]] = {
            "cell": self._run_cell,
            "tensor": self._run_tensor,
            "coord": self._run_coord,
            "micro-flow": self._run_micro_flow,
            "macro-flow": self._run_macro_flow,
            "eps-study": self._run_eps_study,
        }
        self._corrector: Optional[Tuple[CorrectorSolution, Optional[Microstructure], Optional[ScalarField]]] = None

    def run(self) -> RunManifest:
        """
        Execute the scenario and write the manifest.

        Acceptance failures (non-monotone epsilon errors, indefinite tensors)
        set ``status`` to 'failed'; other errors propagate after logging.
        """
        self.out.mkdir(parents=True, exist_ok=True)
        logger.info(f"Running {self.config.scenario} scenario into {self.out}")
        started = time.perf_counter()
        try:
            with fft.set_workers(self.threads):
                self.handlers[self.config.scenario]()
        except (ConvergenceStudyError, TensorAssemblyError) as e:
            logger.error(f"{self.config.scenario}: acceptance failure: {e}")
            self.manifest.failures.append(str(e))
        except HomflowError as e:
            logger.error(f"{self.config.scenario} scenario failed: {e}")
            raise
        self.manifest.timings["total"] = time.perf_counter() - started
        if self.manifest.failures:
            self.manifest.status = "failed"
        self.manifest.artifacts = self._checksums()
        self.manifest.write(self.out)
        logger.info(f"{self.config.scenario} finished with status {self.manifest.status} "
                    f"({len(self.manifest.artifacts)} artifacts)")
        return self.manifest

    def _checksums(self) -> Dict[str, str]:
        files = sorted(p for p in self.out.rglob("*") if p.is_file() and p.name != MANIFEST_NAME)
        return {p.relative_to(self.out).as_posix(): sha256_file(p) for p in files}

    def _timed(self, stage: str, func: Callable[..., Any], *args, **kwargs) -> Any:
        started = time.perf_counter()
        result = func(*args, **kwargs)
        self.manifest.timings[stage] = time.perf_counter() - started
        return result

    def corrector(self) -> Tuple[CorrectorSolution, Optional[Microstructure], Optional[ScalarField]]:
        """Cell correctors of the configured variant, computed once."""
        if self._corrector is not None:
            return self._corrector
        numerics = self.config.numerics
        if self.config.variant == "stiff":
            ms = self.config.microstructure() or Microstructure()
            sol = self._timed("corrector", solve_stiff_corrector, ms, numerics["N"], numerics["penalties"],
                              numerics["tol"], numerics["max_iterations"], self.threads)
            self._corrector = (sol, ms, None)
        else:
            depth = build_depth_field(self.config.depth_spec(), numerics["N"], numerics["supersampling"])
            sol = self._timed("corrector", solve_lake_corrector, depth, numerics["tol"],
                              numerics["max_iterations"], self.threads)
            self._corrector = (sol, None, depth)
        return self._corrector

    def tensors(self) -> EffectiveTensors:
        sol, ms, depth = self.corrector()
        if self.config.variant == "stiff":
            tensors = homogenized_tensor_stiff(sol, ms, self.config.numerics["supersampling"])
            if len(ms.inclusions) == 1 and ms.inclusions[0].shape == "disk" and tensors.volume_fraction <= 0.1:
                tensors.attach_dilute(dilute_cm("stiff", tensors.volume_fraction))
            return tensors
        tensors = homogenized_tensor_lake(depth, sol)
        spec = self.config.depth_spec()
        if spec.kind == "two-phase":
            inclusions = spec.microstructure.inclusions
            tensors.volume_fraction = cell_statistics(spec.microstructure, sol.n,
                                                      self.config.numerics["supersampling"]).volume_fraction
            if len(inclusions) == 1 and inclusions[0].shape == "disk" and tensors.volume_fraction <= 0.1:
                tensors.attach_dilute(dilute_cm("lake", tensors.volume_fraction, spec.alpha, spec.beta))
        return tensors

    def _run_cell(self) -> None:
        sol, ms, _ = self.corrector()
        for i in (0, 1):
            write_field(self.out / f"corrector_{i + 1}.h2df", sol.potential(i))
        write_table(sol.energy_table(), self.out / "energies.csv", {"E_1": "energy", "E_2": "energy"})
        history = pd.DataFrame([
            {"direction": d + 1, "iteration": k + 1, "residual": r, "energy": e}
            for d, h in enumerate(sol.histories)
            for k, (r, e) in enumerate(zip(h.residuals, h.energies))
        ], columns=["direction", "iteration", "residual", "energy"])
        write_table(history, self.out / "history.csv", {"energy": "energy"})
        write_table(tensor_frame(sol.extrapolated_tensor(), variant=sol.variant, N=sol.n),
                    self.out / "tensor.csv")
        report = corrector_diagnostics(sol, ms)
        write_table(pd.DataFrame([{
            "harmonic_residual_1": report.harmonic_residual[0],
            "harmonic_residual_2": report.harmonic_residual[1],
            "rigidity": report.rigidity,
            "rigidity_bound": sol.rigidity_bound,
            "max_relative_flux": report.max_relative_flux,
            "iterations": sol.iterations,
            "residual_1": sol.residuals[0],
            "residual_2": sol.residuals[1],
        }]), self.out / "diagnostics.csv")

    def _run_tensor(self) -> None:
        tensors = self._timed("tensor", self.tensors)
        write_table(pd.DataFrame([tensors.to_row()]), self.out / "tensor.csv")
        if tensors.per_penalty:
            sol, _, _ = self.corrector()
            rows = [{"K": k, "a11": t[0, 0], "a12": t[0, 1], "a21": t[1, 0], "a22": t[1, 1]}
                    for k, t in zip(sol.penalties, tensors.per_penalty)]
            write_table(pd.DataFrame(rows), self.out / "ladder.csv")
        if self.config.variant == "lake" and self.config.depth_spec().is_smooth:
            _, _, depth = self.corrector()
            report = self._timed("duality", duality_check, depth, self.config.numerics["tol"], self.threads,
                                 tensors)
            write_table(pd.DataFrame([{
                "direct_11": report.direct[0, 0], "direct_12": report.direct[0, 1],
                "direct_22": report.direct[1, 1], "dual_11": report.dual[0, 0],
                "dual_12": report.dual[0, 1], "dual_22": report.dual[1, 1], "gap": report.gap,
            }]), self.out / "duality.csv")

    def _run_coord(self) -> None:
        sol, ms, _ = self.corrector()
        numerics = self.config.numerics
        frame, analysis = self._timed("coordinates", coordinate_report, sol, ms, numerics["erosion_cells"],
                                      numerics["directions"], numerics["refinement"])
        write_table(frame, self.out / "speeds.csv")
        write_table(pd.DataFrame([{
            "min_det": analysis.min_det,
            "min_det_x1": analysis.location[0],
            "min_det_x2": analysis.location[1],
            "sign_changes": analysis.sign_changes,
            "area_gap": analysis.area_gap,
            "fold_fraction": analysis.fold_fraction,
            "mask_integral": analysis.mask_integral,
            "image_area": analysis.image_area,
        }]), self.out / "jacobian.csv", {"mask_integral": "area", "image_area": "area"})
        cmap = build_map(sol, ms, numerics["erosion_cells"])
        write_field(self.out / "jacobian.h2df", ScalarField(cmap.jacobian, cmap.length))

    def _velocity(self, direction: Any):
        sol, ms, depth = self.corrector()
        e = golden_direction() if direction == "golden" else np.asarray(direction, dtype=float)
        return cell_velocity(sol, e, ms, depth, self.config.numerics["supersampling"])

    def _run_micro_flow(self) -> None:
        settings = self.config.micro_flow
        _, ms, _ = self.corrector()
        starts = free_starting_points(ms, settings["starts"], self.config.numerics["seed"])
        velocity = self._velocity(settings["direction"])
        write_field(self.out / "cell_velocity.h2df", velocity.field)
        report = self._timed("ergodic", rotation_and_birkhoff, velocity, starts, settings["duration"],
                             settings["dt"])
        compare = self._timed("ergodic_compare", rotation_and_birkhoff, self._velocity(settings["compare_direction"]),
                              starts, settings["duration"], settings["dt"])
        write_table(report.to_frame(), self.out / "ergodic.csv")
        write_table(compare.to_frame(), self.out / "ergodic_compare.csv")
        irrational = report.max_dispersion
        write_table(pd.DataFrame([{
            "rotation_error": report.rotation_error,
            "max_dispersion": irrational,
            "compare_dispersion": compare.max_dispersion,
            "dispersion_ratio": compare.max_dispersion / irrational if irrational > 0 else float("inf"),
            "trapped": report.trapped,
            "invariant_residual": invariant_residual(velocity.density, velocity),
        }]), self.out / "micro_summary.csv")

    def _macro_model(self) -> Tuple[HomogenizedModel, Optional[EffectiveTensors]]:
        if self.config.geometry is None and self.config.depth is None:
            return HomogenizedModel.euler(), None
        tensors = self.tensors()
        return HomogenizedModel.from_tensors(tensors), tensors

    def _run_macro_flow(self) -> None:
        settings = self.config.macro_flow
        model, tensors = self._macro_model()
        if tensors is not None:
            write_table(pd.DataFrame([tensors.to_row()]), self.out / "tensor.csv")
        w0 = resolve_series(settings["w0"])
        forcing = resolve_series(settings["forcing"])
        state = MacroState.initial(w0, settings["M"], settings["length"])
        write_field(self.out / "w0.h2df", state.field)
        snapshots = self.out / "snapshots"

        def on_dump(snapshot: MacroState) -> None:
            snapshots.mkdir(exist_ok=True)
            dump_state(snapshot, snapshots / f"w_{snapshot.step:06d}.h2df")

        result = self._timed("integration", run, state, model, settings["duration"], settings["dt"], forcing,
                             diagnostics_every=settings["diagnostics_every"], dump_every=settings["dump_every"],
                             on_dump=on_dump, allow_nonzero_forcing_mean=settings["allow_nonzero_forcing_mean"])
        write_table(result.diagnostics, self.out / "diagnostics.csv",
                    {"t": "time", "energy": "energy", "integral_w": "vorticity*area",
                     "integral_w2": "vorticity^2*area", "max_w": "vorticity", "l1_w": "vorticity*area",
                     "apriori_bound": "vorticity"})
        write_field(self.out / "w_final.h2df", result.final.field)

    def _run_eps_study(self) -> None:
        settings = self.config.eps_study
        study = self._timed("eps_study", convergence_study, self.config.depth_spec(), settings["eps"],
                            resolve_series(settings["w0"]), settings["duration"], settings["dt"],
                            settings["cell_N"], resolve_series(settings["forcing"]), settings["tol"],
                            settings["floor"], require_monotone=False)
        write_table(study.table, self.out / "eps_errors.csv")
        self.manifest.timings.update({f"eps_study.{key}": value for key, value in study.timings.items()})
        failed = [column for column, ok in study.monotone.items() if not ok]
        if failed:
            self.manifest.failures.append(f"epsilon errors not decreasing in {failed}")


def run_scenario(config: ScenarioConfig, threads: int = 1) -> RunManifest:
    return ScenarioRunner(config, threads).run()


def run_scenarios(configs: Sequence[ScenarioConfig], threads: int = 1, jobs: int = 1) -> List[RunManifest]:
    """Independent scenarios in parallel; each writes only its own directory."""
    outputs = [Path(c.output_dir).resolve() for c in configs]
    if len(set(outputs)) != len(outputs):
        raise ValueError("Concurrent scenarios need distinct output directories")
    with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, jobs)) as executor:
        return list(executor.map(lambda c: run_scenario(c, threads), configs))


def summarize(root: Union[str, Path]) -> pd.DataFrame:
    """One row per manifest found under ``root``; written to summary.csv in ``root``."""
    root = Path(root)
    rows = []
    for path in sorted(root.rglob(MANIFEST_NAME)):
        manifest = RunManifest.read(path)
        rows.append({
            "directory": path.parent.relative_to(root).as_posix(),
            "scenario": manifest.scenario,
            "config_hash": manifest.config_hash,
            "status": manifest.status,
            "artifacts": len(manifest.artifacts),
            "wall_clock": manifest.timings.get("total", float("nan")),
        })
    frame = pd.DataFrame(rows, columns=["directory", "scenario", "config_hash", "status", "artifacts",
                                        "wall_clock"])
    write_table(frame, root / SUMMARY_NAME, {"wall_clock": "s"})
    logger.info(f"Summarized {len(rows)} runs under {root}")
    return frame
