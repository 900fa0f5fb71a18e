"""
Homogenized vorticity transport on a periodic macroscopic torus.

The velocity follows the deformed Biot-Savart law: div(a_bar grad sigma) = w
is inverted spectrally and u = J grad sigma. Inclusions transport w with
u / (1 - lambda); the lake transports it with v / b0 where v = J grad sigma
and u = b_bar^-1 v. Time stepping is pseudo-spectral in divergence form with
two-thirds dealiasing and three-stage SSP Runge-Kutta.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy import fft, ndimage

from .efftensor import EffectiveTensors, b_bar, m_bar
from .exceptions import CFLViolationError, NonZeroMeanError, SimulationBlowupError
from .fields import ScalarField, VectorField, grid_coordinates
from .harness.fieldio import read_field, write_field
from .operators import dealias_mask, derivative_wavenumbers, rotate, spectral_gradient, wavenumbers

logger = logging.getLogger(__name__)

CFL_LIMIT = 0.8
APRIORI_SLACK = 0.01
MEAN_TOLERANCE = 1e-12
VARIANTS = ("inclusions", "lake")
ENVELOPES = ("constant", "ramp", "sine")


@dataclass(frozen=True)
class HomogenizedModel:
    """
    Constant-coefficient homogenized system.

    Attributes:
        variant (str): 'inclusions' or 'lake'
        a_bar (np.ndarray): symmetric positive definite 2x2 tensor
        divisor (float): transport divisor c, 1 - lambda or b0
        bound (float): upper bound C0 for the divisor
    """

    variant: str
    a_bar: np.ndarray
    divisor: float = 1.0
    bound: float = 10.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"Unknown model variant: {self.variant}")
        tensor = np.asarray(self.a_bar, dtype=float)
        object.__setattr__(self, "a_bar", tensor)
        m_bar(tensor)
        if not 0 < self.divisor <= self.bound:
            raise ValueError(f"Transport divisor {self.divisor} outside (0, {self.bound}]")

    @classmethod
    def euler(cls) -> "HomogenizedModel":
        return cls("inclusions", np.eye(2), 1.0)

    @classmethod
    def from_tensors(cls, tensors: EffectiveTensors) -> "HomogenizedModel":
        if tensors.variant == "stiff":
            return cls("inclusions", tensors.a_bar, 1.0 - (tensors.volume_fraction or 0.0))
        return cls("lake", tensors.a_bar, tensors.b0, bound=max(10.0, tensors.b0))

    @property
    def derived(self) -> np.ndarray:
        """m_bar for inclusions, b_bar for the lake."""
        return m_bar(self.a_bar) if self.variant == "inclusions" else b_bar(self.a_bar)

    def symbol(self, n: int, length: float) -> np.ndarray:
        """k . a_bar k in the rfft2 layout."""
        k1, k2 = wavenumbers(n, length)
        a = self.a_bar
        return a[0, 0] * k1 ** 2 + (a[0, 1] + a[1, 0]) * k1 * k2 + a[1, 1] * k2 ** 2


@dataclass(frozen=True)
class FourierSeries:
    """
    Finite real Fourier sum on the torus of side L with a time envelope.

    Each term (amplitude, m1, m2, phase) contributes
    amplitude * cos(2 pi (m1 x1 + m2 x2) / L + phase).

    Attributes:
        terms (Tuple[Tuple[float, int, int, float], ...]): Fourier terms
        envelope (str): constant | ramp (min(t / rate, 1)) | sine (sin(rate t))
        rate (float): envelope parameter
    """

    terms: Tuple[Tuple[float, int, int, float], ...] = ()
    envelope: str = "constant"
    rate: float = 1.0

    def __post_init__(self):
        if self.envelope not in ENVELOPES:
            raise ValueError(f"Unknown envelope: {self.envelope}")
        object.__setattr__(self, "terms", tuple(
            (float(t[0]), int(t[1]), int(t[2]), float(t[3]) if len(t) > 3 else 0.0) for t in self.terms
        ))

    @classmethod
    def random(cls, seed: int, max_mode: int = 4, amplitude: float = 1.0) -> "FourierSeries":
        """Seeded smooth zero-mean series with amplitudes decaying like 1/|m|^2."""
        rng = np.random.default_rng(seed)
        terms = []
        for m1 in range(-max_mode, max_mode + 1):
            for m2 in range(0, max_mode + 1):
                if m2 == 0 and m1 <= 0:
                    continue
                scale = amplitude / (m1 * m1 + m2 * m2)
                terms.append((scale * rng.standard_normal(), m1, m2, rng.uniform(0.0, 2.0 * np.pi)))
        return cls(tuple(terms))

    @property
    def has_zero_mean(self) -> bool:
        return all(not (m1 == 0 and m2 == 0) or a * math.cos(p) == 0 for a, m1, m2, p in self.terms)

    def factor(self, t: float) -> float:
        if self.envelope == "constant":
            return 1.0
        if self.envelope == "ramp":
            return min(t / self.rate, 1.0) if self.rate > 0 else 1.0
        return math.sin(self.rate * t)

    def evaluate(self, n: int, length: float, t: float = 0.0) -> np.ndarray:
        x1, x2 = grid_coordinates(n, length)
        out = np.zeros((n, n))
        for amplitude, m1, m2, phase in self.terms:
            out += amplitude * np.cos(2.0 * np.pi * (m1 * x1 + m2 * x2) / length + phase)
        return self.factor(t) * out

    def sup_norm(self, t: float = 0.0) -> float:
        """Upper bound sum |amplitude| times the envelope."""
        return abs(self.factor(t)) * sum(abs(a) for a, _, _, _ in self.terms)

    def to_dict(self) -> Dict[str, Any]:
        return {"terms": [list(t) for t in self.terms], "envelope": self.envelope, "rate": self.rate}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "FourierSeries":
        return cls(tuple(tuple(t) for t in data.get("terms", [])), data.get("envelope", "constant"),
                   data.get("rate", 1.0))


def _require_zero_mean(w: np.ndarray, what: str = "Vorticity") -> None:
    mean = float(np.mean(w))
    scale = max(float(np.max(np.abs(w))), 1.0)
    if abs(mean) > MEAN_TOLERANCE * scale * 10:
        logger.error(f"{what} has nonzero mean {mean:.3e}")
        raise NonZeroMeanError(f"{what} must have zero mean on the torus, got mean {mean:.3e}")


def stream_function_hat(w_hat: np.ndarray, model: HomogenizedModel, n: int, length: float) -> np.ndarray:
    """Fourier coefficients of sigma with div(a_bar grad sigma) = w and zero mean."""
    symbol = model.symbol(n, length)
    symbol[0, 0] = 1.0
    sigma_hat = -w_hat / symbol
    sigma_hat[0, 0] = 0.0
    return sigma_hat


@dataclass
class BiotSavartField:
    """
    Velocities of one vorticity field.

    Attributes:
        sigma (np.ndarray): stream function
        velocity (np.ndarray): (2, M, M) physical velocity u
        transport (np.ndarray): (2, M, M) field transporting w
        stream_velocity (np.ndarray): J grad sigma (equals v = b_bar u for the lake)
    """

    sigma: np.ndarray
    velocity: np.ndarray
    transport: np.ndarray
    stream_velocity: np.ndarray


def deformed_biot_savart(w: Union[ScalarField, np.ndarray], model: HomogenizedModel,
                         length: Optional[float] = None, check_mean: bool = True) -> BiotSavartField:
    """
    Invert the deformed Biot-Savart law for a zero-mean vorticity field.

    Raises:
        NonZeroMeanError: w has a nonzero mean
    """
    if isinstance(w, ScalarField):
        length = w.length if length is None else length
        w = w.values
    length = 1.0 if length is None else length
    if check_mean:
        _require_zero_mean(w)
    n = w.shape[-1]
    sigma_hat = stream_function_hat(fft.rfft2(w), model, n, length)
    sigma = fft.irfft2(sigma_hat, s=(n, n))
    stream_velocity = rotate(spectral_gradient(sigma_hat, n, length))
    if model.variant == "inclusions":
        velocity = stream_velocity
    else:
        inverse = np.linalg.inv(model.derived)
        velocity = np.einsum("ij,jxy->ixy", inverse, stream_velocity)
    return BiotSavartField(
        sigma=sigma,
        velocity=velocity,
        transport=stream_velocity / model.divisor,
        stream_velocity=stream_velocity,
    )


def biot_savart_residuals(w: np.ndarray, model: HomogenizedModel, length: float) -> Tuple[float, float]:
    """
    Spectral div-curl residuals of the reconstructed velocity.

    Inclusions: (max |div u|, max |curl(m_bar u) - w|).
    Lake: (max |div(b_bar u)|, max |curl u - w|).
    """
    n = w.shape[-1]
    bs = deformed_biot_savart(w, model, length)
    k1, k2 = derivative_wavenumbers(n, length)
    u_hat = fft.rfft2(bs.velocity, axes=(1, 2))
    if model.variant == "inclusions":
        div_field = u_hat
        curl_field = np.einsum("ij,jxy->ixy", model.derived, u_hat)
    else:
        div_field = np.einsum("ij,jxy->ixy", model.derived, u_hat)
        curl_field = u_hat
    divergence = fft.irfft2(1j * k1 * div_field[0] + 1j * k2 * div_field[1], s=(n, n))
    curl = fft.irfft2(1j * k1 * curl_field[1] - 1j * k2 * curl_field[0], s=(n, n))
    return float(np.max(np.abs(divergence))), float(np.max(np.abs(curl - w)))


@dataclass(frozen=True)
class MacroState:
    """
    Vorticity on an M x M torus of side L at time t.

    Attributes:
        w (np.ndarray): dealiased physical vorticity
        t (float): time
        step (int): completed time steps
        length (float): torus side
    """

    w: np.ndarray
    t: float = 0.0
    step: int = 0
    length: float = 2.0 * np.pi

    @property
    def n(self) -> int:
        return self.w.shape[-1]

    @property
    def field(self) -> ScalarField:
        return ScalarField(self.w, self.length)

    @classmethod
    def initial(cls, w0: Union[np.ndarray, FourierSeries], n: Optional[int] = None,
                length: float = 2.0 * np.pi, dealias: bool = True) -> "MacroState":
        if isinstance(w0, FourierSeries):
            if n is None:
                raise ValueError("Grid size required to sample a Fourier series")
            w0 = w0.evaluate(n, length)
        w0 = np.asarray(w0, dtype=float)
        ScalarField(w0, length)
        _require_zero_mean(w0)
        if dealias:
            m = w0.shape[-1]
            w0 = fft.irfft2(fft.rfft2(w0) * dealias_mask(m), s=(m, m))
        return cls(w=w0, t=0.0, step=0, length=length)


def conserved_diagnostics(state: MacroState, model: HomogenizedModel) -> Dict[str, float]:
    """
    Energy E = 1/2 int grad sigma . a_bar grad sigma together with int w,
    int w^2 and max |w|.
    """
    n, length = state.n, state.length
    area = length * length
    w_hat = fft.rfft2(state.w)
    sigma_hat = stream_function_hat(w_hat, model, n, length)
    weights = np.full(sigma_hat.shape, 2.0)
    weights[:, 0] = 1.0
    if n % 2 == 0:
        weights[:, -1] = 1.0
    energy = 0.5 * area / n ** 4 * float(np.sum(weights * model.symbol(n, length) * np.abs(sigma_hat) ** 2))
    cell = area / (n * n)
    return {
        "energy": energy,
        "integral_w": float(np.sum(state.w)) * cell,
        "integral_w2": float(np.sum(state.w ** 2)) * cell,
        "max_w": float(np.max(np.abs(state.w))) if state.w.size else 0.0,
        "l1_w": float(np.sum(np.abs(state.w))) * cell,
    }


class SpectralTransportStepper:
    """
    Pseudo-spectral SSP-RK3 stepper for dw/dt + div(w T) = g.

    Subclasses supply the transport field T of a dealiased vorticity spectrum.

    Args:
        n (int): grid size M
        length (float): torus side L
        forcing (Optional[FourierSeries]): source g(t, x)
        allow_nonzero_forcing_mean (bool): accept forcing with nonzero mean
    """

    def __init__(self, n: int, length: float = 2.0 * np.pi, forcing: Optional[FourierSeries] = None,
                 allow_nonzero_forcing_mean: bool = False):
        self.n = n
        self.length = length
        self.forcing = forcing
        self.allow_nonzero_forcing_mean = allow_nonzero_forcing_mean
        if forcing is not None and not forcing.has_zero_mean and not allow_nonzero_forcing_mean:
            raise NonZeroMeanError("Forcing has nonzero mean; set allow_nonzero_forcing_mean to accept it")
        self.mask = dealias_mask(n)
        self.k1, self.k2 = derivative_wavenumbers(n, length)
        self.h = length / n

    def transport(self, w_hat: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def forcing_hat(self, t: float) -> Optional[np.ndarray]:
        if self.forcing is None or not self.forcing.terms:
            return None
        return fft.rfft2(self.forcing.evaluate(self.n, self.length, t))

    def tendency(self, w_hat: np.ndarray, t: float) -> np.ndarray:
        """Spectrum of g - div(w T), dealiased."""
        w = fft.irfft2(w_hat, s=(self.n, self.n))
        flux_hat = fft.rfft2(w * self.transport(w_hat), axes=(1, 2))
        rhs = -(1j * self.k1 * flux_hat[0] + 1j * self.k2 * flux_hat[1])
        g_hat = self.forcing_hat(t)
        if g_hat is not None:
            rhs = rhs + g_hat
        return rhs * self.mask

    def courant(self, state: MacroState, dt: float) -> float:
        t_field = self.transport(fft.rfft2(state.w) * self.mask)
        return abs(dt) * float(np.max(np.hypot(t_field[0], t_field[1]))) / self.h

    def step(self, state: MacroState, dt: float) -> MacroState:
        """
        One SSP-RK3 step.

        Raises:
            CFLViolationError: dt * max|T| / dx > 0.8
            SimulationBlowupError: non-finite values appeared
        """
        courant = self.courant(state, dt)
        if courant > CFL_LIMIT:
            logger.error(f"CFL number {courant:.3f} exceeds {CFL_LIMIT} at t={state.t:.4f}")
            raise CFLViolationError(f"CFL number {courant:.3f} exceeds {CFL_LIMIT}")
        t = state.t
        w0 = fft.rfft2(state.w) * self.mask
        w1 = w0 + dt * self.tendency(w0, t)
        w2 = 0.75 * w0 + 0.25 * (w1 + dt * self.tendency(w1, t + dt))
        w3 = w0 / 3.0 + 2.0 / 3.0 * (w2 + dt * self.tendency(w2, t + 0.5 * dt))
        w = fft.irfft2(w3, s=(self.n, self.n))
        if not np.all(np.isfinite(w)):
            logger.error(f"Non-finite vorticity at step {state.step + 1}")
            raise SimulationBlowupError(f"Simulation blew up at t={t + dt:.6g}", last_good_state=state)
        return MacroState(w=w, t=state.t + dt, step=state.step + 1, length=state.length)

    def diagnostics(self, state: MacroState) -> Dict[str, float]:
        raise NotImplementedError


class MacroSolver(SpectralTransportStepper):
    """Stepper of the homogenized system for one model."""

    def __init__(self, model: HomogenizedModel, n: int, length: float = 2.0 * np.pi,
                 forcing: Optional[FourierSeries] = None, allow_nonzero_forcing_mean: bool = False):
        super().__init__(n, length, forcing, allow_nonzero_forcing_mean)
        self.model = model

    def stream_velocity(self, w_hat: np.ndarray) -> np.ndarray:
        sigma_hat = stream_function_hat(w_hat, self.model, self.n, self.length)
        return rotate(spectral_gradient(sigma_hat, self.n, self.length))

    def transport(self, w_hat: np.ndarray) -> np.ndarray:
        return self.stream_velocity(w_hat) / self.model.divisor

    def diagnostics(self, state: MacroState) -> Dict[str, float]:
        return conserved_diagnostics(state, self.model)


@dataclass
class MacroRun:
    """
    Result of a time integration.

    Attributes:
        initial (MacroState): starting state
        final (MacroState): state at the end time
        snapshots (List[MacroState]): states stored at the dump cadence
        diagnostics (pd.DataFrame): t, E, int w, int w^2, max|w|, a priori columns
    """

    initial: MacroState
    final: MacroState
    snapshots: List[MacroState] = field(default_factory=list)
    diagnostics: pd.DataFrame = field(default_factory=pd.DataFrame)


def integrate(state: MacroState, stepper: SpectralTransportStepper, duration: float, dt: float,
              diagnostics_every: int = 1, dump_every: int = 0,
              on_dump: Optional[Callable[[MacroState], None]] = None) -> MacroRun:
    """
    Deterministic time integration over [t0, t0 + duration].

    A priori monitoring compares ||w(t)|| in L1 and Linf with
    ||w0|| + int ||g|| (1% slack); violations are logged and reported in
    the ``apriori_ok`` column.
    """
    if duration < 0 or dt <= 0:
        raise ValueError("Duration must be nonnegative and dt positive")
    forcing = stepper.forcing
    steps = int(round(duration / dt))
    start = state
    initial = stepper.diagnostics(state)
    forcing_integral = 0.0
    rows = []
    snapshots: List[MacroState] = []

    def record(current: MacroState) -> None:
        diag = stepper.diagnostics(current)
        bound_inf = initial["max_w"] + forcing_integral
        bound_l1 = initial["l1_w"] + current.length ** 2 * forcing_integral
        ok = (diag["max_w"] <= (1.0 + APRIORI_SLACK) * bound_inf + 1e-14
              and diag["l1_w"] <= (1.0 + APRIORI_SLACK) * bound_l1 + 1e-14)
        if not ok:
            logger.warning(f"A priori bound exceeded at t={current.t:.4f}: max|w|={diag['max_w']:.6g} "
                           f"bound {bound_inf:.6g}")
        rows.append({"t": current.t, **diag, "apriori_bound": bound_inf, "apriori_ok": ok})

    record(state)
    for k in range(1, steps + 1):
        previous_t = state.t
        state = stepper.step(state, dt)
        if forcing is not None:
            forcing_integral += 0.5 * dt * (forcing.sup_norm(previous_t) + forcing.sup_norm(state.t))
        if k % diagnostics_every == 0 or k == steps:
            record(state)
        if dump_every and k % dump_every == 0:
            snapshots.append(state)
            if on_dump is not None:
                on_dump(state)
    logger.info(f"Time integration finished: {steps} steps, t={state.t:.4f}")
    return MacroRun(initial=start, final=state, snapshots=snapshots, diagnostics=pd.DataFrame(rows))


def run(w0: Union[MacroState, np.ndarray, FourierSeries], model: HomogenizedModel, duration: float, dt: float,
        forcing: Optional[FourierSeries] = None, n: Optional[int] = None, length: float = 2.0 * np.pi,
        diagnostics_every: int = 1, dump_every: int = 0,
        on_dump: Optional[Callable[[MacroState], None]] = None,
        allow_nonzero_forcing_mean: bool = False) -> MacroRun:
    """Run the homogenized system from a state, a sampled array or a Fourier series."""
    state = w0 if isinstance(w0, MacroState) else MacroState.initial(w0, n, length)
    solver = MacroSolver(model, state.n, state.length, forcing, allow_nonzero_forcing_mean)
    return integrate(state, solver, duration, dt, diagnostics_every, dump_every, on_dump)


def dump_state(state: MacroState, path: Union[str, Path]) -> Path:
    """Write the vorticity as a binary field plus a JSON sidecar with time and step."""
    path = Path(path)
    write_field(path, state.field)
    sidecar = path.with_suffix(".json")
    with open(sidecar, "w") as f:
        json.dump({"t": state.t, "step": state.step, "length": state.length}, f, indent=2)
    return path


def load_state(path: Union[str, Path]) -> MacroState:
    path = Path(path)
    scalar = read_field(path)
    with open(path.with_suffix(".json"), "r") as f:
        meta = json.load(f)
    return MacroState(w=scalar.values, t=float(meta["t"]), step=int(meta["step"]), length=scalar.length)


def rational_directions(dmax: int) -> np.ndarray:
    """
    Angles in [0, pi) of the lattice directions (q, p) with coprime
    |p|, q <= dmax, enumerated through the Stern-Brocot tree.
    """
    fractions = set()

    def descend(left: Tuple[int, int], right: Tuple[int, int]) -> None:
        p, q = left[0] + right[0], left[1] + right[1]
        if max(p, q) > dmax:
            return
        fractions.add((p, q))
        descend(left, (p, q))
        descend((p, q), right)

    fractions.update({(0, 1), (1, 0)})
    descend((0, 1), (1, 0))
    angles = set()
    for p, q in fractions:
        angles.add(math.atan2(p, q) % math.pi)
        angles.add(math.atan2(-p, q) % math.pi)
    return np.array(sorted(angles))


@dataclass
class ResonanceReport:
    """
    Attributes:
        fraction (float): flagged share of the domain
        largest_component (float): share of the largest periodic connected flagged region
        mask (np.ndarray): flagged nodes
    """

    fraction: float
    largest_component: float
    mask: np.ndarray


def _periodic_labels(mask: np.ndarray) -> np.ndarray:
    labels, count = ndimage.label(mask)
    parent = list(range(count + 1))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for first, second in ((labels[0, :], labels[-1, :]), (labels[:, 0], labels[:, -1])):
        for a, b in zip(first, second):
            if a and b:
                ra, rb = find(int(a)), find(int(b))
                if ra != rb:
                    parent[rb] = ra
    roots = np.array([find(i) for i in range(count + 1)])
    return roots[labels]


def resonance_diagnostic(u: Union[VectorField, np.ndarray], tol: float = 1e-2, dmax: int = 5,
                         smoothing: float = 0.05) -> ResonanceReport:
    """
    Heuristic detector of regions where the flow is one-dimensional with a
    rational direction.

    A node is flagged when the Gaussian-smoothed structure tensor of u is
    nearly rank one (anisotropy >= 1 - tol), its principal direction lies
    within tol radians of a rational direction with denominator <= dmax, and
    |u . n| <= tol |u| for the normal n of that rational direction.
    ``smoothing`` is the Gaussian width as a fraction of the domain.
    """
    values = u.values if isinstance(u, VectorField) else np.asarray(u, dtype=float)
    if not np.all(np.isfinite(values)):
        raise ValueError("Velocity contains non-finite values")
    n = values.shape[-1]
    sigma = max(smoothing * n, 1.0)
    s11 = ndimage.gaussian_filter(values[0] * values[0], sigma, mode="wrap")
    s12 = ndimage.gaussian_filter(values[0] * values[1], sigma, mode="wrap")
    s22 = ndimage.gaussian_filter(values[1] * values[1], sigma, mode="wrap")
    trace = s11 + s22
    spread = np.sqrt((s11 - s22) ** 2 + 4.0 * s12 ** 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        anisotropy = np.where(trace > 0, spread / trace, 0.0)
    angle = (0.5 * np.arctan2(2.0 * s12, s11 - s22)) % np.pi

    rationals = rational_directions(dmax)
    offsets = (angle[..., None] - rationals + 0.5 * np.pi) % np.pi - 0.5 * np.pi
    nearest = np.argmin(np.abs(offsets), axis=-1)
    distance = np.take_along_axis(np.abs(offsets), nearest[..., None], axis=-1)[..., 0]
    theta = rationals[nearest]
    normal_component = np.abs(-np.sin(theta) * values[0] + np.cos(theta) * values[1])
    speed = np.hypot(values[0], values[1])

    mask = (anisotropy >= 1.0 - tol) & (distance <= tol) & (normal_component <= tol * speed + 1e-300)
    fraction = float(np.mean(mask))
    largest = 0.0
    if mask.any():
        labels = _periodic_labels(mask)
        counts = np.bincount(labels[mask])
        largest = float(counts.max()) / mask.size
    logger.debug(f"Resonance diagnostic: flagged {fraction:.4f}, largest component {largest:.4f}")
    return ResonanceReport(fraction=fraction, largest_component=largest, mask=mask)
