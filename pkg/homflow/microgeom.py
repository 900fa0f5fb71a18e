"""
Periodic microstructures on the unit cell Q = [-1/2, 1/2)^2.

Provides inclusion sets (disks and ellipses) with their hardcore and
regularity checks, rasterization of the inclusion indicator, the
penalization coefficient used to approximate stiff inclusions, a seeded
dart-throwing sampler, and depth fields for the lake problem.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .exceptions import GeometryError
from .fields import ScalarField, grid_coordinates

logger = logging.getLogger(__name__)

SHAPES = ("disk", "ellipse")
BOUNDARY_SAMPLES = 256
_PERIODIC_SHIFTS = ((1.0, 0.0), (0.0, 1.0), (1.0, 1.0), (1.0, -1.0))


def _wrap(x):
    """Map coordinates into the canonical cell [-1/2, 1/2)."""
    return x - np.floor(x + 0.5)


@dataclass(frozen=True)
class Inclusion:
    """
    A single inclusion of the periodic cell.

    Attributes:
        center (Tuple[float, float]): canonical center in Q
        radii (Tuple[float, float]): semi-axes (a, b); equal for disks
        angle (float): orientation of the first semi-axis, radians
        shape (str): 'disk' or 'ellipse'
    """

    center: Tuple[float, float]
    radii: Tuple[float, float]
    angle: float = 0.0
    shape: str = "disk"

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise GeometryError(f"Unknown inclusion shape: {self.shape}")
        radii = tuple(float(r) for r in self.radii)
        if len(radii) == 1:
            radii = (radii[0], radii[0])
        if len(radii) != 2 or min(radii) <= 0:
            raise GeometryError(f"Inclusion radii must be positive, got {self.radii}")
        if self.shape == "disk" and radii[0] != radii[1]:
            raise GeometryError(f"Disk needs a single radius, got {radii}")
        center = tuple(float(c) for c in _wrap(np.asarray(self.center, dtype=float)))
        object.__setattr__(self, "radii", radii)
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "angle", float(self.angle))

    @classmethod
    def disk(cls, center: Tuple[float, float], radius: float) -> "Inclusion":
        return cls(center=center, radii=(radius, radius))

    @property
    def area(self) -> float:
        return math.pi * self.radii[0] * self.radii[1]

    @property
    def diameter(self) -> float:
        return 2.0 * max(self.radii)

    @property
    def min_curvature_radius(self) -> float:
        a, b = max(self.radii), min(self.radii)
        return b * b / a

    def local_signed_distance(self, p1: np.ndarray, p2: np.ndarray) -> np.ndarray:
        """
        Signed distance (negative inside) for offsets (p1, p2) from the
        center, without periodic wrapping. Exact for disks, first-order
        level-set estimate for ellipses.
        """
        a, b = self.radii
        if self.shape == "disk":
            return np.hypot(p1, p2) - a
        cos_t, sin_t = math.cos(self.angle), math.sin(self.angle)
        q1 = cos_t * p1 + sin_t * p2
        q2 = -sin_t * p1 + cos_t * p2
        level = np.sqrt((q1 / a) ** 2 + (q2 / b) ** 2)
        slope = np.sqrt(q1 ** 2 / a ** 4 + q2 ** 2 / b ** 4)
        with np.errstate(divide="ignore", invalid="ignore"):
            dist = (level - 1.0) * level / slope
        return np.where(slope > 0, dist, -min(a, b))

    def signed_distance(self, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
        """Periodic signed distance using the minimum-image offset."""
        return self.local_signed_distance(_wrap(x1 - self.center[0]), _wrap(x2 - self.center[1]))

    def boundary_points(self, count: int = BOUNDARY_SAMPLES) -> Tuple[np.ndarray, np.ndarray]:
        t = 2.0 * np.pi * np.arange(count) / count
        a, b = self.radii
        q1, q2 = a * np.cos(t), b * np.sin(t)
        cos_t, sin_t = math.cos(self.angle), math.sin(self.angle)
        return cos_t * q1 - sin_t * q2, sin_t * q1 + cos_t * q2

    def to_dict(self) -> Dict[str, Any]:
        radii = [self.radii[0]] if self.shape == "disk" else list(self.radii)
        return {"shape": self.shape, "center": list(self.center), "radii": radii, "angle": self.angle}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Inclusion":
        return cls(
            center=tuple(data["center"]),
            radii=tuple(data["radii"]),
            angle=data.get("angle", 0.0),
            shape=data.get("shape", "disk"),
        )


@dataclass(frozen=True)
class Microstructure:
    """
    Periodic inclusion set with its regularity constant.

    Attributes:
        inclusions (Tuple[Inclusion, ...]): inclusions of one periodicity cell
        hardcore (float): constant rho of the hardcore and ball conditions
        provenance (str): 'deterministic' or 'random'
        seed (Optional[int]): sampler seed for random structures
        saturated (bool): the sampler stopped before reaching its target
    """

    inclusions: Tuple[Inclusion, ...] = ()
    hardcore: float = 0.1
    provenance: str = "deterministic"
    seed: Optional[int] = None
    saturated: bool = False

    def __post_init__(self):
        object.__setattr__(self, "inclusions", tuple(self.inclusions))
        if not self.hardcore > 0:
            raise GeometryError(f"Hardcore constant must be positive, got {self.hardcore}")

    @classmethod
    def single_disk(cls, radius: float, center=(0.0, 0.0), hardcore: float = 0.01) -> "Microstructure":
        return cls(inclusions=(Inclusion.disk(center, radius),), hardcore=hardcore)

    @classmethod
    def disk_with_fraction(cls, volume_fraction: float, hardcore: float = 0.01) -> "Microstructure":
        """Centered disk whose area equals the requested volume fraction."""
        if volume_fraction <= 0:
            return cls(hardcore=hardcore)
        return cls.single_disk(math.sqrt(volume_fraction / math.pi), hardcore=hardcore)

    @property
    def is_empty(self) -> bool:
        return not self.inclusions

    @property
    def exact_volume_fraction(self) -> float:
        return sum(inc.area for inc in self.inclusions)

    def signed_distance(self, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
        dist = np.full(np.broadcast(x1, x2).shape, np.inf)
        for inc in self.inclusions:
            dist = np.minimum(dist, inc.signed_distance(x1, x2))
        return dist

    def rotated(self) -> "Microstructure":
        """Image under the quarter turn x -> Jx of the cell."""
        rotated = []
        for inc in self.inclusions:
            c1, c2 = inc.center
            rotated.append(Inclusion((-c2, c1), inc.radii, inc.angle + math.pi / 2, inc.shape))
        return Microstructure(tuple(rotated), self.hardcore, self.provenance, self.seed, self.saturated)

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {
            "hardcore": self.hardcore,
            "inclusions": [inc.to_dict() for inc in self.inclusions],
        }
        if self.provenance == "random":
            data["provenance"] = {"random": self.seed}
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Microstructure":
        provenance = data.get("provenance", "deterministic")
        seed = None
        if isinstance(provenance, dict):
            seed = provenance.get("random")
            provenance = "random"
        return cls(
            inclusions=tuple(Inclusion.from_dict(item) for item in data.get("inclusions", [])),
            hardcore=data.get("hardcore", 0.1),
            provenance=provenance,
            seed=seed,
        )


@dataclass(frozen=True)
class Violation:
    kind: str
    indices: Tuple[int, ...]
    value: float
    bound: float


@dataclass
class ValidationReport:
    violations: List[Violation] = field(default_factory=list)

    @property
    def valid(self) -> bool:
        return not self.violations

    def summary(self) -> str:
        if self.valid:
            return "valid"
        return ", ".join(f"{v.kind}{list(v.indices)}={v.value:.4g} (bound {v.bound:.4g})" for v in self.violations)


def _self_gap(inc: Inclusion) -> float:
    """Boundary distance between an inclusion and its nearest periodic copy."""
    if inc.shape == "disk":
        return 1.0 - inc.diameter
    b1, b2 = inc.boundary_points()
    gaps = [np.min(inc.local_signed_distance(b1 + s1, b2 + s2)) for s1, s2 in _PERIODIC_SHIFTS]
    gaps += [np.min(inc.local_signed_distance(b1 - s1, b2 - s2)) for s1, s2 in _PERIODIC_SHIFTS]
    return float(min(gaps))


def boundary_gap(first: Inclusion, second: Inclusion) -> float:
    """Periodic distance between two inclusion boundaries (negative on overlap)."""
    if first.shape == "disk" and second.shape == "disk":
        d1 = _wrap(first.center[0] - second.center[0])
        d2 = _wrap(first.center[1] - second.center[1])
        return float(math.hypot(d1, d2) - first.radii[0] - second.radii[0])
    b1, b2 = first.boundary_points()
    gap_a = np.min(second.signed_distance(b1 + first.center[0], b2 + first.center[1]))
    c1, c2 = second.boundary_points()
    gap_b = np.min(first.signed_distance(c1 + second.center[0], c2 + second.center[1]))
    return float(min(gap_a, gap_b))


def validate(ms: Microstructure) -> ValidationReport:
    """
    Check the regularity and hardcore conditions of a microstructure.

    Violations are returned as data; an empty inclusion list is valid.
    """
    rho = ms.hardcore
    report = ValidationReport()
    for n, inc in enumerate(ms.inclusions):
        if inc.diameter > 1.0 / rho:
            report.violations.append(Violation("diameter", (n,), inc.diameter, 1.0 / rho))
        if inc.min_curvature_radius < rho:
            report.violations.append(Violation("ball", (n,), inc.min_curvature_radius, rho))
        gap = _self_gap(inc)
        if gap < rho:
            report.violations.append(Violation("hardcore", (n, n), gap, rho))
    for n, first in enumerate(ms.inclusions):
        for m in range(n + 1, len(ms.inclusions)):
            gap = boundary_gap(first, ms.inclusions[m])
            if gap < rho:
                report.violations.append(Violation("hardcore", (n, m), gap, rho))
    return report


def _require_valid(ms: Microstructure) -> None:
    report = validate(ms)
    if not report.valid:
        logger.error(f"Invalid microstructure: {report.summary()}")
        raise GeometryError(f"Invalid microstructure: {report.summary()}")


def rasterize_indicator(ms: Microstructure, n: int, supersampling: int = 4) -> ScalarField:
    """
    Per-node area fraction of the inclusions by s x s subsampling of the
    grid cell around each node.
    """
    if supersampling < 1:
        raise ValueError(f"Supersampling must be >= 1, got {supersampling}")
    _require_valid(ms)
    values = np.zeros((n, n))
    if ms.is_empty:
        return ScalarField(values)
    h = 1.0 / n
    x1, x2 = grid_coordinates(n)
    offsets = ((np.arange(supersampling) + 0.5) / supersampling - 0.5) * h
    for o1 in offsets:
        for o2 in offsets:
            values += ms.signed_distance(x1 + o1, x2 + o2) <= 0.0
    return ScalarField(values / supersampling ** 2)


def transition_width(n: int, penalty: float) -> float:
    """Cut-off layer width max(2/N, 1/K), floored at two grid cells."""
    return max(2.0 / n, 1.0 / penalty)


def penalization_field(ms: Microstructure, n: int, penalty: float) -> ScalarField:
    """
    Coefficient 1 + K * chi_K of the penalized stiff problem.

    chi_K vanishes outside the inclusions, equals 1 at depth >= w inside,
    with a smoothstep layer of width w = max(2/N, 1/K); |grad chi_K| <= 1.5/w.
    chi_K is nondecreasing in K since w is nonincreasing.
    """
    if penalty < 0:
        raise ValueError(f"Penalty must be nonnegative, got {penalty}")
    _require_valid(ms)
    if penalty == 0 or ms.is_empty:
        return ScalarField(np.ones((n, n)))
    width = transition_width(n, penalty)
    depth = -ms.signed_distance(*grid_coordinates(n))
    t = np.clip(depth / width, 0.0, 1.0)
    chi = t * t * (3.0 - 2.0 * t)
    return ScalarField(1.0 + penalty * chi)


@dataclass(frozen=True)
class RadiusLaw:
    """
    Radius distribution for the random sampler.

    Attributes:
        kind (str): 'equal' (fixed ``value``) or 'uniform' on [low, high]
    """

    kind: str = "equal"
    value: float = 0.05
    low: float = 0.0
    high: float = 0.0

    def draw(self, rng: np.random.Generator) -> float:
        if self.kind == "equal":
            return self.value
        if self.kind == "uniform":
            return float(rng.uniform(self.low, self.high))
        raise GeometryError(f"Unknown radius law: {self.kind}")

    @property
    def largest(self) -> float:
        return self.value if self.kind == "equal" else self.high

    @property
    def smallest(self) -> float:
        return self.value if self.kind == "equal" else self.low

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RadiusLaw":
        return cls(**data)


MAX_RANDOM_VOLUME_FRACTION = 0.4


def sample_random_hardcore(
    seed: int,
    volume_fraction: float,
    hardcore: float,
    radius_law: RadiusLaw = RadiusLaw(),
    max_attempts: int = 100_000,
) -> Microstructure:
    """
    Seeded dart throwing of disks on the torus with hardcore rejection.

    Stops once the target volume fraction is reached, or when it is within
    10% and the next disk would overshoot by more than 10%. Exhausting
    ``max_attempts`` returns the partial structure flagged as saturated.
    """
    if not 0.0 <= volume_fraction <= MAX_RANDOM_VOLUME_FRACTION:
        raise GeometryError(
            f"Target volume fraction must lie in [0, {MAX_RANDOM_VOLUME_FRACTION}], got {volume_fraction}"
        )
    if radius_law.smallest < hardcore or 1.0 - 2.0 * radius_law.largest < hardcore:
        raise GeometryError(f"Radius law {radius_law} incompatible with hardcore constant {hardcore}")
    rng = np.random.default_rng(seed)
    accepted: List[Inclusion] = []
    area = 0.0
    attempts = 0
    while area < volume_fraction and attempts < max_attempts:
        attempts += 1
        radius = radius_law.draw(rng)
        center = rng.uniform(-0.5, 0.5, size=2)
        candidate_area = math.pi * radius * radius
        if area + candidate_area > 1.1 * volume_fraction:
            if area >= 0.9 * volume_fraction:
                break
            continue
        candidate = Inclusion.disk((center[0], center[1]), radius)
        if all(boundary_gap(candidate, other) >= hardcore for other in accepted):
            accepted.append(candidate)
            area += candidate_area
    saturated = area < 0.9 * volume_fraction
    if saturated:
        logger.warning(
            f"Random sampler saturated after {attempts} attempts: volume fraction {area:.4f} "
            f"for target {volume_fraction:.4f}"
        )
    logger.debug(f"Sampled {len(accepted)} inclusions (seed {seed}, volume fraction {area:.4f})")
    return Microstructure(tuple(accepted), hardcore, provenance="random", seed=seed, saturated=saturated)


DEPTH_KINDS = ("constant", "two-phase", "laminate", "trigonometric")


@dataclass(frozen=True)
class DepthSpec:
    """
    Depth function b on the unit cell.

    Attributes:
        kind (str): constant | two-phase | laminate | trigonometric
        bound (float): C0, with 1/C0 <= b <= C0 required
        value (float): constant depth
        alpha, beta (float): two-phase depth outside / inside the inclusions
        microstructure (Microstructure): two-phase inclusion set
        base (float): mean part of laminate and trigonometric profiles
        cosines, sines (Tuple[float, ...]): laminate coefficients of
            cos(2 pi k x1), sin(2 pi k x1) for k = 1, 2, ...
        terms (Tuple[Tuple[float, int, int, float], ...]): trigonometric terms
            (amplitude, m1, m2, phase) of amplitude * cos(2 pi (m1 x1 + m2 x2) + phase)
    """

    kind: str
    bound: float = 10.0
    value: float = 1.0
    alpha: float = 1.0
    beta: float = 1.0
    microstructure: Optional[Microstructure] = None
    base: float = 1.0
    cosines: Tuple[float, ...] = ()
    sines: Tuple[float, ...] = ()
    terms: Tuple[Tuple[float, int, int, float], ...] = ()

    def __post_init__(self):
        if self.kind not in DEPTH_KINDS:
            raise GeometryError(f"Unknown depth kind: {self.kind}")
        if not self.bound >= 1.0:
            raise GeometryError(f"Depth bound C0 must be >= 1, got {self.bound}")
        object.__setattr__(self, "cosines", tuple(float(c) for c in self.cosines))
        object.__setattr__(self, "sines", tuple(float(s) for s in self.sines))
        object.__setattr__(self, "terms", tuple(
            (float(t[0]), int(t[1]), int(t[2]), float(t[3]) if len(t) > 3 else 0.0) for t in self.terms
        ))
        if self.kind == "two-phase" and self.microstructure is None:
            raise GeometryError("Two-phase depth needs a microstructure")
        low, high = self.extremes()
        if low < 1.0 / self.bound or high > self.bound:
            raise GeometryError(
                f"Depth range [{low:.4g}, {high:.4g}] violates bounds [{1.0 / self.bound:.4g}, {self.bound:.4g}]"
            )

    @classmethod
    def constant(cls, value: float, bound: float = 10.0) -> "DepthSpec":
        return cls(kind="constant", value=value, bound=bound)

    @classmethod
    def two_phase(cls, alpha: float, beta: float, ms: Microstructure, bound: float = 10.0) -> "DepthSpec":
        return cls(kind="two-phase", alpha=alpha, beta=beta, microstructure=ms, bound=bound)

    @classmethod
    def laminate(cls, base: float, cosines=(), sines=(), bound: float = 10.0) -> "DepthSpec":
        return cls(kind="laminate", base=base, cosines=tuple(cosines), sines=tuple(sines), bound=bound)

    @classmethod
    def trigonometric(cls, base: float, terms, bound: float = 10.0) -> "DepthSpec":
        return cls(kind="trigonometric", base=base, terms=tuple(terms), bound=bound)

    @property
    def is_smooth(self) -> bool:
        return self.kind != "two-phase"

    def extremes(self) -> Tuple[float, float]:
        """Conservative (min, max) of b from the coefficients."""
        if self.kind == "constant":
            return self.value, self.value
        if self.kind == "two-phase":
            return min(self.alpha, self.beta), max(self.alpha, self.beta)
        if self.kind == "laminate":
            spread = sum(abs(c) for c in self.cosines) + sum(abs(s) for s in self.sines)
        else:
            spread = sum(abs(t[0]) for t in self.terms)
        return self.base - spread, self.base + spread

    def evaluate(self, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
        """Pointwise depth at cell coordinates (extended periodically)."""
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        shape = np.broadcast(x1, x2).shape
        if self.kind == "constant":
            return np.full(shape, self.value)
        if self.kind == "two-phase":
            inside = self.microstructure.signed_distance(x1, x2) <= 0.0
            return np.where(inside, self.beta, self.alpha)
        out = np.full(shape, self.base)
        if self.kind == "laminate":
            for k, c in enumerate(self.cosines, start=1):
                out = out + c * np.cos(2.0 * np.pi * k * x1)
            for k, s in enumerate(self.sines, start=1):
                out = out + s * np.sin(2.0 * np.pi * k * x1)
            return out
        for amplitude, m1, m2, phase in self.terms:
            out = out + amplitude * np.cos(2.0 * np.pi * (m1 * x1 + m2 * x2) + phase)
        return out

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {"kind": self.kind, "bound": self.bound}
        if self.kind == "constant":
            data["value"] = self.value
        elif self.kind == "two-phase":
            data.update(alpha=self.alpha, beta=self.beta, geometry=self.microstructure.to_dict())
        elif self.kind == "laminate":
            data.update(base=self.base, cosines=list(self.cosines), sines=list(self.sines))
        else:
            data.update(base=self.base, terms=[list(t) for t in self.terms])
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DepthSpec":
        data = dict(data)
        geometry = data.pop("geometry", None)
        if geometry is not None:
            data["microstructure"] = Microstructure.from_dict(geometry)
        for key in ("cosines", "sines"):
            if key in data:
                data[key] = tuple(data[key])
        if "terms" in data:
            data["terms"] = tuple(tuple(t) for t in data["terms"])
        return cls(**data)


def build_depth_field(spec: DepthSpec, n: int, supersampling: int = 4) -> ScalarField:
    """
    Sample a depth specification on the cell grid.

    Two-phase fields are blended by the rasterized area fraction, so their
    mean is alpha + lambda * (beta - alpha).
    """
    if spec.kind == "two-phase":
        fraction = rasterize_indicator(spec.microstructure, n, supersampling).values
        values = spec.alpha + (spec.beta - spec.alpha) * fraction
    else:
        values = spec.evaluate(*grid_coordinates(n))
    if values.min() < 1.0 / spec.bound - 1e-12 or values.max() > spec.bound + 1e-12:
        raise GeometryError(f"Sampled depth leaves [{1.0 / spec.bound}, {spec.bound}]")
    depth = ScalarField(values)
    logger.debug(f"Depth field {spec.kind} on N={n}: b0 = {depth.mean():.12g}")
    return depth
