import json
import math

import numpy as np
import pytest

from homflow.macroflow import FourierSeries
from homflow.microgeom import DepthSpec, Inclusion, Microstructure


@pytest.fixture
def empty_structure():
    return Microstructure(hardcore=0.1)


@pytest.fixture
def disk_quarter():
    """Centered disk of radius 0.25, volume fraction pi/16."""
    return Microstructure.single_disk(0.25, hardcore=0.1)


@pytest.fixture
def disk_fifth():
    """Centered disk of volume fraction 0.2."""
    return Microstructure.single_disk(math.sqrt(0.2 / math.pi), hardcore=0.1)


@pytest.fixture
def laminate_depth():
    """b(x1) = 1 + 0.5 cos(2 pi x1)."""
    return DepthSpec.laminate(1.0, cosines=[0.5], bound=2.0)


@pytest.fixture
def trigonometric_depth():
    """Contrast-2 depth in [1, 2]."""
    return DepthSpec.trigonometric(1.5, [(0.25, 1, 0, 0.0), (0.25, 0, 1, 0.0)], bound=2.0)


@pytest.fixture
def smooth_vorticity():
    return FourierSeries(((1.0, 1, 0, 0.0), (0.5, 1, 1, 0.3), (0.25, 0, 2, 1.1)))


@pytest.fixture
def write_scenario(tmp_path):
    def write(data, name="scenario.json"):
        path = tmp_path / name
        path.write_text(json.dumps(data))
        return path
    return write


def two_disks(distance: float, radius: float = 0.1, hardcore: float = 0.1) -> Microstructure:
    """Two disks whose boundaries are ``distance`` apart along x1."""
    offset = radius + 0.5 * distance
    return Microstructure(
        inclusions=(Inclusion.disk((-offset, 0.0), radius), Inclusion.disk((offset, 0.0), radius)),
        hardcore=hardcore,
    )


def relative_gap(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))
