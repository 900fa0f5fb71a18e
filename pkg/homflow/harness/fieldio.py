"""
Binary grid field format.

A 20-byte little-endian header (magic "H2DF", version u16, components u16,
N u32, L f64) followed by components * N * N row-major float64 samples.
"""

import logging
from pathlib import Path
from typing import Union

import numpy as np

from ..exceptions import FieldFormatError
from ..fields import ScalarField, VectorField

logger = logging.getLogger(__name__)

MAGIC = b"H2DF"
VERSION = 1
HEADER = np.dtype([
    ("magic", "S4"),
    ("version", "<u2"),
    ("components", "<u2"),
    ("n", "<u4"),
    ("length", "<f8"),
])
PAYLOAD = np.dtype("<f8")


def write_field(path: Union[str, Path], field: Union[ScalarField, VectorField]) -> Path:
    """Write a scalar or vector field; returns the path written."""
    path = Path(path)
    values = np.ascontiguousarray(field.values, dtype=PAYLOAD)
    components = 1 if values.ndim == 2 else values.shape[0]
    header = np.array([(MAGIC, VERSION, components, field.n, field.length)], dtype=HEADER)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(header.tobytes())
        f.write(values.tobytes(order="C"))
    logger.debug(f"Wrote {components}-component field N={field.n} to {path}")
    return path


def read_field(path: Union[str, Path]) -> Union[ScalarField, VectorField]:
    """
    Read a field written by ``write_field``.

    Raises:
        FieldFormatError: bad magic or version, N = 0, unsupported component
            count, truncated or oversized payload
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < HEADER.itemsize:
        logger.error(f"{path}: {len(raw)} bytes is shorter than the header")
        raise FieldFormatError(f"{path}: truncated header")
    header = np.frombuffer(raw[:HEADER.itemsize], dtype=HEADER)[0]
    if bytes(header["magic"]) != MAGIC:
        logger.error(f"{path}: bad magic {bytes(header['magic'])!r}")
        raise FieldFormatError(f"{path}: not a field file (magic {bytes(header['magic'])!r})")
    if int(header["version"]) != VERSION:
        raise FieldFormatError(f"{path}: unsupported version {int(header['version'])}")
    n = int(header["n"])
    components = int(header["components"])
    if n == 0:
        raise FieldFormatError(f"{path}: grid size N = 0")
    if components not in (1, 2):
        raise FieldFormatError(f"{path}: unsupported component count {components}")

    expected = components * n * n * PAYLOAD.itemsize
    payload = raw[HEADER.itemsize:]
    if len(payload) != expected:
        logger.error(f"{path}: payload has {len(payload)} bytes, expected {expected}")
        raise FieldFormatError(f"{path}: payload size {len(payload)} != {expected}")
    values = np.frombuffer(payload, dtype=PAYLOAD).astype(np.float64)
    length = float(header["length"])
    try:
        if components == 1:
            return ScalarField(values.reshape(n, n), length)
        return VectorField(values.reshape(2, n, n), length)
    except ValueError as e:
        raise FieldFormatError(f"{path}: {e}") from e
