"""Descriptor vectors, embedding sets, and their binary on-disk format.

An embedding set is an ordered collection of fixed-dimension float vectors
with one string id per row. Files store float32; all arithmetic elsewhere
in the toolkit runs in float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimMismatch, FormatError, ZeroVector

MAGIC = b"ISCE"
VERSION_UNIT = 1
VERSION_RAW = 2

# Tolerance for the unit-norm invariant: well above f32 rounding, well
# below any meaningful geometric difference.
NORM_ATOL = 1e-6
ZERO_NORM = 1e-12

_HEADER = struct.Struct("<4sIIQ")


def normalize(v: np.ndarray) -> np.ndarray:
    """Scale ``v`` to unit L2 norm, returned as float64.

    Raises ZeroVector for degenerate input (norm below 1e-12); callers
    must not silently proceed with a vector that has no direction.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise DimMismatch(f"expected a 1-d vector, got shape {v.shape}")
    norm = float(np.linalg.norm(v))
    if norm < ZERO_NORM:
        raise ZeroVector(f"cannot normalize vector with norm {norm:.3e}")
    return v / norm


def _check_id(s: str) -> str:
    if not s or "\n" in s or "\r" in s:
        raise ValueError(f"invalid id {s!r}: ids must be non-empty, single-line")
    return s


@dataclass(frozen=True)
class EmbeddingSet:
    """Immutable ordered set of vectors with string ids.

    ``matrix`` is float32, one row per id. ``unit_norm`` marks sets whose
    rows carry the descriptor unit-norm guarantee; raw feature sets (for
    example synthetic world inputs) set it False and are written to disk
    with a distinct format version.
    """

    ids: tuple[str, ...]
    matrix: np.ndarray = field(repr=False)
    unit_norm: bool = True

    def __post_init__(self) -> None:
        mat = np.ascontiguousarray(self.matrix, dtype=np.float32)
        if mat is self.matrix and mat.flags.writeable:
            mat = mat.copy()
        if mat.ndim != 2:
            raise ValueError(f"matrix must be 2-d, got shape {mat.shape}")
        if mat.shape[1] < 1:
            raise ValueError("dim must be at least 1")
        ids = tuple(_check_id(s) for s in self.ids)
        if len(ids) != mat.shape[0]:
            raise ValueError(
                f"{len(ids)} ids but {mat.shape[0]} matrix rows"
            )
        if len(set(ids)) != len(ids):
            raise ValueError("ids must be unique within the set")
        if not np.all(np.isfinite(mat)):
            raise ValueError("matrix contains non-finite values")
        if self.unit_norm and mat.shape[0] > 0:
            norms = np.linalg.norm(mat.astype(np.float64), axis=1)
            bad = np.abs(norms - 1.0) > NORM_ATOL
            if np.any(bad):
                i = int(np.argmax(bad))
                raise ValueError(
                    f"row {i} ({ids[i]!r}) has norm {norms[i]:.8f}, "
                    f"outside 1 +/- {NORM_ATOL}"
                )
        mat.flags.writeable = False
        object.__setattr__(self, "matrix", mat)
        object.__setattr__(self, "ids", ids)

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])

    @property
    def count(self) -> int:
        return int(self.matrix.shape[0])

    def row(self, i: int) -> np.ndarray:
        """Row ``i`` as a float64 vector."""
        return self.matrix[i].astype(np.float64)


def _ids_path(path: Path) -> Path:
    return path.with_suffix(".ids")


def write_embeddings(es: EmbeddingSet, path: str | Path) -> None:
    """Write ``es`` to ``path`` plus an ``.ids`` sidecar next to it.

    Layout (little-endian): magic ``ISCE``, version u32 (1 unit-norm,
    2 raw), dim u32, count u64, then count*dim float32 row-major. The
    sidecar holds one id per line, same order, UTF-8.
    """
    path = Path(path)
    version = VERSION_UNIT if es.unit_norm else VERSION_RAW
    header = _HEADER.pack(MAGIC, version, es.dim, es.count)
    payload = np.ascontiguousarray(es.matrix, dtype="<f4").tobytes()
    path.write_bytes(header + payload)
    ids_text = "".join(s + "\n" for s in es.ids)
    _ids_path(path).write_bytes(ids_text.encode("utf-8"))


def read_embeddings(path: str | Path) -> EmbeddingSet:
    """Read an embedding set written by :func:`write_embeddings`.

    The round trip is bit-exact: floats come back with identical bit
    patterns. Raises FormatError on bad magic, unknown version, or a
    truncated/oversized payload; DimMismatch when the payload length is
    consistent with the row count but not with the declared dim.
    """
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: file shorter than header")
    magic, version, dim, count = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version not in (VERSION_UNIT, VERSION_RAW):
        raise FormatError(f"{path}: unsupported version {version}")
    if dim < 1:
        raise FormatError(f"{path}: header dim {dim} is invalid")
    payload = blob[_HEADER.size:]
    expected = count * dim * 4
    if len(payload) != expected:
        if count > 0 and len(payload) % count == 0 and len(payload) % 4 == 0:
            raise DimMismatch(
                f"{path}: header dim {dim} disagrees with payload row size "
                f"{len(payload) // count} bytes"
            )
        raise FormatError(
            f"{path}: payload holds {len(payload)} bytes, header implies {expected}"
        )
    matrix = np.frombuffer(payload, dtype="<f4").reshape(count, dim)

    ids_file = _ids_path(path)
    if not ids_file.exists():
        raise FormatError(f"{ids_file}: id sidecar missing")
    lines = ids_file.read_bytes().decode("utf-8").splitlines()
    if len(lines) != count:
        raise FormatError(
            f"{ids_file}: {len(lines)} id lines, header implies {count}"
        )
    try:
        return EmbeddingSet(tuple(lines), matrix, unit_norm=(version == VERSION_UNIT))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
