"""Simplex-valued multi-class fields on regular 2-D grids, and the ADTF file format."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import stencil

TOL_SIMPLEX = 1e-6


class DomainError(ValueError):
    """Input outside the domain of an operation (NaN, infinity, bad shape)."""


class AdtfError(ValueError):
    """Malformed ADTF file."""


@dataclass(frozen=True)
class Grid2D:
    height: int
    width: int
    spacing: float = 1.0

    def __post_init__(self):
        if self.height < 2 or self.width < 2:
            raise DomainError(f"grid must be at least 2x2, got {self.height}x{self.width}")
        if not self.spacing > 0:
            raise DomainError(f"grid spacing must be positive, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def size(self) -> int:
        return self.height * self.width


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class SimplexField:
    """Per-pixel class probabilities, stored as K contiguous (H, W) planes."""

    grid: Grid2D
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3 or v.shape[1:] != self.grid.shape:
            raise DomainError(f"values must have shape (K, {self.grid.height}, {self.grid.width}), got {v.shape}")
        if v.shape[0] < 2:
            raise DomainError("a simplex field needs at least two classes")
        if not np.all(np.isfinite(v)):
            raise DomainError("field contains NaN or infinite entries")
        object.__setattr__(self, "values", _frozen(v))
        err = simplex_violation(self.values)
        if err > TOL_SIMPLEX:
            raise DomainError(f"field is off the simplex by {err:.3g} (> {TOL_SIMPLEX})")

    @property
    def num_classes(self) -> int:
        return self.values.shape[0]

    def __eq__(self, other):
        if not isinstance(other, SimplexField):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self.values, other.values)

    @classmethod
    def one_hot(cls, labels: np.ndarray, num_classes: int, spacing: float = 1.0) -> "SimplexField":
        labels = np.asarray(labels)
        grid = Grid2D(labels.shape[0], labels.shape[1], spacing)
        vals = (labels[None] == np.arange(num_classes)[:, None, None]).astype(np.float64)
        return cls(grid, vals)

    @classmethod
    def uniform(cls, grid: Grid2D, num_classes: int) -> "SimplexField":
        return cls(grid, np.full((num_classes,) + grid.shape, 1.0 / num_classes))


@dataclass(frozen=True, eq=False)
class ClassMask:
    grid: Grid2D
    bits: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bits, dtype=bool)
        if b.shape != self.grid.shape:
            raise DomainError(f"mask shape {b.shape} does not match grid {self.grid.shape}")
        b = b.copy()
        b.flags.writeable = False
        object.__setattr__(self, "bits", b)

    def __eq__(self, other):
        if not isinstance(other, ClassMask):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self.bits, other.bits)

    @classmethod
    def from_bits(cls, bits, spacing: float = 1.0) -> "ClassMask":
        bits = np.asarray(bits, dtype=bool)
        return cls(Grid2D(bits.shape[0], bits.shape[1], spacing), bits)

    def count(self) -> int:
        return int(np.count_nonzero(self.bits))


def simplex_violation(values: np.ndarray, axis: int = -3) -> float:
    """Largest deviation from the simplex: negative mass or row-sum error."""
    neg = float(np.max(-values)) if values.size else 0.0
    sums = np.abs(values.sum(axis=axis) - 1.0)
    return max(neg, float(sums.max()) if sums.size else 0.0, 0.0)


def project_simplex(v) -> np.ndarray:
    """Euclidean projection of a single K-vector onto the probability simplex."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] < 2:
        raise DomainError(f"expected a K-vector with K >= 2, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise DomainError("cannot project a vector with non-finite entries")
    return stencil.project_simplex_last(v)


def project_field(raw, grid: Grid2D | None = None) -> SimplexField:
    """Project every pixel of an unconstrained (K, H, W) array onto the simplex."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 3:
        raise DomainError(f"expected a (K, H, W) array, got shape {raw.shape}")
    if not np.all(np.isfinite(raw)):
        raise DomainError("cannot project a field with non-finite entries")
    if grid is None:
        grid = Grid2D(raw.shape[1], raw.shape[2])
    return SimplexField(grid, stencil.project_simplex_axis(raw, axis=0))


def argmax_labels(values: np.ndarray, axis: int = -3) -> np.ndarray:
    """Dominant class per pixel; np.argmax already breaks ties toward the lowest index."""
    return np.argmax(values, axis=axis)


def argmax_mask(p: SimplexField, k: int) -> ClassMask:
    if not 0 <= k < p.num_classes:
        raise IndexError(f"class index {k} out of range for K={p.num_classes}")
    return ClassMask(p.grid, argmax_labels(p.values, axis=0) == k)


def class_mass(p: SimplexField, k: int) -> float:
    if not 0 <= k < p.num_classes:
        raise IndexError(f"class index {k} out of range for K={p.num_classes}")
    h = p.grid.spacing
    # contiguous row-major plane: numpy's pairwise summation in a fixed order
    return float(np.sum(np.ascontiguousarray(p.values[k]).ravel()) * (h * h))


# -- ADTF v1 -------------------------------------------------------------------
# One-line JSON header, newline, then H*W*K little-endian float32 values in
# row-major order with the class index innermost.

ADTF_MAGIC = "ADTF"
ADTF_VERSION = 1


def write_adtf_array(path, planes: np.ndarray, spacing: float = 1.0) -> None:
    planes = np.asarray(planes, dtype=np.float64)
    if planes.ndim != 3:
        raise AdtfError(f"expected (K, H, W) planes, got shape {planes.shape}")
    K, H, W = planes.shape
    header = {"magic": ADTF_MAGIC, "version": ADTF_VERSION, "height": H, "width": W,
              "classes": K, "spacing": float(spacing)}
    payload = np.ascontiguousarray(np.transpose(planes, (1, 2, 0))).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, separators=(",", ":")).encode("utf-8") + b"\n")
        fh.write(payload.tobytes())


def _read_header(fh, path):
    line = fh.readline()
    if not line.endswith(b"\n"):
        raise AdtfError(f"{path}: missing header terminator")
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise AdtfError(f"{path}: corrupt header ({exc})") from None
    if not isinstance(header, dict) or header.get("magic") != ADTF_MAGIC:
        raise AdtfError(f"{path}: bad magic")
    if header.get("version") != ADTF_VERSION:
        raise AdtfError(f"{path}: unsupported ADTF version {header.get('version')!r}")
    for key in ("height", "width", "classes"):
        if not isinstance(header.get(key), int) or header[key] < 1:
            raise AdtfError(f"{path}: header field {key!r} invalid")
    return header


def read_adtf_array(path) -> np.ndarray:
    arr, _ = _read_adtf(path)
    return arr


def _read_adtf(path):
    path = Path(path)
    with open(path, "rb") as fh:
        header = _read_header(fh, path)
        payload = fh.read()
    H, W, K = header["height"], header["width"], header["classes"]
    expected = H * W * K * 4
    if len(payload) != expected:
        raise AdtfError(f"{path}: payload length {len(payload)} bytes, expected {expected}")
    data = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(H, W, K)
    return np.ascontiguousarray(np.transpose(data, (2, 0, 1))), header


def write_adtf(path, p: SimplexField) -> None:
    write_adtf_array(path, p.values, p.grid.spacing)


def read_adtf(path) -> SimplexField:
    arr, header = _read_adtf(path)
    spacing = float(header.get("spacing", 1.0))
    return SimplexField(Grid2D(header["height"], header["width"], spacing), arr)


def quantize(values: np.ndarray) -> np.ndarray:
    """Round to float32 so that an ADTF round trip is bit-exact."""
    return np.asarray(values, dtype=np.float32).astype(np.float64)
