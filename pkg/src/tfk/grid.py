"""Voxel-grid containers shared by the solver, the generator and the metrics.

Every field stores a flat array in row-major order with z slowest, so the
voxel (x, y, z) lives at ``x + nx * (y + ny * z)`` and ``values.reshape(nz,
ny, nx)`` gives a zero-copy 3D view. Fields are immutable after
construction; operations always return fresh objects.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from .errors import InvalidSpec, ShapeMismatch

_MAX_VOXELS = 2**62


@dataclass(frozen=True)
class GridSpec:
    nx: int
    ny: int
    nz: int
    dx: float = 1.0
    dy: float = 1.0
    dz: float = 1.0

    def __post_init__(self):
        for name in ("nx", "ny", "nz"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise InvalidSpec(f"{name} must be a positive integer, got {v!r}")
        for name in ("dx", "dy", "dz"):
            v = getattr(self, name)
            if not np.isfinite(v) or v <= 0:
                raise InvalidSpec(f"{name} must be a positive spacing, got {v!r}")
        if self.nx * self.ny * self.nz >= _MAX_VOXELS:
            raise InvalidSpec("voxel count exceeds addressable range")

    @classmethod
    def cube(cls, n: int, spacing: float = 1.0) -> "GridSpec":
        return cls(n, n, n, spacing, spacing, spacing)

    @property
    def size(self) -> int:
        return self.nx * self.ny * self.nz

    @property
    def shape(self) -> tuple[int, int, int]:
        """Array shape of the 3D view, (nz, ny, nx)."""
        return (self.nz, self.ny, self.nx)

    @property
    def spacing(self) -> tuple[float, float, float]:
        return (self.dx, self.dy, self.dz)

    @property
    def min_spacing(self) -> float:
        return min(self.dx, self.dy, self.dz)

    def index(self, x: int, y: int, z: int) -> int:
        if not (0 <= x < self.nx and 0 <= y < self.ny and 0 <= z < self.nz):
            raise IndexError(f"voxel ({x}, {y}, {z}) outside {self.shape[::-1]}")
        return x + self.nx * (y + self.ny * z)

    def coords(self, i: int) -> tuple[int, int, int]:
        if not 0 <= i < self.size:
            raise IndexError(f"flat index {i} outside [0, {self.size})")
        x = i % self.nx
        y = (i // self.nx) % self.ny
        z = i // (self.nx * self.ny)
        return (x, y, z)

    def contains(self, point) -> bool:
        x, y, z = point
        return 0 <= x <= self.nx - 1 and 0 <= y <= self.ny - 1 and 0 <= z <= self.nz - 1

    def to_dict(self) -> dict:
        return {"nx": self.nx, "ny": self.ny, "nz": self.nz,
                "dx": self.dx, "dy": self.dy, "dz": self.dz}


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


class _Volume:
    """Common behaviour of flat, immutable voxel arrays."""

    _dtype: type = np.float64

    def __init__(self, spec: GridSpec, values):
        arr = np.array(values, dtype=self._dtype, copy=True).reshape(-1)
        if arr.size != spec.size:
            raise ShapeMismatch(
                f"{type(self).__name__} needs {spec.size} values for {spec}, got {arr.size}")
        self.spec = spec
        self._values = _frozen(arr)

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def array(self) -> np.ndarray:
        """Read-only (nz, ny, nx) view."""
        return self._values.reshape(self.spec.shape)

    @classmethod
    def from_array(cls, spec: GridSpec, arr: np.ndarray):
        arr = np.asarray(arr)
        if arr.shape != spec.shape:
            raise ShapeMismatch(f"expected array of shape {spec.shape}, got {arr.shape}")
        return cls(spec, arr.reshape(-1))

    def __len__(self) -> int:
        return self.spec.size

    def __eq__(self, other) -> bool:
        return (type(other) is type(self) and other.spec == self.spec
                and np.array_equal(other.values, self.values))

    def __repr__(self) -> str:
        s = self.spec
        return f"{type(self).__name__}({s.nx}x{s.ny}x{s.nz})"


class ScalarField3D(_Volume):
    _dtype = np.float64

    def replace(self, values) -> "ScalarField3D":
        return ScalarField3D(self.spec, values)


class Tissue(enum.IntEnum):
    BACKGROUND = 0
    CSF = 1
    GRAY_MATTER = 2
    WHITE_MATTER = 3


class Label(enum.IntEnum):
    BACKGROUND = 0
    EDEMA = 1
    ENHANCING = 2


class TissueMap(_Volume):
    _dtype = np.uint8

    def __init__(self, spec: GridSpec, labels):
        super().__init__(spec, labels)
        if self._values.size and self._values.max() > max(Tissue):
            raise ValueError(f"tissue labels must be in {[int(t) for t in Tissue]}")

    @property
    def labels(self) -> np.ndarray:
        return self._values

    def brain_mask(self) -> np.ndarray:
        """Everything that is not background."""
        return self._values != Tissue.BACKGROUND

    def parenchyma_mask(self) -> np.ndarray:
        """Gray and white matter; the only tissue that carries tumor."""
        return self._values >= Tissue.GRAY_MATTER

    @classmethod
    def uniform(cls, spec: GridSpec, tissue: Tissue) -> "TissueMap":
        return cls(spec, np.full(spec.size, int(tissue), dtype=np.uint8))


class LabelMask(_Volume):
    _dtype = np.uint8

    def __init__(self, spec: GridSpec, labels):
        super().__init__(spec, labels)
        if self._values.size and self._values.max() > max(Label):
            raise ValueError(f"mask labels must be in {[int(t) for t in Label]}")

    @property
    def labels(self) -> np.ndarray:
        return self._values

    def whole_tumor(self) -> np.ndarray:
        """Boolean union of edema and enhancing voxels."""
        return self._values != Label.BACKGROUND


def field_new(spec: GridSpec, fill: float = 0.0) -> ScalarField3D:
    if not isinstance(spec, GridSpec):
        raise InvalidSpec(f"expected GridSpec, got {type(spec).__name__}")
    return ScalarField3D(spec, np.full(spec.size, float(fill)))


def pairwise_sum(values: np.ndarray) -> float:
    """Sum with a fixed binary-tree order.

    The array is zero-padded to a power of two and halves are added until one
    element remains, so the rounding pattern depends only on the length and
    error grows as O(log n).
    """
    a = np.asarray(values, dtype=np.float64).reshape(-1)
    n = a.size
    if n == 0:
        return 0.0
    width = 1 << (n - 1).bit_length()
    buf = np.zeros(width)
    buf[:n] = a
    while width > 1:
        width //= 2
        buf = buf[:width] + buf[width:2 * width]
    return float(buf[0])


_REDUCTIONS: dict[str, Callable[[np.ndarray], float]] = {
    "sum": pairwise_sum,
    "max": lambda a: float(np.max(a)),
    "min": lambda a: float(np.min(a)),
}


def field_map_reduce(field: ScalarField3D,
                     op: Union[str, Callable[[np.ndarray], float]] = "sum",
                     mask: np.ndarray | None = None) -> float:
    """Reduce a field to a scalar with ``op`` ("sum", "max", "min" or a callable).

    ``mask`` restricts the reduction to selected voxels.
    """
    vals = field.values if mask is None else field.values[np.asarray(mask, dtype=bool)]
    fn = _REDUCTIONS[op] if isinstance(op, str) else op
    return fn(vals)
