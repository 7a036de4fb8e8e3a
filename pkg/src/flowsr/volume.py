"""Volumetric data containers, fluid-region decomposition and vector-field rotation.

Arrays are stored in index order ``(t, z, y, x, component)`` with the component
axis fastest; ``dims`` is always reported as ``(nx, ny, nz)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DimensionError, ValidationError

__all__ = [
    "Region",
    "Space",
    "VelocityVolume",
    "MagnitudeVolume",
    "ComplexVolume",
    "decompose_regions",
    "rotation_matrix",
    "rotate_vectors",
    "rotate_scalar",
    "rotate_field",
]


class Region(enum.IntEnum):
    NONFLUID = 0
    BOUNDARY = 1
    CORE = 2


class Space(enum.Enum):
    IMAGE = "image"
    KSPACE = "kspace"


def _check_finite(data, what):
    if not np.all(np.isfinite(data)):
        raise ValidationError(f"{what} contains NaN or Inf")


@dataclass(frozen=True)
class VelocityVolume:
    """Time-resolved 3-component velocity field in m/s.

    ``data`` has shape ``(nt, nz, ny, nx, 3)``; ``spacing`` is the isotropic voxel
    size in mm and ``dt`` the frame interval in ms.
    """

    data: np.ndarray
    spacing: float = 1.0
    dt: float = 10.0

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 5 or data.shape[-1] != 3:
            raise DimensionError(f"velocity data must have shape (nt, nz, ny, nx, 3), got {data.shape}")
        if min(data.shape[:4]) < 1:
            raise DimensionError("all dims and nt must be >= 1")
        if not self.spacing > 0 or not self.dt > 0:
            raise ValidationError("spacing and dt must be positive")
        _check_finite(data, "velocity data")
        object.__setattr__(self, "data", data)

    @property
    def dims(self):
        nz, ny, nx = self.data.shape[1:4]
        return (nx, ny, nz)

    @property
    def nt(self):
        return self.data.shape[0]

    def frame(self, t):
        return self.data[t]

    def with_data(self, data):
        return VelocityVolume(data, self.spacing, self.dt)


@dataclass(frozen=True)
class MagnitudeVolume:
    """Non-negative scalar intensity, shape ``(nz, ny, nx)``."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise DimensionError(f"magnitude data must be 3-D, got shape {data.shape}")
        _check_finite(data, "magnitude data")
        if np.any(data < 0):
            raise ValidationError("magnitude data must be non-negative")
        object.__setattr__(self, "data", data)

    @property
    def dims(self):
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)


@dataclass(frozen=True)
class ComplexVolume:
    data: np.ndarray
    space: Space = Space.IMAGE

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.complex128)
        if data.ndim != 3:
            raise DimensionError(f"complex data must be 3-D, got shape {data.shape}")
        _check_finite(data, "complex data")
        object.__setattr__(self, "data", data)

    @property
    def dims(self):
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)


# 6-connected (face-adjacent) structuring element
_FACE_STRUCTURE = ndimage.generate_binary_structure(3, 1)


def decompose_regions(mask):
    """Split a boolean fluid mask into NonFluid / Boundary / Core labels.

    Core is one binary erosion of the mask with the face-adjacent structuring
    element, treating everything outside the grid as non-fluid. Boundary is
    the remaining fluid. Returns a ``uint8`` array of :class:`Region` values.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 3:
        raise DimensionError(f"mask must be 3-D, got shape {mask.shape}")
    if min(mask.shape) < 3:
        raise DimensionError(f"mask dims must all be >= 3, got {mask.shape}")
    core = ndimage.binary_erosion(mask, structure=_FACE_STRUCTURE, iterations=1, border_value=0)
    labels = np.full(mask.shape, Region.NONFLUID, dtype=np.uint8)
    labels[mask] = Region.BOUNDARY
    labels[core] = Region.CORE
    return labels


_AXES = {"X": 0, "Y": 1, "Z": 2}
_QUARTER = {90: 1, 180: 2, 270: 3}


def rotation_matrix(axis, angle):
    """Integer right-handed rotation matrix acting on ``(x, y, z)`` vectors."""
    axis = axis.upper()
    if axis not in _AXES:
        raise ValidationError(f"axis must be one of X, Y, Z, got {axis!r}")
    if angle not in _QUARTER:
        raise ValidationError(f"angle must be 90, 180 or 270, got {angle!r}")
    c, s = {1: (0, 1), 2: (-1, 0), 3: (0, -1)}[_QUARTER[angle]]
    if axis == "X":
        m = [[1, 0, 0], [0, c, -s], [0, s, c]]
    elif axis == "Y":
        m = [[c, 0, s], [0, 1, 0], [-s, 0, c]]
    else:
        m = [[c, -s, 0], [s, c, 0], [0, 0, 1]]
    return np.array(m, dtype=int)


def _signed_perm(rot):
    # q_j = sign[j] * p_{src[j]} for a signed permutation matrix
    src = np.argmax(np.abs(rot), axis=1)
    sign = rot[np.arange(3), src]
    return src, sign


def rotate_scalar(data, axis, angle):
    """Rotate the spatial grid of a ``(..., z, y, x)`` array about the volume centre."""
    data = np.asarray(data)
    src, sign = _signed_perm(rotation_matrix(axis, angle))
    lead = data.ndim - 3
    # output coordinate j lives on array axis lead + 2 - j
    perm = list(range(lead)) + [lead + 2 - src[2 - a] for a in range(3)]
    out = np.transpose(data, perm)
    flip = tuple(lead + 2 - j for j in range(3) if sign[j] < 0)
    if flip:
        out = np.flip(out, axis=flip)
    return np.ascontiguousarray(out)


def rotate_vectors(data, axis, angle):
    """Rotate a ``(..., z, y, x, 3)`` vector field: grid permuted and every vector rotated.

    Components are only permuted and negated, so vector norms are preserved exactly.
    """
    data = np.asarray(data)
    if data.shape[-1] != 3:
        raise DimensionError("vector field must have a trailing component axis of size 3")
    nz, ny, nx = data.shape[-4:-1]
    if not nx == ny == nz:
        raise DimensionError(f"rotation requires a cubic grid, got {(nx, ny, nz)}")
    src, sign = _signed_perm(rotation_matrix(axis, angle))
    moved = np.moveaxis(data, -1, 0)
    moved = rotate_scalar(moved, axis, angle)
    comps = [moved[src[j]] if sign[j] > 0 else -moved[src[j]] for j in range(3)]
    return np.stack(comps, axis=-1)


def rotate_field(v, axis, angle):
    """Rotate every frame of a cubic :class:`VelocityVolume`."""
    return v.with_data(rotate_vectors(v.data, axis, angle))
