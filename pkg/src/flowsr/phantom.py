"""Analytic straight-tube phantom standing in for CFD velocity input."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .volume import MagnitudeVolume, VelocityVolume

__all__ = ["PhantomSpec", "default_waveform", "make_phantom", "peak_systole_index"]


def default_waveform(nt, baseline=0.3):
    """Smooth single-pulse cardiac waveform scaled so its maximum is exactly 1."""
    t = np.arange(nt) / max(nt, 1)
    pulse = np.sin(np.pi * np.clip(t / 0.4, 0.0, 1.0)) ** 2
    w = baseline + (1.0 - baseline) * pulse
    return tuple(float(x) for x in w / w.max())


@dataclass(frozen=True)
class PhantomSpec:
    """Straight cylindrical vessel with a Poiseuille profile scaled per frame.

    ``offset`` shifts the centreline (mm) within the plane transverse to
    ``tube_axis``, relative to the volume centre, as ``(first, second)`` of the
    two remaining axes in x, y, z order.
    """

    dims: tuple = (32, 32, 32)
    nt: int = 8
    spacing: float = 0.5
    dt: float = 10.0
    tube_radius: float = 4.0
    tube_axis: str = "Z"
    offset: tuple = (0.0, 0.0)
    v_peak: float = 1.0
    waveform: tuple = field(default=None)
    m_vessel: float = 100.0
    m_background: float = 20.0

    def __post_init__(self):
        if self.waveform is None:
            object.__setattr__(self, "waveform", default_waveform(self.nt))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "offset", tuple(float(o) for o in self.offset))
        object.__setattr__(self, "waveform", tuple(float(w) for w in self.waveform))
        object.__setattr__(self, "tube_axis", self.tube_axis.upper())
        self.validate()

    def validate(self):
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValidationError(f"dims must be three positive ints, got {self.dims}")
        if self.nt < 1 or not self.spacing > 0 or not self.dt > 0:
            raise ValidationError("nt, spacing and dt must be positive")
        if self.tube_axis not in ("X", "Y", "Z"):
            raise ValidationError(f"tube_axis must be X, Y or Z, got {self.tube_axis!r}")
        if not self.v_peak > 0:
            raise ValidationError("v_peak must be > 0")
        if not self.tube_radius > 0:
            raise ValidationError("tube_radius must be > 0")
        if len(self.waveform) != self.nt:
            raise ValidationError(f"waveform length {len(self.waveform)} != nt {self.nt}")
        w = np.asarray(self.waveform)
        if np.any(w < 0) or np.any(w > 1) or not np.any(w == 1.0):
            raise ValidationError("waveform entries must lie in [0, 1] with at least one equal to 1")
        if self.m_vessel < 0 or self.m_background < 0:
            raise ValidationError("magnitudes must be non-negative")
        if len(self.offset) != 2:
            raise ValidationError("offset must have two entries")
        # tube must fit inside the transverse extent
        for extent, off in zip(self._transverse_dims(), self.offset):
            half = extent * self.spacing / 2.0
            if abs(off) + self.tube_radius > half:
                raise ValidationError(
                    f"tube out of bounds: |offset| {abs(off)} + radius {self.tube_radius} > half extent {half}"
                )

    def _transverse_dims(self):
        axis = "XYZ".index(self.tube_axis)
        return [d for i, d in enumerate(self.dims) if i != axis]


def _centred_coords(n, spacing):
    return (np.arange(n) - (n - 1) / 2.0) * spacing


def make_phantom(spec):
    """Return ``(velocity, magnitude, mask)`` for a :class:`PhantomSpec`.

    A voxel is fluid when its centre lies strictly inside the tube radius.
    """
    nx, ny, nz = spec.dims
    z, y, x = np.meshgrid(
        _centred_coords(nz, spec.spacing),
        _centred_coords(ny, spec.spacing),
        _centred_coords(nx, spec.spacing),
        indexing="ij",
    )
    coords = {"X": x, "Y": y, "Z": z}
    axis = spec.tube_axis
    transverse = [coords[a] for a in "XYZ" if a != axis]
    r2 = (transverse[0] - spec.offset[0]) ** 2 + (transverse[1] - spec.offset[1]) ** 2
    R2 = spec.tube_radius**2
    mask = r2 < R2
    profile = np.where(mask, spec.v_peak * (1.0 - r2 / R2), 0.0)

    data = np.zeros((spec.nt, nz, ny, nx, 3))
    comp = "XYZ".index(axis)
    for t, w in enumerate(spec.waveform):
        data[t, ..., comp] = w * profile
    magnitude = np.where(mask, spec.m_vessel, spec.m_background)
    return (
        VelocityVolume(data, spec.spacing, spec.dt),
        MagnitudeVolume(magnitude),
        mask,
    )


def peak_systole_index(spec_or_waveform):
    """First frame index at which the waveform reaches its maximum."""
    waveform = getattr(spec_or_waveform, "waveform", spec_or_waveform)
    if len(waveform) == 0:
        raise ValidationError("waveform is empty")
    return int(np.argmax(np.asarray(waveform)))
