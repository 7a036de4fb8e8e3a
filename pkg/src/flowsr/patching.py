"""Training patch extraction, rotation augmentation and inference tiling."""

from __future__ import annotations

from dataclasses import dataclass, replace
from itertools import product

import numpy as np

from .errors import DimensionError, InfeasibleError, ValidationError
from .volume import Region, decompose_regions, rotate_scalar, rotate_vectors

__all__ = [
    "LR_PATCH",
    "HR_PATCH",
    "STRIDE",
    "MIN_FLUID_FRACTION",
    "PatchPair",
    "TilePlan",
    "fluid_fraction_ok",
    "extract_pairs",
    "augment",
    "AUGMENT_ROTATIONS",
    "plan_tiles",
    "stitch",
]

LR_PATCH = 12
HR_PATCH = 24
STRIDE = 8
MIN_FLUID_FRACTION = 0.05
MAX_REJECTIONS = 10_000

# identity first, then 3 axes x 3 angles
AUGMENT_ROTATIONS = [None] + [(axis, angle) for axis in "XYZ" for angle in (90, 180, 270)]


@dataclass(frozen=True)
class PatchPair:
    """Aligned HR/LR velocity patches. ``origin`` is ``(t, z, y, x)`` in LR voxels."""

    x_hr: np.ndarray
    x_lr: np.ndarray
    origin: tuple
    labels_hr: np.ndarray
    rotation: tuple = None

    @property
    def mask_hr(self):
        return self.labels_hr != Region.NONFLUID

    @property
    def hr_origin(self):
        t, z, y, x = self.origin
        return (t, 2 * z, 2 * y, 2 * x)


def fluid_fraction_ok(n_fluid, n_total=HR_PATCH**3):
    return n_fluid >= MIN_FLUID_FRACTION * n_total


def extract_pairs(v_hr, v_lr, mask, count, rng, labels=None):
    """Sample ``count`` patch pairs at random LR origins across all frames.

    Candidates whose HR patch has less than 5% fluid voxels are rejected; after
    10,000 rejections :class:`InfeasibleError` is raised. Region labels are
    computed on the full mask and then cropped, so boundary voxels reflect the
    true vessel wall rather than patch edges.
    """
    hr = getattr(v_hr, "data", v_hr)
    lr = getattr(v_lr, "data", v_lr)
    mask = np.asarray(mask, dtype=bool)
    if count < 1:
        raise ValidationError("count must be >= 1")
    if hr.shape[0] != lr.shape[0] or tuple(hr.shape[1:4]) != tuple(2 * n for n in lr.shape[1:4]):
        raise DimensionError(f"HR grid {hr.shape[:4]} is not twice the LR grid {lr.shape[:4]}")
    if mask.shape != hr.shape[1:4]:
        raise DimensionError("mask does not match the HR grid")
    if min(lr.shape[1:4]) < LR_PATCH:
        raise DimensionError(f"LR volume smaller than a {LR_PATCH}^3 patch")
    if labels is None:
        labels = decompose_regions(mask)

    nt = lr.shape[0]
    highs = [n - LR_PATCH + 1 for n in lr.shape[1:4]]
    pairs = []
    rejections = 0
    while len(pairs) < count:
        t = int(rng.integers(nt))
        z, y, x = (int(rng.integers(h)) for h in highs)
        hz, hy, hx = 2 * z, 2 * y, 2 * x
        hr_win = (slice(hz, hz + HR_PATCH), slice(hy, hy + HR_PATCH), slice(hx, hx + HR_PATCH))
        if not fluid_fraction_ok(int(mask[hr_win].sum())):
            rejections += 1
            if rejections >= MAX_REJECTIONS:
                raise InfeasibleError(
                    f"no patch with >= {MIN_FLUID_FRACTION:.0%} fluid after {MAX_REJECTIONS} rejections"
                )
            continue
        lr_win = (slice(z, z + LR_PATCH), slice(y, y + LR_PATCH), slice(x, x + LR_PATCH))
        pairs.append(
            PatchPair(
                x_hr=np.array(hr[t][hr_win]),
                x_lr=np.array(lr[t][lr_win]),
                origin=(t, z, y, x),
                labels_hr=np.array(labels[hr_win]),
            )
        )
    return pairs


def _rotate_pair(pair, axis, angle):
    return replace(
        pair,
        x_hr=rotate_vectors(pair.x_hr, axis, angle),
        x_lr=rotate_vectors(pair.x_lr, axis, angle),
        labels_hr=rotate_scalar(pair.labels_hr, axis, angle),
        rotation=(axis, angle),
    )


def augment(pair):
    """Original pair followed by the 9 single-axis quarter-turn rotations."""
    out = []
    for rot in AUGMENT_ROTATIONS:
        out.append(pair if rot is None else _rotate_pair(pair, *rot))
    return out


@dataclass(frozen=True)
class TilePlan:
    """LR patch origins and the HR window each tile contributes to the output.

    ``windows[i]`` is ``((z0, z1), (y0, y1), (x0, x1))`` in output HR voxels.
    """

    lr_shape: tuple
    origins: list
    windows: list

    @property
    def hr_shape(self):
        return tuple(2 * n for n in self.lr_shape)

    def __len__(self):
        return len(self.origins)


def _axis_plan(n):
    starts = list(range(0, n - LR_PATCH + 1, STRIDE))
    if starts[-1] + LR_PATCH < n:
        starts.append(n - LR_PATCH)
    # boundary between consecutive tiles sits at the end of the earlier tile's central window
    cuts = [0] + [2 * s + HR_PATCH - (HR_PATCH - 2 * STRIDE) // 2 for s in starts[:-1]] + [2 * n]
    return starts, [(cuts[i], cuts[i + 1]) for i in range(len(starts))]


def plan_tiles(lr_shape):
    """Tile an LR grid ``(nz, ny, nx)`` with 12^3 patches at stride 8.

    Each prediction keeps its central 16^3 HR window; tiles touching a face keep
    everything up to that face, and the last tile per axis is clamped to the
    edge, so the windows partition the HR output.
    """
    lr_shape = tuple(int(n) for n in lr_shape)
    if len(lr_shape) != 3 or min(lr_shape) < LR_PATCH:
        raise DimensionError(f"every LR dim must be >= {LR_PATCH}, got {lr_shape}")
    per_axis = [_axis_plan(n) for n in lr_shape]
    origins, windows = [], []
    for (sz, wz), (sy, wy), (sx, wx) in product(*[list(zip(s, w)) for s, w in per_axis]):
        origins.append((sz, sy, sx))
        windows.append((wz, wy, wx))
    return TilePlan(lr_shape, origins, windows)


def lr_tiles(plan, lr_frame):
    """Cut the LR patches named by ``plan`` out of a ``(nz, ny, nx, 3)`` frame."""
    return [
        lr_frame[z : z + LR_PATCH, y : y + LR_PATCH, x : x + LR_PATCH]
        for z, y, x in plan.origins
    ]


def stitch(plan, tile_outputs, return_coverage=False):
    """Assemble per-tile 24^3 predictions into the full HR frame ``(nz, ny, nx, 3)``."""
    if len(tile_outputs) != len(plan) or any(t is None for t in tile_outputs):
        raise ValidationError(f"expected {len(plan)} tile outputs, got {len(tile_outputs)}")
    out = np.zeros(plan.hr_shape + (3,))
    coverage = np.zeros(plan.hr_shape, dtype=np.int32)
    for origin, window, tile in zip(plan.origins, plan.windows, tile_outputs):
        tile = np.asarray(tile)
        if tile.shape != (HR_PATCH,) * 3 + (3,):
            raise DimensionError(f"tile output must be (24, 24, 24, 3), got {tile.shape}")
        dst = tuple(slice(a, b) for a, b in window)
        src = tuple(slice(a - 2 * o, b - 2 * o) for (a, b), o in zip(window, origin))
        out[dst] = tile[src]
        coverage[dst] += 1
    if return_coverage:
        return out, coverage
    return out
