import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from flowsr.errors import DimensionError, ValidationError
from flowsr.volume import (
    MagnitudeVolume,
    Region,
    VelocityVolume,
    decompose_regions,
    rotate_field,
    rotate_scalar,
    rotate_vectors,
    rotation_matrix,
)

NEIGHBOURS = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]


def erosion_oracle(mask):
    nz, ny, nx = mask.shape
    out = np.zeros_like(mask, dtype=np.uint8)
    for z, y, x in itertools.product(range(nz), range(ny), range(nx)):
        if not mask[z, y, x]:
            continue
        core = True
        for dz, dy, dx in NEIGHBOURS:
            a, b, c = z + dz, y + dy, x + dx
            if not (0 <= a < nz and 0 <= b < ny and 0 <= c < nx) or not mask[a, b, c]:
                core = False
        out[z, y, x] = 2 if core else 1
    return out


def rotation_oracle(field, axis, angle):
    """Index-loop rotation of a (z, y, x, 3) field about the grid centre."""
    n = field.shape[0]
    R = rotation_matrix(axis, angle)
    Rinv = R.T
    c = (n - 1) / 2
    out = np.empty_like(field)
    for z, y, x in itertools.product(range(n), repeat=3):
        q = np.array([x - c, y - c, z - c])
        p = Rinv @ q + c
        sx, sy, sz = (int(round(v)) for v in p)
        out[z, y, x] = R @ field[sz, sy, sx]
    return out


def test_region_labels_match_bruteforce(rng):
    for _ in range(5):
        mask = rng.random((6, 7, 8)) < 0.7
        assert np.array_equal(decompose_regions(mask), erosion_oracle(mask))


@settings(max_examples=40, deadline=None)
@given(arrays(bool, st.tuples(*[st.integers(3, 7)] * 3)))
def test_region_partition_property(mask):
    labels = decompose_regions(mask)
    assert np.array_equal(labels != Region.NONFLUID, mask)
    assert np.array_equal(labels, erosion_oracle(mask))


def test_region_examples():
    full = np.ones((5, 5, 5), bool)
    labels = decompose_regions(full)
    assert (labels == Region.CORE).sum() == 27
    assert (labels == Region.BOUNDARY).sum() == 125 - 27
    single = np.zeros((3, 3, 3), bool)
    single[1, 1, 1] = True
    assert decompose_regions(single)[1, 1, 1] == Region.BOUNDARY
    assert not decompose_regions(np.zeros((4, 4, 4), bool)).any()


def test_region_small_dims_rejected():
    with pytest.raises(DimensionError):
        decompose_regions(np.ones((2, 5, 5), bool))


def test_rotation_matrix_convention():
    assert np.array_equal(rotation_matrix("Z", 90) @ [1, 0, 0], [0, 1, 0])
    assert np.array_equal(rotation_matrix("X", 90) @ [0, 1, 0], [0, 0, 1])
    assert np.array_equal(rotation_matrix("Y", 90) @ [0, 0, 1], [1, 0, 0])
    for axis in "XYZ":
        r = rotation_matrix(axis, 90)
        assert np.array_equal(r @ r, rotation_matrix(axis, 180))
        assert np.array_equal(r @ r @ r, rotation_matrix(axis, 270))
        assert round(np.linalg.det(r)) == 1
    with pytest.raises(ValidationError):
        rotation_matrix("Z", 45)


@pytest.mark.parametrize("axis,angle", [(a, g) for a in "XYZ" for g in (90, 180, 270)])
def test_rotation_matches_index_oracle(axis, angle, rng):
    for n in (4, 5):
        field = rng.normal(size=(n, n, n, 3))
        assert np.array_equal(rotate_vectors(field, axis, angle), rotation_oracle(field, axis, angle))


@settings(max_examples=30, deadline=None)
@given(st.sampled_from("XYZ"), st.sampled_from([90, 180, 270]), st.integers(0, 2**32 - 1))
def test_rotation_preserves_norms_and_inverts(axis, angle, seed):
    field = np.random.default_rng(seed).normal(size=(2, 4, 4, 4, 3))
    out = rotate_vectors(field, axis, angle)
    # components are only permuted and negated, so per-voxel |component| multisets survive exactly
    key = lambda a: np.sort(np.sort(np.abs(a), axis=-1).reshape(-1, 3), axis=0)  # noqa: E731
    assert np.array_equal(key(out), key(field))
    np.testing.assert_allclose(np.linalg.norm(out, axis=-1).sum(), np.linalg.norm(field, axis=-1).sum(), rtol=1e-14)
    back = rotate_vectors(out, axis, 360 - angle)
    assert np.array_equal(back, field)
    assert np.array_equal(rotate_vectors(rotate_vectors(field, axis, 180), axis, 180), field)


def test_rotate_scalar_consistent_with_vectors(rng):
    s = rng.normal(size=(5, 5, 5))
    field = np.repeat(s[..., None], 3, axis=-1)
    rotated = rotate_vectors(field, "Y", 90)
    assert np.array_equal(np.abs(rotated[..., 0]), np.abs(rotate_scalar(s, "Y", 90)))


def test_rotate_non_cubic_rejected():
    with pytest.raises(DimensionError):
        rotate_vectors(np.zeros((4, 4, 5, 3)), "Z", 90)


def test_velocity_volume_validation():
    v = VelocityVolume(np.zeros((2, 3, 4, 5, 3)), spacing=0.5)
    assert v.dims == (5, 4, 3) and v.nt == 2
    bad = np.zeros((1, 2, 2, 2, 3))
    bad[0, 0, 0, 0, 0] = np.nan
    with pytest.raises(ValidationError):
        VelocityVolume(bad)
    with pytest.raises(DimensionError):
        VelocityVolume(np.zeros((2, 2, 2, 3)))
    with pytest.raises(ValidationError):
        MagnitudeVolume(-np.ones((2, 2, 2)))
    r = rotate_field(VelocityVolume(np.ones((1, 3, 3, 3, 3))), "Z", 90)
    assert np.array_equal(r.data[..., 0], -np.ones((1, 3, 3, 3)))
