import time

import numpy as np
import pytest

from conftest import random_volume, rel_err
from refmoco.nufft import (
    BandLimitError,
    ComplexVolume3D,
    InvalidInputError,
    NonUniformPoints,
    NufftConfig,
    fft3_centered,
    grid_kpoints,
    ifft3_centered,
    nufft_type2,
    nufft_type2_adjoint,
)
from refmoco.geometry import voxel_positions


def direct_sum(vol, k, voxel=(1.0, 1.0, 1.0)):
    """Oracle: explicit sum over voxels of u(x) exp(-i k.x)."""
    pos = voxel_positions(vol.shape, voxel)
    x = np.stack(np.meshgrid(*pos, indexing="ij"), axis=-1).reshape(-1, 3)
    return np.exp(-1j * k @ x.T) @ vol.reshape(-1)


def test_matches_direct_summation(rng):
    vol = random_volume(rng, (16, 16, 16))
    k = rng.uniform(-np.pi, np.pi, (500, 3))
    t0 = time.perf_counter()
    got = nufft_type2(vol, k)
    assert rel_err(got, direct_sum(vol, k)) < 1e-5
    assert time.perf_counter() - t0 < 10


def test_anisotropic_voxels_and_odd_dims(rng):
    vol = random_volume(rng, (9, 12, 7))
    voxel = (1.5, 0.8, 2.0)
    k = rng.uniform(-np.pi, np.pi, (200, 3)) / np.asarray(voxel)
    got = nufft_type2(ComplexVolume3D(vol, voxel), NonUniformPoints(k, voxel))
    assert rel_err(got, direct_sum(vol, k, voxel)) < 1e-5


def test_adjoint_dot_product(rng):
    dims = (16, 16, 16)
    x = random_volume(rng, dims)
    k = rng.uniform(-np.pi, np.pi, (500, 3))
    y = rng.standard_normal(500) + 1j * rng.standard_normal(500)
    lhs = np.vdot(y, nufft_type2(x, k))
    rhs = np.vdot(nufft_type2_adjoint(y, k, dims), x)
    assert abs(lhs - rhs) / abs(lhs) < 1e-6


def test_grid_points_reproduce_fft(rng):
    vol = random_volume(rng, (8, 10, 6))
    k = grid_kpoints(vol.shape).reshape(-1, 3)
    got = nufft_type2(vol, k).reshape(vol.shape) / np.sqrt(vol.size)
    assert rel_err(got, fft3_centered(vol)) < 1e-6


def test_delta_at_origin_is_flat(rng):
    vol = np.zeros((8, 8, 8), dtype=complex)
    vol[4, 4, 4] = 1
    k = rng.uniform(-np.pi, np.pi, (50, 3))
    np.testing.assert_allclose(nufft_type2(vol, k), 1.0, atol=1e-6)


def test_centered_fft_is_unitary_and_inverse(rng):
    vol = random_volume(rng, (6, 7, 8))
    f = fft3_centered(vol)
    assert np.linalg.norm(f) == pytest.approx(np.linalg.norm(vol), rel=1e-12)
    assert rel_err(ifft3_centered(f), vol) < 1e-13


def test_empty_point_set():
    vol = np.ones((4, 4, 4), dtype=complex)
    assert nufft_type2(vol, np.zeros((0, 3))).shape == (0,)


def test_out_of_band_point_rejected():
    with pytest.raises(BandLimitError):
        nufft_type2(np.ones((4, 4, 4)), [[3.5, 0, 0]])


def test_invalid_inputs():
    with pytest.raises(InvalidInputError):
        nufft_type2(np.full((4, 4, 4), np.nan), [[0, 0, 0]])
    with pytest.raises(InvalidInputError):
        ComplexVolume3D(np.ones((4, 4)))
    with pytest.raises(InvalidInputError):
        nufft_type2_adjoint(np.ones(3), np.zeros((2, 3)), (4, 4, 4))
    with pytest.raises(ValueError):
        NufftConfig(oversampling=1.0)


def test_adjoint_of_dc_sample_is_constant():
    out = nufft_type2_adjoint(np.ones(1), np.zeros((1, 3)), (8, 8, 8))
    # direct adjoint sum: exp(+i 0 . x) = 1 at every voxel
    assert np.abs(out - 1).max() < 1e-5
