import numpy as np
import pytest

from conftest import random_volume, rel_err
from refmoco.forward import (
    KSpaceData,
    MotionOperator,
    SamplingPattern,
    grad_theta,
    grad_u,
    misfit,
    perturbed_fourier,
    perturbed_fourier_adjoint,
    zero_filled_reconstruction,
)
from refmoco.geometry import InvalidParameterError, MotionTrace, RigidParams
from refmoco.nufft import BandLimitError, InvalidInputError, fft3_centered
from refmoco.simulation import make_sampling_pattern


def smooth_volume(rng, n):
    """Band-limited random volume: random spectrum under a Gaussian envelope."""
    spec = random_volume(rng, (n, n, n))
    m = np.fft.fftshift(np.fft.fftfreq(n))
    env = np.exp(-(m[:, None, None] ** 2 + m[None, :, None] ** 2 + m[None, None, :] ** 2) / 0.02)
    from refmoco.nufft import ifft3_centered

    return ifft3_centered(spec * env)


def test_motion_free_reduces_to_fft(rng):
    pat = make_sampling_pattern((16, 16, 16), "full", 1)
    u = random_volume(rng, pat.dims)
    d = perturbed_fourier(u, MotionTrace.identity(pat.n_t), pat)
    expected = fft3_centered(u)[pat.grid_indices()]
    assert rel_err(d.samples, expected) < 1e-6


def test_pure_translation_is_phase_ramp(rng):
    pat = make_sampling_pattern((16, 16, 16), "full", 1)
    u = random_volume(rng, pat.dims)
    tau = np.array([1.3, -0.7, 2.1])
    trace = MotionTrace.from_params([RigidParams(tau, np.zeros(3))] * pat.n_t)
    d = perturbed_fourier(u, trace, pat)
    k = pat.kpoints()
    expected = np.exp(-1j * k @ tau) * fft3_centered(u)[pat.grid_indices()]
    assert rel_err(d.samples, expected) < 1e-6


def test_integer_translation_matches_circular_shift(rng):
    pat = make_sampling_pattern((12, 12, 12), "full", 1)
    u = random_volume(rng, pat.dims)
    trace = MotionTrace.from_params([RigidParams([2, 0, -1], np.zeros(3))] * pat.n_t)
    d = perturbed_fourier(u, trace, pat)
    shifted = np.roll(u, (2, 0, -1), axis=(0, 1, 2))
    assert rel_err(d.samples, fft3_centered(shifted)[pat.grid_indices()]) < 1e-6


def test_quarter_turn_matches_array_rotation(rng):
    # a rotation by 90 degrees in the xy plane permutes grid samples exactly
    n = 9
    pat = make_sampling_pattern((n, n, n), "full", 1)
    u = random_volume(rng, pat.dims)
    trace = MotionTrace.from_params([RigidParams(np.zeros(3), [np.pi / 2, 0, 0])] * pat.n_t)
    d = perturbed_fourier(u, trace, pat)
    # v(x, y) = u(R^T (x, y)) = u(y, -x)
    v = np.empty_like(u)
    c = n // 2
    for i in range(n):
        for j in range(n):
            v[i, j] = u[c + (j - c), c - (i - c)]
    assert rel_err(d.samples, fft3_centered(v)[pat.grid_indices()]) < 1e-6


def test_operator_adjoint(rng):
    pat = make_sampling_pattern((16, 16, 16), "randomized", 2, seed=3)
    vals = np.column_stack([rng.normal(size=(pat.n_t, 3)), rng.uniform(-0.1, 0.1, (pat.n_t, 3))])
    op = MotionOperator(pat, MotionTrace(vals))
    x = random_volume(rng, pat.dims)
    y = rng.standard_normal((pat.n_t, pat.n_r)) + 1j * rng.standard_normal((pat.n_t, pat.n_r))
    lhs = np.vdot(y, op.forward(x))
    rhs = np.vdot(op.adjoint(y), x)
    assert abs(lhs - rhs) / abs(lhs) < 1e-10
    assert rel_err(perturbed_fourier_adjoint(y, MotionTrace(vals), pat), op.adjoint(y)) < 1e-14


def fd_setup(rng, n=16):
    pat = make_sampling_pattern((n, n, n), "randomized", 2, seed=4)
    u = smooth_volume(rng, n)
    vals = np.column_stack([rng.uniform(-1, 1, (pat.n_t, 3)), rng.uniform(-0.05, 0.05, (pat.n_t, 3))])
    trace = MotionTrace(vals)
    other = MotionTrace(vals + np.r_[0.3, -0.2, 0.1, 0.02, -0.01, 0.015])
    data = perturbed_fourier(smooth_volume(rng, n), other, pat)
    return pat, u, trace, data


def test_grad_u_finite_differences(rng):
    pat, u, trace, data = fd_setup(rng)
    g = grad_u(u, trace, data)
    v = random_volume(rng, pat.dims)
    h = 1e-4
    fd = (misfit(u + h * v, trace, data) - misfit(u - h * v, trace, data)) / (2 * h)
    an = np.vdot(g, v).real
    assert abs(fd - an) / abs(an) < 1e-4


def test_grad_theta_finite_differences(rng):
    pat, u, trace, data = fd_setup(rng)
    g = grad_theta(u, trace, data)
    assert g.shape == (pat.n_t, 6)
    for j in range(6):
        d = rng.standard_normal(pat.n_t)
        h = 1e-4 if j < 3 else 1e-5
        step = np.zeros((pat.n_t, 6))
        step[:, j] = h * d
        fp = misfit(u, MotionTrace(trace.values + step), data)
        fm = misfit(u, MotionTrace(trace.values - step), data)
        fd = (fp - fm) / (2 * h)
        an = float(g[:, j] @ d)
        tol = 1e-4 if j < 3 else 1e-3
        assert abs(fd - an) / abs(an) < tol, (j, fd, an)


def test_misfit_zero_for_consistent_data(rng):
    pat, u, trace, _ = fd_setup(rng, 8)
    data = perturbed_fourier(u, trace, pat)
    assert misfit(u, trace, data) < 1e-20
    assert np.abs(grad_theta(u, trace, data)).max() < 1e-10


def test_band_limit_policy():
    pat = make_sampling_pattern((8, 8, 8), "full", 1)
    trace = MotionTrace.from_params([RigidParams(np.zeros(3), [np.pi / 4, 0, 0])] * pat.n_t)
    with pytest.raises(BandLimitError):
        MotionOperator(pat, trace, out_of_band="raise")
    op = MotionOperator(pat, trace)
    assert op.n_out_of_band > 0
    assert np.all(op.forward(np.ones(pat.dims))[~op.valid] == 0)


def test_validation_errors():
    pat = make_sampling_pattern((8, 8, 8), "full", 1)
    with pytest.raises(InvalidInputError):
        perturbed_fourier(np.ones((8, 8, 7)), MotionTrace.identity(pat.n_t), pat)
    with pytest.raises(InvalidInputError):
        perturbed_fourier(np.ones(pat.dims), MotionTrace.identity(pat.n_t - 1), pat)
    with pytest.raises(InvalidInputError):
        SamplingPattern((8, 8, 8), [[0, 0], [0, 0]])
    with pytest.raises(InvalidInputError):
        SamplingPattern((8, 8, 8), [[4, 0]])
    with pytest.raises(InvalidInputError):
        KSpaceData(np.zeros((3, 8)), pat)
    with pytest.raises(InvalidParameterError):
        MotionTrace(np.full((2, 6), np.nan))


def test_zero_filled_full_sampling_is_exact(rng):
    pat = make_sampling_pattern((8, 8, 8), "full", 1)
    u = random_volume(rng, pat.dims)
    d = KSpaceData(fft3_centered(u)[pat.grid_indices()], pat)
    assert rel_err(zero_filled_reconstruction(d), u) < 1e-12


def gaussian_blob(dims, center, sigma, params=None):
    """Analytic oracle: samples of a Gaussian moved by ``x -> R x + tau``."""
    from refmoco.geometry import apply_rigid_inverse, voxel_positions

    pos = np.stack(np.meshgrid(*voxel_positions(dims, (1.0, 1.0, 1.0)), indexing="ij"), axis=-1).reshape(-1, 3)
    if params is not None:
        pos = apply_rigid_inverse(params, pos)
    r2 = np.sum((pos - np.asarray(center)) ** 2, axis=1)
    return np.exp(-r2 / (2 * sigma**2)).reshape(dims)


def test_stepwise_motion_matches_image_domain_oracle():
    dims = (16, 16, 16)
    pat = make_sampling_pattern(dims, "full")
    center, sigma = (0.0, 0.0, 0.0), 1.5
    u = gaussian_blob(dims, center, sigma)
    pose = RigidParams([0.8, -0.6, 0.4], np.deg2rad([6.0, -4.0, 3.0]))
    half = pat.n_t // 2
    trace = MotionTrace.from_params([RigidParams()] * half + [pose] * (pat.n_t - half))
    got = perturbed_fourier(u, trace, pat).samples
    moved = gaussian_blob(dims, center, sigma, pose)
    expected = np.where(np.arange(pat.n_t)[:, None] < half,
                        fft3_centered(u)[pat.grid_indices()], fft3_centered(moved)[pat.grid_indices()])
    assert rel_err(got, expected) < 1e-3


def test_adjoint_reductions(rng):
    pat = make_sampling_pattern((8, 8, 8), "full")
    ident = MotionTrace.identity(pat.n_t)
    zero = perturbed_fourier_adjoint(np.zeros((pat.n_t, pat.n_r)), ident, pat)
    assert not np.any(zero)
    u = random_volume(rng, pat.dims)
    d = perturbed_fourier(u, ident, pat)
    # full sampling without motion: F^H F = I
    assert rel_err(perturbed_fourier_adjoint(d, ident, pat), u) < 1e-6
    ks = np.zeros(pat.dims, dtype=complex)
    ks[pat.grid_indices()] = d.samples
    from refmoco.nufft import ifft3_centered

    assert rel_err(perturbed_fourier_adjoint(d, ident, pat), ifft3_centered(ks)) < 1e-6


def test_linearity(rng):
    pat = make_sampling_pattern((8, 8, 8), "randomized", 2, seed=1)
    vals = np.column_stack([rng.normal(size=(pat.n_t, 3)), rng.uniform(-0.1, 0.1, (pat.n_t, 3))])
    op = MotionOperator(pat, MotionTrace(vals))
    a, b = random_volume(rng, pat.dims), random_volume(rng, pat.dims)
    assert rel_err(op.forward(2 * a - 3j * b), 2 * op.forward(a) - 3j * op.forward(b)) < 1e-12
