import numpy as np
import pytest

from conftest import random_volume, rel_err
from refmoco.forward import KSpaceData, misfit, zero_filled_reconstruction
from refmoco.geometry import InvalidParameterError, MotionTrace
from refmoco.metrics import psnr
from refmoco.nufft import InvalidInputError, fft3_centered
from refmoco.optimizer import (
    DivergenceError,
    SolverConfig,
    SolverState,
    downscale_problem,
    downscale_volume,
    estimate_lipschitz,
    palm_iteration,
    run_correction,
    surviving_lines,
    upscale_solution,
    upscale_volume,
)
from refmoco.regularization import GuideField, time_interpolation_matrix, tv_value
from refmoco.simulation import (
    head_phantom_spec,
    make_motion_script,
    make_phantom,
    make_sampling_pattern,
    simulate_acquisition,
)


@pytest.fixture(scope="module")
def small_problem():
    dims = (16, 16, 16)
    ref, truth = make_phantom(head_phantom_spec(dims))
    pat = make_sampling_pattern(dims, "randomized", 2, seed=1)
    ms = make_motion_script(pat.n_t, 1, 1.0, 2.0, seed=2)
    data = simulate_acquisition(truth, ms.trace, pat)
    return ref, truth, pat, ms, data


def test_config_validation_and_round_trip():
    cfg = SolverConfig(knots=(4, 8, None), epsilon=3.0)
    assert SolverConfig.from_dict(cfg.to_dict()) == cfg
    per_scale = SolverConfig(epsilon_factor=(0.3, 0.2, 0.1), time_basis="linear")
    assert SolverConfig.from_dict(per_scale.to_dict()) == per_scale
    assert SolverConfig(epsilon_factor=0.5).epsilon_factor == (0.5, 0.5, 0.5)
    assert SolverConfig().lambda_schedule == ((4.0, 2.0, 1.0), (4.0, 2.0, 1.0), (4.0,))
    flat = SolverConfig(scales=(2, 1), knots=(4, 8), lambda_schedule=(2, 1))
    assert flat.lambda_schedule == ((2.0, 1.0), (2.0, 1.0))
    nested = SolverConfig(scales=(2, 1), knots=(4, 8), lambda_schedule=[[3, 1], [2]])
    assert SolverConfig.from_dict(nested.to_dict()) == nested
    with pytest.raises(InvalidParameterError):
        SolverConfig(lambda_schedule=[[2, 1], [1]])
    with pytest.raises(InvalidParameterError):
        SolverConfig(lambda_schedule=(2, 0))
    with pytest.raises(InvalidParameterError):
        SolverConfig(epsilon_factor=(0.2, 0.2))
    with pytest.raises(InvalidParameterError):
        SolverConfig(time_basis="spline")
    with pytest.raises(InvalidParameterError):
        SolverConfig(scales=(1, 2))
    with pytest.raises(InvalidParameterError):
        SolverConfig(iters_per_stage=0)
    with pytest.raises(InvalidParameterError):
        SolverConfig(step_u=-1.0)
    with pytest.raises(InvalidParameterError):
        SolverConfig(mode="other")
    with pytest.raises(InvalidParameterError):
        SolverConfig.from_dict({"bogus": 1})


def test_downscale_identity_for_factor_one(small_problem):
    _, _, pat, ms, data = small_problem
    trace = ms.trace
    d, p, t = downscale_problem(data, pat, trace, 1)
    assert d is data and p is pat and t is trace


def test_downscale_full_pattern_keeps_central_block():
    pat = make_sampling_pattern((8, 8, 8), "full")
    d = KSpaceData(np.ones((pat.n_t, pat.n_r)), pat)
    cd, cp, ct = downscale_problem(d, pat, MotionTrace.identity(pat.n_t), 2)
    assert cp.n_t == 16 and cp.dims == (4, 4, 4)
    assert sorted(map(tuple, cp.pe_coords.tolist())) == [(a, b) for a in range(-2, 2) for b in range(-2, 2)]
    assert cd.samples.shape == (16, 4)


def test_surviving_lines_filter_oracle():
    pat = make_sampling_pattern((16, 16, 16), "randomized", 2, seed=5)
    expected = [t for t, (a, b) in enumerate(pat.pe_coords.tolist()) if -4 <= a < 4 and -4 <= b < 4]
    assert surviving_lines(pat, 2).tolist() == expected


def test_downscale_matches_crop_of_coarse_volume(rng):
    # data of u on the fine grid, cropped, equal the data of the downscaled u on the coarse grid
    pat = make_sampling_pattern((16, 16, 16), "randomized", 2, seed=5)
    u = random_volume(rng, pat.dims)
    d = KSpaceData(fft3_centered(u)[pat.grid_indices()], pat)
    cd, cp, _ = downscale_problem(d, pat, MotionTrace.identity(pat.n_t), 2)
    expected = fft3_centered(downscale_volume(u, 2))[cp.grid_indices()]
    assert rel_err(cd.samples, expected) < 1e-12


def test_upscale_then_crop_recovers(rng):
    u = random_volume(rng, (4, 4, 4))
    assert rel_err(downscale_volume(upscale_volume(u, (8, 8, 8)), 2), u) < 1e-12
    # constant images keep their intensity
    np.testing.assert_allclose(upscale_volume(np.full((4, 4, 4), 2.0), (8, 8, 8)), 2.0, atol=1e-12)
    with pytest.raises(InvalidParameterError):
        upscale_volume(u, (8, 8, 12))


def test_upscale_trace_index_mapping():
    pat = make_sampling_pattern((16, 16, 16), "randomized", 2, seed=5)
    keep = surviving_lines(pat, 2)
    coarse = np.zeros((keep.size, 6))
    coarse[keep.size // 2:, 0] = 1.0
    _, fine = upscale_solution(np.zeros((8, 8, 8)), MotionTrace(coarse), (16, 16, 16), pat)
    # oracle: each fine line takes the value of the last kept line at or before it
    for t in range(pat.n_t):
        prior = keep[keep <= t]
        src = np.searchsorted(keep, prior[-1]) if prior.size else 0
        assert fine.values[t, 0] == coarse[src, 0]
    const = MotionTrace(np.tile([0.1, 0, 0, 0, 0, 0.02], (keep.size, 1)))
    _, fc = upscale_solution(np.zeros((8, 8, 8)), const, (16, 16, 16), pat)
    assert np.all(fc.values == const.values[0])


def test_lipschitz_matches_full_sampling():
    # F is a row subset of a unitary transform, so ||F^H F|| = 1
    pat = make_sampling_pattern((8, 8, 8), "randomized", 2, seed=0)
    assert estimate_lipschitz(pat, iters=30) == pytest.approx(1.0, rel=1e-3)


def make_state(u, n_t, eps, step):
    return SolverState(np.asarray(u, dtype=complex), MotionTrace.identity(n_t), eps, step)


def test_single_step_descends_toward_adjoint(small_problem):
    ref, truth, pat, _, _ = small_problem
    data = simulate_acquisition(truth, MotionTrace.identity(pat.n_t), pat)
    guide = GuideField.zeros(pat.dims)
    cfg = SolverConfig()
    state = make_state(np.zeros(pat.dims), pat.n_t, 1e6, 0.9)
    f0 = misfit(state.u, state.trace, data)
    palm_iteration(state, data, pat, guide, cfg)
    zf = zero_filled_reconstruction(data)
    assert state.misfit_history[-1] < f0
    # from zero, one unconstrained step is exactly alpha * F^H d
    assert rel_err(state.u, 0.9 * zf) < 1e-6


def test_fixed_point_at_solution(small_problem):
    _, truth, pat, ms, data = small_problem
    guide = GuideField.zeros(pat.dims)
    eps = tv_value(truth) * 1.01
    state = SolverState(truth.astype(complex), ms.trace, eps, 0.9)
    palm_iteration(state, data, pat, guide, SolverConfig())
    assert np.abs(state.u - truth).max() < 1e-6
    assert np.abs(state.trace.values - ms.trace.values).max() < 1e-6


def test_large_step_backtracks(small_problem):
    _, truth, pat, ms, data = small_problem
    lip = estimate_lipschitz(pat)
    state = make_state(np.zeros(pat.dims), pat.n_t, 1e6, 5.0 / lip)
    palm_iteration(state, data, pat, GuideField.zeros(pat.dims), SolverConfig())
    assert state.backtracks_u >= 1
    assert state.misfit_history[-1] <= misfit(np.zeros(pat.dims), state.trace, data)


def test_non_finite_data_diverges(small_problem):
    _, _, pat, _, data = small_problem
    bad = KSpaceData(np.full_like(data.samples, np.inf), pat)
    state = make_state(np.zeros(pat.dims), pat.n_t, 1.0, 0.5)
    with pytest.raises(DivergenceError) as err:
        palm_iteration(state, bad, pat, GuideField.zeros(pat.dims), SolverConfig())
    assert err.value.state is state


@pytest.fixture(scope="module")
def small_run(small_problem):
    ref, truth, pat, ms, data = small_problem
    cfg = SolverConfig(scales=(2, 1), lambda_schedule=(2.0, 1.0), iters_per_stage=6, knots=(4, 8))
    return run_correction(data, pat, ref, cfg)


def test_run_correction_contracts(small_problem, small_run):
    ref, truth, pat, ms, data = small_problem
    vol, trace, report = small_run
    assert vol.data.shape == pat.dims and len(trace) == pat.n_t
    assert len(report["stages"]) == 4
    for st in report["stages"]:
        hist = np.asarray(st["misfit"])
        assert np.all(np.isfinite(hist))
        assert np.all(hist[1:] <= hist[:-1] * (1 + 1e-6))
        assert st["feasibility"] <= 1 + 1e-3
    # epsilon relaxes within a scale
    eps = [st["epsilon"] for st in report["stages"] if st["scale"] == 1]
    assert eps[0] < eps[1]
    assert report["final_misfit"] < misfit(np.zeros(pat.dims), MotionTrace.identity(pat.n_t), data)
    zf = zero_filled_reconstruction(data)
    assert psnr(vol, truth) > psnr(zf, truth)
    # the final trace lies entirely in the span of the finest knot basis
    b = time_interpolation_matrix(8, pat.n_t).toarray()
    coef = np.linalg.lstsq(b, trace.values, rcond=None)[0]
    assert np.abs(b @ coef - trace.values).max() < 1e-10


def test_run_correction_deterministic(small_problem, small_run):
    ref, truth, pat, ms, data = small_problem
    cfg = SolverConfig(scales=(2, 1), lambda_schedule=(2.0, 1.0), iters_per_stage=6, knots=(4, 8))
    vol, trace, report = run_correction(data, pat, ref, cfg)
    assert np.array_equal(vol.data, small_run[0].data)
    assert np.array_equal(trace.values, small_run[1].values)
    assert report["misfit_history"] == small_run[2]["misfit_history"]


def test_run_correction_input_errors(small_problem):
    ref, truth, pat, ms, data = small_problem
    with pytest.raises(InvalidInputError):
        run_correction(data, pat, None)
    other = make_sampling_pattern(pat.dims, "randomized", 2, seed=9)
    with pytest.raises(InvalidInputError):
        run_correction(data, other, ref)
    with pytest.raises(InvalidParameterError):
        run_correction(data, pat, ref, SolverConfig(scales=(3, 1), knots=(4, 8)))


def test_plain_tv_needs_no_reference(small_problem):
    _, truth, pat, ms, data = small_problem
    cfg = SolverConfig(scales=(1,), lambda_schedule=(1.0,), iters_per_stage=2, knots=(4,), mode="plain-tv")
    vol, trace, report = run_correction(data, pat, None, cfg)
    assert report["stages"][0]["feasibility"] <= 1 + 1e-3
