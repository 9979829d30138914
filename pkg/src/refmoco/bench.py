"""Benchmark matrix on the synthetic two-contrast phantom.

Every case simulates stepwise motion on a randomized accel-2 pattern,
runs the correction and scores image quality and trace recovery against
the known ground truth. Reports contain no timings, so two runs with the
same seed serialize identically.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .forward import zero_filled_reconstruction
from .geometry import MotionTrace, RigidParams, compose, invert
from .metrics import psnr, ssim
from .optimizer import SolverConfig, run_correction
from .simulation import (
    head_phantom_spec,
    make_motion_script,
    make_phantom,
    make_sampling_pattern,
    rigid_transform_volume,
    simulate_acquisition,
)


@dataclass(frozen=True)
class BenchCase:
    name: str
    poses: int
    mode: str = "guided"
    misregister: bool = False
    min_gain_db: float = 2.0


CASES = {
    "poses1": BenchCase("poses1", 1, min_gain_db=3.0),
    "poses2": BenchCase("poses2", 2),
    "poses5": BenchCase("poses5", 5),
    "poses5-plain-tv": BenchCase("poses5-plain-tv", 5, mode="plain-tv"),
    "poses1-misregistered": BenchCase("poses1-misregistered", 1, misregister=True, min_gain_db=3.0),
}

MAX_TAU_VOXELS = 3.0
MAX_PHI_DEG = 5.0
TAU_TOL_VOXELS = 0.5
PHI_TOL_DEG = 0.5


def misregistration(voxel: float = 1.0) -> RigidParams:
    """Fixed reference offset: 2 voxels along the diagonal and 2 degrees in the axial plane."""
    return RigidParams.from_degrees(np.full(3, 2.0 * voxel / np.sqrt(3.0)), (2.0, 0.0, 0.0))


def transition_mask(n_t: int, transitions, half_width: int | None = None) -> np.ndarray:
    """True for lines more than ``half_width`` lines away from every transition."""
    if half_width is None:
        half_width = max(1, n_t // 64)
    mask = np.ones(n_t, dtype=bool)
    for t in transitions:
        mask[max(0, t - half_width):t + half_width] = False
    return mask


def trace_errors(est: MotionTrace, truth: MotionTrace, mask, voxel: float = 1.0) -> dict:
    diff = est.values - truth.values
    diff[:, 3:] = (diff[:, 3:] + np.pi) % (2 * np.pi) - np.pi
    sel = diff[mask]
    return {
        "max_tau_err_voxels": float(np.abs(sel[:, :3]).max() / voxel),
        "max_phi_err_deg": float(np.rad2deg(np.abs(sel[:, 3:]).max())),
        "median_tau_err_voxels": float(np.median(np.abs(sel[:, :3])) / voxel),
        "median_phi_err_deg": float(np.rad2deg(np.median(np.abs(sel[:, 3:])))),
        "lines_scored": int(mask.sum()),
    }


def run_case(case: BenchCase, size: int = 64, seed: int = 0, cfg: SolverConfig | None = None) -> dict:
    dims = (size,) * 3
    voxel = 1.0
    ref, truth = make_phantom(head_phantom_spec(dims))
    pattern = make_sampling_pattern(dims, "randomized", 2, seed=seed + 1)
    script = make_motion_script(pattern.n_t, case.poses, MAX_TAU_VOXELS * voxel, MAX_PHI_DEG, seed=seed + 2)
    data = simulate_acquisition(truth, script.trace, pattern, 0.0, seed=seed + 3)
    zf = zero_filled_reconstruction(data)

    cfg = cfg or SolverConfig()
    if cfg.mode != case.mode:
        cfg = SolverConfig.from_dict({**cfg.to_dict(), "mode": case.mode})
    expected = script.trace
    target = truth
    reference = ref
    if case.misregister:
        offset = misregistration(voxel)
        reference = rigid_transform_volume(ref, offset)
        # the solution lives in the reference frame
        target = rigid_transform_volume(truth, offset)
        inv = invert(offset)
        expected = MotionTrace.from_params([compose(inv, p) for p in script.trace.params])
    vol, est, report = run_correction(data, pattern, reference, cfg)

    mask = transition_mask(pattern.n_t, script.transitions)
    errors = trace_errors(est, expected, mask, voxel)
    out = {
        "poses": case.poses,
        "mode": case.mode,
        "misregistered": case.misregister,
        "transitions": list(script.transitions),
        "corrupted": {"psnr": psnr(zf, truth), "ssim": ssim(zf, truth)},
        "corrected": {"psnr": psnr(vol, target), "ssim": ssim(vol, target)},
        "trace": errors,
        "final_misfit": report["final_misfit"],
    }
    out["gain_db"] = out["corrected"]["psnr"] - out["corrupted"]["psnr"]
    out["checks"] = {
        "psnr_gain": out["gain_db"] >= case.min_gain_db,
        "ssim_improved": out["corrected"]["ssim"] > out["corrupted"]["ssim"],
        "tau": errors["max_tau_err_voxels"] <= TAU_TOL_VOXELS,
        "phi": errors["max_phi_err_deg"] <= PHI_TOL_DEG,
    }
    out["passed"] = all(out["checks"].values())
    out["_timings"] = report["timings"]
    return out


def run_bench(size: int = 64, seed: int = 0, cfg: SolverConfig | None = None, cases=None):
    """Run the selected cases; returns ``(report, timings)``."""
    names = list(cases) if cases else list(CASES)
    unknown = [n for n in names if n not in CASES]
    if unknown:
        raise ValueError(f"unknown bench cases {unknown}")
    cfg = cfg or SolverConfig()
    results, timings = {}, {}
    for name in names:
        t0 = time.perf_counter()
        res = run_case(CASES[name], size, seed, cfg)
        timings[name] = {"seconds": time.perf_counter() - t0, "solver": res.pop("_timings")}
        results[name] = res
    report = {"size": size, "seed": seed, "solver": cfg.to_dict(), "cases": results}
    if "poses5" in results and "poses5-plain-tv" in results:
        margin = results["poses5"]["corrected"]["psnr"] - results["poses5-plain-tv"]["corrected"]["psnr"]
        report["guided_minus_plain_tv_db"] = margin
        report["guided_beats_plain_tv"] = margin >= 0.5
    return report, timings
