"""Alternating proximal minimization with grid and regularization continuation.

Each stage solves

    min_{u, theta}  0.5 * ||F_theta u - d||^2   s.t.  sgtv(u) <= epsilon

by alternating a projected gradient step on ``u`` with a linearized step on
``theta``. Stages run coarse to fine over grid divisors and, inside each
grid, from a tight to a relaxed ``epsilon``.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve

from .forward import KSpaceData, MotionOperator, SamplingPattern, zero_filled_reconstruction
from .geometry import InvalidParameterError, MotionTrace
from .nufft import ComplexVolume3D, InvalidInputError, NufftConfig, fft3_centered, ifft3_centered
from .regularization import (
    MODES,
    GuideField,
    build_guide,
    project_sgtv_ball,
    prox_motion_smoothness,
    sgtv_value,
    time_interpolation_matrix,
    time_segment_matrix,
)

log = logging.getLogger(__name__)

MONOTONE_TOL = 1e-6
DEFAULT_LAMBDAS = (4.0, 2.0, 1.0)


class DivergenceError(RuntimeError):
    def __init__(self, message: str, state: "SolverState | None" = None):
        super().__init__(message)
        self.state = state


@dataclass(frozen=True)
class SolverConfig:
    """Continuation schedule and step-size policy.

    ``knots[i]`` is the number of time knots used for the motion update at
    scale ``i`` (``None`` updates every line independently). With
    ``time_basis="constant"`` each knot is a contiguous segment of lines
    holding one pose; ``"linear"`` interpolates between uniform knots.
    ``epsilon`` fixes the final constraint radius; by default it is
    ``epsilon_factor`` times the structure-guided TV of the zero-filled
    reconstruction at each scale (one factor for all scales, or one per
    scale). Stage ``j`` of scale ``i`` uses ``epsilon / lambda_schedule[i][j]``.
    A flat ``lambda_schedule`` applies to every scale. The default relaxes
    ``(4, 2, 1)`` on the coarse scales and keeps only the tightest stage on
    the finest scale: there half of k-space is missing, and a looser ball
    lets the image absorb motion errors.
    """

    scales: tuple = (4, 2, 1)
    lambda_schedule: tuple | None = None
    iters_per_stage: int = 30
    step_u: float | str = "auto"
    step_theta: float | str = "auto"
    knots: tuple = (8, 32, 128)
    time_basis: str = "linear"
    mode: str = "guided"
    epsilon: float | None = None
    epsilon_factor: float | tuple = 0.2
    eta: float | None = None
    mu: float = 0.0
    inner_iters: int = 200
    inner_tol: float = 1e-4
    power_iters: int = 10
    safety: float = 0.9
    max_backtracks: int = 8
    damping: float = 1e-3
    early_exit: bool = False
    stagnation_tol: float = 1e-7
    seed: int = 0
    nufft: NufftConfig = field(default_factory=NufftConfig)

    def __post_init__(self):
        scales = tuple(int(s) for s in self.scales)
        object.__setattr__(self, "scales", scales)
        lam = self.lambda_schedule
        if lam is None:
            lam = (DEFAULT_LAMBDAS,) * (len(scales) - 1) + (DEFAULT_LAMBDAS[:1],)
        elif all(np.ndim(x) == 0 for x in lam):
            lam = (lam,) * len(scales)
        object.__setattr__(self, "lambda_schedule", tuple(tuple(float(x) for x in row) for row in lam))
        knots = self.knots
        if knots is None or np.ndim(knots) == 0:
            knots = (knots,) * len(scales)
        object.__setattr__(self, "knots", tuple(None if k is None else int(k) for k in knots))
        factors = self.epsilon_factor
        if np.ndim(factors) == 0:
            factors = (factors,) * len(scales)
        object.__setattr__(self, "epsilon_factor", tuple(float(f) for f in factors))
        if not scales or any(s < 1 for s in scales) or any(a <= b for a, b in zip(scales, scales[1:])):
            raise InvalidParameterError("scales must be strictly decreasing positive divisors")
        if len(self.lambda_schedule) != len(scales) or not all(self.lambda_schedule):
            raise InvalidParameterError("need a non-empty lambda schedule per scale")
        if any(x <= 0 for row in self.lambda_schedule for x in row):
            raise InvalidParameterError("lambda_schedule entries must be positive")
        if len(self.knots) != len(scales) or any(k is not None and k < 1 for k in self.knots):
            raise InvalidParameterError("need one positive knot count (or None) per scale")
        if self.iters_per_stage < 1:
            raise InvalidParameterError("iters_per_stage must be >= 1")
        for name in ("step_u", "step_theta"):
            val = getattr(self, name)
            if val != "auto" and not (isinstance(val, (int, float)) and val > 0):
                raise InvalidParameterError(f"{name} must be 'auto' or a positive number")
        if self.time_basis not in ("constant", "linear"):
            raise InvalidParameterError("time_basis must be 'constant' or 'linear'")
        if self.mode not in MODES:
            raise InvalidParameterError(f"mode must be one of {MODES}")
        if self.epsilon is not None and self.epsilon <= 0:
            raise InvalidParameterError("epsilon must be positive")
        if len(self.epsilon_factor) != len(scales) or min(self.epsilon_factor) <= 0:
            raise InvalidParameterError("need one positive epsilon_factor per scale")
        if self.mu < 0 or self.damping < 0 or not 0 < self.safety <= 1:
            raise InvalidParameterError("invalid solver parameter")

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "nufft"}
        out["scales"] = list(self.scales)
        out["lambda_schedule"] = [list(row) for row in self.lambda_schedule]
        out["knots"] = list(self.knots)
        out["epsilon_factor"] = list(self.epsilon_factor)
        out["nufft"] = {
            "oversampling": self.nufft.oversampling,
            "kernel_width": self.nufft.kernel_width,
            "tolerance": self.nufft.tolerance,
        }
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "SolverConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidParameterError(f"unknown solver options {sorted(unknown)}")
        if "nufft" in d:
            d["nufft"] = NufftConfig(**d["nufft"])
        return cls(**d)


@dataclass
class SolverState:
    u: np.ndarray
    trace: MotionTrace
    epsilon: float
    step_u: float
    scale_index: int = 0
    stage_index: int = 0
    iteration: int = 0
    misfit_history: list = field(default_factory=list)
    backtracks_u: int = 0
    backtracks_theta: int = 0
    rescaled: int = 0
    dual: np.ndarray | None = None
    op: MotionOperator | None = field(default=None, repr=False)
    residual: np.ndarray | None = field(default=None, repr=False)


# ---------------------------------------------------------------- scaling

def _check_factor(dims, factor: int):
    if factor < 1 or any(n % factor for n in dims):
        raise InvalidParameterError(f"factor {factor} does not divide dims {tuple(dims)}")


def surviving_lines(pattern: SamplingPattern, factor: int) -> np.ndarray:
    """Indices (in acquisition order) of lines inside the central band of the coarse grid."""
    _check_factor(pattern.dims, factor)
    keep = np.ones(pattern.n_t, dtype=bool)
    for col, ax in enumerate(pattern.pe_axes):
        half = pattern.dims[ax] // factor // 2
        m = pattern.pe_coords[:, col]
        keep &= (m >= -half) & (m < pattern.dims[ax] // factor - half)
    return np.flatnonzero(keep)


def _central_slices(dims, coarse):
    return tuple(slice(n // 2 - c // 2, n // 2 - c // 2 + c) for n, c in zip(dims, coarse))


def downscale_volume(u, factor: int) -> np.ndarray:
    """Central crop of the centered spectrum, intensity preserving."""
    u = np.asarray(getattr(u, "data", u))
    _check_factor(u.shape, factor)
    if factor == 1:
        return u.copy()
    coarse = tuple(n // factor for n in u.shape)
    spec = fft3_centered(u)[_central_slices(u.shape, coarse)]
    return ifft3_centered(spec) * factor ** -1.5


def upscale_volume(u, fine_dims) -> np.ndarray:
    """Zero-padded spectrum; inverse of :func:`downscale_volume` on shared frequencies."""
    u = np.asarray(getattr(u, "data", u))
    fine_dims = tuple(int(n) for n in fine_dims)
    ratios = {f / c for f, c in zip(fine_dims, u.shape)}
    if len(ratios) != 1 or any(f % c for f, c in zip(fine_dims, u.shape)):
        raise InvalidParameterError(f"dims {u.shape} do not divide {fine_dims} uniformly")
    factor = int(ratios.pop())
    if factor == 1:
        return u.copy()
    spec = np.zeros(fine_dims, dtype=complex)
    spec[_central_slices(fine_dims, u.shape)] = fft3_centered(u)
    return ifft3_centered(spec) * factor**1.5


def resample_volume(v, dims) -> np.ndarray:
    """Spectral crop or zero-pad to ``dims`` (same field of view), intensity preserving."""
    v = np.asarray(getattr(v, "data", v))
    dims = tuple(int(n) for n in dims)
    if v.ndim != 3 or len(dims) != 3:
        raise InvalidInputError("resampling needs 3D volumes")
    if v.shape == dims:
        return v.astype(complex)
    spec = fft3_centered(v)
    out = np.zeros(dims, dtype=complex)
    src, dst = [], []
    for n_in, n_out in zip(v.shape, dims):
        c = min(n_in, n_out)
        src.append(slice(n_in // 2 - c // 2, n_in // 2 - c // 2 + c))
        dst.append(slice(n_out // 2 - c // 2, n_out // 2 - c // 2 + c))
    out[tuple(dst)] = spec[tuple(src)]
    return ifft3_centered(out) * np.sqrt(np.prod(dims) / np.prod(v.shape))


def downscale_problem(data: KSpaceData, pattern: SamplingPattern, trace: MotionTrace, factor: int):
    """Keep lines inside the central band of the coarse grid, cropped along the readout.

    Samples are scaled by ``factor^-1.5`` so they are the unitary spectrum of
    the intensity-preserving coarse volume.
    """
    _check_factor(pattern.dims, factor)
    if len(trace) != pattern.n_t:
        raise InvalidInputError("trace length does not match the pattern")
    if factor == 1:
        return data, pattern, trace
    keep = surviving_lines(pattern, factor)
    coarse = tuple(n // factor for n in pattern.dims)
    n_r = pattern.n_r
    c_r = coarse[pattern.readout_axis]
    lo = n_r // 2 - c_r // 2
    cpattern = SamplingPattern(
        coarse, pattern.pe_coords[keep], pattern.readout_axis, pattern.kind,
        tuple(v * factor for v in pattern.voxel_size),
    )
    samples = data.samples[keep, lo:lo + c_r] * factor ** -1.5
    sigma = None if data.noise_sigma is None else data.noise_sigma * factor ** -1.5
    cdata = KSpaceData(samples, cpattern, sigma, dict(data.meta, downscale_factor=factor))
    return cdata, cpattern, trace.subset(keep)


def upscale_solution(u, trace: MotionTrace, fine_dims, fine_pattern: SamplingPattern):
    """Zero-pad ``u`` to ``fine_dims``; fill the trace by nearest preceding coarse line.

    Lines that precede every coarse line take the first coarse value.
    """
    u = np.asarray(getattr(u, "data", u))
    fine_dims = tuple(int(n) for n in fine_dims)
    if fine_pattern.dims != fine_dims:
        raise InvalidParameterError("fine pattern does not match fine dims")
    if any(f % c for f, c in zip(fine_dims, u.shape)) or len({f // c for f, c in zip(fine_dims, u.shape)}) != 1:
        raise InvalidParameterError(f"dims {u.shape} do not divide {fine_dims} uniformly")
    factor = fine_dims[0] // u.shape[0]
    keep = surviving_lines(fine_pattern, factor)
    if len(trace) != keep.size:
        raise InvalidParameterError(f"coarse trace has {len(trace)} lines, expected {keep.size}")
    return upscale_volume(u, fine_dims), _fill_from(trace.values, keep, fine_pattern.n_t)


# ---------------------------------------------------------------- steps

def estimate_lipschitz(pattern: SamplingPattern, cfg: NufftConfig = NufftConfig(), iters: int = 10,
                       seed: int = 0, trace: MotionTrace | None = None) -> float:
    """Largest eigenvalue of ``F^H F`` by power iteration (identity trace by default)."""
    trace = trace if trace is not None else MotionTrace.identity(pattern.n_t)
    op = MotionOperator(pattern, trace, cfg)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(pattern.dims) + 1j * rng.standard_normal(pattern.dims)
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(max(iters, 1)):
        y = op.normal(x)
        lam = float(np.vdot(x, y).real)
        nrm = np.linalg.norm(y)
        if nrm == 0:
            return 0.0
        x = y / nrm
    return lam


def _misfit_of(r) -> float:
    return 0.5 * float(np.vdot(r, r).real)


def _check_finite(value: float, state: SolverState, what: str):
    if not np.isfinite(value):
        raise DivergenceError(f"non-finite {what} at scale {state.scale_index}, stage {state.stage_index}, "
                              f"iteration {state.iteration}", state)


def _theta_direction(g, h, trace: MotionTrace, basis, cfg: SolverConfig, mu_scale: float):
    """Damped Gauss-Newton step restricted to ``span(basis)``.

    ``g`` is the per-line gradient ``(n_t, 6)``, ``h`` the per-line
    Gauss-Newton blocks ``(n_t, 6, 6)``. The normal matrix is
    ``B^T blockdiag(h) B``, banded because each line touches at most two knots.
    """
    n_t = g.shape[0]
    b = basis if basis is not None else sparse.identity(n_t, format="csr")
    m = b.shape[1]
    b6 = sparse.kron(b, sparse.identity(6), format="csr")
    hb = sparse.bsr_matrix((h, np.arange(n_t), np.arange(n_t + 1)), shape=(6 * n_t, 6 * n_t))
    a = (b6.T @ hb.tocsr() @ b6).tocsr()
    diag = a.diagonal().reshape(m, 6)
    wsum = np.asarray(b.sum(axis=0)).ravel()
    # damping per knot, relative to the mean curvature of each parameter
    floor = cfg.damping * np.maximum(diag.mean(axis=0), 1e-12)
    a = a + sparse.diags((cfg.damping * diag + floor * np.maximum(wsum, 1e-3)[:, None]).ravel())
    rhs = -(b.T @ g).ravel()
    if cfg.mu > 0 and n_t > 1:
        d = sparse.diags([-np.ones(n_t - 1), np.ones(n_t - 1)], [0, 1], shape=(n_t - 1, n_t))
        db = (d @ b).tocsr()
        lap = (db.T @ db).tocsr()
        mu = cfg.mu * mu_scale
        a = a + mu * sparse.kron(lap, sparse.identity(6), format="csr")
        rhs = rhs - mu * (b.T @ (d.T @ (d @ trace.values))).ravel()
    delta = spsolve(a.tocsc(), rhs).reshape(m, 6)
    return np.asarray(b @ delta)


def palm_iteration(state: SolverState, data: KSpaceData, pattern: SamplingPattern, guide: GuideField,
                   cfg: SolverConfig, basis=None, op: MotionOperator | None = None) -> SolverState:
    """One projected gradient step on ``u`` followed by one step on the trace.

    Both steps backtrack (halving) until the misfit does not increase by
    more than ``1e-6`` relative; a step that never passes is rejected. A u
    step whose projection did not converge is rejected without backtracking.
    Returns the updated state (mutated in place).
    """
    d = data.samples
    if op is None and state.op is not None and state.residual is not None:
        op, r = state.op, state.residual
    else:
        op = op or MotionOperator(pattern, state.trace, cfg.nufft)
        r = op.forward(state.u) - d
    f0 = _misfit_of(r)
    _check_finite(f0, state, "misfit")

    # u block
    grad = op.adjoint(r)
    alpha = state.step_u
    accepted = False
    for _ in range(cfg.max_backtracks + 1):
        u_new, info = project_sgtv_ball(state.u - alpha * grad, guide, state.epsilon, cfg.inner_iters,
                                        cfg.inner_tol, dual_init=state.dual, return_info=True)
        model, dg = op.forward_and_kgrad(u_new)
        f1 = _misfit_of(model - d)
        _check_finite(f1, state, "misfit")
        if f1 <= f0 * (1 + MONOTONE_TOL):
            accepted = True
            break
        if info.rescaled or info.gap > cfg.inner_tol:
            # the projection, not the step length, is at fault; a shorter step will not help
            break
        alpha *= 0.5
        state.backtracks_u += 1
    if accepted:
        state.u = u_new
        state.dual = info.dual
        state.rescaled += int(info.rescaled)
    else:
        model, dg = op.forward_and_kgrad(state.u)
        f1 = f0

    # theta block
    parts = op.theta_partials(model, dg)
    res = model - d
    g = np.einsum("tr,trp->tp", np.conj(res), parts).real
    h = np.einsum("trp,trq->tpq", np.conj(parts), parts).real
    theta = state.trace.values
    if cfg.step_theta == "auto":
        mu_scale = float(np.mean(np.einsum("tii->i", h)[None].mean())) if cfg.mu > 0 else 1.0
        step = _theta_direction(g, h, state.trace, basis, cfg, mu_scale)
        candidates = (lambda s: theta + s * step)
    else:
        a_t = float(cfg.step_theta)
        if basis is not None:
            step = -np.asarray(basis @ (basis.T @ g))
            candidates = (lambda s: theta + s * a_t * step)
        else:
            candidates = (lambda s: prox_motion_smoothness(theta - s * a_t * g, s * a_t, cfg.mu).values)
    f2 = f1
    s = 1.0
    new_op, new_res = op, res
    for _ in range(cfg.max_backtracks + 1):
        trial = MotionTrace(candidates(s))
        trial_op = MotionOperator(pattern, trial, cfg.nufft)
        trial_res = trial_op.forward(state.u) - d
        f_trial = _misfit_of(trial_res)
        if np.isfinite(f_trial) and f_trial <= f1 * (1 + MONOTONE_TOL):
            state.trace = trial
            new_op, new_res = trial_op, trial_res
            f2 = f_trial
            break
        s *= 0.5
        state.backtracks_theta += 1
    state.misfit_history.append(f2)
    state.iteration += 1
    state.op, state.residual = new_op, new_res
    return state


# ---------------------------------------------------------------- driver

def _epsilon_for(u0, guide: GuideField, cfg: SolverConfig, si: int) -> float:
    if cfg.epsilon is not None:
        # the radius is given at the finest grid; edge measure scales with area
        return cfg.epsilon / cfg.scales[si]**2
    val = sgtv_value(u0, guide)
    return cfg.epsilon_factor[si] * val if val > 0 else 1.0


def run_correction(data: KSpaceData, pattern: SamplingPattern, reference, cfg: SolverConfig = SolverConfig(),
                   callback=None):
    """Estimate the volume and the motion trace from corrupted data.

    ``reference`` is required in guided mode and ignored in plain-TV mode.
    Returns ``(volume, trace, report)``; ``report["timings"]`` holds the
    only non-deterministic values.
    """
    if not data.pattern.equals(pattern):
        raise InvalidInputError("data and pattern disagree")
    dims = pattern.dims
    for f in cfg.scales:
        _check_factor(dims, f)
    if cfg.mode == "guided":
        if reference is None:
            raise InvalidInputError("guided mode needs a reference volume")
        ref = np.asarray(getattr(reference, "data", reference))
        if ref.ndim != 3:
            raise InvalidInputError("reference must be a 3D volume")
        ref_voxel = getattr(reference, "voxel_size", None)
        if ref_voxel is not None:
            fov_ref = np.asarray(ref.shape) * np.asarray(ref_voxel)
            fov = np.asarray(dims) * np.asarray(pattern.voxel_size)
            if not np.allclose(fov_ref, fov, rtol=1e-3):
                raise InvalidInputError(f"reference field of view {fov_ref} differs from {fov}")
        ref = resample_volume(ref, dims)
    else:
        ref = None

    trace = MotionTrace.identity(pattern.n_t)
    u = None
    stages = []
    timings = []
    history = []
    t_start = time.perf_counter()
    for si, factor in enumerate(cfg.scales):
        t_scale = time.perf_counter()
        cdata, cpattern, ctrace = downscale_problem(data, pattern, trace, factor)
        if u is None:
            u = np.zeros(cpattern.dims, dtype=complex)
        if ref is not None:
            guide = build_guide(downscale_volume(ref, factor), cfg.eta)
        else:
            guide = GuideField.zeros(cpattern.dims)
        u0 = zero_filled_reconstruction(cdata)
        eps_base = _epsilon_for(u0, guide, cfg, si)
        if cfg.step_u == "auto":
            lip = estimate_lipschitz(cpattern, cfg.nufft, cfg.power_iters, cfg.seed)
            step_u = cfg.safety / max(lip, 1e-12)
        else:
            step_u = float(cfg.step_u)
        n_knots = cfg.knots[si]
        basis = None
        if n_knots is not None and n_knots < cpattern.n_t:
            make_basis = time_segment_matrix if cfg.time_basis == "constant" else time_interpolation_matrix
            basis = make_basis(n_knots, cpattern.n_t)
            # parts of the inherited trace outside the knot span could never be corrected
            coef = spsolve((basis.T @ basis).tocsc(), basis.T @ ctrace.values)
            ctrace = MotionTrace(np.asarray(basis @ np.reshape(coef, (-1, 6))))
        state = SolverState(u, ctrace, eps_base, step_u, scale_index=si)
        for ji, lam in enumerate(cfg.lambda_schedule[si]):
            t_stage = time.perf_counter()
            state.stage_index = ji
            state.epsilon = eps_base / lam
            state.misfit_history = []
            state.iteration = 0
            bt_u, bt_t = state.backtracks_u, state.backtracks_theta
            # enter the stage feasible
            state.u, info = project_sgtv_ball(state.u, guide, state.epsilon, cfg.inner_iters, cfg.inner_tol,
                                              dual_init=None, return_info=True)
            state.dual = info.dual
            state.op, state.residual = None, None
            for it in range(cfg.iters_per_stage):
                palm_iteration(state, cdata, cpattern, guide, cfg, basis)
                hist = state.misfit_history
                if callback is not None:
                    callback(state)
                if cfg.early_exit and len(hist) > 1 and hist[-2] - hist[-1] <= cfg.stagnation_tol * hist[-2]:
                    break
            sg = sgtv_value(state.u, guide)
            stages.append({
                "scale": si,
                "factor": factor,
                "dims": list(cpattern.dims),
                "n_lines": cpattern.n_t,
                "knots": n_knots,
                "stage": ji,
                "lambda": lam,
                "epsilon": state.epsilon,
                "iterations": state.iteration,
                "misfit": list(state.misfit_history),
                "backtracks_u": state.backtracks_u - bt_u,
                "backtracks_theta": state.backtracks_theta - bt_t,
                "feasibility": sg / state.epsilon,
                "step_u": step_u,
            })
            history.extend(state.misfit_history)
            timings.append({"scale": si, "stage": ji, "seconds": time.perf_counter() - t_stage})
            log.info("scale %d (1/%d) stage %d: eps %.4g misfit %.6g feasibility %.4f", si, factor, ji,
                     state.epsilon, state.misfit_history[-1], sg / state.epsilon)
        u = state.u
        trace = _fill_from(state.trace.values, surviving_lines(pattern, factor), pattern.n_t)
        if si + 1 < len(cfg.scales):
            u = upscale_volume(u, tuple(n // cfg.scales[si + 1] for n in dims))
        timings.append({"scale": si, "stage": "total", "seconds": time.perf_counter() - t_scale})

    final_op = MotionOperator(pattern, trace, cfg.nufft)
    report = {
        "config": cfg.to_dict(),
        "stages": stages,
        "misfit_history": history,
        "final_misfit": _misfit_of(final_op.forward(u) - data.samples),
        "n_out_of_band": final_op.n_out_of_band,
        "timings": {"stages": timings, "total_seconds": time.perf_counter() - t_start},
    }
    voxel = pattern.voxel_size
    return ComplexVolume3D(u, voxel), trace, report


def _fill_from(values, keep, n_t) -> MotionTrace:
    """Expand per-``keep`` rows to ``n_t`` lines by nearest preceding kept line."""
    if keep.size == 0:
        return MotionTrace.identity(n_t)
    pos = np.maximum(np.searchsorted(keep, np.arange(n_t), side="right") - 1, 0)
    return MotionTrace(np.asarray(values)[pos])
