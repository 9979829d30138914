"""Acquisition model for Cartesian line-by-line sampling of a moving object.

Readout line ``t`` is acquired at pose ``theta_t``; its samples are

    d_t(k) = exp(-1j k.tau_t) * F u (R_t^T k) / sqrt(N),    k in K_t

where ``F`` is the (non-normalized) Fourier sum and ``N`` the voxel count,
so that a motion-free fully sampled acquisition equals ``fft3_centered(u)``.
All rotated points of all lines go through a single NUFFT call.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import MotionTrace, kspace_frequencies, rotation_matrices, voxel_positions
from .nufft import BandLimitError, InvalidInputError, NufftConfig, get_plan, ifft3_centered

PATTERN_KINDS = ("full", "randomized", "linear")

# Rotated frequencies up to this multiple of pi are evaluated through the
# 2 pi periodicity of the on-grid Fourier sum; beyond it they are dropped.
DEFAULT_BAND_MARGIN = 1.25


@dataclass(frozen=True)
class SamplingPattern:
    """Ordered phase-encoding positions; line ``t`` spans the whole readout axis.

    ``pe_coords[t]`` holds the integer frequency indices ``m`` (in
    ``[-n/2, n/2)``) of line ``t`` along the two phase-encoding axes, in
    increasing axis order.
    """

    dims: tuple
    pe_coords: np.ndarray
    readout_axis: int = 0
    kind: str = "full"
    voxel_size: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "voxel_size", tuple(float(v) for v in self.voxel_size))
        if self.readout_axis not in (0, 1, 2):
            raise InvalidInputError("readout_axis must be 0, 1 or 2")
        if self.kind not in PATTERN_KINDS:
            raise InvalidInputError(f"unknown pattern kind {self.kind!r}")
        pe = np.asarray(self.pe_coords, dtype=np.int64).reshape(-1, 2)
        for col, ax in enumerate(self.pe_axes):
            n = dims[ax]
            if pe.size and (pe[:, col].min() < -(n // 2) or pe[:, col].max() >= n - n // 2):
                raise InvalidInputError(f"phase-encoding coordinate off the grid on axis {ax}")
        if len({tuple(c) for c in pe.tolist()}) != pe.shape[0]:
            raise InvalidInputError("duplicated phase-encoding coordinates")
        pe.setflags(write=False)
        object.__setattr__(self, "pe_coords", pe)

    @property
    def pe_axes(self) -> tuple:
        return tuple(a for a in range(3) if a != self.readout_axis)

    @property
    def n_t(self) -> int:
        return self.pe_coords.shape[0]

    @property
    def n_r(self) -> int:
        return self.dims[self.readout_axis]

    def grid_indices(self) -> tuple:
        """Index arrays into a centered k-space volume, each of shape ``(n_t, n_r)``."""
        idx = [None, None, None]
        r = np.arange(self.n_r)
        idx[self.readout_axis] = np.broadcast_to(r, (self.n_t, self.n_r))
        for col, ax in enumerate(self.pe_axes):
            m = self.pe_coords[:, col] + self.dims[ax] // 2
            idx[ax] = np.broadcast_to(m[:, None], (self.n_t, self.n_r))
        return tuple(idx)

    def kpoints(self) -> np.ndarray:
        """Physical k coordinates (rad/mm), shape ``(n_t, n_r, 3)``."""
        freqs = kspace_frequencies(self.dims, self.voxel_size)
        idx = self.grid_indices()
        return np.stack([freqs[a][idx[a]] for a in range(3)], axis=-1)

    def equals(self, other: "SamplingPattern") -> bool:
        return (
            self.dims == other.dims
            and self.readout_axis == other.readout_axis
            and self.voxel_size == other.voxel_size
            and np.array_equal(self.pe_coords, other.pe_coords)
        )


@dataclass
class KSpaceData:
    samples: np.ndarray
    pattern: SamplingPattern
    noise_sigma: Optional[float] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=complex)
        if self.samples.shape != (self.pattern.n_t, self.pattern.n_r):
            raise InvalidInputError(
                f"samples shape {self.samples.shape} != pattern ({self.pattern.n_t}, {self.pattern.n_r})"
            )


def _check_volume(u, pattern: SamplingPattern) -> np.ndarray:
    u = np.asarray(getattr(u, "data", u))
    if u.shape != pattern.dims:
        raise InvalidInputError(f"volume shape {u.shape} does not match pattern grid {pattern.dims}")
    return u


def _check_trace(trace: MotionTrace, pattern: SamplingPattern) -> MotionTrace:
    if not isinstance(trace, MotionTrace):
        trace = MotionTrace(trace)
    if len(trace) != pattern.n_t:
        raise InvalidInputError(f"trace length {len(trace)} != number of lines {pattern.n_t}")
    return trace


def _rotation_derivatives(phis: np.ndarray) -> np.ndarray:
    """``dR/dphi_a`` for each time, shape ``(n_t, 3, 3, 3)`` indexed ``[t, a]``."""
    n = phis.shape[0]
    c, s = np.cos(phis), np.sin(phis)

    def plane(cs, sn, a, b, deriv):
        m = np.zeros((n, 3, 3))
        if deriv:
            m[:, a, a] = -sn
            m[:, b, b] = -sn
            m[:, b, a] = cs
            m[:, a, b] = -cs
        else:
            m[:, a, a] = cs
            m[:, b, b] = cs
            m[:, b, a] = sn
            m[:, a, b] = -sn
            m[:, 3 - a - b, 3 - a - b] = 1.0
        return m

    planes = ((0, 1), (0, 2), (1, 2))
    mats = [plane(c[:, j], s[:, j], *planes[j], False) for j in range(3)]
    ders = [plane(c[:, j], s[:, j], *planes[j], True) for j in range(3)]
    r_xy, r_xz, r_yz = mats
    d_xy, d_xz, d_yz = ders
    return np.stack([r_yz @ r_xz @ d_xy, r_yz @ d_xz @ r_xy, d_yz @ r_xz @ r_xy], axis=1)


class MotionOperator:
    """Perturbed Fourier operator for a fixed pattern and motion trace.

    Rotation can push the corners of the rectangular k-space band past
    ``+-pi`` (normalized). Such points are still evaluated, via the exact
    periodicity of the sum over integer voxel offsets, as long as every
    coordinate stays within ``band_margin * pi``. Beyond that, with
    ``out_of_band="zero"`` their samples are modeled as zero
    (``n_out_of_band`` counts them); with ``"raise"`` a
    :class:`BandLimitError` names the first offending line.
    """

    def __init__(self, pattern: SamplingPattern, trace: MotionTrace, cfg: NufftConfig = NufftConfig(),
                 out_of_band: str = "zero", band_margin: float = DEFAULT_BAND_MARGIN):
        if out_of_band not in ("zero", "raise"):
            raise ValueError("out_of_band must be 'zero' or 'raise'")
        self.pattern = pattern
        self.trace = _check_trace(trace, pattern)
        self.cfg = cfg
        self.plan = get_plan(pattern.dims, cfg)
        self.scale = 1.0 / np.sqrt(np.prod(pattern.dims))
        self.k = pattern.kpoints()
        self.rot = rotation_matrices(self.trace.phi)
        # k' = R^T k for each line
        self.k_rot = np.einsum("tji,trj->tri", self.rot, self.k)
        omega = self.k_rot * np.asarray(pattern.voxel_size)
        inside = np.all(np.abs(omega) <= np.pi * band_margin, axis=-1)
        if out_of_band == "raise" and not inside.all():
            bad_t = int(np.argwhere(~inside)[0][0])
            raise BandLimitError(f"rotated k-space point of line t={bad_t} leaves the representable band")
        self.valid = inside
        self.n_out_of_band = int((~inside).sum())
        wrapped = np.mod(omega[inside] + np.pi, 2 * np.pi) - np.pi
        self.points = self.plan.prepare(wrapped)
        self.phase = np.exp(-1j * np.einsum("trj,tj->tr", self.k, self.trace.tau))

    def forward(self, u) -> np.ndarray:
        u = _check_volume(u, self.pattern)
        out = np.zeros(self.k.shape[:2], dtype=complex)
        out[self.valid] = self.plan.forward(u, self.points) * self.scale * self.phase[self.valid]
        return out

    def adjoint(self, samples) -> np.ndarray:
        samples = np.asarray(samples)
        if samples.shape != self.k.shape[:2]:
            raise InvalidInputError(f"samples shape {samples.shape} != {self.k.shape[:2]}")
        y = np.conj(self.phase[self.valid]) * samples[self.valid] * self.scale
        return self.plan.adjoint(y, self.points)

    def normal(self, u) -> np.ndarray:
        return self.adjoint(self.forward(u))

    def forward_and_kgrad(self, u):
        """Model samples plus the k-gradient of ``F u`` at the rotated points.

        The gradient comes from NUFFTs of the coordinate-weighted volumes
        ``-1j * x_j * u``; all four transforms share one set of kernel weights.
        Returns ``(model, dG)`` with ``dG`` of shape ``(n_t, n_r, 3)`` (already
        scaled but without the translation phase).
        """
        u = _check_volume(u, self.pattern)
        pos = voxel_positions(self.pattern.dims, self.pattern.voxel_size)
        grids = np.meshgrid(*pos, indexing="ij", sparse=True)
        vols = np.stack([u] + [-1j * g * u for g in grids])
        res = self.plan.forward_many(vols, self.points) * self.scale
        model = np.zeros(self.k.shape[:2], dtype=complex)
        model[self.valid] = res[0] * self.phase[self.valid]
        dg = np.zeros(self.k.shape, dtype=complex)
        dg[self.valid] = res[1:].T
        return model, dg

    def theta_partials(self, model, dg) -> np.ndarray:
        """Derivatives of every model sample w.r.t. the six pose parameters.

        Shape ``(n_t, n_r, 6)``; out-of-band samples have zero derivative.
        """
        parts = np.empty(self.k.shape[:2] + (6,), dtype=complex)
        for j in range(3):
            parts[..., j] = -1j * self.k[..., j] * model
        drot = _rotation_derivatives(self.trace.phi)
        for a in range(3):
            # d(R^T k)/dphi_a = (dR/dphi_a)^T k
            dk = np.einsum("tji,trj->tri", drot[:, a], self.k)
            parts[..., 3 + a] = np.sum(dg * dk, axis=-1) * self.phase
        parts[~self.valid] = 0
        return parts


def perturbed_fourier(u, trace: MotionTrace, pattern: SamplingPattern, cfg: NufftConfig = NufftConfig(),
                      out_of_band: str = "zero", band_margin: float = DEFAULT_BAND_MARGIN) -> KSpaceData:
    """Samples of the moving object on every line of ``pattern``."""
    op = MotionOperator(pattern, trace, cfg, out_of_band, band_margin)
    return KSpaceData(op.forward(u), pattern, meta={"n_out_of_band": op.n_out_of_band})


def perturbed_fourier_adjoint(data, trace: MotionTrace, pattern: SamplingPattern, dims=None,
                              cfg: NufftConfig = NufftConfig()) -> np.ndarray:
    samples = data.samples if isinstance(data, KSpaceData) else np.asarray(data)
    if dims is not None and tuple(dims) != pattern.dims:
        raise InvalidInputError(f"dims {tuple(dims)} do not match pattern grid {pattern.dims}")
    return MotionOperator(pattern, trace, cfg).adjoint(samples)


def _residual(op: MotionOperator, u, data: KSpaceData) -> np.ndarray:
    if not data.pattern.equals(op.pattern):
        raise InvalidInputError("data were acquired with a different pattern")
    return op.forward(u) - data.samples


def misfit(u, trace: MotionTrace, data: KSpaceData, cfg: NufftConfig = NufftConfig(), op=None) -> float:
    """``sum_t 0.5 * ||F_theta_t u |K_t - d_t||^2``."""
    op = op or MotionOperator(data.pattern, trace, cfg)
    r = _residual(op, u, data)
    return 0.5 * float(np.vdot(r, r).real)


def grad_u(u, trace: MotionTrace, data: KSpaceData, cfg: NufftConfig = NufftConfig(), op=None) -> np.ndarray:
    op = op or MotionOperator(data.pattern, trace, cfg)
    return op.adjoint(_residual(op, u, data))


def grad_theta(u, trace: MotionTrace, data: KSpaceData, cfg: NufftConfig = NufftConfig(), op=None,
               with_curvature: bool = False):
    """Per-line gradient of the misfit w.r.t. ``(tau, phi)``, shape ``(n_t, 6)``.

    With ``with_curvature`` also returns the Gauss-Newton diagonal
    ``sum_r |dm/dtheta|^2`` (same shape), used for step sizes.
    """
    op = op or MotionOperator(data.pattern, trace, cfg)
    if not data.pattern.equals(op.pattern):
        raise InvalidInputError("data were acquired with a different pattern")
    model, dg = op.forward_and_kgrad(u)
    parts = op.theta_partials(model, dg)
    r = model - data.samples
    g = np.einsum("tr,trp->tp", np.conj(r), parts).real
    if with_curvature:
        h = np.sum(np.abs(parts) ** 2, axis=1)
        return g, h
    return g


def zero_filled_reconstruction(data: KSpaceData) -> np.ndarray:
    """Inverse FFT of the sampled grid with missing samples set to zero.

    Motion is ignored.
    """
    ks = np.zeros(data.pattern.dims, dtype=complex)
    ks[data.pattern.grid_indices()] = data.samples
    return ifft3_centered(ks)
