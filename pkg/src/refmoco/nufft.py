"""Centered unitary FFT and Kaiser-Bessel type-2 NUFFT in 3D.

Image voxels sit at ``x = (i - n//2) * voxel`` (mm) and the transforms evaluate

    F(k) = sum_x u(x) exp(-1j k.x)

The NUFFT works with normalized frequencies ``omega = k * voxel`` in
``[-pi, pi]`` per axis. Interpolation and its adjoint are numba kernels; the
adjoint is the exact transpose of the forward interpolation, so dot-product
tests hold to round-off.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass

import numba
import numpy as np

from .geometry import kspace_frequencies


class InvalidInputError(ValueError):
    pass


class BandLimitError(ValueError):
    """A frequency lies outside the band representable on the grid."""


@dataclass(frozen=True)
class NufftConfig:
    oversampling: float = 2.0
    kernel_width: int = 8
    # expected accuracy of the defaults; not used to pick parameters
    tolerance: float = 1e-6

    def __post_init__(self):
        if not self.oversampling >= 1.25:
            raise ValueError("oversampling must be >= 1.25")
        if int(self.kernel_width) != self.kernel_width or self.kernel_width < 2:
            raise ValueError("kernel_width must be an integer >= 2")

    @property
    def beta(self) -> float:
        # Beatty et al. 2005 choice for a given width / oversampling ratio
        w, s = self.kernel_width, self.oversampling
        return float(np.pi * np.sqrt((w / s) ** 2 * (s - 0.5) ** 2 - 0.8))


@dataclass
class ComplexVolume3D:
    data: np.ndarray
    voxel_size: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 2:
            raise InvalidInputError(f"volume must be 3D with dims >= 2, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise InvalidInputError("volume contains non-finite values")
        self.voxel_size = tuple(float(v) for v in self.voxel_size)
        if len(self.voxel_size) != 3 or min(self.voxel_size) <= 0:
            raise InvalidInputError("voxel_size must be three positive numbers")

    @property
    def dims(self) -> tuple:
        return self.data.shape


@dataclass
class NonUniformPoints:
    """k-space sample locations (rad/mm) for a grid with the given voxel size."""

    coords: np.ndarray
    voxel_size: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float).reshape(-1, 3)
        self.voxel_size = tuple(float(v) for v in self.voxel_size)

    def normalized(self) -> np.ndarray:
        return self.coords * np.asarray(self.voxel_size)

    def __len__(self) -> int:
        return self.coords.shape[0]


def _unwrap(vol):
    if isinstance(vol, ComplexVolume3D):
        return vol.data, vol.voxel_size
    arr = np.asarray(vol)
    if arr.ndim != 3:
        raise InvalidInputError(f"expected a 3D array, got shape {arr.shape}")
    return arr, None


def fft3_centered(vol):
    """Unitary DC-centered 3D DFT. Accepts an array or a ComplexVolume3D."""
    data, voxel = _unwrap(vol)
    if not np.all(np.isfinite(data)):
        raise InvalidInputError("volume contains non-finite values")
    out = np.fft.fftshift(np.fft.fftn(np.fft.ifftshift(data), norm="ortho"))
    return ComplexVolume3D(out, voxel) if voxel is not None else out


def ifft3_centered(vol):
    data, voxel = _unwrap(vol)
    if not np.all(np.isfinite(data)):
        raise InvalidInputError("volume contains non-finite values")
    out = np.fft.fftshift(np.fft.ifftn(np.fft.ifftshift(data), norm="ortho"))
    return ComplexVolume3D(out, voxel) if voxel is not None else out


def grid_kpoints(dims, voxel_size=(1.0, 1.0, 1.0)) -> np.ndarray:
    """All Cartesian k-space points of a grid, ordered like ``fft3_centered`` output."""
    kx, ky, kz = kspace_frequencies(dims, voxel_size)
    return np.stack(np.meshgrid(kx, ky, kz, indexing="ij"), axis=-1).reshape(-1, 3)


# ---------------------------------------------------------------------------
# numba kernels


@numba.njit(cache=True)
def _bessel_i0(x):
    # power series; converges fast for the kernel's argument range (< 40)
    q = 0.25 * x * x
    term = 1.0
    total = 1.0
    k = 1.0
    while term > 1e-17 * total:
        term *= q / (k * k)
        total += term
        k += 1.0
    return total


@numba.njit(cache=True)
def _kernel_weights(s, n, width, beta, idx, wts):
    """Indices/weights of one axis for a point at grid coordinate ``s``."""
    half = 0.5 * width
    l0 = int(np.ceil(s - half))
    for j in range(width):
        l = l0 + j
        t = s - l
        r = 2.0 * t / width
        if r * r <= 1.0:
            wts[j] = _bessel_i0(beta * np.sqrt(1.0 - r * r))
        else:
            wts[j] = 0.0
        idx[j] = l % n


@numba.njit(cache=True)
def _point_weights(s, dims, width, beta, idx, wts):
    m = s.shape[0]
    for p in range(m):
        for ax in range(3):
            _kernel_weights(s[p, ax], dims[ax], width, beta, idx[p, ax], wts[p, ax])


@numba.njit(cache=True)
def _interp(grid, idx, wts, out):
    m = idx.shape[0]
    width = idx.shape[2]
    for p in range(m):
        acc = 0j
        for a in range(width):
            wa = wts[p, 0, a]
            ia = idx[p, 0, a]
            for b in range(width):
                wab = wa * wts[p, 1, b]
                ib = idx[p, 1, b]
                inner = 0j
                for c in range(width):
                    inner += wts[p, 2, c] * grid[ia, ib, idx[p, 2, c]]
                acc += wab * inner
        out[p] = acc


@numba.njit(cache=True)
def _spread(values, idx, wts, grid):
    m = idx.shape[0]
    width = idx.shape[2]
    for p in range(m):
        val = values[p]
        if val == 0:
            continue
        for a in range(width):
            va = val * wts[p, 0, a]
            ia = idx[p, 0, a]
            for b in range(width):
                vab = va * wts[p, 1, b]
                ib = idx[p, 1, b]
                for c in range(width):
                    grid[ia, ib, idx[p, 2, c]] += vab * wts[p, 2, c]


# ---------------------------------------------------------------------------


def kb_kernel_ft(nu, width: int, beta: float) -> np.ndarray:
    """Continuous Fourier transform of the KB kernel at ``nu`` cycles per grid unit."""
    z = np.sqrt((beta**2 - (np.pi * width * np.asarray(nu, dtype=float)) ** 2).astype(complex))
    with np.errstate(invalid="ignore", divide="ignore"):
        val = np.where(np.abs(z) > 1e-12, np.sinh(z) / z, 1.0)
    return width * val.real


class NufftPlan:
    """Precomputed deapodization and grid sizes for one image shape."""

    def __init__(self, dims, cfg: NufftConfig = NufftConfig()):
        self.dims = tuple(int(n) for n in dims)
        self.cfg = cfg
        self.width = int(cfg.kernel_width)
        self.beta = cfg.beta
        self.grid_dims = tuple(int(2 * np.ceil(cfg.oversampling * n / 2)) for n in self.dims)
        self.deapod = []
        self.embed_index = []
        for n, big in zip(self.dims, self.grid_dims):
            x = np.arange(n) - n // 2
            self.deapod.append(1.0 / kb_kernel_ft(x / big, self.width, self.beta))
            self.embed_index.append(x % big)
        self._deapod3 = (
            self.deapod[0][:, None, None] * self.deapod[1][None, :, None] * self.deapod[2][None, None, :]
        )

    def prepare(self, omega) -> "GriddingPoints":
        """Kernel indices and weights for a point set, reusable across transforms."""
        if isinstance(omega, GriddingPoints):
            return omega
        omega = np.asarray(omega, dtype=float).reshape(-1, 3)
        if omega.size and np.max(np.abs(omega)) > np.pi * (1 + 1e-12):
            bad = int(np.argmax(np.max(np.abs(omega), axis=1)))
            raise BandLimitError(f"normalized frequency {omega[bad]} outside [-pi, pi]")
        s = np.ascontiguousarray(omega * (np.asarray(self.grid_dims) / (2 * np.pi)))
        m = s.shape[0]
        idx = np.empty((m, 3, self.width), dtype=np.int64)
        wts = np.empty((m, 3, self.width))
        if m:
            _point_weights(s, np.asarray(self.grid_dims, dtype=np.int64), self.width, self.beta, idx, wts)
        return GriddingPoints(idx, wts)

    def forward_many(self, vols, omega) -> np.ndarray:
        """Type-2 NUFFT of several volumes at shared points; returns ``(k, M)``."""
        vols = np.asarray(vols)
        if vols.ndim == 3:
            vols = vols[None]
        if vols.shape[1:] != self.dims:
            raise InvalidInputError(f"volume shape {vols.shape[1:]} does not match plan {self.dims}")
        pts = self.prepare(omega)
        out = np.zeros((vols.shape[0], len(pts)), dtype=complex)
        if len(pts) == 0:
            return out
        ix = np.ix_(*self.embed_index)
        for v in range(vols.shape[0]):
            grid = np.zeros(self.grid_dims, dtype=complex)
            grid[ix] = vols[v] * self._deapod3
            _interp(np.fft.fftn(grid), pts.idx, pts.wts, out[v])
        return out

    def forward(self, vol, omega) -> np.ndarray:
        return self.forward_many(np.asarray(vol)[None], omega)[0]

    def adjoint(self, samples, omega) -> np.ndarray:
        samples = np.ascontiguousarray(np.asarray(samples, dtype=complex).reshape(-1))
        pts = self.prepare(omega)
        if samples.shape[0] != len(pts):
            raise InvalidInputError(f"{samples.shape[0]} samples for {len(pts)} points")
        grid = np.zeros(self.grid_dims, dtype=complex)
        if len(pts):
            _spread(samples, pts.idx, pts.wts, grid)
        # adjoint of the unnormalized forward FFT
        grid = np.fft.ifftn(grid) * np.prod(self.grid_dims)
        return grid[np.ix_(*self.embed_index)] * self._deapod3


@dataclass
class GriddingPoints:
    idx: np.ndarray
    wts: np.ndarray

    def __len__(self) -> int:
        return self.idx.shape[0]


@functools.lru_cache(maxsize=16)
def get_plan(dims: tuple, cfg: NufftConfig = NufftConfig()) -> NufftPlan:
    return NufftPlan(dims, cfg)


def _points_to_omega(pts, voxel_size) -> np.ndarray:
    if isinstance(pts, NonUniformPoints):
        return pts.normalized()
    return np.asarray(pts, dtype=float).reshape(-1, 3) * np.asarray(voxel_size, dtype=float)


def nufft_type2(vol, pts, cfg: NufftConfig = NufftConfig()) -> np.ndarray:
    """Evaluate ``sum_x u(x) exp(-1j k.x)`` at arbitrary k-space points.

    ``pts`` is a :class:`NonUniformPoints` or an ``(M, 3)`` array in rad/mm
    (interpreted with the volume's voxel size, 1 mm if a bare array is given).
    """
    data, voxel = _unwrap(vol)
    voxel = voxel or (1.0, 1.0, 1.0)
    if not np.all(np.isfinite(data)):
        raise InvalidInputError("volume contains non-finite values")
    omega = _points_to_omega(pts, voxel)
    return get_plan(tuple(data.shape), cfg).forward(data, omega)


def nufft_type2_adjoint(samples, pts, dims, cfg: NufftConfig = NufftConfig(), voxel_size=(1.0, 1.0, 1.0)):
    """Adjoint of :func:`nufft_type2`; returns an array of shape ``dims``."""
    samples = np.asarray(samples)
    omega = _points_to_omega(pts, voxel_size)
    if samples.reshape(-1).shape[0] != omega.shape[0]:
        raise InvalidInputError(f"{samples.size} samples for {omega.shape[0]} points")
    return get_plan(tuple(int(n) for n in dims), cfg).adjoint(samples, omega)
