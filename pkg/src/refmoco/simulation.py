"""Synthetic ground truth: two-contrast phantoms, stepwise motion, sampling, data."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .forward import KSpaceData, MotionOperator, SamplingPattern, perturbed_fourier
from .geometry import InvalidParameterError, MotionTrace, RigidParams
from .nufft import NufftConfig, ifft3_centered


class InvalidSpecError(ValueError):
    pass


@dataclass(frozen=True)
class Ellipsoid:
    """Ellipsoid in normalized FOV coordinates (each axis spans ``[-1, 1)``).

    ``angle_deg`` rotates the ellipsoid in the axial (xy) plane. Later
    ellipsoids overwrite earlier ones, so every region has one value per
    contrast.
    """

    center: tuple
    semi_axes: tuple
    intensities: tuple
    angle_deg: float = 0.0


@dataclass
class PhantomSpec:
    dims: tuple
    ellipsoids: list = field(default_factory=list)
    n_contrasts: int = 2
    voxel_size: tuple = (1.0, 1.0, 1.0)
    lesion: bool = False

    def __post_init__(self):
        self.dims = tuple(int(n) for n in self.dims)
        if len(self.dims) != 3 or min(self.dims) < 2:
            raise InvalidSpecError(f"dims must be three integers >= 2, got {self.dims}")
        if self.n_contrasts < 1:
            raise InvalidSpecError("need at least one contrast")
        self.ellipsoids = [e if isinstance(e, Ellipsoid) else Ellipsoid(**e) for e in self.ellipsoids]
        for e in self.ellipsoids:
            if len(e.intensities) != self.n_contrasts:
                raise InvalidSpecError("each ellipsoid needs one intensity per contrast")
            if not all(math.isfinite(v) for v in e.intensities):
                raise InvalidSpecError("intensities must be finite")
            if min(e.semi_axes) <= 0:
                raise InvalidSpecError("semi-axes must be positive")
            # bounding box of the rotated ellipsoid
            th = math.radians(e.angle_deg)
            a, b, c = e.semi_axes
            ext = (math.hypot(a * math.cos(th), b * math.sin(th)), math.hypot(a * math.sin(th), b * math.cos(th)), c)
            for x0, r in zip(e.center, ext):
                if x0 - r < -1 - 1e-9 or x0 + r > 1 + 1e-9:
                    raise InvalidSpecError(f"ellipsoid at {e.center} extends outside the field of view")

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "n_contrasts": self.n_contrasts,
            "voxel_size": list(self.voxel_size),
            "lesion": self.lesion,
            "ellipsoids": [
                {"center": list(e.center), "semi_axes": list(e.semi_axes),
                 "intensities": list(e.intensities), "angle_deg": e.angle_deg}
                for e in self.ellipsoids
            ],
        }


# Yu-Ye-Wang head geometry; intensity pairs mimic a T1-like reference (first)
# and a T2-like target (second) with every neighboring region distinct.
_HEAD = [
    ((0.0, 0.0, 0.0), (0.69, 0.92, 0.81), 0.0, (1.00, 0.80)),
    ((0.0, -0.0184, 0.0), (0.6624, 0.874, 0.78), 0.0, (0.45, 0.30)),
    ((0.22, 0.0, 0.0), (0.11, 0.31, 0.22), -18.0, (0.15, 0.95)),
    ((-0.22, 0.0, 0.0), (0.16, 0.41, 0.28), 18.0, (0.15, 0.95)),
    ((0.0, 0.35, -0.15), (0.21, 0.25, 0.41), 0.0, (0.60, 0.50)),
    ((0.0, 0.1, 0.25), (0.046, 0.046, 0.05), 0.0, (0.80, 0.15)),
    ((0.0, -0.1, 0.25), (0.046, 0.046, 0.05), 0.0, (0.80, 0.15)),
    ((-0.08, -0.605, 0.0), (0.046, 0.023, 0.05), 0.0, (0.70, 0.60)),
    ((0.0, -0.606, 0.0), (0.023, 0.023, 0.02), 0.0, (0.70, 0.60)),
    ((0.06, -0.605, 0.0), (0.023, 0.046, 0.02), 0.0, (0.70, 0.60)),
]
_LESION = ((0.3, -0.3, 0.1), (0.08, 0.08, 0.08), 0.0)


def head_phantom_spec(dims=(64, 64, 64), scale: float = 0.8, voxel_size=(1.0, 1.0, 1.0),
                      lesion: bool = False) -> PhantomSpec:
    """Two-contrast head phantom, shrunk by ``scale`` to leave room for motion."""
    ells = [
        Ellipsoid(tuple(scale * c for c in center), tuple(scale * a for a in axes), inten, angle)
        for center, axes, angle, inten in _HEAD
    ]
    if lesion:
        center, axes, angle = _LESION
        # only visible in the target contrast
        ells.append(Ellipsoid(tuple(scale * c for c in center), tuple(scale * a for a in axes), (0.45, 0.9), angle))
    return PhantomSpec(tuple(dims), ells, 2, tuple(voxel_size), lesion)


PRESETS = {
    "two-contrast-64": lambda: head_phantom_spec((64, 64, 64)),
    "two-contrast-32": lambda: head_phantom_spec((32, 32, 32)),
    "two-contrast-16": lambda: head_phantom_spec((16, 16, 16)),
}


def normalized_grid(dims):
    return np.meshgrid(*[(np.arange(n) - n // 2) / (n / 2) for n in dims], indexing="ij", sparse=True)


def make_phantom(spec: PhantomSpec) -> list[np.ndarray]:
    """Voxelize the spec; one complex volume per contrast."""
    x, y, z = normalized_grid(spec.dims)
    vols = [np.zeros(spec.dims, dtype=complex) for _ in range(spec.n_contrasts)]
    for e in spec.ellipsoids:
        th = math.radians(e.angle_deg)
        dx, dy, dz = x - e.center[0], y - e.center[1], z - e.center[2]
        xr = dx * math.cos(th) + dy * math.sin(th)
        yr = -dx * math.sin(th) + dy * math.cos(th)
        a, b, c = e.semi_axes
        inside = (xr / a) ** 2 + (yr / b) ** 2 + (dz / c) ** 2 <= 1.0
        for vol, val in zip(vols, e.intensities):
            vol[inside] = val
    return vols


@dataclass
class MotionScript:
    n_t: int
    poses: list
    transitions: list
    seed: int

    @property
    def n_poses(self) -> int:
        """Number of position changes."""
        return len(self.transitions)

    @property
    def trace(self) -> MotionTrace:
        values = np.zeros((self.n_t, 6))
        bounds = [0, *self.transitions, self.n_t]
        for pose, lo, hi in zip(self.poses, bounds[:-1], bounds[1:]):
            values[lo:hi] = pose.as_vector()
        return MotionTrace(values)

    def segments(self) -> list[tuple[int, int]]:
        bounds = [0, *self.transitions, self.n_t]
        return list(zip(bounds[:-1], bounds[1:]))


def make_motion_script(n_t: int, n_poses: int, max_tau_mm: float = 5.0, max_phi_deg: float = 5.0,
                       seed: int = 0) -> MotionScript:
    """Stepwise motion with ``n_poses`` position changes after an identity first pose."""
    if n_poses < 1 or n_poses >= n_t:
        raise InvalidParameterError("need 1 <= n_poses < n_t")
    if max_tau_mm <= 0 or max_phi_deg <= 0:
        raise InvalidParameterError("motion bounds must be positive")
    rng = np.random.default_rng(seed)
    spacing = n_t / (n_poses + 1)
    transitions = []
    for j in range(1, n_poses + 1):
        jitter = rng.uniform(-0.25, 0.25) * spacing
        transitions.append(int(round(j * spacing + jitter)))
    for j in range(len(transitions)):
        lo = transitions[j - 1] + 1 if j else 1
        transitions[j] = min(max(transitions[j], lo), n_t - (len(transitions) - j))
    poses = [RigidParams()]
    for _ in range(n_poses):
        tau = rng.uniform(-max_tau_mm, max_tau_mm, 3)
        phi = np.deg2rad(rng.uniform(-max_phi_deg, max_phi_deg, 3))
        poses.append(RigidParams(tau, phi))
    return MotionScript(n_t, poses, transitions, seed)


def _parse_accel(accel):
    if np.ndim(accel) == 0:
        return float(accel), float(accel)
    a, b = accel
    return float(a), float(b)


def make_sampling_pattern(dims, kind: str = "full", accel=1, seed: int = 0, readout_axis: int = 0,
                          power: float = 2.0, voxel_size=(1.0, 1.0, 1.0)) -> SamplingPattern:
    """Phase-encoding schedules: ``full``, ``linear`` (strided) or ``randomized``.

    For ``linear``, ``accel`` is a stride per phase-encoding axis (scalar or
    pair). For ``randomized`` it is the overall reduction factor; lines are
    drawn without replacement with weight ``(1 + |k_pe|/k_max)^-power`` and
    acquired in random order.
    """
    dims = tuple(int(n) for n in dims)
    pe_axes = [a for a in range(3) if a != readout_axis]
    na, nb = dims[pe_axes[0]], dims[pe_axes[1]]
    ma = np.arange(na) - na // 2
    mb = np.arange(nb) - nb // 2
    all_coords = np.stack(np.meshgrid(ma, mb, indexing="ij"), axis=-1).reshape(-1, 2)
    n_lines = all_coords.shape[0]
    if kind == "full":
        coords = all_coords
    elif kind == "linear":
        sa, sb = _parse_accel(accel)
        if sa < 1 or sb < 1 or sa != int(sa) or sb != int(sb):
            raise InvalidParameterError("linear acceleration must be integer strides >= 1")
        if sa > na or sb > nb:
            raise InvalidParameterError("acceleration exceeds the number of lines")
        keep = (np.mod(all_coords[:, 0] - ma[0], int(sa)) == 0) & (np.mod(all_coords[:, 1] - mb[0], int(sb)) == 0)
        coords = all_coords[keep]
    elif kind == "randomized":
        accel = float(accel)
        if accel < 1:
            raise InvalidParameterError("accel must be >= 1")
        if accel > n_lines:
            raise InvalidParameterError("acceleration exceeds the number of lines")
        count = int(math.ceil(n_lines / accel))
        weights = sampling_density(dims, readout_axis, power, voxel_size)
        rng = np.random.default_rng(seed)
        # Efraimidis-Spirakis keys: top-`count` equals sequential weighted draws
        keys = np.log(rng.random(n_lines)) / weights
        chosen = np.argsort(-keys, kind="stable")[:count]
        coords = all_coords[rng.permutation(np.sort(chosen))]
    else:
        raise InvalidParameterError(f"unknown pattern kind {kind!r}")
    return SamplingPattern(dims, coords, readout_axis, kind, tuple(voxel_size))


def sampling_density(dims, readout_axis: int = 0, power: float = 2.0, voxel_size=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Unnormalized line weights over the phase-encoding plane (row-major)."""
    pe_axes = [a for a in range(3) if a != readout_axis]
    ks = []
    for a in pe_axes:
        n = dims[a]
        ks.append(2 * np.pi * (np.arange(n) - n // 2) / (n * voxel_size[a]))
    ka, kb = np.meshgrid(*ks, indexing="ij")
    r = np.hypot(ka, kb).ravel()
    return (1.0 + r / r.max()) ** (-power)


def simulate_acquisition(u, trace: MotionTrace, pattern: SamplingPattern, noise_sigma: float = 0.0, seed: int = 0,
                         cfg: NufftConfig = NufftConfig()) -> KSpaceData:
    """Motion-corrupted samples plus complex white Gaussian noise."""
    if noise_sigma < 0:
        raise InvalidParameterError("noise_sigma must be >= 0")
    data = perturbed_fourier(u, trace, pattern, cfg)
    samples = data.samples
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        noise = rng.standard_normal(samples.shape) + 1j * rng.standard_normal(samples.shape)
        samples = samples + noise_sigma * noise
    return KSpaceData(samples, pattern, noise_sigma, meta=dict(data.meta))


def rigid_transform_volume(u, params: RigidParams, voxel_size=(1.0, 1.0, 1.0),
                           cfg: NufftConfig = NufftConfig()) -> np.ndarray:
    """Band-limited rigid transform of a volume, computed in k-space."""
    u = np.asarray(u)
    pattern = make_sampling_pattern(u.shape, "full", voxel_size=voxel_size)
    trace = MotionTrace(np.tile(params.as_vector(), (pattern.n_t, 1)))
    ks = np.zeros(u.shape, dtype=complex)
    ks[pattern.grid_indices()] = MotionOperator(pattern, trace, cfg).forward(u)
    return ifft3_centered(ks)
