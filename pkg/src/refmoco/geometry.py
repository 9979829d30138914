"""Rigid-motion parameterization and coordinate conventions.

Axes: x = left-right, y = posterior-anterior, z = inferior-superior.
Planes: xy = axial, xz = coronal, yz = sagittal.

A plane rotation ``R_ab(angle)`` turns ``e_a`` toward ``e_b`` (right-hand
rule about ``e_a x e_b``). The full rotation applies the xy rotation first,
then xz, then yz::

    R = R_yz(phi_yz) @ R_xz(phi_xz) @ R_xy(phi_xy)

A rigid transform maps a point ``p`` (mm, relative to the FOV center) to
``R @ p + tau``. Six-parameter vectors are always ordered
``(tau_x, tau_y, tau_z, phi_xy, phi_xz, phi_yz)`` with angles in radians.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

PARAM_NAMES = ("tau_x", "tau_y", "tau_z", "phi_xy", "phi_xz", "phi_yz")
CSV_HEADER = ("t", "tau_x_mm", "tau_y_mm", "tau_z_mm", "phi_xy_deg", "phi_xz_deg", "phi_yz_deg")


class InvalidParameterError(ValueError):
    """Raised for non-finite or out-of-domain parameters."""


@dataclass(frozen=True)
class AxisConvention:
    x: str = "left-right"
    y: str = "posterior-anterior"
    z: str = "inferior-superior"
    xy: str = "axial"
    xz: str = "coronal"
    yz: str = "sagittal"
    rotation_sign: str = "right-hand rule, R_ab turns e_a toward e_b"
    composition: str = "R_yz @ R_xz @ R_xy (xy applied first)"

    def as_dict(self) -> dict:
        return dict(self.__dict__)


AXES = AxisConvention()


def wrap_angle(phi):
    """Wrap angles to the canonical range (-pi, pi]."""
    phi = np.asarray(phi, dtype=float)
    wrapped = np.pi - np.mod(np.pi - phi, 2 * np.pi)
    return wrapped


def _finite(x, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise InvalidParameterError(f"{what} must be finite")
    return x


@dataclass(frozen=True)
class RigidParams:
    """Translation ``tau`` (mm) and plane-rotation angles ``phi`` (rad)."""

    tau: np.ndarray = field(default_factory=lambda: np.zeros(3))
    phi: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        tau = _finite(self.tau, "tau").reshape(3).copy()
        phi = wrap_angle(_finite(self.phi, "phi").reshape(3))
        tau.setflags(write=False)
        phi.setflags(write=False)
        object.__setattr__(self, "tau", tau)
        object.__setattr__(self, "phi", phi)

    @classmethod
    def from_vector(cls, theta: Sequence[float]) -> "RigidParams":
        theta = np.asarray(theta, dtype=float).reshape(6)
        return cls(theta[:3], theta[3:])

    @classmethod
    def from_degrees(cls, tau_mm, phi_deg) -> "RigidParams":
        return cls(tau_mm, np.deg2rad(phi_deg))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.tau, self.phi])

    @property
    def matrix(self) -> np.ndarray:
        return rotation_matrix(self.phi)

    def is_identity(self) -> bool:
        return not np.any(self.tau) and not np.any(self.phi)


class MotionTrace:
    """Time-resolved rigid parameters, stored as an ``(n_t, 6)`` array.

    Row ``t`` holds the pose during readout line ``t`` (acquisition order).
    """

    def __init__(self, values):
        values = _finite(values, "motion trace")
        if values.ndim != 2 or values.shape[1] != 6:
            raise InvalidParameterError(f"trace must have shape (n_t, 6), got {values.shape}")
        values = values.copy()
        values[:, 3:] = wrap_angle(values[:, 3:])
        self._values = values
        self._values.setflags(write=False)

    @classmethod
    def identity(cls, n_t: int) -> "MotionTrace":
        return cls(np.zeros((n_t, 6)))

    @classmethod
    def from_params(cls, params: Iterable[RigidParams]) -> "MotionTrace":
        rows = [p.as_vector() for p in params]
        return cls(np.array(rows).reshape(-1, 6))

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def tau(self) -> np.ndarray:
        return self._values[:, :3]

    @property
    def phi(self) -> np.ndarray:
        return self._values[:, 3:]

    @property
    def params(self) -> list[RigidParams]:
        return [RigidParams.from_vector(row) for row in self._values]

    def __len__(self) -> int:
        return self._values.shape[0]

    def __getitem__(self, t) -> RigidParams:
        return RigidParams.from_vector(self._values[t])

    def __eq__(self, other) -> bool:
        return isinstance(other, MotionTrace) and np.array_equal(self._values, other._values)

    def __repr__(self) -> str:
        return f"MotionTrace(n_t={len(self)})"

    def subset(self, index) -> "MotionTrace":
        return MotionTrace(self._values[index])

    def to_csv_rows(self) -> list[list]:
        rows = []
        for t, v in enumerate(self._values):
            rows.append([t, *v[:3].tolist(), *np.rad2deg(v[3:]).tolist()])
        return rows

    @classmethod
    def from_csv_rows(cls, rows) -> "MotionTrace":
        rows = sorted(rows, key=lambda r: int(r[0]))
        arr = np.array([[float(x) for x in r[1:7]] for r in rows]).reshape(-1, 6)
        arr[:, 3:] = np.deg2rad(arr[:, 3:])
        return cls(arr)


def _plane_rotation(angle: float, a: int, b: int) -> np.ndarray:
    r = np.eye(3)
    c, s = np.cos(angle), np.sin(angle)
    r[a, a] = c
    r[b, b] = c
    r[b, a] = s
    r[a, b] = -s
    return r


def _plane_rotation_derivative(angle: float, a: int, b: int) -> np.ndarray:
    d = np.zeros((3, 3))
    c, s = np.cos(angle), np.sin(angle)
    d[a, a] = -s
    d[b, b] = -s
    d[b, a] = c
    d[a, b] = -c
    return d


_PLANES = ((0, 1), (0, 2), (1, 2))


def rotation_matrix(phi) -> np.ndarray:
    """3x3 rotation for angles ``(phi_xy, phi_xz, phi_yz)`` in radians."""
    phi = _finite(phi, "phi").reshape(3)
    r_xy, r_xz, r_yz = (_plane_rotation(p, *pl) for p, pl in zip(phi, _PLANES))
    return r_yz @ r_xz @ r_xy


def rotation_matrices(phis) -> np.ndarray:
    """Vectorized :func:`rotation_matrix` over an ``(n, 3)`` angle array."""
    phis = _finite(phis, "phi").reshape(-1, 3)
    c = np.cos(phis)
    s = np.sin(phis)
    n = phis.shape[0]
    out = np.empty((n, 3, 3))
    ca, cb, cc = c.T
    sa, sb, sc = s.T
    out[:, 0, 0] = ca * cb
    out[:, 0, 1] = -sa * cb
    out[:, 0, 2] = -sb
    out[:, 1, 0] = sa * cc - sb * sc * ca
    out[:, 1, 1] = sa * sb * sc + ca * cc
    out[:, 1, 2] = -sc * cb
    out[:, 2, 0] = sa * sc + sb * ca * cc
    out[:, 2, 1] = -sa * sb * cc + sc * ca
    out[:, 2, 2] = cb * cc
    return out


def rotation_matrix_derivatives(phi) -> np.ndarray:
    """Partial derivatives ``dR/dphi_j``, stacked as a ``(3, 3, 3)`` array."""
    phi = _finite(phi, "phi").reshape(3)
    mats = [_plane_rotation(p, *pl) for p, pl in zip(phi, _PLANES)]
    ders = [_plane_rotation_derivative(p, *pl) for p, pl in zip(phi, _PLANES)]
    r_xy, r_xz, r_yz = mats
    d_xy, d_xz, d_yz = ders
    return np.stack([r_yz @ r_xz @ d_xy, r_yz @ d_xz @ r_xy, d_yz @ r_xz @ r_xy])


def rotation_angles(r: np.ndarray) -> np.ndarray:
    """Recover ``(phi_xy, phi_xz, phi_yz)`` from a rotation matrix.

    Valid away from the gimbal singularity ``|phi_xz| = pi/2``.
    """
    r = np.asarray(r, dtype=float)
    phi_xz = np.arcsin(np.clip(-r[0, 2], -1.0, 1.0))
    phi_xy = np.arctan2(-r[0, 1], r[0, 0])
    phi_yz = np.arctan2(-r[1, 2], r[2, 2])
    return np.array([phi_xy, phi_xz, phi_yz])


def apply_rigid(params: RigidParams, points) -> np.ndarray:
    """Map points (mm) through ``p -> R p + tau``."""
    points = _finite(points, "points")
    return points @ params.matrix.T + params.tau


def apply_rigid_inverse(params: RigidParams, points) -> np.ndarray:
    """Inverse of :func:`apply_rigid`: untranslate, then rotate back."""
    points = _finite(points, "points")
    return (points - params.tau) @ params.matrix


def rotate_kpoints(phi, kpoints) -> np.ndarray:
    kpoints = _finite(kpoints, "kpoints")
    return kpoints @ rotation_matrix(phi).T


def inverse_rotate_kpoints(phi, kpoints) -> np.ndarray:
    """Return ``R_phi^T k`` for each k-space point (rad/mm)."""
    kpoints = _finite(kpoints, "kpoints")
    return kpoints @ rotation_matrix(phi)


def compose(first: RigidParams, second: RigidParams) -> RigidParams:
    """Rigid transform equivalent to applying ``first`` and then ``second``."""
    r1, r2 = first.matrix, second.matrix
    r = r2 @ r1
    tau = r2 @ first.tau + second.tau
    return RigidParams(tau, rotation_angles(r))


def invert(params: RigidParams) -> RigidParams:
    r = params.matrix
    return RigidParams(-r.T @ params.tau, rotation_angles(r.T))


def voxel_positions(dims, voxel_size) -> list[np.ndarray]:
    """Per-axis voxel center coordinates (mm); index ``n//2`` sits at the origin."""
    return [(np.arange(n) - n // 2) * float(d) for n, d in zip(dims, voxel_size)]


def kspace_frequencies(dims, voxel_size) -> list[np.ndarray]:
    """Per-axis Cartesian k coordinates in rad/mm, ``k = 2 pi m / (n d)``."""
    return [2 * np.pi * (np.arange(n) - n // 2) / (n * float(d)) for n, d in zip(dims, voxel_size)]
