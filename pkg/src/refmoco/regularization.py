"""Structure-guided total variation, its ball projection, and motion smoothing.

Gradients are forward differences in voxel units with a zero difference at
the far face of every axis, so the TV kernel is exactly the constants.
Complex gradients are measured with the Euclidean norm over their six real
components.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numba
import numpy as np
from scipy import sparse
from scipy.linalg import solveh_banded

from .geometry import InvalidParameterError, MotionTrace
from .nufft import InvalidInputError

log = logging.getLogger(__name__)

MODES = ("guided", "plain-tv")


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, gap: float):
        super().__init__(f"{message} (relative gap {gap:.3g})")
        self.gap = gap


@dataclass(frozen=True)
class RegConfig:
    epsilon: float = 1.0
    eta: float | None = None
    inner_iters: int = 200
    inner_tol: float = 1e-4
    mu: float = 1.0
    mode: str = "guided"

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidParameterError(f"mode must be one of {MODES}")
        if self.epsilon <= 0 or self.inner_iters < 1 or self.inner_tol <= 0 or self.mu < 0:
            raise InvalidParameterError("regularization parameters must be positive")
        if self.eta is not None and self.eta <= 0:
            raise InvalidParameterError("eta must be positive")


def gradient(u) -> np.ndarray:
    """Forward differences, shape ``(3, *u.shape)``; zero on the far face."""
    u = np.asarray(u)
    g = np.zeros((3,) + u.shape, dtype=np.result_type(u.dtype, float))
    g[0, :-1] = u[1:] - u[:-1]
    g[1, :, :-1] = u[:, 1:] - u[:, :-1]
    g[2, :, :, :-1] = u[:, :, 1:] - u[:, :, :-1]
    return g


def gradient_adjoint(p) -> np.ndarray:
    """Adjoint of :func:`gradient` (negative divergence)."""
    p = np.asarray(p)
    out = np.zeros(p.shape[1:], dtype=p.dtype)
    out[:-1] -= p[0, :-1]
    out[1:] += p[0, :-1]
    out[:, :-1] -= p[1, :, :-1]
    out[:, 1:] += p[1, :, :-1]
    out[:, :, :-1] -= p[2, :, :, :-1]
    out[:, :, 1:] += p[2, :, :, :-1]
    return out


def _pointwise_norm(g) -> np.ndarray:
    return np.sqrt(np.sum(g.real**2 + g.imag**2, axis=0)) if np.iscomplexobj(g) else np.sqrt(np.sum(g**2, axis=0))


@dataclass
class GuideField:
    """Normalized reference gradient ``xi``, shape ``(3, *dims)``."""

    xi: np.ndarray
    eta: float = 0.0

    @property
    def dims(self) -> tuple:
        return self.xi.shape[1:]

    @classmethod
    def zeros(cls, dims) -> "GuideField":
        return cls(np.zeros((3,) + tuple(dims)), 0.0)

    @property
    def is_trivial(self) -> bool:
        return not np.any(self.xi)

    def project(self, g) -> np.ndarray:
        """Apply ``I - xi xi^H`` at every voxel."""
        if g.shape != self.xi.shape:
            raise InvalidInputError(f"gradient field {g.shape[1:]} does not match guide {self.dims}")
        if self.is_trivial:
            return g
        inner = np.sum(np.conj(self.xi) * g, axis=0)
        return g - self.xi * inner


def default_eta(v, fraction: float = 0.05) -> float:
    """``fraction`` of the largest gradient magnitude of the reference."""
    gmax = float(_pointwise_norm(gradient(v)).max())
    return fraction * gmax if gmax > 0 else 1.0


def build_guide(v, eta: float | None = None) -> GuideField:
    """``xi = grad v / sqrt(|grad v|^2 + eta^2)``; ``eta`` defaults to :func:`default_eta`."""
    v = np.asarray(getattr(v, "data", v))
    if not np.all(np.isfinite(v)):
        raise InvalidInputError("reference contains non-finite values")
    if eta is None:
        eta = default_eta(v)
    if not eta > 0:
        raise InvalidParameterError("eta must be > 0")
    g = gradient(v)
    return GuideField(g / np.sqrt(_pointwise_norm(g) ** 2 + eta**2), float(eta))


def projected_gradient(u, guide: GuideField) -> np.ndarray:
    u = np.asarray(getattr(u, "data", u))
    if u.shape != guide.dims:
        raise InvalidInputError(f"volume {u.shape} does not match guide {guide.dims}")
    return guide.project(gradient(u))


def sgtv_value(u, guide: GuideField) -> float:
    return float(np.sum(_pointwise_norm(projected_gradient(u, guide))))


def tv_value(u) -> float:
    u = np.asarray(getattr(u, "data", u))
    return float(np.sum(_pointwise_norm(gradient(u))))


@numba.njit(cache=True, fastmath=True, error_model="numpy")
def _k_apply(w, xi, guided, out):
    """``out = Pi grad w`` for complex ``w``; ``xi`` is ignored unless ``guided``."""
    nx, ny, nz = w.shape
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                c = w[i, j, k]
                gx = w[i + 1, j, k] - c if i < nx - 1 else 0j
                gy = w[i, j + 1, k] - c if j < ny - 1 else 0j
                gz = w[i, j, k + 1] - c if k < nz - 1 else 0j
                if guided:
                    a = xi[0, i, j, k]
                    b = xi[1, i, j, k]
                    d = xi[2, i, j, k]
                    s = a.conjugate() * gx + b.conjugate() * gy + d.conjugate() * gz
                    gx -= a * s
                    gy -= b * s
                    gz -= d * s
                out[0, i, j, k] = gx
                out[1, i, j, k] = gy
                out[2, i, j, k] = gz


@numba.njit(cache=True, fastmath=True, error_model="numpy")
def _k_adjoint(p, xi, guided, buf, out):
    """``out = grad^T Pi p``; ``buf`` receives ``Pi p``."""
    nx, ny, nz = out.shape
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                px = p[0, i, j, k]
                py = p[1, i, j, k]
                pz = p[2, i, j, k]
                if guided:
                    a = xi[0, i, j, k]
                    b = xi[1, i, j, k]
                    d = xi[2, i, j, k]
                    s = a.conjugate() * px + b.conjugate() * py + d.conjugate() * pz
                    px -= a * s
                    py -= b * s
                    pz -= d * s
                buf[0, i, j, k] = px
                buf[1, i, j, k] = py
                buf[2, i, j, k] = pz
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                acc = 0j
                if i < nx - 1:
                    acc -= buf[0, i, j, k]
                if i > 0:
                    acc += buf[0, i - 1, j, k]
                if j < ny - 1:
                    acc -= buf[1, i, j, k]
                if j > 0:
                    acc += buf[1, i, j - 1, k]
                if k < nz - 1:
                    acc -= buf[2, i, j, k]
                if k > 0:
                    acc += buf[2, i, j, k - 1]
                out[i, j, k] = acc


@numba.njit(cache=True, fastmath=True, error_model="numpy")
def _field_norms(q, out):
    nx, ny, nz = out.shape
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                a = q[0, i, j, k]
                b = q[1, i, j, k]
                c = q[2, i, j, k]
                out[i, j, k] = np.sqrt(a.real * a.real + a.imag * a.imag + b.real * b.real + b.imag * b.imag
                                       + c.real * c.real + c.imag * c.imag)


@numba.njit(cache=True, fastmath=True, error_model="numpy")
def _clip_and_extrapolate(q, norms, lam, p, y, beta):
    """``p_new = q * min(1, lam / |q|)``; ``y = p_new + beta (p_new - p)``; ``p <- p_new``."""
    nx, ny, nz = norms.shape
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                nrm = norms[i, j, k]
                scale = lam / nrm if nrm > lam else 1.0
                for c in range(3):
                    new = q[c, i, j, k] * scale
                    y[c, i, j, k] = new + beta * (new - p[c, i, j, k])
                    p[c, i, j, k] = new


class _SgtvOperator:
    """``K = Pi grad`` on complex volumes with reusable work buffers."""

    def __init__(self, guide: "GuideField", dims):
        self.guided = not guide.is_trivial
        self.xi = np.ascontiguousarray(guide.xi, dtype=complex) if self.guided else np.zeros((3, 1, 1, 1), complex)
        self.buf = np.empty((3,) + tuple(dims), dtype=complex)

    def apply(self, w, out=None):
        out = np.empty((3,) + w.shape, dtype=complex) if out is None else out
        _k_apply(w, self.xi, self.guided, out)
        return out

    def adjoint(self, p, out=None):
        out = np.empty(p.shape[1:], dtype=complex) if out is None else out
        _k_adjoint(p, self.xi, self.guided, self.buf, out)
        return out


@numba.njit(cache=True)
def _threshold_l1(norms, radius):
    """Soft threshold ``lam`` with ``sum(max(norms - lam, 0)) == radius`` (Michelot).

    The active set only shrinks, so every pass rescans the full array
    against the rising threshold. Needs ``sum(norms) > radius``.
    """
    total = 0.0
    count = 0
    for v in norms:
        if v > 0:
            total += v
            count += 1
    lam = (total - radius) / count
    while True:
        total = 0.0
        kept = 0
        for v in norms:
            if v > lam:
                total += v
                kept += 1
        if kept == count:
            return lam
        count = kept
        lam = (total - radius) / count


def _prox_dual_norm(q: np.ndarray, radius: float) -> np.ndarray:
    """Prox of ``radius * max_x |q_x|``: shrink ``q`` by its projection onto the l1,2 ball."""
    norms = _pointwise_norm(q)
    total = norms.sum()
    if total <= radius:
        return np.zeros_like(q)
    if radius <= 0:
        return q
    lam = _threshold_l1(norms.ravel(), radius)
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(norms > lam, lam / norms, 1.0)
    return q * scale


@dataclass
class ProjectionInfo:
    iterations: int
    gap: float
    sgtv: float
    rescaled: bool
    dual: np.ndarray


def project_sgtv_ball(u, guide: GuideField, epsilon: float, inner_iters: int = 200, inner_tol: float = 1e-4,
                      dual_init=None, strict: bool = False, return_info: bool = False):
    """Euclidean projection of ``u`` onto ``{w : sgtv_value(w, guide) <= epsilon}``.

    Accelerated projected gradient on the dual problem

        min_p 0.5 * ||u - K^* p||^2 + epsilon * max_x |p_x|,   K = Pi grad

    with ``w = u - K^* p``. If the iteration budget runs out before the
    constraint holds to ``1e-3`` relative, ``w`` is pulled toward its mean
    (which the dual update never changes) until it is feasible; with
    ``strict=True`` that case raises :class:`ConvergenceError` instead.
    """
    u = np.asarray(getattr(u, "data", u))
    if epsilon < 0:
        raise InvalidParameterError("epsilon must be >= 0")
    if u.shape != guide.dims:
        raise InvalidInputError(f"volume {u.shape} does not match guide {guide.dims}")

    real_input = not np.iscomplexobj(u) and not np.iscomplexobj(guide.xi)
    uc = np.ascontiguousarray(u, dtype=complex)
    kop = _SgtvOperator(guide, u.shape)
    norms = np.empty(u.shape)

    def sgtv_of(w):
        _field_norms(kop.apply(w, q), norms)
        return float(norms.sum())

    q = np.empty((3,) + u.shape, dtype=complex)
    g0 = sgtv_of(uc)
    zero_dual = np.zeros((3,) + u.shape, dtype=complex)
    if g0 <= epsilon:
        info = ProjectionInfo(0, 0.0, g0, False, zero_dual)
        return (u.copy(), info) if return_info else u.copy()

    mean = u.mean()
    if epsilon == 0:
        w = np.full_like(u, mean)
        info = ProjectionInfo(0, 0.0, 0.0, True, zero_dual)
        return (w, info) if return_info else w

    lip = 12.0
    p = zero_dual if dual_init is None else np.array(dual_init, dtype=complex)
    if p.shape != zero_dual.shape:
        raise InvalidInputError("dual_init has the wrong shape")
    y = p.copy()
    t = 1.0
    half_u2 = 0.5 * float(np.vdot(uc, uc).real)
    gap = np.inf
    g_w = g0
    it = 0
    w_y = np.empty_like(uc)
    w = uc - kop.adjoint(p)
    for it in range(1, inner_iters + 1):
        np.subtract(uc, kop.adjoint(y, w_y), out=w_y)
        kop.apply(w_y, q)
        q *= 1.0 / lip
        q += y
        _field_norms(q, norms)
        radius = epsilon / lip
        t_new = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        beta = (t - 1) / t_new
        if norms.sum() <= radius:
            q[:] = 0.0
            _clip_and_extrapolate(q, norms, 1.0, p, y, beta)
        else:
            _clip_and_extrapolate(q, norms, _threshold_l1(norms.ravel(), radius), p, y, beta)
        t = t_new
        if it % 5 == 0 or it == inner_iters:
            w = uc - kop.adjoint(p)
            g_w = sgtv_of(w)
            primal = 0.5 * float(np.vdot(w - uc, w - uc).real)
            _field_norms(p, norms)
            dual = half_u2 - 0.5 * float(np.vdot(w, w).real) - epsilon * float(norms.max())
            gap = abs(primal - dual) / max(primal, 1e-300)
            if g_w <= epsilon * (1 + 1e-3) and gap <= inner_tol:
                break
    if real_input:
        w = w.real
        p = p.real

    rescaled = False
    if g_w > epsilon * (1 + 1e-3):
        if strict:
            raise ConvergenceError(f"projection infeasible after {it} iterations", gap)
        w = mean + (epsilon / g_w) * (w - mean)
        g_w = epsilon
        rescaled = True
    info = ProjectionInfo(it, float(gap), g_w, rescaled, p)
    log.debug("sgtv projection: %d iterations, gap %.2e, rescaled=%s", it, gap, rescaled)
    return (w, info) if return_info else w


def _difference_banded(n: int, weight) -> np.ndarray:
    """Upper banded form of ``diag(1/alpha) + mu D^T D`` given ``weight = mu``."""
    ab = np.zeros((2, n))
    diag = np.zeros(n)
    diag[:-1] += 1
    diag[1:] += 1
    ab[1] = weight * diag
    ab[0, 1:] = -weight
    return ab


def prox_motion_smoothness(trace, alpha, mu: float) -> MotionTrace:
    """Minimizer of ``0.5 * sum (theta - z)^2 / alpha + mu * 0.5 * ||D theta||^2``.

    ``alpha`` is a positive scalar or an ``(n_t, 6)`` array of per-entry step
    sizes; each channel is one symmetric tridiagonal solve.
    """
    z = trace.values if isinstance(trace, MotionTrace) else np.asarray(trace, dtype=float)
    n = z.shape[0]
    alpha = np.broadcast_to(np.asarray(alpha, dtype=float), z.shape)
    if np.any(alpha <= 0) or mu < 0:
        raise InvalidParameterError("alpha must be > 0 and mu >= 0")
    if n == 1 or mu == 0:
        return MotionTrace(z)
    out = np.empty_like(z)
    for c in range(z.shape[1]):
        ab = _difference_banded(n, mu)
        ab[1] += 1.0 / alpha[:, c]
        out[:, c] = solveh_banded(ab, z[:, c] / alpha[:, c])
    return MotionTrace(out)


def time_interpolation_matrix(m: int, n_t: int) -> sparse.csr_matrix:
    """``(n_t, m)`` piecewise-linear interpolation from ``m`` uniform knots."""
    if m < 1 or m > n_t:
        raise InvalidParameterError(f"need 1 <= knots <= n_t, got {m} and {n_t}")
    if m == 1:
        return sparse.csr_matrix(np.ones((n_t, 1)))
    pos = np.arange(n_t) * (m - 1) / max(n_t - 1, 1)
    lo = np.minimum(np.floor(pos).astype(int), m - 2)
    frac = pos - lo
    rows = np.repeat(np.arange(n_t), 2)
    cols = np.stack([lo, lo + 1], axis=1).ravel()
    vals = np.stack([1 - frac, frac], axis=1).ravel()
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n_t, m))


def time_segment_matrix(m: int, n_t: int) -> sparse.csr_matrix:
    """``(n_t, m)`` indicator of ``m`` contiguous, near-equal segments of lines.

    Each line depends on exactly one parameter vector, so a pose change
    only affects the segment that contains it.
    """
    if m < 1 or m > n_t:
        raise InvalidParameterError(f"need 1 <= knots <= n_t, got {m} and {n_t}")
    seg = (np.arange(n_t) * m) // n_t
    return sparse.csr_matrix((np.ones(n_t), (np.arange(n_t), seg)), shape=(n_t, m))


def coarse_time_parameterize(knots, n_t: int) -> MotionTrace:
    """Expand a trace given on ``m`` uniformly spaced knots to ``n_t`` lines."""
    knots = knots.values if isinstance(knots, MotionTrace) else np.asarray(knots, dtype=float).reshape(-1, 6)
    return MotionTrace(time_interpolation_matrix(knots.shape[0], n_t) @ knots)
