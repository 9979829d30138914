"""PSNR and SSIM on magnitude images (volumes or slices)."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .nufft import InvalidInputError

# slice name -> fixed axis (x = LR, y = PA, z = IS)
SLICE_AXES = {"sagittal": 0, "coronal": 1, "axial": 2}


def _magnitudes(x, ref):
    x = np.abs(np.asarray(getattr(x, "data", x)))
    ref = np.abs(np.asarray(getattr(ref, "data", ref)))
    if x.shape != ref.shape:
        raise InvalidInputError(f"shape mismatch {x.shape} vs {ref.shape}")
    return x.astype(float), ref.astype(float)


def psnr(x, ref) -> float:
    """``20 log10(max|ref| / RMSE)``; ``inf`` when the images are identical."""
    x, ref = _magnitudes(x, ref)
    peak = ref.max()
    if peak <= 0:
        raise InvalidInputError("reference is identically zero")
    mse = np.mean((x - ref) ** 2)
    if mse == 0:
        return float("inf")
    return float(20 * np.log10(peak / np.sqrt(mse)))


def ssim(x, ref, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float | None = None, symmetric_range: bool = False) -> float:
    """Mean SSIM with a Gaussian window; the border of half a window is excluded.

    The dynamic range is ``max|ref|`` unless given, or the pair maximum with
    ``symmetric_range``.
    """
    x, ref = _magnitudes(x, ref)
    if window % 2 == 0 or window < 3:
        raise ValueError("window must be odd and >= 3")
    if min(ref.shape) < window:
        raise ValueError(f"window {window} larger than image {ref.shape}")
    if data_range is None:
        data_range = max(x.max(), ref.max()) if symmetric_range else ref.max()
    radius = (window - 1) // 2
    filt = dict(sigma=sigma, truncate=radius / sigma, mode="reflect")
    mu_x = gaussian_filter(x, **filt)
    mu_r = gaussian_filter(ref, **filt)
    sxx = gaussian_filter(x * x, **filt) - mu_x**2
    srr = gaussian_filter(ref * ref, **filt) - mu_r**2
    sxr = gaussian_filter(x * ref, **filt) - mu_x * mu_r
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    smap = ((2 * mu_x * mu_r + c1) * (2 * sxr + c2)) / ((mu_x**2 + mu_r**2 + c1) * (sxx + srr + c2))
    crop = tuple(slice(radius, n - radius) for n in smap.shape)
    return float(smap[crop].mean())


def central_slices(dims) -> dict:
    return {name: dims[ax] // 2 for name, ax in SLICE_AXES.items()}


def extract_slice(vol, name: str, index: int | None = None) -> np.ndarray:
    vol = np.asarray(getattr(vol, "data", vol))
    ax = SLICE_AXES[name]
    if index is None:
        index = vol.shape[ax] // 2
    return np.take(vol, index, axis=ax)


@dataclass
class QualityReport:
    psnr_db: dict = field(default_factory=dict)
    ssim: dict = field(default_factory=dict)
    slice_indices: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def clean(d):
            return {k: (None if v == float("inf") else v) for k, v in d.items()}

        out = asdict(self)
        out["psnr_db"] = clean(out["psnr_db"])
        out["identical"] = any(v == float("inf") for v in self.psnr_db.values())
        return out

    def csv_row(self, label: str = "") -> list:
        row = [label]
        for key in ("volume", *SLICE_AXES):
            row += [self.psnr_db.get(key), self.ssim.get(key)]
        return row

    @staticmethod
    def csv_header() -> list:
        head = ["run"]
        for key in ("volume", *SLICE_AXES):
            head += [f"psnr_{key}", f"ssim_{key}"]
        return head


def quality_report(x, ref, slice_indices: dict | None = None) -> QualityReport:
    """PSNR/SSIM on the whole volume and on sagittal, coronal and axial slices."""
    x, ref = _magnitudes(x, ref)
    indices = central_slices(ref.shape)
    indices.update(slice_indices or {})
    rep = QualityReport(slice_indices=indices)
    rep.psnr_db["volume"] = psnr(x, ref)
    rep.ssim["volume"] = ssim(x, ref)
    for name, idx in indices.items():
        xs, rs = extract_slice(x, name, idx), extract_slice(ref, name, idx)
        rep.psnr_db[name] = psnr(xs, rs)
        rep.ssim[name] = ssim(xs, rs)
    return rep
