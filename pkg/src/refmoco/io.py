"""Raw volume files with JSON sidecars, run manifests, trace CSV and PNG export."""
from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .forward import KSpaceData, SamplingPattern
from .geometry import AXES, CSV_HEADER, MotionTrace
from .nufft import InvalidInputError

DTYPES = {"complex64": "<c8", "complex128": "<c16", "float32": "<f4"}
KINDS = ("image", "kspace")


class FormatError(InvalidInputError):
    pass


def atomic_write_bytes(path, payload: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"cannot parse {path}: {exc}") from exc


@dataclass
class VolumeFile:
    """A raw little-endian payload (x fastest) described by a JSON sidecar.

    ``path`` names the sidecar (``*.json``); the payload sits next to it
    with the ``.raw`` suffix.
    """

    dims: tuple
    voxel_size_mm: tuple
    dtype: str
    kind: str = "image"

    def sidecar(self) -> dict:
        return {
            "dims": list(self.dims),
            "voxel_size_mm": list(self.voxel_size_mm),
            "dtype": self.dtype,
            "kind": self.kind,
            "axis_convention": AXES.as_dict(),
            "byte_order": "little",
            "ordering": "x-fastest",
        }


def _paths(path):
    path = Path(path)
    base = path.with_suffix("") if path.suffix in (".json", ".raw") else path
    return base.with_suffix(".json"), base.with_suffix(".raw")


def write_volume(path, array, voxel_size=(1.0, 1.0, 1.0), kind: str = "image", dtype: str | None = None) -> Path:
    """Write ``array`` (cast to ``dtype``) and its sidecar; returns the sidecar path."""
    array = np.asarray(getattr(array, "data", array))
    if kind not in KINDS:
        raise FormatError(f"kind must be one of {KINDS}")
    if dtype is None:
        dtype = "complex64" if np.iscomplexobj(array) else "float32"
    if dtype not in DTYPES:
        raise FormatError(f"unsupported dtype {dtype}")
    if not np.all(np.isfinite(array)):
        raise FormatError("refusing to write non-finite values")
    meta = VolumeFile(tuple(int(n) for n in array.shape), tuple(float(v) for v in voxel_size), dtype, kind)
    side, raw = _paths(path)
    payload = np.asarray(array, dtype=DTYPES[dtype]).tobytes(order="F")
    atomic_write_bytes(raw, payload)
    write_json(side, meta.sidecar())
    return side


def read_volume_meta(path) -> VolumeFile:
    side, _ = _paths(path)
    if not side.exists():
        raise FormatError(f"missing sidecar {side}")
    meta = read_json(side)
    try:
        dims = tuple(int(n) for n in meta["dims"])
        vf = VolumeFile(dims, tuple(float(v) for v in meta["voxel_size_mm"]), meta["dtype"], meta.get("kind", "image"))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed sidecar {side}: {exc}") from exc
    if vf.dtype not in DTYPES or vf.kind not in KINDS or any(n <= 0 for n in dims):
        raise FormatError(f"invalid sidecar {side}")
    return vf


def read_volume(path):
    """Return ``(array, VolumeFile)``."""
    meta = read_volume_meta(path)
    _, raw = _paths(path)
    payload = raw.read_bytes()
    dt = np.dtype(DTYPES[meta.dtype])
    if len(payload) != int(np.prod(meta.dims)) * dt.itemsize:
        raise FormatError(f"{raw} has {len(payload)} bytes, expected {int(np.prod(meta.dims)) * dt.itemsize}")
    arr = np.frombuffer(payload, dtype=dt).reshape(meta.dims, order="F")
    return arr.astype(dt.newbyteorder("="), copy=True), meta


def pattern_to_dict(pattern: SamplingPattern) -> dict:
    return {
        "dims": list(pattern.dims),
        "readout_axis": pattern.readout_axis,
        "kind": pattern.kind,
        "voxel_size_mm": list(pattern.voxel_size),
        "pe_coords": pattern.pe_coords.tolist(),
    }


def pattern_from_dict(d: dict) -> SamplingPattern:
    try:
        return SamplingPattern(tuple(d["dims"]), np.asarray(d["pe_coords"], dtype=np.int64).reshape(-1, 2),
                               int(d["readout_axis"]), d["kind"], tuple(d["voxel_size_mm"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed pattern: {exc}") from exc


def write_pattern(path, pattern: SamplingPattern) -> Path:
    write_json(path, pattern_to_dict(pattern))
    return Path(path)


def read_pattern(path) -> SamplingPattern:
    return pattern_from_dict(read_json(path))


def write_kspace(path, data: KSpaceData) -> Path:
    """Samples as a ``(n_t, n_r)`` complex128 payload; the sidecar also holds the noise level."""
    side = write_volume(path, data.samples, data.pattern.voxel_size, kind="kspace", dtype="complex128")
    meta = read_json(side)
    meta["noise_sigma"] = data.noise_sigma
    meta["meta"] = data.meta
    write_json(side, meta)
    return side


def read_kspace(path, pattern: SamplingPattern) -> KSpaceData:
    arr, meta = read_volume(path)
    if meta.kind != "kspace":
        raise FormatError(f"{path} is not a k-space file")
    side = read_json(_paths(path)[0])
    return KSpaceData(arr, pattern, side.get("noise_sigma"), side.get("meta", {}))


def write_trace_csv(path, trace: MotionTrace) -> Path:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for row in trace.to_csv_rows():
        writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
    atomic_write_text(path, buf.getvalue())
    return Path(path)


def read_trace_csv(path) -> MotionTrace:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise FormatError(f"{path}: expected header {','.join(CSV_HEADER)}")
    try:
        return MotionTrace.from_csv_rows([[int(r[0])] + [float(v) for v in r[1:]] for r in rows[1:]])
    except (ValueError, IndexError) as exc:
        raise FormatError(f"{path}: {exc}") from exc


def write_manifest(run_dir, command: str, config: dict, inputs: dict, outputs: dict, seeds: dict | None = None,
                   timings: dict | None = None, extra: dict | None = None) -> Path:
    """Record a run; every listed input and output must exist.

    ``extra`` entries are added at the top level.
    """
    run_dir = Path(run_dir)
    for label, p in {**inputs, **outputs}.items():
        if not Path(p).exists():
            raise FormatError(f"manifest entry {label!r} points to missing file {p}")

    def rel(p):
        p = Path(p).resolve()
        try:
            return str(p.relative_to(run_dir.resolve()))
        except ValueError:
            return str(p)

    manifest = {
        "command": command,
        "tool_version": __version__,
        "config": config,
        "seeds": seeds or {},
        "inputs": {k: rel(v) for k, v in inputs.items()},
        "outputs": {k: rel(v) for k, v in outputs.items()},
        "timings": timings or {},
        **(extra or {}),
    }
    path = run_dir / "manifest.json"
    write_json(path, manifest)
    return path


def read_manifest(path) -> dict:
    return read_json(path)


def window_magnitude(img, vmax: float) -> np.ndarray:
    mag = np.abs(img)
    scale = 255.0 / vmax if vmax > 0 else 0.0
    return np.clip(np.round(mag * scale), 0, 255).astype(np.uint8)


def write_slice_png(path, vol, percentile: float = 99.5) -> dict:
    """Sagittal, coronal and axial central magnitude slices side by side.

    Returns the window parameters.
    """
    from PIL import Image

    from .metrics import SLICE_AXES, extract_slice

    vol = np.asarray(getattr(vol, "data", vol))
    vmax = float(np.percentile(np.abs(vol), percentile))
    panels = [window_magnitude(extract_slice(vol, name), vmax) for name in SLICE_AXES]
    # rows of the image run along the second in-plane axis, top = high index
    panels = [np.flipud(p.T) for p in panels]
    height = max(p.shape[0] for p in panels)
    width = sum(p.shape[1] for p in panels)
    canvas = np.zeros((height, width), dtype=np.uint8)
    col = 0
    for p in panels:
        canvas[: p.shape[0], col:col + p.shape[1]] = p
        col += p.shape[1]
    buf = io.BytesIO()
    Image.fromarray(canvas, mode="L").save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())
    return {"window_min": 0.0, "window_max": vmax, "percentile": percentile, "order": list(SLICE_AXES)}
