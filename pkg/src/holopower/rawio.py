"""Raw little-endian float32 blobs with JSON sidecars.

A blob ``name.f32`` holds row-major float32 values; complex arrays are stored
with real and imaginary parts interleaved. The sidecar ``name.json`` carries
``{"shape": [...], "dtype": "f32le", "kind": ..., "pitch_m": ...}``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

KINDS = ("complex", "phase", "real")


class BlobFormatError(ValueError):
    """Raised when a blob and its sidecar disagree or cannot be parsed."""


def _paths(stem: str | Path) -> tuple[Path, Path]:
    stem = Path(stem)
    if stem.suffix in (".f32", ".json"):
        stem = stem.with_suffix("")
    return stem.with_suffix(".f32"), stem.with_suffix(".json")


def save_blob(stem, array, kind="real", pitch=None, extra=None) -> tuple[Path, Path]:
    """Write ``array`` to ``stem.f32`` plus ``stem.json``.

    Parameters
    ----------
    stem : str or Path
        Output path without suffix.
    array : ndarray
        Real or complex array. Complex data is interleaved as (re, im) pairs.
    kind : {"complex", "phase", "real"}
    pitch : float, optional
        Pixel pitch in meters recorded as ``pitch_m``.
    extra : dict, optional
        Additional sidecar fields.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown blob kind {kind!r}")
    array = np.asarray(array)
    if kind == "complex":
        payload = np.empty(array.shape + (2,), dtype="<f4")
        payload[..., 0] = array.real
        payload[..., 1] = array.imag
    else:
        if np.iscomplexobj(array):
            raise ValueError(f"kind {kind!r} requires a real array")
        payload = array.astype("<f4")
    blob_path, meta_path = _paths(stem)
    blob_path.parent.mkdir(parents=True, exist_ok=True)
    blob_path.write_bytes(np.ascontiguousarray(payload).tobytes())
    meta = {"shape": list(array.shape), "dtype": "f32le", "kind": kind, "pitch_m": pitch}
    if extra:
        meta.update(extra)
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return blob_path, meta_path


def load_blob(stem) -> tuple[np.ndarray, dict]:
    """Read a blob written by :func:`save_blob`; returns ``(array, sidecar)``."""
    blob_path, meta_path = _paths(stem)
    try:
        meta = json.loads(meta_path.read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise BlobFormatError(f"{meta_path}: invalid JSON sidecar ({exc})") from exc
    for key in ("shape", "dtype", "kind"):
        if key not in meta:
            raise BlobFormatError(f"{meta_path}: sidecar missing {key!r}")
    if meta["dtype"] != "f32le":
        raise BlobFormatError(f"{meta_path}: unsupported dtype {meta['dtype']!r}")
    shape = tuple(int(s) for s in meta["shape"])
    count = int(np.prod(shape)) * (2 if meta["kind"] == "complex" else 1)
    raw = blob_path.read_bytes()
    if len(raw) != 4 * count:
        raise BlobFormatError(
            f"{blob_path}: shape mismatch, sidecar {list(shape)} needs {4 * count} bytes, "
            f"found {len(raw)}"
        )
    values = np.frombuffer(raw, dtype="<f4").astype(np.float32)
    if meta["kind"] == "complex":
        values = values.reshape(shape + (2,))
        array = values[..., 0] + 1j * values[..., 1]
        array = array.astype(np.complex64)
    else:
        array = values.reshape(shape)
    return array, meta
