"""Procedural RGBD targets and the multi-color hologram training corpus.

Each record directory holds::

    {id}/target.png   8-bit RGB target intensity (code value / 255)
    {id}/depth.png    16-bit grayscale depth in [0, 1]
    {id}/masks.png    indexed image, pixel value = plane index
    {id}/powers.json  optimized F x P power matrix (rows = subframes)
    {id}/meta.json    seed, loss, optimization provenance, file checksums

Image code values are stored without a transfer curve so that a saved record
reloads bit for bit.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .holo_opt import (
    DEFAULT_PITCH,
    DEFAULT_PLANE_DISTANCES,
    DEFAULT_WAVELENGTHS,
    ANCHOR_WAVELENGTH,
    LaserPowerMatrix,
    OptimizationConfig,
    TargetScene,
    optimize_multicolor,
)

log = logging.getLogger(__name__)

RECORD_FILES = ("target.png", "depth.png", "masks.png", "powers.json", "meta.json")


class RecordError(ValueError):
    """A record directory is incomplete or its files disagree."""


def _fade(t):
    return t * t * (3.0 - 2.0 * t)


def value_noise(rng, height, width, cells):
    """Smoothly interpolated random lattice values in [0, 1]."""
    lattice = rng.random((cells + 1, cells + 1))
    y = np.linspace(0, cells, height, endpoint=False)
    x = np.linspace(0, cells, width, endpoint=False)
    y0 = y.astype(int)
    x0 = x.astype(int)
    ty = _fade(y - y0)[:, None]
    tx = _fade(x - x0)[None, :]
    a = lattice[np.ix_(y0, x0)]
    b = lattice[np.ix_(y0, x0 + 1)]
    c = lattice[np.ix_(y0 + 1, x0)]
    d = lattice[np.ix_(y0 + 1, x0 + 1)]
    top = a + (b - a) * tx
    bottom = c + (d - c) * tx
    return top + (bottom - top) * ty


def fractal_noise(rng, height, width, octaves=4, base_cells=2, persistence=0.5):
    total = np.zeros((height, width))
    amp, norm = 1.0, 0.0
    for o in range(octaves):
        total += amp * value_noise(rng, height, width, base_cells * 2**o)
        norm += amp
        amp *= persistence
    return total / norm


def _normalize(x):
    lo, hi = x.min(), x.max()
    if hi - lo < 1e-12:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def generate_procedural_target(seed: int, height: int, width: int):
    """Deterministic RGB intensity and depth map for ``seed``.

    The image mixes a linear gradient, multi-octave value noise and a few
    filled discs and rectangles with random per-channel weights, then applies a
    random per-channel gamma so the channel means (and therefore the power
    demands) differ between seeds. Every channel spans exactly [0, 1].

    Returns ``(rgb, depth)`` with shapes ``(3, H, W)`` and ``(H, W)``; values
    are quantized to 8-bit (rgb) and 16-bit (depth) code values.
    """
    if height < 32 or width < 32:
        raise ValueError(f"procedural targets need at least 32x32 pixels, got {height}x{width}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width]
    yy = yy / (height - 1)
    xx = xx / (width - 1)

    angle = rng.uniform(0, 2 * np.pi)
    gradient = _normalize(np.cos(angle) * xx + np.sin(angle) * yy)
    noises = [fractal_noise(rng, height, width, octaves=rng.integers(2, 5)) for _ in range(3)]
    shapes = np.zeros((3, height, width))
    for _ in range(rng.integers(2, 7)):
        colour = rng.random(3)
        if rng.random() < 0.5:
            cy, cx = rng.random(2)
            r = rng.uniform(0.08, 0.3)
            inside = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        else:
            y0, x0 = rng.uniform(0, 0.7, 2)
            hh, ww = rng.uniform(0.1, 0.5, 2)
            inside = (yy >= y0) & (yy < y0 + hh) & (xx >= x0) & (xx < x0 + ww)
        shapes[:, inside] = colour[:, None]

    rgb = np.empty((3, height, width))
    for c in range(3):
        w = rng.dirichlet(np.ones(3))
        mix = w[0] * gradient + w[1] * noises[c] + w[2] * shapes[c]
        gamma = np.exp(rng.uniform(np.log(0.35), np.log(3.0)))
        rgb[c] = _normalize(mix) ** gamma
    rgb = np.round(rgb * 255.0) / 255.0

    dangle = rng.uniform(0, 2 * np.pi)
    dgrad = np.cos(dangle) * xx + np.sin(dangle) * yy
    depth = _normalize(0.6 * _normalize(dgrad) + 0.4 * fractal_noise(rng, height, width, 2))
    depth = np.round(depth * 65535.0) / 65535.0
    return rgb, depth


def brighten(rgb, floor=0.5):
    """Map intensities into ``[floor, 1]`` (used for bright evaluation targets)."""
    return np.round((floor + (1.0 - floor) * np.asarray(rgb)) * 255.0) / 255.0


def quantize_depth(depth, plane_distances) -> np.ndarray:
    """Assign each pixel to one of K equal-width depth bins.

    Depth 0 lands in the first plane (nearest, listed first); depth 1 in the
    last. Returns a ``(K, H, W)`` boolean partition.
    """
    k = len(plane_distances)
    if k < 1:
        raise ValueError("need at least one plane")
    depth = np.asarray(depth, dtype=np.float64)
    index = np.clip(np.floor(depth * k), 0, k - 1).astype(np.int64)
    return index[None] == np.arange(k)[:, None, None]


def make_scene(rgb, depth, plane_distances=DEFAULT_PLANE_DISTANCES, pitch=DEFAULT_PITCH):
    return TargetScene(rgb, quantize_depth(depth, plane_distances), tuple(plane_distances), pitch)


@dataclass
class DatasetRecord:
    id: str
    target: np.ndarray  # (P, H, W) in [0, 1]
    depth: np.ndarray  # (H, W) in [0, 1]
    masks: np.ndarray  # (K, H, W) bool
    powers: LaserPowerMatrix
    final_loss: float
    seed: int
    meta: dict = field(default_factory=dict)

    def scene(self, plane_distances=None, pitch=None) -> TargetScene:
        distances = plane_distances or self.meta.get("plane_distances", DEFAULT_PLANE_DISTANCES)
        return TargetScene(self.target, self.masks, tuple(distances),
                           pitch or self.meta.get("pitch", DEFAULT_PITCH))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_record(record: DatasetRecord, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    rgb = np.round(np.moveaxis(record.target, 0, -1) * 255.0).astype(np.uint8)
    Image.fromarray(rgb, mode="RGB").save(path / "target.png")
    depth = np.round(record.depth * 65535.0).astype(np.uint16)
    Image.fromarray(depth).save(path / "depth.png")
    index = np.argmax(record.masks, axis=0).astype(np.uint8)
    masks_img = Image.fromarray(index, mode="P")
    k = record.masks.shape[0]
    palette = [int(255 * i / max(k - 1, 1)) for i in range(k) for _ in range(3)]
    masks_img.putpalette(palette)
    masks_img.info["planes"] = str(k)
    masks_img.save(path / "masks.png")
    record.powers.save(path / "powers.json")
    meta = dict(record.meta)
    meta.update({
        "id": record.id,
        "seed": int(record.seed),
        "final_loss": float(record.final_loss),
        "planes": int(k),
        "shape": list(record.target.shape),
        "checksums": {name: _sha256(path / name)
                      for name in ("target.png", "depth.png", "masks.png", "powers.json")},
    })
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def load_record(path) -> DatasetRecord:
    path = Path(path)
    for name in RECORD_FILES:
        if not (path / name).is_file():
            raise RecordError(f"{path / name}: missing record file")
    try:
        meta = json.loads((path / "meta.json").read_text())
    except json.JSONDecodeError as exc:
        raise RecordError(f"{path / 'meta.json'}: invalid JSON ({exc})") from exc
    for name, digest in meta.get("checksums", {}).items():
        if _sha256(path / name) != digest:
            raise RecordError(f"{path / name}: checksum mismatch against meta.json")
    shape = tuple(meta["shape"])
    try:
        with Image.open(path / "target.png") as im:
            rgb = np.asarray(im.convert("RGB"), dtype=np.float64)
        with Image.open(path / "depth.png") as im:
            depth = np.asarray(im, dtype=np.float64)
        with Image.open(path / "masks.png") as im:
            index = np.asarray(im)
    except OSError as exc:
        raise RecordError(f"{path}: unreadable image ({exc})") from exc
    target = np.moveaxis(rgb, -1, 0) / 255.0
    if target.shape != shape:
        raise RecordError(f"{path / 'target.png'}: shape {target.shape} != meta {shape}")
    if depth.shape != shape[1:]:
        raise RecordError(f"{path / 'depth.png'}: shape {depth.shape} != meta {shape[1:]}")
    if index.shape != shape[1:]:
        raise RecordError(f"{path / 'masks.png'}: shape {index.shape} != meta {shape[1:]}")
    masks = index[None] == np.arange(meta["planes"])[:, None, None]
    try:
        powers = LaserPowerMatrix.load(path / "powers.json")
    except json.JSONDecodeError as exc:
        raise RecordError(f"{path / 'powers.json'}: invalid JSON ({exc})") from exc
    fixed = ("id", "seed", "final_loss", "planes", "shape", "checksums")
    return DatasetRecord(
        id=meta["id"],
        target=target,
        depth=depth / 65535.0,
        masks=masks,
        powers=powers,
        final_loss=meta["final_loss"],
        seed=meta["seed"],
        meta={k: v for k, v in meta.items() if k not in fixed},
    )


def config_hash(settings: dict) -> str:
    return hashlib.sha256(json.dumps(settings, sort_keys=True).encode()).hexdigest()[:16]


def build_record(index: int, base_seed: int, resolution: int, config: OptimizationConfig,
                 wavelengths=DEFAULT_WAVELENGTHS, plane_distances=DEFAULT_PLANE_DISTANCES,
                 pitch=DEFAULT_PITCH, anchor_wavelength=ANCHOR_WAVELENGTH,
                 extra_meta=None) -> DatasetRecord:
    """Generate target ``base_seed + index`` and optimize its powers from a cold start."""
    seed = base_seed + index
    rgb, depth = generate_procedural_target(seed, resolution, resolution)
    scene = make_scene(rgb, depth, plane_distances, pitch)
    run_config = OptimizationConfig.from_dict({**config.to_dict(), "seed": seed})
    result = optimize_multicolor(scene, wavelengths, run_config,
                                 anchor_wavelength=anchor_wavelength)
    return DatasetRecord(
        id=f"{index:05d}",
        target=rgb,
        depth=depth,
        masks=scene.plane_masks,
        powers=result.powers,
        final_loss=result.final_loss,
        seed=seed,
        meta={
            "optimization": run_config.to_dict(),
            "wavelengths": list(wavelengths),
            "anchor_wavelength": anchor_wavelength,
            "plane_distances": list(plane_distances),
            "pitch": pitch,
            "scale": run_config.scale,
            "source": "procedural",
            **(extra_meta or {}),
        },
    )


def _build_and_save(args):
    index, out_dir, kwargs = args
    try:
        record = build_record(index, **kwargs)
        save_record(record, Path(out_dir) / record.id)
        return index, record.id, record.seed, record.final_loss, None
    except (OSError, RecordError) as exc:
        return index, f"{index:05d}", kwargs["base_seed"] + index, None, str(exc)


def build_dataset(count, resolution, config: OptimizationConfig, output_dir, *, base_seed=0,
                  wavelengths=DEFAULT_WAVELENGTHS, plane_distances=DEFAULT_PLANE_DISTANCES,
                  pitch=DEFAULT_PITCH, anchor_wavelength=ANCHOR_WAVELENGTH, jobs=1,
                  progress=None) -> dict:
    """Build ``count`` records under ``output_dir`` and write ``manifest.json``.

    I/O failures of single records are collected in ``summary["failures"]``
    instead of aborting the batch. Existing complete records with a matching
    config hash are reused.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    settings = {
        "resolution": resolution,
        "base_seed": base_seed,
        "optimization": config.to_dict(),
        "wavelengths": list(wavelengths),
        "anchor_wavelength": anchor_wavelength,
        "plane_distances": list(plane_distances),
        "pitch": pitch,
    }
    digest = config_hash(settings)
    kwargs = dict(base_seed=base_seed, resolution=resolution, config=config,
                  wavelengths=tuple(wavelengths), plane_distances=tuple(plane_distances),
                  pitch=pitch, anchor_wavelength=anchor_wavelength,
                  extra_meta={"config_hash": digest})
    started = time.perf_counter()
    results, todo = {}, []
    for i in range(count):
        rec_dir = out / f"{i:05d}"
        if (rec_dir / "meta.json").is_file():
            try:
                meta = json.loads((rec_dir / "meta.json").read_text())
                if meta.get("config_hash") == digest:
                    results[i] = (i, meta["id"], meta["seed"], meta["final_loss"], None)
                    continue
            except (OSError, json.JSONDecodeError, KeyError):
                pass
        todo.append((i, str(out), kwargs))

    def collect(item):
        i, rid, seed, loss, err = item
        results[i] = item
        if err is None:
            log.info("record %s (seed %d): loss %.5g", rid, seed, loss)
        else:
            log.error("record %s failed: %s", rid, err)
        if progress:
            progress(len(results), count)

    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for item in pool.map(_build_and_save, todo):
                collect(item)
    else:
        for args in todo:
            collect(_build_and_save(args))

    ordered = [results[i] for i in range(count)]
    ok = [r for r in ordered if r[4] is None]
    manifest = {
        "config_hash": digest,
        "settings": settings,
        "records": [{"id": r[1], "seed": r[2]} for r in ok],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    losses = [r[3] for r in ok]
    return {
        "count": len(ok),
        "requested": count,
        "mean_final_loss": float(np.mean(losses)) if losses else float("nan"),
        "wall_time_s": time.perf_counter() - started,
        "failures": [{"id": r[1], "error": r[4]} for r in ordered if r[4] is not None],
        "config_hash": digest,
        "output_dir": str(out),
    }


def load_manifest(corpus_dir) -> dict:
    path = Path(corpus_dir) / "manifest.json"
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise RecordError(f"{path}: invalid JSON ({exc})") from exc


def load_corpus(corpus_dir) -> list[DatasetRecord]:
    manifest = load_manifest(corpus_dir)
    return [load_record(Path(corpus_dir) / item["id"]) for item in manifest["records"]]


def import_rgbd(image_path, depth_path=None, size=None):
    """Load an external RGB image (and optional depth image) as a target.

    ``size`` resamples both to ``size x size`` with a Lanczos filter. Without a
    depth image the whole frame is placed at depth 0.
    """
    with Image.open(image_path) as im:
        im = im.convert("RGB")
        if size:
            im = im.resize((size, size), Image.LANCZOS)
        rgb = np.moveaxis(np.asarray(im, dtype=np.float64), -1, 0) / 255.0
    if depth_path is None:
        return rgb, np.zeros(rgb.shape[1:])
    with Image.open(depth_path) as im:
        if size:
            im = im.resize((size, size), Image.LANCZOS)
        raw = np.asarray(im)
    scale = 65535.0 if raw.dtype == np.uint16 or raw.max() > 255 else 255.0
    depth = raw.astype(np.float64)
    if depth.ndim == 3:
        depth = depth.mean(axis=-1)
    return rgb, np.clip(depth / scale, 0.0, 1.0)
