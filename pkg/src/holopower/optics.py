"""Scalar wavefields and band-limited angular spectrum propagation.

Conventions: forward FFT unnormalized, inverse scaled by 1/(H*W), frequency
grids in standard FFT ordering (no shifts). Fields are complex64 unless the
caller hands in 64-bit data, in which case 64-bit precision is kept.

The wavelength-dependent phase lift multiplies the SLM phase by
``wavelength / anchor_wavelength``. Physical SLM dispersion usually scales the
other way round (``anchor / wavelength``); the forward model here keeps the
ratio as written in the multi-color formulation this package reproduces.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.fft as sfft

from .rawio import load_blob, save_blob


class DimensionError(ValueError):
    """Invalid or mismatched array dimensions / physical parameters."""


class PowerRangeError(ValueError):
    """Laser power outside the normalized [0, 1] range."""


POWER_TOL = 1e-9


def complex_dtype_for(real_dtype) -> np.dtype:
    return np.dtype(np.complex128) if np.dtype(real_dtype) == np.float64 else np.dtype(np.complex64)


def real_dtype_for(complex_dtype) -> np.dtype:
    return np.dtype(np.float64) if np.dtype(complex_dtype) == np.complex128 else np.dtype(np.float32)


@dataclass(frozen=True)
class ComplexField:
    """Complex amplitude sampled on a regular grid with pitch in meters."""

    data: np.ndarray
    pitch: float

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2 or data.shape[0] < 2 or data.shape[1] < 2:
            raise DimensionError(f"field must be 2D with both sides >= 2, got {data.shape}")
        if not self.pitch > 0:
            raise DimensionError(f"pitch must be positive, got {self.pitch}")
        if not np.all(np.isfinite(data)):
            raise ValueError("field contains non-finite values")
        if not np.iscomplexobj(data):
            data = data.astype(complex_dtype_for(data.dtype))
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def intensity(self) -> np.ndarray:
        return np.abs(self.data) ** 2

    def energy(self) -> float:
        return float(np.sum(np.abs(self.data).astype(np.float64) ** 2))

    def save(self, stem):
        return save_blob(stem, self.data, kind="complex", pitch=self.pitch)

    @classmethod
    def load(cls, stem) -> "ComplexField":
        data, meta = load_blob(stem)
        if meta["kind"] != "complex":
            raise ValueError(f"{stem}: expected a complex blob, found {meta['kind']!r}")
        return cls(data, meta["pitch_m"])


@dataclass(frozen=True)
class TransferFunction:
    """Angular spectrum kernel on the FFT frequency grid."""

    data: np.ndarray
    wavelength: float
    distance: float
    pitch: float
    band_mask: np.ndarray = field(repr=False)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass
class PhaseHologramSet:
    """F stacked SLM phase maps (radians) calibrated at ``anchor_wavelength``."""

    phases: np.ndarray
    anchor_wavelength: float = 515e-9

    def __post_init__(self):
        phases = np.asarray(self.phases)
        if phases.ndim == 2:
            phases = phases[None]
        if phases.ndim != 3 or phases.shape[0] < 1:
            raise DimensionError(f"phases must be (F, H, W), got {phases.shape}")
        if not np.all(np.isfinite(phases)):
            raise ValueError("phases contain non-finite values")
        if not self.anchor_wavelength > 0:
            raise DimensionError("anchor wavelength must be positive")
        self.phases = phases

    @property
    def F(self) -> int:
        return self.phases.shape[0]

    def permuted(self, order) -> "PhaseHologramSet":
        return PhaseHologramSet(self.phases[list(order)], self.anchor_wavelength)

    def save(self, stem, pitch=None):
        return save_blob(
            stem, self.phases, kind="phase", pitch=pitch,
            extra={"anchor_wavelength_m": self.anchor_wavelength},
        )

    @classmethod
    def load(cls, stem) -> "PhaseHologramSet":
        phases, meta = load_blob(stem)
        if meta["kind"] != "phase":
            raise ValueError(f"{stem}: expected a phase blob, found {meta['kind']!r}")
        return cls(phases, meta.get("anchor_wavelength_m", 515e-9))


def frequency_grid(height: int, width: int, pitch: float) -> tuple[np.ndarray, np.ndarray]:
    fy = sfft.fftfreq(height, d=pitch)
    fx = sfft.fftfreq(width, d=pitch)
    return fy[:, None], fx[None, :]


def band_limit(wavelength: float, distance: float, n: int, pitch: float) -> float:
    """Largest retained frequency along one axis of length ``n``."""
    df = 1.0 / (n * pitch)
    return 1.0 / (wavelength * np.sqrt((2.0 * distance * df) ** 2 + 1.0))


@lru_cache(maxsize=256)
def _kernel(wavelength, distance, height, width, pitch):
    fy, fx = frequency_grid(height, width, pitch)
    arg = 1.0 - (wavelength * fx) ** 2 - (wavelength * fy) ** 2
    mask = arg > 0
    mask &= np.abs(fx) <= band_limit(wavelength, distance, width, pitch)
    mask &= np.abs(fy) <= band_limit(wavelength, distance, height, pitch)
    root = np.sqrt(np.where(mask, arg, 0.0))
    data = np.where(mask, np.exp(1j * 2.0 * np.pi * (distance / wavelength) * root), 0.0)
    data.setflags(write=False)
    mask.setflags(write=False)
    return data, mask


def make_transfer_function(wavelength, distance, height, width, pitch) -> TransferFunction:
    """Band-limited angular spectrum transfer function.

    ``H(fx, fy) = exp(i 2 pi (d / wavelength) sqrt(1 - (wavelength fx)^2 - (wavelength fy)^2))``
    inside the propagating, band-limited support and zero elsewhere. Results
    are cached per ``(wavelength, distance, height, width, pitch)``.
    """
    if not wavelength > 0:
        raise DimensionError(f"wavelength must be positive, got {wavelength}")
    if not pitch > 0:
        raise DimensionError(f"pitch must be positive, got {pitch}")
    if int(height) < 2 or int(width) < 2:
        raise DimensionError(f"grid must be at least 2x2, got {height}x{width}")
    data, mask = _kernel(float(wavelength), float(distance), int(height), int(width), float(pitch))
    return TransferFunction(data, float(wavelength), float(distance), float(pitch), mask)


def propagate_array(data: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """IFFT(FFT(data) * kernel) over the last two axes, keeping the data precision."""
    kernel = kernel.astype(data.dtype, copy=False)
    return sfft.ifft2(sfft.fft2(data) * kernel)


def propagate(field: ComplexField, transfer: TransferFunction) -> ComplexField:
    if field.data.shape != transfer.data.shape:
        raise DimensionError(
            f"field shape {field.data.shape} does not match transfer shape {transfer.data.shape}"
        )
    if not np.isclose(field.pitch, transfer.pitch, rtol=1e-12, atol=0):
        raise DimensionError(f"field pitch {field.pitch} != transfer pitch {transfer.pitch}")
    return ComplexField(propagate_array(field.data, transfer.data), field.pitch)


def phase_to_field(phase, power, wavelength, anchor_wavelength, pitch=8e-6) -> ComplexField:
    """``sqrt(power) * exp(1j * (wavelength / anchor_wavelength) * phase)``."""
    if not (wavelength > 0 and anchor_wavelength > 0):
        raise DimensionError("wavelengths must be positive")
    if power < -POWER_TOL or power > 1 + POWER_TOL:
        raise PowerRangeError(f"power {power} outside [0, 1]")
    phase = np.asarray(phase)
    cdtype = complex_dtype_for(phase.dtype)
    ratio = wavelength / anchor_wavelength
    amp = np.sqrt(min(max(power, 0.0), 1.0))
    data = (amp * np.exp(1j * ratio * phase.astype(np.float64))).astype(cdtype)
    return ComplexField(data, pitch)


def apply_linear_grating(phase: np.ndarray) -> np.ndarray:
    """Add pi to every odd row (axis -2) for half-order off-axis display.

    The hardware hologram is then ``exp(-1j * grated)``.
    """
    out = np.array(phase, copy=True)
    if not np.issubdtype(out.dtype, np.floating):
        out = out.astype(np.float64)
    out[..., 1::2, :] += np.pi
    return out


def export_hologram(phase: np.ndarray) -> np.ndarray:
    """Complex SLM pattern ``exp(-1j * grated_phase)``."""
    return np.exp(-1j * apply_linear_grating(phase))


def _power_values(powers) -> np.ndarray:
    return np.asarray(getattr(powers, "values", powers), dtype=np.float64)


def reconstruct_intensity(holograms: PhaseHologramSet, powers, wavelengths, distance, pitch):
    """Per-primary intensity ``sum_f |propagate(sqrt(l_fp) exp(i r_p phi_f))|^2``.

    Returns an array of shape ``(P, H, W)``.
    """
    values = _power_values(powers)
    wavelengths = list(wavelengths)
    if values.ndim != 2 or values.shape != (holograms.F, len(wavelengths)):
        raise DimensionError(
            f"powers shape {values.shape} != (F={holograms.F}, P={len(wavelengths)})"
        )
    _, h, w = holograms.phases.shape
    rdtype = np.float64 if holograms.phases.dtype == np.float64 else np.float32
    out = np.zeros((len(wavelengths), h, w), dtype=rdtype)
    for p, wl in enumerate(wavelengths):
        transfer = make_transfer_function(wl, distance, h, w, pitch)
        for f in range(holograms.F):
            fld = phase_to_field(
                holograms.phases[f], values[f, p], wl, holograms.anchor_wavelength, pitch
            )
            out[p] += propagate(fld, transfer).intensity.astype(rdtype)
    return out
