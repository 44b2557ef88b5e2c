"""Single-color and multi-color phase hologram optimization.

The multi-color objective co-optimizes F subframe phase maps and an F x P
laser power matrix ``l`` so that, on every depth plane ``k``,

    I_pk = sum_f l_fp |A_pk(exp(1j r_p phi_f))|^2

matches ``scale * t_p`` inside the plane mask. ``A_pk`` is angular spectrum
propagation to plane ``k`` at wavelength ``p`` and ``r_p`` the wavelength ratio
against the anchor primary. Gradients are computed with the adjoint of the
propagation operator, so no autodiff framework is needed.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.fft as sfft

from .optics import (
    DimensionError,
    PhaseHologramSet,
    complex_dtype_for,
    make_transfer_function,
)
from .optim import AdamState, adam_step, linear_decay

log = logging.getLogger(__name__)

DEFAULT_WAVELENGTHS = (639e-9, 515e-9, 473e-9)  # RGB channel order
ANCHOR_WAVELENGTH = 515e-9
DEFAULT_PITCH = 8e-6
DEFAULT_PLANE_DISTANCES = (-0.005, 0.0, 0.005)


class OptimizationError(RuntimeError):
    pass


@dataclass
class LaserPowerMatrix:
    """Normalized source powers, rows = subframes, columns = primaries."""

    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise DimensionError(f"power matrix must be 2D, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("power matrix contains non-finite values")
        self.values = values

    @classmethod
    def identity(cls, n: int = 3) -> "LaserPowerMatrix":
        return cls(np.eye(n))

    @classmethod
    def uniform(cls, subframes: int, primaries: int, value: float) -> "LaserPowerMatrix":
        return cls(np.full((subframes, primaries), float(value)))

    @property
    def shape(self):
        return self.values.shape

    def clamped(self) -> "LaserPowerMatrix":
        return LaserPowerMatrix(np.clip(self.values, 0.0, 1.0))

    def in_range(self, tol: float = 1e-9) -> bool:
        return bool(np.all(self.values >= -tol) and np.all(self.values <= 1 + tol))

    def permuted(self, order) -> "LaserPowerMatrix":
        return LaserPowerMatrix(self.values[list(order)])

    def primary_sums(self) -> np.ndarray:
        """Total power per primary, summed over subframes."""
        return self.values.sum(axis=0)

    def to_json(self) -> str:
        return json.dumps(self.values.tolist()) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "LaserPowerMatrix":
        return cls(np.array(json.loads(Path(path).read_text()), dtype=np.float64))


@dataclass
class TargetScene:
    """P-channel target with K depth planes.

    ``plane_masks`` must partition the image: every pixel belongs to exactly
    one plane.
    """

    intensity: np.ndarray
    plane_masks: np.ndarray
    plane_distances: tuple
    pitch: float = DEFAULT_PITCH

    def __post_init__(self):
        intensity = np.asarray(self.intensity)
        if intensity.ndim == 2:
            intensity = intensity[None]
        masks = np.asarray(self.plane_masks, dtype=bool)
        if masks.ndim == 2:
            masks = masks[None]
        distances = tuple(float(d) for d in np.atleast_1d(self.plane_distances))
        if intensity.ndim != 3:
            raise DimensionError(f"intensity must be (P, H, W), got {intensity.shape}")
        if masks.shape[1:] != intensity.shape[1:]:
            raise DimensionError(f"mask shape {masks.shape} does not match {intensity.shape}")
        if len(distances) != masks.shape[0] or not distances:
            raise DimensionError(f"{masks.shape[0]} masks but {len(distances)} distances")
        if not np.all(masks.sum(axis=0) == 1):
            raise ValueError("plane masks must be disjoint and cover every pixel")
        if intensity.min() < 0 or intensity.max() > 1 or not np.all(np.isfinite(intensity)):
            raise ValueError("target intensity must lie in [0, 1]")
        if not self.pitch > 0:
            raise DimensionError("pitch must be positive")
        self.intensity = intensity
        self.plane_masks = masks
        self.plane_distances = distances

    @classmethod
    def single_plane(cls, intensity, distance, pitch=DEFAULT_PITCH) -> "TargetScene":
        intensity = np.asarray(intensity)
        if intensity.ndim == 2:
            intensity = intensity[None]
        masks = np.ones((1,) + intensity.shape[1:], dtype=bool)
        return cls(intensity, masks, (distance,), pitch)

    @property
    def shape(self):
        return self.intensity.shape[1:]

    @property
    def primaries(self) -> int:
        return self.intensity.shape[0]

    @property
    def planes(self) -> int:
        return len(self.plane_distances)


@dataclass
class OptimizationConfig:
    steps: int = 300
    lr_start: float = 0.025
    lr_end: float = 0.005
    scale: float = 1.8
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    subframes: int = 3

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0 < self.lr_end <= self.lr_start:
            raise ValueError("need 0 < lr_end <= lr_start")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if self.subframes < 1:
            raise ValueError("subframes must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "OptimizationConfig":
        known = {k: data[k] for k in cls.__dataclass_fields__ if k in data}
        return cls(**known)


def lr_schedule(step: int, config: OptimizationConfig) -> float:
    return linear_decay(step, config.steps, config.lr_start, config.lr_end)


class HologramProblem:
    """Vectorized forward model and adjoint gradients for one scene.

    Array layout: fields ``(P, F, K, H, W)``, intensities ``(P, K, H, W)``,
    powers ``(F, P)``. Loss is accumulated in float64 regardless of ``dtype``.
    """

    def __init__(self, scene: TargetScene, wavelengths, scale,
                 anchor_wavelength=ANCHOR_WAVELENGTH, dtype=np.float32):
        self.scene = scene
        self.wavelengths = tuple(float(w) for w in wavelengths)
        if len(self.wavelengths) != scene.primaries:
            raise DimensionError(
                f"{len(self.wavelengths)} wavelengths for a {scene.primaries}-channel target"
            )
        self.scale = float(scale)
        self.anchor = float(anchor_wavelength)
        self.rdtype = np.dtype(dtype)
        self.cdtype = complex_dtype_for(self.rdtype)
        h, w = scene.shape
        self.ratios = np.array([wl / self.anchor for wl in self.wavelengths], dtype=self.rdtype)
        self.kernels = np.stack([
            np.stack([make_transfer_function(wl, d, h, w, scene.pitch).data
                      for d in scene.plane_distances])
            for wl in self.wavelengths
        ]).astype(self.cdtype)[:, None]  # (P, 1, K, H, W)
        # planes whose kernel is exactly 1 for every primary skip the FFT round trip
        ones = np.all(self.kernels == 1, axis=(0, 1, 3, 4))
        self.identity_planes = np.flatnonzero(ones)
        self.prop_planes = np.flatnonzero(~ones)
        self.prop_kernels = np.ascontiguousarray(self.kernels[:, :, self.prop_planes])
        self.prop_kernels_conj = np.conj(self.prop_kernels)
        counts = scene.plane_masks.reshape(scene.planes, -1).sum(axis=1)
        weights = np.zeros(scene.plane_masks.shape, dtype=np.float64)
        for k, n in enumerate(counts):
            if n:
                weights[k] = scene.plane_masks[k] / n
        self.weights = weights.astype(self.rdtype)  # (K, H, W)
        self.goal = (self.scale * scene.intensity).astype(self.rdtype)[:, None]  # (P, 1, H, W)

    def _check(self, phases, powers):
        p, k = len(self.wavelengths), self.scene.planes
        if phases.ndim != 3 or phases.shape[1:] != self.scene.shape:
            raise DimensionError(f"phases {phases.shape} vs scene {self.scene.shape}")
        if powers.shape != (phases.shape[0], p):
            raise DimensionError(f"powers {powers.shape} != (F={phases.shape[0]}, P={p})")
        return p, k

    def forward(self, phases, powers):
        """Return ``(fields E, propagated V, |V|^2, intensity I)``."""
        phases = np.asarray(phases, dtype=self.rdtype)
        powers = np.asarray(powers, dtype=self.rdtype)
        self._check(phases, powers)
        arg = self.ratios[:, None, None, None] * phases[None]
        E = np.empty(arg.shape, dtype=self.cdtype)
        E.real = np.cos(arg)
        E.imag = np.sin(arg)
        V = np.empty(E.shape[:2] + (self.scene.planes,) + E.shape[2:], dtype=self.cdtype)
        if self.prop_planes.size:
            V[:, :, self.prop_planes] = sfft.ifft2(sfft.fft2(E)[:, :, None] * self.prop_kernels)
        V[:, :, self.identity_planes] = E[:, :, None]
        A = V.real * V.real + V.imag * V.imag
        I = np.einsum("fp,pfkhw->pkhw", powers, A)
        return E, V, A, I

    def loss(self, phases, powers) -> float:
        _, _, _, I = self.forward(phases, powers)
        R = I - self.goal
        return float(np.sum(self.weights * R * R, dtype=np.float64))

    def loss_and_grads(self, phases, powers):
        """Return ``(loss, d loss / d phases, d loss / d powers)``."""
        phases = np.asarray(phases, dtype=self.rdtype)
        powers = np.asarray(powers, dtype=self.rdtype)
        E, V, A, I = self.forward(phases, powers)
        R = I - self.goal
        loss = float(np.sum(self.weights * R * R, dtype=np.float64))
        G = 2.0 * self.weights * R  # dL/dI, (P, K, H, W)
        grad_powers = np.einsum("pkhw,pfkhw->fp", G, A, dtype=np.float64)
        # conjugate gradient wrt V for I = l |V|^2 is 2 G l V
        gV = (2.0 * G[:, None] * powers.T[:, :, None, None, None]) * V
        gE = np.zeros(E.shape, dtype=self.cdtype)
        if self.prop_planes.size:
            spectrum = np.sum(sfft.fft2(gV[:, :, self.prop_planes]) * self.prop_kernels_conj, axis=2)
            gE += sfft.ifft2(spectrum)
        if self.identity_planes.size:
            gE += np.sum(gV[:, :, self.identity_planes], axis=2)
        # d/dphi of exp(i r phi) chained with the conjugate gradient gE
        dphi = (gE.imag * E.real - gE.real * E.imag) * self.ratios[:, None, None, None]
        grad_phases = dphi.sum(axis=0).astype(self.rdtype)
        return loss, grad_phases, grad_powers.astype(self.rdtype)

    def reconstruction(self, phases, powers) -> np.ndarray:
        """Per-plane intensities, shape ``(K, P, H, W)``."""
        return np.transpose(self.forward(phases, powers)[3], (1, 0, 2, 3))

    def composite(self, phases, powers) -> np.ndarray:
        """Each pixel taken from the reconstruction of the plane it belongs to, ``(P, H, W)``."""
        recon = self.reconstruction(phases, powers)
        return np.einsum("kphw,khw->phw", recon, self.scene.plane_masks.astype(recon.dtype))


def _values(powers):
    return np.asarray(getattr(powers, "values", powers))


def _phases(holograms):
    return np.asarray(getattr(holograms, "phases", holograms))


def image_loss(holograms, powers, scene, scale, wavelengths,
               anchor_wavelength=ANCHOR_WAVELENGTH, dtype=None) -> float:
    """Sum over planes and primaries of the mean squared error against ``scale * t``
    inside each plane mask."""
    phases = _phases(holograms)
    dtype = dtype or (np.float64 if phases.dtype == np.float64 else np.float32)
    problem = HologramProblem(scene, wavelengths, scale, anchor_wavelength, dtype)
    return problem.loss(phases, _values(powers))


def loss_gradients(holograms, powers, scene, scale, wavelengths,
                   anchor_wavelength=ANCHOR_WAVELENGTH, dtype=None):
    """Analytic gradients of :func:`image_loss`; returns ``(d_phases, d_powers)``."""
    phases = _phases(holograms)
    dtype = dtype or (np.float64 if phases.dtype == np.float64 else np.float32)
    problem = HologramProblem(scene, wavelengths, scale, anchor_wavelength, dtype)
    _, g_phi, g_l = problem.loss_and_grads(phases, _values(powers))
    return g_phi, g_l


def initial_phases(config: OptimizationConfig, shape, dtype=np.float32) -> np.ndarray:
    rng = np.random.default_rng(config.seed)
    return rng.uniform(-np.pi, np.pi, size=(config.subframes,) + tuple(shape)).astype(dtype)


def phase_hash(phases: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(phases).tobytes()).hexdigest()


@dataclass
class OptimizationResult:
    holograms: PhaseHologramSet
    powers: LaserPowerMatrix
    history: list
    final_loss: float
    initial_powers: LaserPowerMatrix
    initial_phase_hash: str
    snapshots: dict = field(default_factory=dict)

    def loss_at(self, step: int) -> float:
        """Loss after ``step`` updates."""
        if step < len(self.history):
            return self.history[step]
        if step == len(self.history):
            return self.final_loss
        raise IndexError(f"step {step} beyond {len(self.history)} optimization steps")


def optimize_multicolor(scene: TargetScene, wavelengths, config: OptimizationConfig,
                        initial_powers="uniform", *, freeze_powers=False,
                        anchor_wavelength=ANCHOR_WAVELENGTH, dtype=np.float32,
                        checkpoints=()) -> OptimizationResult:
    """Joint Adam descent on subframe phases and the laser power matrix.

    Parameters
    ----------
    initial_powers : LaserPowerMatrix, array or "uniform"
        "uniform" starts every entry at ``scale / subframes``.
    freeze_powers : bool
        Keep the power matrix fixed (used by the single-color baseline).
    checkpoints : iterable of int
        Step counts at which ``(phases, powers)`` snapshots are kept.

    ``history[i]`` is the loss of the iterate before update ``i``; the loss
    after the last update is ``final_loss``. Powers are clamped to [0, 1]
    after every update.
    """
    F, P = config.subframes, scene.primaries
    if isinstance(initial_powers, str):
        if initial_powers != "uniform":
            raise ValueError(f"unknown power initialization {initial_powers!r}")
        init = LaserPowerMatrix.uniform(F, P, min(config.scale / F, 1.0))
    else:
        init = initial_powers if isinstance(initial_powers, LaserPowerMatrix) \
            else LaserPowerMatrix(initial_powers)
        if init.shape != (F, P):
            raise DimensionError(f"initial powers {init.shape} != ({F}, {P})")
        if not init.in_range():
            raise ValueError("initial powers must lie in [0, 1]")
        init = init.clamped()

    problem = HologramProblem(scene, wavelengths, config.scale, anchor_wavelength, dtype)
    phases = initial_phases(config, scene.shape, problem.rdtype)
    powers = init.values.astype(problem.rdtype)
    start_hash = phase_hash(phases)
    checkpoints = set(int(c) for c in checkpoints)
    snapshots = {}
    state = AdamState()
    history = []
    for i in range(config.steps):
        if i in checkpoints:
            snapshots[i] = (phases.copy(), powers.astype(np.float64))
        loss, g_phi, g_l = problem.loss_and_grads(phases, powers)
        if not np.isfinite(loss):
            raise OptimizationError(
                f"non-finite loss at step {i} (lr={lr_schedule(i, config):.4g}, "
                f"powers min/max={powers.min():.3g}/{powers.max():.3g})"
            )
        history.append(loss)
        params = {"phases": phases}
        grads = {"phases": g_phi}
        if not freeze_powers:
            params["powers"] = powers
            grads["powers"] = g_l
        params, state = adam_step(params, grads, state, lr_schedule(i, config),
                                  config.beta1, config.beta2, config.eps)
        phases = params["phases"]
        if not freeze_powers:
            powers = np.clip(params["powers"], 0.0, 1.0)
    final_loss = problem.loss(phases, powers)
    if not np.isfinite(final_loss):
        raise OptimizationError("non-finite loss after the final update")
    if config.steps in checkpoints:
        snapshots[config.steps] = (phases.copy(), powers.astype(np.float64))
    log.debug("optimized %d steps: loss %.5g -> %.5g", config.steps, history[0], final_loss)
    return OptimizationResult(
        holograms=PhaseHologramSet(phases, anchor_wavelength),
        powers=LaserPowerMatrix(powers.astype(np.float64)),
        history=history,
        final_loss=final_loss,
        initial_powers=init,
        initial_phase_hash=start_hash,
        snapshots=snapshots,
    )


def optimize_single_color(scene: TargetScene, wavelengths, config: OptimizationConfig,
                          **kwargs) -> OptimizationResult:
    """Conventional field-sequential baseline: identity powers, phases only.

    Subframe ``f`` is lit by primary ``f`` alone, so each phase map is optimized
    against its own color channel.
    """
    if config.subframes != scene.primaries:
        raise DimensionError("single-color optimization needs one subframe per primary")
    return optimize_multicolor(scene, wavelengths, config,
                               LaserPowerMatrix.identity(scene.primaries),
                               freeze_powers=True, **kwargs)


def save_result(result: OptimizationResult, config: OptimizationConfig, out_dir, pitch=None):
    """Write phases blob, powers.json, history.json and config.json into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.holograms.save(out / "phases", pitch=pitch)
    result.powers.save(out / "powers.json")
    (out / "history.json").write_text(json.dumps([float(x) for x in result.history]) + "\n")
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    return out
