"""Image metrics and the cold- versus warm-start convergence experiment."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .holo_opt import (
    ANCHOR_WAVELENGTH,
    DEFAULT_WAVELENGTHS,
    HologramProblem,
    OptimizationConfig,
    OptimizationError,
    TargetScene,
    optimize_multicolor,
)

log = logging.getLogger(__name__)

PSNR_CAP = 100.0
DEFAULT_CHECKPOINTS = (70, 300)


def psnr(a, b, peak=1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100 dB for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if not peak > 0:
        raise ValueError("peak must be positive")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(peak * peak / mse)))


def gaussian_window(size=11, sigma=1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, g):
    # separable 'valid' weighted sum over size x size windows
    rows = sliding_window_view(img, g.size, axis=0) @ g
    return sliding_window_view(rows, g.size, axis=1) @ g


def _ssim_channel(a, b, peak, g):
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a * mu_a
    sbb = _filter_valid(b * b, g) - mu_b * mu_b
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


def ssim(a, b, peak=1.0, size=11, sigma=1.5) -> float:
    """Structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Accepts ``(H, W)`` or ``(C, H, W)`` inputs; multi-channel inputs return the
    channel mean. Only windows fully inside the image contribute.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3 or min(a.shape[1:]) < size:
        raise ValueError(f"ssim needs (C, H, W) images at least {size}x{size}, got {a.shape}")
    if np.array_equal(a, b):
        return 1.0
    g = gaussian_window(size, sigma)
    return float(np.mean([_ssim_channel(x, y, peak, g) for x, y in zip(a, b)]))


@dataclass
class ArmResult:
    curve: list
    final_loss: float
    powers_init: list
    powers_final: list
    phase_hash: str
    losses: dict = field(default_factory=dict)  # checkpoint -> loss
    psnr: dict = field(default_factory=dict)
    ssim: dict = field(default_factory=dict)
    steps_to_threshold: int | None = None


@dataclass
class TargetResult:
    id: str
    cold: ArmResult | None = None
    warm: ArmResult | None = None
    error: str | None = None


@dataclass
class ConvergenceReport:
    checkpoints: tuple
    steps: int
    scale: float
    targets: list
    aggregates: dict = field(default_factory=dict)
    snapshots: dict = field(default_factory=dict, repr=False)  # (id, arm, step) -> image

    @property
    def completed(self):
        return [t for t in self.targets if t.error is None]

    def to_dict(self) -> dict:
        return {
            "checkpoints": list(self.checkpoints),
            "steps": self.steps,
            "scale": self.scale,
            "aggregates": self.aggregates,
            "targets": [asdict(t) for t in self.targets],
        }

    @classmethod
    def from_dict(cls, data) -> "ConvergenceReport":
        def arm(d):
            if d is None:
                return None
            d = dict(d)
            for key in ("losses", "psnr", "ssim"):
                d[key] = {int(k): v for k, v in d[key].items()}
            return ArmResult(**d)

        targets = [TargetResult(t["id"], arm(t["cold"]), arm(t["warm"]), t["error"])
                   for t in data["targets"]]
        return cls(tuple(data["checkpoints"]), data["steps"], data["scale"], targets,
                   data.get("aggregates", {}))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def csv_rows(self):
        cps = self.checkpoints
        header = ["id"]
        for c in cps:
            header += [f"cold@{c}", f"warm@{c}"]
        for metric in ("psnr", "ssim"):
            for c in cps:
                header += [f"cold_{metric}@{c}", f"warm_{metric}@{c}"]
        header += ["cold_steps_to_threshold", "warm_steps_to_threshold"]
        rows = [header]
        for t in self.completed:
            row = [t.id]
            for c in cps:
                row += [t.cold.losses[c], t.warm.losses[c]]
            for metric in ("psnr", "ssim"):
                for c in cps:
                    row += [getattr(t.cold, metric)[c], getattr(t.warm, metric)[c]]
            row += [t.cold.steps_to_threshold, t.warm.steps_to_threshold]
            rows.append(row)
        return rows


def steps_to_reach(curve, threshold):
    """First step whose loss is <= ``threshold`` (None if never reached)."""
    for i, value in enumerate(curve):
        if value <= threshold:
            return i
    return None


def _arm(result, problem: HologramProblem, checkpoints, scale, tid, name, snapshots):
    curve = list(result.history) + [result.final_loss]
    arm = ArmResult(
        curve=[float(x) for x in curve],
        final_loss=float(result.final_loss),
        powers_init=result.initial_powers.values.tolist(),
        powers_final=result.powers.values.tolist(),
        phase_hash=result.initial_phase_hash,
    )
    goal = scale * problem.scene.intensity
    for c in checkpoints:
        phases, powers = result.snapshots[c]
        recon = problem.composite(phases, powers).astype(np.float64)
        arm.losses[c] = float(result.loss_at(c))
        arm.psnr[c] = psnr(recon, goal, peak=scale)
        arm.ssim[c] = ssim(recon, goal, peak=scale)
        snapshots[(tid, name, c)] = recon
    return arm


def evaluate_target(scene: TargetScene, initial_powers, config: OptimizationConfig,
                    checkpoints=DEFAULT_CHECKPOINTS, wavelengths=DEFAULT_WAVELENGTHS,
                    anchor_wavelength=ANCHOR_WAVELENGTH, tid="0", snapshots=None):
    """Run both arms on one scene; arms differ only in their initial powers."""
    snapshots = {} if snapshots is None else snapshots
    checkpoints = tuple(sorted(set(int(c) for c in checkpoints)))
    if checkpoints[-1] > config.steps:
        raise ValueError(f"checkpoint {checkpoints[-1]} beyond {config.steps} steps")
    problem = HologramProblem(scene, wavelengths, config.scale, anchor_wavelength)
    cold = optimize_multicolor(scene, wavelengths, config, "uniform",
                               anchor_wavelength=anchor_wavelength, checkpoints=checkpoints)
    warm = optimize_multicolor(scene, wavelengths, config, initial_powers,
                               anchor_wavelength=anchor_wavelength, checkpoints=checkpoints)
    if cold.initial_phase_hash != warm.initial_phase_hash:
        raise OptimizationError("cold and warm arms started from different phases")
    res = TargetResult(
        tid,
        _arm(cold, problem, checkpoints, config.scale, tid, "cold", snapshots),
        _arm(warm, problem, checkpoints, config.scale, tid, "warm", snapshots),
    )
    threshold = cold.final_loss
    res.cold.steps_to_threshold = steps_to_reach(res.cold.curve, threshold)
    res.warm.steps_to_threshold = steps_to_reach(res.warm.curve, threshold)
    return res


def aggregate(targets, checkpoints, tolerance=0.10) -> dict:
    done = [t for t in targets if t.error is None]
    if not done:
        return {"completed": 0, "failed": len(targets)}
    first, last = checkpoints[0], checkpoints[-1]
    out = {"completed": len(done), "failed": len(targets) - len(done)}
    for c in checkpoints:
        for arm in ("cold", "warm"):
            results = [getattr(t, arm) for t in done]
            out[f"mean_{arm}@{c}"] = float(np.mean([r.losses[c] for r in results]))
            out[f"mean_{arm}_psnr@{c}"] = float(np.mean([r.psnr[c] for r in results]))
            out[f"mean_{arm}_ssim@{c}"] = float(np.mean([r.ssim[c] for r in results]))
    out[f"frac_warm@{first}<=cold@{first}"] = float(np.mean(
        [t.warm.losses[first] <= t.cold.losses[first] for t in done]))
    out[f"frac_warm@{first}_within_{int(tolerance * 100)}pct_cold@{last}"] = float(np.mean(
        [t.warm.losses[first] <= (1 + tolerance) * t.cold.losses[last] for t in done]))
    for arm in ("cold", "warm"):
        reached = [getattr(t, arm).steps_to_threshold for t in done]
        hits = [s for s in reached if s is not None]
        out[f"{arm}_reached_threshold"] = len(hits)
        out[f"median_{arm}_steps_to_threshold"] = float(np.median(hits)) if hits else None
    return out


def run_convergence_experiment(targets, model, config: OptimizationConfig, *, ids=None,
                               checkpoints=DEFAULT_CHECKPOINTS, wavelengths=DEFAULT_WAVELENGTHS,
                               anchor_wavelength=ANCHOR_WAVELENGTH, jobs=1,
                               progress=None) -> ConvergenceReport:
    """Compare uniform-power cold starts with estimator warm starts on ``targets``.

    ``targets`` is a list of :class:`TargetScene` held out from training.
    Failures on a single target are recorded and the remaining targets still run.
    """
    from .estimator.train import estimate_powers

    ids = list(ids) if ids is not None else [f"{i:03d}" for i in range(len(targets))]
    checkpoints = tuple(sorted(set(int(c) for c in checkpoints)))
    estimates = [estimate_powers(model, scene.intensity) for scene in targets]
    jobs_args = [(scene, est, config, checkpoints, tuple(wavelengths), anchor_wavelength, tid)
                 for scene, est, tid in zip(targets, estimates, ids)]
    results, snapshots = [], {}

    def finish(item):
        res, snaps = item
        results.append(res)
        snapshots.update(snaps)
        if progress:
            progress(len(results), len(jobs_args))

    if jobs > 1 and len(jobs_args) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for item in pool.map(_evaluate_job, jobs_args):
                finish(item)
    else:
        for args in jobs_args:
            finish(_evaluate_job(args))
    report = ConvergenceReport(checkpoints, config.steps, config.scale, results,
                               snapshots=snapshots)
    report.aggregates = aggregate(results, checkpoints)
    return report


def _evaluate_job(args):
    scene, est, config, checkpoints, wavelengths, anchor, tid = args
    snaps = {}
    try:
        res = evaluate_target(scene, est, config, checkpoints, wavelengths, anchor, tid, snaps)
    except (OptimizationError, FloatingPointError) as exc:
        log.error("target %s failed: %s", tid, exc)
        res = TargetResult(tid, error=str(exc))
    return res, snaps


def save_report(report: ConvergenceReport, out_dir, snapshot_images=True, figures=True):
    """Write report.json, report.csv and (optionally) PNG snapshots and figures."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    with open(out / "report.csv", "w", newline="") as fh:
        csv.writer(fh).writerows(report.csv_rows())
    if snapshot_images and report.snapshots:
        from .plotting import save_rgb

        snap_dir = out / "snapshots"
        snap_dir.mkdir(exist_ok=True)
        for (tid, arm, step), img in sorted(report.snapshots.items()):
            save_rgb(img / report.scale, snap_dir / f"{tid}_{arm}_{step}.png")
    if figures and report.completed:
        from .plotting import plot_convergence

        plot_convergence(report, out / "convergence.png")
    return out


def load_report(path) -> ConvergenceReport:
    path = Path(path)
    if path.is_dir():
        path = path / "report.json"
    return ConvergenceReport.from_dict(json.loads(path.read_text()))
