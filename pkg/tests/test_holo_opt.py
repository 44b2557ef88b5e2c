import json

import numpy as np
import pytest

from holopower.dataset import brighten, generate_procedural_target
from holopower.evaluate import psnr
from holopower.holo_opt import (
    HologramProblem,
    LaserPowerMatrix,
    OptimizationConfig,
    OptimizationError,
    TargetScene,
    image_loss,
    initial_phases,
    loss_gradients,
    lr_schedule,
    optimize_multicolor,
    optimize_single_color,
    save_result,
)
from holopower.optics import DimensionError, PhaseHologramSet, reconstruct_intensity
from holopower.optim import AdamState, adam_step, linear_decay

from conftest import PITCH, WAVELENGTHS, random_scene


def direct_loss(phases, powers, scene, scale):
    total = 0.0
    for k, d in enumerate(scene.plane_distances):
        recon = reconstruct_intensity(PhaseHologramSet(phases), powers, WAVELENGTHS, d, PITCH)
        mask = scene.plane_masks[k]
        for p in range(3):
            total += np.mean((recon[p][mask] - scale * scene.intensity[p][mask]) ** 2)
    return total


def central_difference(fn, x, idx, h):
    xp, xm = x.copy(), x.copy()
    xp[idx] += h
    xm[idx] -= h
    return (fn(xp) - fn(xm)) / (2 * h)


class TestLaserPowerMatrix:
    def test_identity(self):
        np.testing.assert_array_equal(LaserPowerMatrix.identity().values, np.eye(3))

    def test_clamped(self):
        m = LaserPowerMatrix(np.array([[-0.5, 0.5, 1.5]] * 3)).clamped()
        np.testing.assert_array_equal(m.values[0], [0, 0.5, 1])
        assert m.in_range()

    def test_primary_sums_are_column_sums(self):
        m = LaserPowerMatrix(np.arange(9.0).reshape(3, 3) / 10)
        np.testing.assert_allclose(m.primary_sums(), [0.9, 1.2, 1.5])

    def test_json_round_trip(self, tmp_path):
        m = LaserPowerMatrix(np.random.default_rng(0).uniform(0, 1, (3, 3)))
        m.save(tmp_path / "p.json")
        np.testing.assert_array_equal(LaserPowerMatrix.load(tmp_path / "p.json").values, m.values)
        assert np.array(json.loads((tmp_path / "p.json").read_text())).shape == (3, 3)


class TestTargetScene:
    def test_overlapping_masks_rejected(self):
        masks = np.ones((2, 4, 4), bool)
        with pytest.raises(ValueError):
            TargetScene(np.zeros((3, 4, 4)), masks, (0.0, 0.005), PITCH)

    def test_uncovered_pixels_rejected(self):
        masks = np.zeros((1, 4, 4), bool)
        with pytest.raises(ValueError):
            TargetScene(np.zeros((3, 4, 4)), masks, (0.0,), PITCH)

    def test_out_of_range_intensity(self):
        with pytest.raises(ValueError):
            TargetScene.single_plane(np.full((3, 4, 4), 1.5), 0.0)


class TestImageLoss:
    def test_zero_when_reconstruction_matches(self):
        scene = TargetScene.single_plane(np.full((3, 8, 8), 0.5), 0.0, PITCH)
        loss = image_loss(np.zeros((3, 8, 8)), np.full((3, 3), 0.3), scene, 1.8, WAVELENGTHS)
        assert loss == pytest.approx(0, abs=1e-10)

    def test_all_zero_powers_unit_target(self):
        scene = TargetScene.single_plane(np.ones((3, 8, 8)), 0.005, PITCH)
        loss = image_loss(np.zeros((3, 8, 8)), np.zeros((3, 3)), scene, 1.8, WAVELENGTHS)
        assert loss == pytest.approx(9.72, rel=1e-6)

    def test_matches_direct_oracle(self, rng):
        scene = random_scene(rng, 16, (-0.005, 0.0, 0.005))
        phases = rng.uniform(-np.pi, np.pi, (3, 16, 16))
        powers = rng.uniform(0, 1, (3, 3))
        loss = image_loss(phases, powers, scene, 1.8, WAVELENGTHS)
        assert loss == pytest.approx(direct_loss(phases, powers, scene, 1.8), rel=1e-10)

    def test_dimension_mismatch(self, rng):
        scene = random_scene(rng, 16)
        with pytest.raises(DimensionError):
            image_loss(np.zeros((3, 8, 8)), np.ones((3, 3)), scene, 1.8, WAVELENGTHS)
        with pytest.raises(DimensionError):
            image_loss(np.zeros((3, 16, 16)), np.ones((2, 3)), scene, 1.8, WAVELENGTHS)


class TestGradients:
    def test_zero_at_global_minimum(self, rng):
        scene = TargetScene.single_plane(np.zeros((3, 8, 8)), 0.005, PITCH)
        g_phi, g_l = loss_gradients(rng.uniform(-3, 3, (3, 8, 8)), np.zeros((3, 3)),
                                    scene, 1.8, WAVELENGTHS)
        np.testing.assert_array_equal(g_phi, 0)
        np.testing.assert_array_equal(g_l, 0)

    def test_shapes(self, rng):
        scene = random_scene(rng, 16)
        g_phi, g_l = loss_gradients(np.zeros((3, 16, 16)), np.full((3, 3), .5), scene, 1.8, WAVELENGTHS)
        assert g_phi.shape == (3, 16, 16) and g_l.shape == (3, 3)

    def test_finite_differences(self, rng):
        scene = random_scene(rng, 16)
        phases = rng.uniform(-np.pi, np.pi, (3, 16, 16))
        powers = rng.uniform(0.1, 0.9, (3, 3))
        g_phi, g_l = loss_gradients(phases, powers, scene, 1.8, WAVELENGTHS)
        for idx in [(0, 0, 0), (1, 7, 3), (2, 15, 15), (0, 8, 12)]:
            fd = central_difference(
                lambda x: image_loss(x, powers, scene, 1.8, WAVELENGTHS), phases, idx, 1e-3)
            assert g_phi[idx] == pytest.approx(fd, rel=1e-3, abs=1e-9)
        for idx in np.ndindex(3, 3):
            fd = central_difference(
                lambda x: image_loss(phases, x, scene, 1.8, WAVELENGTHS), powers, idx, 1e-4)
            assert g_l[idx] == pytest.approx(fd, rel=1e-3)


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        params, _ = adam_step({"x": np.array([1.0, -2.0])}, {"x": np.zeros(2)}, AdamState(), 0.1)
        np.testing.assert_array_equal(params["x"], [1.0, -2.0])

    def test_first_step(self):
        params, state = adam_step({"x": np.array(1.0)}, {"x": np.array(1.0)}, AdamState(), 0.1)
        assert float(params["x"]) == pytest.approx(0.9, abs=1e-6)
        assert state.step == 1

    def test_monotone_descent(self):
        x, state = {"x": np.array(1.0)}, AdamState()
        values = []
        for _ in range(3):
            x, state = adam_step(x, {"x": np.array(0.5)}, state, 0.1)
            values.append(float(x["x"]))
        assert values[0] < 1.0 and values[1] < values[0] and values[2] < values[1]

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            adam_step({"x": np.zeros(2)}, {"x": np.zeros(3)}, AdamState(), 0.1)

    def test_does_not_mutate_inputs(self):
        x = {"x": np.array([1.0])}
        adam_step(x, {"x": np.array([1.0])}, AdamState(), 0.1)
        assert x["x"][0] == 1.0


class TestSchedule:
    def test_endpoints(self):
        cfg = OptimizationConfig(steps=500)
        assert lr_schedule(0, cfg) == pytest.approx(0.025)
        assert lr_schedule(499, cfg) == pytest.approx(0.005)

    def test_midpoint(self):
        assert lr_schedule(2, OptimizationConfig(steps=5)) == pytest.approx(0.015)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            lr_schedule(5, OptimizationConfig(steps=5))
        with pytest.raises(ValueError):
            linear_decay(-1, 5, 1.0, 0.5)

    def test_single_step(self):
        assert lr_schedule(0, OptimizationConfig(steps=1)) == pytest.approx(0.025)

    @pytest.mark.parametrize("kwargs", [{"steps": 0}, {"lr_end": 0.1}, {"scale": 0}, {"lr_end": 0}])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ValueError):
            OptimizationConfig(**kwargs)


class TestOptimize:
    def test_single_color_dark_target(self):
        scene = TargetScene.single_plane(np.zeros((3, 16, 16)), 0.005, PITCH)
        res = optimize_single_color(scene, WAVELENGTHS, OptimizationConfig(steps=20, scale=1.0))
        assert res.final_loss <= res.history[0]
        np.testing.assert_array_equal(res.powers.values, np.eye(3))

    def test_single_color_equals_frozen_multicolor(self, rng):
        scene = random_scene(rng, 16)
        cfg = OptimizationConfig(steps=30, scale=1.0, seed=5)
        single = optimize_single_color(scene, WAVELENGTHS, cfg)
        multi = optimize_multicolor(scene, WAVELENGTHS, cfg, LaserPowerMatrix.identity(),
                                    freeze_powers=True)
        np.testing.assert_array_equal(single.holograms.phases, multi.holograms.phases)
        assert single.history == multi.history
        assert single.final_loss == multi.final_loss

    @staticmethod
    def _single_color_run(seed, floor):
        rgb, _ = generate_procedural_target(seed, 64, 64)
        if floor is not None:
            rgb = brighten(rgb, floor)
        scene = TargetScene.single_plane(rgb, 0.005, PITCH)
        cfg = OptimizationConfig(steps=200, scale=1.0, seed=0)
        res = optimize_single_color(scene, WAVELENGTHS, cfg)
        problem = HologramProblem(scene, WAVELENGTHS, 1.0)
        start = problem.composite(initial_phases(cfg, (64, 64)), np.eye(3))
        end = problem.composite(res.holograms.phases, res.powers.values)
        return rgb, res, psnr(end, rgb) - psnr(start, rgb)

    @pytest.mark.parametrize("seed", [3, 4, 5])
    def test_single_color_psnr_gain_bright(self, seed):
        rgb, _, gain = self._single_color_run(seed, 0.5)
        assert rgb.mean() > 0.5
        assert gain >= 10

    @pytest.mark.parametrize("seed", [3, 4, 5])
    def test_single_color_reaches_energy_floor(self, seed):
        # unit power per channel conserves mean intensity 1, so the per-channel
        # MSE cannot drop below (1 - mean(t_p))^2
        rgb, res, _ = self._single_color_run(seed, None)
        floor = np.sum((1 - rgb.mean(axis=(1, 2))) ** 2)
        assert floor <= res.final_loss <= floor + 0.06

    @pytest.mark.xfail(strict=True, reason="energy floor caps the gain on dark natural images")
    def test_single_color_psnr_gain_dark(self):
        assert self._single_color_run(3, None)[2] >= 10

    def test_dark_target_multicolor(self):
        scene = TargetScene.single_plane(np.zeros((3, 32, 32)), 0.005, PITCH)
        res = optimize_multicolor(scene, WAVELENGTHS, OptimizationConfig(steps=100))
        assert res.final_loss < 1e-3
        assert res.powers.values.max() < 0.05

    def test_bright_white_target_demands_power(self):
        scene = TargetScene.single_plane(np.ones((3, 32, 32)), 0.005, PITCH)
        res = optimize_multicolor(scene, WAVELENGTHS, OptimizationConfig(steps=100, scale=1.8))
        assert np.all(res.powers.primary_sums() > 1)

    def test_history_and_projection(self, rng):
        scene = random_scene(rng, 16, (-0.005, 0.0, 0.005))
        res = optimize_multicolor(scene, WAVELENGTHS, OptimizationConfig(steps=40),
                                  checkpoints=range(41))
        assert len(res.history) == 40 and np.all(np.isfinite(res.history))
        best = np.minimum.accumulate(res.history)
        assert np.all(np.diff(best) <= 0)
        for _, powers in res.snapshots.values():
            assert powers.min() >= 0 and powers.max() <= 1
        assert res.loss_at(40) == res.final_loss

    def test_uniform_cold_start(self, rng):
        res = optimize_multicolor(random_scene(rng, 16), WAVELENGTHS, OptimizationConfig(steps=1))
        np.testing.assert_allclose(res.initial_powers.values, 0.6)

    def test_same_phase_init_across_power_inits(self, rng):
        scene = random_scene(rng, 16)
        cfg = OptimizationConfig(steps=2, seed=9)
        a = optimize_multicolor(scene, WAVELENGTHS, cfg)
        b = optimize_multicolor(scene, WAVELENGTHS, cfg, np.full((3, 3), 0.2))
        assert a.initial_phase_hash == b.initial_phase_hash

    def test_deterministic(self, rng):
        scene = random_scene(rng, 16)
        cfg = OptimizationConfig(steps=10, seed=3)
        a = optimize_multicolor(scene, WAVELENGTHS, cfg)
        b = optimize_multicolor(scene, WAVELENGTHS, cfg)
        assert a.history == b.history
        np.testing.assert_array_equal(a.powers.values, b.powers.values)

    def test_invalid_initial_powers(self, rng):
        scene = random_scene(rng, 16)
        with pytest.raises(ValueError):
            optimize_multicolor(scene, WAVELENGTHS, OptimizationConfig(steps=1), np.full((3, 3), 1.5))
        with pytest.raises(DimensionError):
            optimize_multicolor(scene, WAVELENGTHS, OptimizationConfig(steps=1), np.ones((2, 3)))

    def test_non_finite_loss_aborts(self, rng):
        scene = random_scene(rng, 16)
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(OptimizationError, match="step 0"):
                optimize_multicolor(scene, WAVELENGTHS, OptimizationConfig(steps=2, scale=1e30))

    def test_save_result(self, rng, tmp_path):
        cfg = OptimizationConfig(steps=5)
        res = optimize_multicolor(random_scene(rng, 16), WAVELENGTHS, cfg)
        save_result(res, cfg, tmp_path, pitch=PITCH)
        assert len(json.loads((tmp_path / "history.json").read_text())) == 5
        assert json.loads((tmp_path / "config.json").read_text())["seed"] == 0
        back = PhaseHologramSet.load(tmp_path / "phases")
        np.testing.assert_array_equal(back.phases, res.holograms.phases)


@pytest.mark.parametrize("seed", range(3))
def test_subframe_relabeling_symmetry(seed):
    r = np.random.default_rng(seed)
    scene = random_scene(r, 16)
    phases = r.uniform(-np.pi, np.pi, (3, 16, 16))
    powers = r.uniform(0, 1, (3, 3))
    perm = r.permutation(3)
    a = image_loss(phases, powers, scene, 1.8, WAVELENGTHS)
    b = image_loss(phases[perm], powers[perm], scene, 1.8, WAVELENGTHS)
    assert abs(a - b) <= 1e-12 * abs(a)
