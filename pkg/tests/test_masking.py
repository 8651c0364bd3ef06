import warnings
from fractions import Fraction

import numpy as np
import pytest

from salmask.errors import ConfigError, ModeError
from salmask.filters import filter2d, gaussian_kernel_2d, highpass
from salmask.masking import (
    MaskPlan,
    StrategyConfig,
    apply_channelwise,
    apply_focal,
    apply_highpass_strategy,
    apply_mean_fill,
    apply_strong_blur,
    round_half_up,
    sample_hard_negative_plan,
    sample_positive_plan,
    sample_random_plan,
    sample_salient_only_plan,
)
from salmask.rng import Rng
from salmask.saliency import SaliencyGrid


def _grid(mask, patch_h=4, patch_w=4):
    mask = np.asarray(mask, dtype=np.uint8)
    return SaliencyGrid(mask=mask, patch_h=patch_h, patch_w=patch_w,
                        gamma=float(mask.sum()) / mask.size)


def _grid_with_fg(cells_per_side, fg_count, seed=0, patch=4):
    """Square grid with exactly fg_count scattered foreground cells."""
    n = cells_per_side * cells_per_side
    flat = np.zeros(n, dtype=np.uint8)
    flat[Rng(seed).sample_without_replacement(n, fg_count)] = 1
    return _grid(flat.reshape(cells_per_side, cells_per_side), patch, patch)


def _rhu_oracle(ratio, count):
    """floor(x + 1/2) by integer arithmetic; independent of the library."""
    fr = Fraction(ratio) * count
    return (2 * fr.numerator + fr.denominator) // (2 * fr.denominator)


def _fg_set(grid):
    return set(np.flatnonzero(grid.mask.ravel() == 1).tolist())


def _cfg(strategy="highpass", side=32, **kw):
    if strategy == "highpass" and side == 32:
        # the auto-scaled 1x1 high-pass kernel zeroes everything; tests
        # of the strategy pipeline want a real transform
        kw.setdefault("hp_size", 3)
        kw.setdefault("hp_var", 0.5)
    return StrategyConfig.for_side(strategy, side, **kw)


class TestRoundHalfUp:
    def test_hand_values(self):
        assert round_half_up(3.0) == 3
        assert round_half_up(4.35) == 4
        assert round_half_up(4.5) == 5
        assert round_half_up(7.35) == 7
        assert round_half_up(0.5) == 1
        assert round_half_up(0.49) == 0

    def test_exact_fraction_ties(self):
        assert round_half_up(Fraction(9, 2)) == 5
        assert round_half_up(Fraction(7, 2)) == 4


class TestStrategyConfig:
    def test_reference_side_defaults(self):
        cfg = _cfg(side=224)
        assert cfg.blur_size == 31 and cfg.blur_var == 10.0
        assert cfg.hp_size == 13 and cfg.hp_var == 4.0

    def test_small_side_rescale(self):
        cfg = StrategyConfig.for_side("highpass", 32)
        assert cfg.blur_size == 5
        assert abs(cfg.blur_var - 10.0 * (32 / 224) ** 2) < 1e-12
        # 13*32/224 = 1.86 rounds to a 1x1 kernel: the auto-scaled high
        # pass degenerates to zero at tiny sides unless overridden
        assert cfg.hp_size == 1
        assert abs(cfg.hp_var - 4.0 * (32 / 224) ** 2) < 1e-12

    def test_bad_values_rejected(self):
        with pytest.raises(ConfigError):
            StrategyConfig("blurry", 31, 10.0, 13, 4.0)
        with pytest.raises(ConfigError):
            StrategyConfig("blur", 30, 10.0, 13, 4.0)
        with pytest.raises(ConfigError):
            StrategyConfig("blur", 31, 0.0, 13, 4.0)
        with pytest.raises(ConfigError):
            _cfg(noise_std=-0.1)
        with pytest.raises(ConfigError):
            _cfg(focal_inner=0.9, focal_outer=0.8)
        with pytest.raises(ConfigError):
            _cfg(focal_outer=1.2)

    def test_variants_need_highpass(self):
        with pytest.raises(ConfigError):
            _cfg(strategy="meanfill", channelwise=True)
        with pytest.raises(ConfigError):
            _cfg(strategy="blur", focal=True)
        assert _cfg(channelwise=True, focal=True).strategy == "highpass"


class TestPositivePlan:
    def test_hand_budget_20_of_49(self):
        grid = _grid_with_fg(7, 20)
        plan = sample_positive_plan(grid, Rng(1), alpha_range=(0.15, 0.15))
        fg = _fg_set(grid)
        got_fg = sum(1 for i in plan.patch_indices if i in fg)
        got_bg = plan.count - got_fg
        assert got_fg == 3 and got_bg == 4
        assert plan.kind == "positive" and not plan.fallback

    def test_zero_alpha_empty_plan(self):
        plan = sample_positive_plan(_grid_with_fg(7, 20), Rng(0),
                                    alpha_range=(0.0, 0.0))
        assert plan.count == 0

    def test_gamma_one_fallback(self):
        grid = _grid(np.ones((7, 7), np.uint8))
        plan = sample_positive_plan(grid, Rng(2), alpha_range=(0.15, 0.15))
        assert plan.fallback
        assert plan.count == 7  # round_half_up(0.15 * 49) = round(7.35)

    def test_gamma_zero_fallback(self):
        grid = _grid(np.zeros((7, 7), np.uint8))
        plan = sample_positive_plan(grid, Rng(2), alpha_range=(0.15, 0.15))
        assert plan.fallback and plan.count == 7

    def test_budget_exactness_sweep(self):
        rng = Rng(77)
        for trial in range(2000):
            side = 2 + trial % 7
            n = side * side
            fg_count = 1 + rng.integer(n - 1)  # keep both groups non-empty
            grid = _grid_with_fg(side, fg_count, seed=trial)
            plan = sample_positive_plan(grid, rng)
            fg = _fg_set(grid)
            got_fg = sum(1 for i in plan.patch_indices if i in fg)
            got_bg = plan.count - got_fg
            assert got_fg == _rhu_oracle(plan.alpha_or_beta, fg_count)
            assert got_bg == _rhu_oracle(plan.alpha_or_beta, n - fg_count)

    def test_overbudget_clamps_with_warning(self):
        grid = _grid_with_fg(7, 20)
        with pytest.warns(RuntimeWarning):
            plan = sample_positive_plan(grid, Rng(0), alpha_range=(1.6, 1.6))
        fg = _fg_set(grid)
        assert sum(1 for i in plan.patch_indices if i in fg) == 20

    def test_deterministic(self):
        grid = _grid_with_fg(7, 20)
        a = sample_positive_plan(grid, Rng(9, 4))
        b = sample_positive_plan(grid, Rng(9, 4))
        assert a.alpha_or_beta == b.alpha_or_beta
        assert np.array_equal(a.patch_indices, b.patch_indices)


class TestHardNegativePlan:
    def test_hand_budget_half_of_20(self):
        grid = _grid_with_fg(7, 20)
        plan = sample_hard_negative_plan(grid, Rng(1), beta_range=(0.5, 0.5))
        assert plan.count == 10
        assert set(plan.patch_indices.tolist()) <= _fg_set(grid)

    def test_beta_range_containment(self):
        grid = _grid_with_fg(7, 20)
        rng = Rng(3)
        for _ in range(2000):
            plan = sample_hard_negative_plan(grid, rng)
            assert 0.4 <= plan.alpha_or_beta < 0.7

    def test_gamma_zero_unavailable(self):
        grid = _grid(np.zeros((4, 4), np.uint8))
        assert sample_hard_negative_plan(grid, Rng(0)) is None

    def test_never_contains_background(self):
        rng = Rng(5)
        for trial in range(500):
            grid = _grid_with_fg(6, 1 + rng.integer(35), seed=trial)
            plan = sample_hard_negative_plan(grid, rng)
            assert set(plan.patch_indices.tolist()) <= _fg_set(grid)
            assert plan.count == _rhu_oracle(plan.alpha_or_beta,
                                             int(grid.mask.sum()))


class TestRandomAndSalientOnly:
    def test_random_hand_budget(self):
        plan = sample_random_plan(_grid_with_fg(7, 20), Rng(0),
                                  alpha_range=(0.15, 0.15))
        assert plan.count == 7

    def test_random_per_cell_frequency(self):
        grid = _grid_with_fg(7, 20)
        hits = np.zeros(49)
        rng = Rng(8)
        trials = 5000
        for _ in range(trials):
            hits[sample_random_plan(grid, rng).patch_indices] += 1
        freq = hits / trials
        assert np.all(freq > 0.12) and np.all(freq < 0.18)
        assert freq.max() - freq.min() < 0.03

    def test_salient_only_stays_in_foreground(self):
        rng = Rng(4)
        for trial in range(300):
            grid = _grid_with_fg(6, 1 + rng.integer(35), seed=trial)
            plan = sample_salient_only_plan(grid, rng)
            assert set(plan.patch_indices.tolist()) <= _fg_set(grid)

    def test_salient_only_clamps_to_foreground_size(self):
        grid = _grid_with_fg(7, 3)
        plan = sample_salient_only_plan(grid, Rng(1), alpha_range=(0.15, 0.15))
        assert plan.count == 3  # wanted round(0.15*49)=7, clamped

    def test_salient_only_rejects_empty_foreground(self):
        grid = _grid(np.zeros((4, 4), np.uint8))
        with pytest.raises(ValueError):
            sample_salient_only_plan(grid, Rng(0))


class TestMaskPlanValidation:
    def test_indices_sorted_and_distinct(self):
        grid = _grid_with_fg(4, 6)
        plan = MaskPlan(np.array([9, 2, 5]), 0.1, "random", grid)
        assert plan.patch_indices.tolist() == [2, 5, 9]
        with pytest.raises(ValueError):
            MaskPlan(np.array([1, 1]), 0.1, "random", grid)
        with pytest.raises(ValueError):
            MaskPlan(np.array([16]), 0.1, "random", grid)
        with pytest.raises(ValueError):
            MaskPlan(np.array([0]), 0.1, "sideways", grid)


def _image(seed, side=32):
    return np.clip(Rng(seed).normal(0.2, (side, side, 3)) + 0.5, 0, 1)


def _full_plan(grid):
    return MaskPlan(np.arange(grid.cell_count), 1.0, "random", grid)


def _empty_plan(grid):
    return MaskPlan(np.empty(0, np.int64), 0.0, "random", grid)


class TestMeanFill:
    def test_constant_image_identity(self):
        grid = _grid_with_fg(8, 30)
        img = np.full((32, 32, 3), 0.37, np.float32)
        out = apply_mean_fill(img, sample_positive_plan(grid, Rng(0)))
        assert np.array_equal(out, img)

    def test_empty_plan_identity(self):
        img = _image(1)
        out = apply_mean_fill(img, _empty_plan(_grid_with_fg(8, 30)))
        assert np.array_equal(out, img)

    def test_two_patch_mean(self):
        # left half 0, right half 1; masking the 0-patch paints 0.5
        grid = _grid(np.array([[1, 0]], np.uint8), patch_h=4, patch_w=4)
        img = np.zeros((4, 8, 3), np.float32)
        img[:, 4:] = 1.0
        plan = MaskPlan(np.array([0]), 0.2, "random", grid)
        out = apply_mean_fill(img, plan)
        assert np.all(out[:, :4] == 0.5)
        assert np.array_equal(out[:, 4:], img[:, 4:])

    def test_locality(self):
        for seed in range(5):
            grid = _grid_with_fg(8, 20, seed=seed)
            img = _image(seed)
            plan = sample_positive_plan(grid, Rng(seed))
            out = apply_mean_fill(img, plan)
            pm = _pixel_mask_of(plan)
            assert np.array_equal(out[~pm], img[~pm])

    def test_geometry_mismatch_rejected(self):
        plan = _full_plan(_grid_with_fg(8, 20))
        with pytest.raises(ValueError):
            apply_mean_fill(np.zeros((12, 12, 3), np.float32), plan)


def _pixel_mask_of(plan):
    g = plan.grid
    cells = np.zeros(g.cell_count, dtype=bool)
    cells[plan.patch_indices] = True
    cells = cells.reshape(g.mask.shape)
    return np.repeat(np.repeat(cells, g.patch_h, 0), g.patch_w, 1)


class TestStrongBlur:
    def test_constant_image_identity(self):
        img = np.full((32, 32, 3), 0.61, np.float32)
        plan = sample_positive_plan(_grid_with_fg(8, 30), Rng(0))
        assert np.array_equal(apply_strong_blur(img, plan, _cfg("blur")), img)

    def test_empty_plan_identity(self):
        img = _image(2)
        out = apply_strong_blur(img, _empty_plan(_grid_with_fg(8, 30)), _cfg("blur"))
        assert np.array_equal(out, img)

    def test_full_plan_equals_filter(self):
        img = _image(3)
        cfg = _cfg("blur")
        out = apply_strong_blur(img, _full_plan(_grid_with_fg(8, 30)), cfg)
        want = filter2d(img, gaussian_kernel_2d(cfg.blur_size, cfg.blur_var))
        assert np.max(np.abs(out - want)) <= 1e-6

    def test_locality(self):
        for seed in range(5):
            grid = _grid_with_fg(8, 20, seed=seed)
            img = _image(seed)
            plan = sample_positive_plan(grid, Rng(seed))
            out = apply_strong_blur(img, plan, _cfg("blur"))
            pm = _pixel_mask_of(plan)
            assert np.array_equal(out[~pm], img[~pm])


class TestHighpassStrategy:
    def test_constant_image_noise_only(self):
        # HP of a constant is zero, so masked cells carry pure noise
        grid = _grid(np.ones((8, 8), np.uint8), 8, 8)  # 64x64 image
        img = np.full((64, 64, 3), 0.4, np.float32)
        cfg = _cfg(side=64)
        out = apply_highpass_strategy(img, _full_plan(grid), cfg, Rng(0))
        assert abs(float(out.std()) - cfg.noise_std) / cfg.noise_std < 0.05

    def test_zero_noise_empty_plan_is_highpass(self):
        img = _image(4)
        cfg = _cfg(noise_std=0.0)
        out = apply_highpass_strategy(img, _empty_plan(_grid_with_fg(8, 30)),
                                      cfg, Rng(0))
        assert np.array_equal(out, highpass(img, cfg.hp_size, cfg.hp_var))

    def test_zero_noise_full_plan_is_zero(self):
        cfg = _cfg(noise_std=0.0)
        out = apply_highpass_strategy(_image(5), _full_plan(_grid_with_fg(8, 30)),
                                      cfg, Rng(0))
        assert np.all(out == 0.0)

    def test_unmasked_region_is_highpass(self):
        img = _image(6)
        cfg = _cfg()
        plan = sample_positive_plan(_grid_with_fg(8, 20), Rng(3))
        out = apply_highpass_strategy(img, plan, cfg, Rng(7))
        pm = _pixel_mask_of(plan)
        hp = highpass(img, cfg.hp_size, cfg.hp_var)
        assert np.array_equal(out[~pm], hp[~pm])

    def test_deterministic(self):
        img = _image(7)
        plan = sample_positive_plan(_grid_with_fg(8, 20), Rng(1))
        a = apply_highpass_strategy(img, plan, _cfg(), Rng(11, 2))
        b = apply_highpass_strategy(img, plan, _cfg(), Rng(11, 2))
        assert np.array_equal(a, b)


class TestChannelwise:
    def test_identical_plans_match_single_plan(self):
        img = _image(8)
        cfg = _cfg(noise_std=0.0, channelwise=True)
        plan = sample_positive_plan(_grid_with_fg(8, 25), Rng(2))
        trio = apply_channelwise(img, (plan, plan, plan), cfg, Rng(0))
        single = apply_highpass_strategy(img, plan, cfg, Rng(0))
        assert np.array_equal(trio, single)

    def test_untouched_channels_stay_highpass(self):
        img = _image(9)
        cfg = _cfg(channelwise=True)
        grid = _grid_with_fg(8, 25)
        plan = sample_positive_plan(grid, Rng(2))
        out = apply_channelwise(img, (plan, _empty_plan(grid), _empty_plan(grid)),
                                cfg, Rng(0))
        hp = highpass(img, cfg.hp_size, cfg.hp_var)
        assert np.array_equal(out[:, :, 1], hp[:, :, 1])
        assert np.array_equal(out[:, :, 2], hp[:, :, 2])

    def test_requires_highpass(self):
        img = _image(10)
        plan = sample_positive_plan(_grid_with_fg(8, 25), Rng(2))
        with pytest.raises(ModeError):
            apply_channelwise(img, (plan, plan, plan), _cfg("blur"), Rng(0))
        with pytest.raises(ModeError):
            apply_channelwise(img, (plan, plan, plan), _cfg("meanfill"), Rng(0))

    def test_requires_three_plans(self):
        plan = sample_positive_plan(_grid_with_fg(8, 25), Rng(2))
        with pytest.raises(ValueError):
            apply_channelwise(_image(11), (plan, plan), _cfg(), Rng(0))

    def test_independent_plans_differ_across_channels(self):
        img = _image(12)
        grid = _grid_with_fg(8, 25)
        rng = Rng(6)
        plans = tuple(sample_positive_plan(grid, rng) for _ in range(3))
        sets = [set(p.patch_indices.tolist()) for p in plans]
        assert sets[0] != sets[1] or sets[1] != sets[2]
        out = apply_channelwise(img, plans, _cfg(), rng)
        assert out.shape == img.shape


class TestFocal:
    def test_reference_geometry_224(self):
        img = np.zeros((224, 224, 3), np.float32)
        cfg = _cfg(side=224)
        pos = apply_focal(img, "positive", cfg, Rng(0))
        # centred 200-square untouched, frame replaced by noise
        assert np.array_equal(pos[12:212, 12:212], img[12:212, 12:212])
        frame = np.ones((224, 224), bool)
        frame[12:212, 12:212] = False
        noise = pos[frame]
        assert noise.std() > 0.01
        assert abs(float(noise.std()) - cfg.noise_std) / cfg.noise_std < 0.05

        neg = apply_focal(img, "hard_negative", cfg, Rng(0))
        assert np.array_equal(neg[:47], img[:47])  # outside 130-square
        assert neg[47:177, 47:177].std() > 0.01

    def test_small_side_geometry(self):
        img = np.zeros((32, 32, 3), np.float32)
        cfg = _cfg(side=32)
        pos = apply_focal(img, "positive", cfg, Rng(0))
        # outer square side round(200/224*32) = 29, so a 1-to-2 pixel frame
        changed = np.any(pos != 0, axis=2)
        assert np.all(~changed[1:30, 1:30])
        assert int(changed.sum()) <= 32 * 32 - 29 * 29
        neg = apply_focal(img, "hard_negative", cfg, Rng(1))
        inner = np.any(neg != 0, axis=2)
        assert np.all(~inner[:6]) and np.all(~inner[:, :6])
        assert np.all(~inner[25:]) and np.all(~inner[:, 25:])

    def test_outer_frac_one_identity(self):
        img = _image(13)
        cfg = _cfg(focal_outer=1.0)
        assert np.array_equal(apply_focal(img, "positive", cfg, Rng(0)), img)

    def test_rejections(self):
        with pytest.raises(ValueError):
            apply_focal(np.zeros((16, 8, 3), np.float32), "positive", _cfg(), Rng(0))
        with pytest.raises(ModeError):
            apply_focal(_image(1), "positive", _cfg("meanfill"), Rng(0))
        with pytest.raises(ValueError):
            apply_focal(_image(1), "negative", _cfg(), Rng(0))

    def test_deterministic(self):
        img = _image(14)
        a = apply_focal(img, "hard_negative", _cfg(), Rng(4, 4))
        b = apply_focal(img, "hard_negative", _cfg(), Rng(4, 4))
        assert np.array_equal(a, b)


def _border_energy(img, pm):
    """Mean |pixel difference| across masked-patch boundaries."""
    total, count = 0.0, 0
    dh = pm[:, 1:] != pm[:, :-1]
    total += float(np.abs(img[:, 1:][dh] - img[:, :-1][dh]).sum())
    count += int(dh.sum()) * img.shape[2]
    dv = pm[1:] != pm[:-1]
    total += float(np.abs(img[1:][dv] - img[:-1][dv]).sum())
    count += int(dv.sum()) * img.shape[2]
    return total / count


class TestEdgeEnergy:
    def test_meanfill_and_blur_beat_zero_fill(self):
        from salmask.datagen import generate_image
        cfg = _cfg("blur")
        for seed in range(5):
            img = generate_image(Rng(40).fold_in(seed), 32, seed % 10)
            img = img.astype(np.float32) / 255.0
            grid = _grid_with_fg(8, 20, seed=seed)
            plan = sample_positive_plan(grid, Rng(seed), alpha_range=(0.2, 0.2))
            pm = _pixel_mask_of(plan)
            zero_fill = img.copy()
            zero_fill[pm] = 0.0
            e_zero = _border_energy(zero_fill, pm)
            e_mean = _border_energy(apply_mean_fill(img, plan), pm)
            e_blur = _border_energy(apply_strong_blur(img, plan, cfg), pm)
            assert e_mean < e_zero
            assert e_blur < e_zero
