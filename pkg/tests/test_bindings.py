import json

import numpy as np
import pytest

bindings = pytest.importorskip("salmask.bindings")

from salmask.cli import main
from salmask.data import write_ppm
from salmask.datagen import generate_image
from salmask.masking import (
    MaskPlan,
    StrategyConfig,
    apply_highpass_strategy,
    apply_mean_fill,
    apply_strong_blur,
    sample_hard_negative_plan,
    sample_positive_plan,
    sample_random_plan,
    sample_salient_only_plan,
)
from salmask.rng import Rng
from salmask.saliency import SaliencyGrid, saliency_from_activations
from salmask.tensor import read_smt1, write_smt1

from salmask.bindings import (
    ForeignArrayView,
    bind_apply_strategy,
    bind_compute_saliency,
    bind_sample_plans,
    salmask_abi_version,
)


def _acts(seed, u=6, v=6, d=4):
    return Rng(seed, 51).normal(1.0, (u, v, d)).astype(np.float32)


def _img(seed, side=32):
    return generate_image(Rng(seed, 52), side, seed % 10) \
        .astype(np.float32) / 255.0


class TestAbi:
    def test_version_string(self):
        assert salmask_abi_version() == "salmask-abi-1"


class TestForeignArrayView:
    def test_round_trip_preserves_bits(self):
        arr = Rng(1, 53).normal(3.0, (5, 7)).astype(np.float32)
        arr[0, 0] = np.float32(1e-38)  # subnormal territory
        view = ForeignArrayView.from_array(arr)
        back = view.to_array()
        assert back.shape == arr.shape
        assert back.tobytes() == arr.tobytes()

    def test_to_array_owns_memory(self):
        view = ForeignArrayView.from_array(np.ones((2, 2), np.float32))
        out = view.to_array()
        out[...] = 5.0
        assert view.to_array()[0, 0] == 1.0


class TestComputeSaliency:
    def test_constant_activations(self):
        grid, gamma = bind_compute_saliency(np.full((4, 4, 6), 2.5,
                                                    np.float32))
        assert (grid == 1).all()
        assert gamma == 1.0

    def test_parity_with_native(self):
        for seed in range(300):
            acts = _acts(seed)
            grid, gamma = bind_compute_saliency(acts, coeff=0.6)
            native = saliency_from_activations(acts, acts.shape[0],
                                               acts.shape[1], coeff=0.6)
            assert np.array_equal(grid, native.mask)
            assert gamma == native.gamma

    def test_input_copied(self):
        acts = _acts(0)
        grid, _ = bind_compute_saliency(acts)
        snapshot = grid.copy()
        acts[...] = 0.0
        assert np.array_equal(grid, snapshot)

    def test_accepts_view(self):
        acts = _acts(1)
        via_view = bind_compute_saliency(ForeignArrayView.from_array(acts))
        direct = bind_compute_saliency(acts)
        assert np.array_equal(via_view[0], direct[0])
        assert via_view[1] == direct[1]

    def test_bad_rank(self):
        with pytest.raises(ValueError):
            bind_compute_saliency(np.zeros((4, 4), np.float32))


def _native_grid(mask):
    mask = np.asarray(mask, np.uint8)
    return SaliencyGrid(mask=mask, patch_h=1, patch_w=1,
                        gamma=float(mask.sum()) / mask.size)


class TestSamplePlans:
    def test_parity_with_native_samplers(self):
        samplers = {
            "positive": lambda g, r: sample_positive_plan(
                g, r, (0.05, 0.25)),
            "random": lambda g, r: sample_random_plan(g, r, (0.05, 0.25)),
            "salient-only": lambda g, r: sample_salient_only_plan(
                g, r, (0.05, 0.25)),
            "hardneg": lambda g, r: sample_hard_negative_plan(
                g, r, (0.4, 0.7)),
        }
        for seed in range(250):
            mask = (Rng(seed, 54).normal(1.0, (8, 8)) > 0) \
                .astype(np.uint8)
            if mask.sum() == 0:
                mask[0, 0] = 1
            for mode, native_fn in samplers.items():
                indices, ratio = bind_sample_plans(mask, seed, mode)
                plan = native_fn(_native_grid(mask),
                                 Rng(seed).fold_in(0))
                assert np.array_equal(indices, plan.patch_indices), mode
                assert ratio == plan.alpha_or_beta, mode

    def test_unknown_mode(self):
        with pytest.raises(ValueError, match="mode"):
            bind_sample_plans(np.ones((4, 4), np.uint8), 0, "sideways")

    def test_hardneg_needs_foreground(self):
        with pytest.raises(ValueError, match="foreground"):
            bind_sample_plans(np.zeros((4, 4), np.uint8), 0, "hardneg")

    def test_grid_must_be_binary(self):
        with pytest.raises(ValueError, match="binary"):
            bind_sample_plans(np.full((4, 4), 2, np.uint8), 0, "positive")


class TestApplyStrategy:
    def test_meanfill_constant_image_identity(self):
        img = np.full((16, 16, 3), 0.25, np.float32)
        out = bind_apply_strategy(img, [0, 5, 9], "meanfill",
                                  {"grid": 4})
        assert np.array_equal(out, img)

    def _native_plan(self, indices, side, g):
        grid = SaliencyGrid(mask=np.zeros((g, g), np.uint8),
                            patch_h=side // g, patch_w=side // g,
                            gamma=0.0)
        return MaskPlan(patch_indices=np.asarray(indices, np.int64),
                        alpha_or_beta=0.0, kind="positive", grid=grid)

    def test_parity_all_strategies(self):
        side, g = 32, 8
        for seed in range(150):
            img = _img(seed, side)
            count = 1 + seed % 12
            indices = Rng(seed, 55).sample_without_replacement(g * g,
                                                               count)
            plan = self._native_plan(indices, side, g)
            cfg = StrategyConfig.for_side("meanfill", side)
            got = bind_apply_strategy(img, indices, "meanfill",
                                      {"grid": g}, seed)
            assert np.array_equal(got, apply_mean_fill(img, plan))

            got = bind_apply_strategy(img, indices, "blur",
                                      {"grid": g}, seed)
            cfg = StrategyConfig.for_side("blur", side)
            assert np.array_equal(got, apply_strong_blur(img, plan, cfg))

            params = {"grid": g, "hp_size": 3, "hp_var": 0.5}
            got = bind_apply_strategy(img, indices, "highpass", params,
                                      seed)
            cfg = StrategyConfig.for_side("highpass", side, hp_size=3,
                                          hp_var=0.5)
            native = apply_highpass_strategy(img, plan, cfg,
                                             Rng(seed).fold_in(1))
            assert np.array_equal(got, native)

    def test_input_not_mutated(self):
        img = _img(3)
        before = img.copy()
        bind_apply_strategy(img, [0, 1], "meanfill", {"grid": 8}, 0)
        assert np.array_equal(img, before)

    def test_unknown_param_rejected(self):
        with pytest.raises(ValueError, match="unknown"):
            bind_apply_strategy(_img(4), [0], "meanfill",
                                {"grid": 8, "speed": 11}, 0)

    def test_indivisible_grid_rejected(self):
        with pytest.raises(ValueError, match="divisible"):
            bind_apply_strategy(_img(5, 30), [0], "meanfill",
                                {"grid": 8}, 0)

    def test_out_of_range_index_rejected(self):
        with pytest.raises(ValueError):
            bind_apply_strategy(_img(6), [64], "meanfill", {"grid": 8}, 0)


class TestCliBridge:
    def test_abi_command(self, capsys):
        assert main(["bind-abi"]) == 0
        assert capsys.readouterr().out.strip() == "salmask-abi-1"

    def test_saliency_bridge_matches_in_process(self, tmp_path, capsys):
        acts = _acts(7)
        write_smt1(tmp_path / "acts.smt1", acts)
        rc = main(["bind-saliency", "--activations",
                   str(tmp_path / "acts.smt1"), "--out-grid",
                   str(tmp_path / "grid.smt1")])
        assert rc == 0
        reply = json.loads(capsys.readouterr().out)
        grid, gamma = bind_compute_saliency(acts)
        assert np.array_equal(read_smt1(tmp_path / "grid.smt1"), grid)
        assert reply["gamma"] == gamma
        assert reply["abi"] == "salmask-abi-1"

    def test_plan_bridge_matches_in_process(self, tmp_path, capsys):
        mask = (Rng(8, 54).normal(1.0, (8, 8)) > 0).astype(np.uint8)
        write_smt1(tmp_path / "grid.smt1", mask)
        rc = main(["bind-plan", "--grid", str(tmp_path / "grid.smt1"),
                   "--seed", "9", "--mode", "positive"])
        assert rc == 0
        reply = json.loads(capsys.readouterr().out)
        indices, ratio = bind_sample_plans(mask, 9, "positive")
        assert reply["indices"] == [int(i) for i in indices]
        assert reply["ratio"] == ratio

    def test_apply_bridge_matches_in_process(self, tmp_path, capsys):
        img = _img(10)
        write_smt1(tmp_path / "img.smt1", img)
        rc = main(["bind-apply", "--image", str(tmp_path / "img.smt1"),
                   "--indices", "3,17,44", "--strategy", "highpass",
                   "--seed", "11", "--grid-side", "8",
                   "--param", "hp_size=3", "--param", "hp_var=0.5",
                   "--out", str(tmp_path / "out.smt1")])
        assert rc == 0
        native = bind_apply_strategy(img, [3, 17, 44], "highpass",
                                     {"grid": 8, "hp_size": 3,
                                      "hp_var": 0.5}, 11)
        assert np.array_equal(read_smt1(tmp_path / "out.smt1"), native)

    def test_plan_bridge_matches_preview_json(self, tmp_path):
        """Same seed: the bridge plan equals the preview's plan record."""
        img_u8 = generate_image(Rng(12, 52), 32, 4)
        write_ppm(tmp_path / "x.ppm", img_u8)
        assert main(["mask-preview", "--image", str(tmp_path / "x.ppm"),
                     "--strategy", "meanfill", "--seed", "21",
                     "--out", str(tmp_path / "prev")]) == 0
        preview = json.loads((tmp_path / "prev" / "plan.jsonl")
                             .read_text())
        # grid the preview used: patch means of the image at grid 8
        img = img_u8.astype(np.float32) / 255.0
        acts = img.reshape(8, 4, 8, 4, 3).mean(axis=(1, 3))
        grid, _ = bind_compute_saliency(acts)
        indices, ratio = bind_sample_plans(grid, 21, "positive")
        assert preview["indices"] == [int(i) for i in indices]
        assert preview["ratio"] == ratio
