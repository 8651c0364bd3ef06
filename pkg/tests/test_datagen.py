import numpy as np
import pytest

from salmask.data import load_dataset
from salmask.datagen import CLASS_COUNT, build_split, generate_image, make_corpus
from salmask.rng import Rng


class TestGenerateImage:
    def test_deterministic(self):
        a = generate_image(Rng(3, 9), 32, 4)
        b = generate_image(Rng(3, 9), 32, 4)
        assert np.array_equal(a, b)

    def test_dtype_shape(self):
        img = generate_image(Rng(0), 32, 0)
        assert img.dtype == np.uint8
        assert img.shape == (32, 32, 3)

    def test_class_out_of_range(self):
        with pytest.raises(ValueError):
            generate_image(Rng(0), 32, CLASS_COUNT)

    def test_images_vary_across_draws(self):
        imgs = [generate_image(Rng(5).fold_in(i), 32, 2) for i in range(4)]
        for i in range(3):
            assert not np.array_equal(imgs[i], imgs[i + 1])

    def test_colour_families_separate_in_aggregate(self):
        # warm classes are red-dominant, cool classes blue-dominant
        warm, cool = [], []
        rng = Rng(11)
        for i in range(100):
            k = i % CLASS_COUNT
            img = generate_image(rng.fold_in(i), 32, k).astype(np.float64) / 255.0
            diff = float(np.mean(img[:, :, 0]) - np.mean(img[:, :, 2]))
            (warm if k % 2 == 0 else cool).append(diff)
        assert np.mean(warm) > np.mean(cool) + 0.04

    def test_foreground_present(self):
        # an object on a smooth background leaves clear pixel spread
        for i in range(10):
            img = generate_image(Rng(21).fold_in(i), 32, i)
            assert img.astype(np.float64).std() > 10.0


class TestBuildSplit:
    def test_deterministic(self):
        a = build_split("train", 20, 32, seed=7)
        b = build_split("train", 20, 32, seed=7)
        for ra, rb in zip(a.records, b.records):
            assert ra.id == rb.id and ra.label == rb.label
            assert np.array_equal(ra.pixels, rb.pixels)

    def test_seeds_differ(self):
        a = build_split("train", 4, 32, seed=1)
        b = build_split("train", 4, 32, seed=2)
        assert not np.array_equal(a.records[0].pixels, b.records[0].pixels)

    def test_splits_differ(self):
        a = build_split("train", 4, 32, seed=1)
        b = build_split("val", 4, 32, seed=1)
        assert not np.array_equal(a.records[0].pixels, b.records[0].pixels)

    def test_exact_class_balance(self):
        ds = build_split("train", 50, 32, seed=0)
        counts = np.bincount([r.label for r in ds.records], minlength=CLASS_COUNT)
        assert np.all(counts == 5)

    def test_ids_sorted_and_labelled(self):
        ds = build_split("val", 12, 32, seed=0)
        assert [r.id for r in ds.records] == sorted(r.id for r in ds.records)
        assert [r.label for r in ds.records] == [i % CLASS_COUNT for i in range(12)]


class TestMakeCorpus:
    def test_writes_loadable_splits(self, tmp_path):
        make_corpus(tmp_path, side=16, train_count=20, val_count=10, seed=3)
        train = load_dataset(tmp_path / "train")
        val = load_dataset(tmp_path / "val")
        assert len(train) == 20 and len(val) == 10
        assert train.class_count == CLASS_COUNT
        assert train.split == "train" and val.split == "val"
        px = train.records[0].pixels
        assert px.shape == (16, 16, 3)
        assert px.min() >= 0.0 and px.max() <= 1.0

    def test_persisted_pixels_match_generator(self, tmp_path):
        make_corpus(tmp_path, side=16, train_count=10, val_count=10, seed=3)
        fresh = build_split("train", 10, 16, seed=3)
        back = load_dataset(tmp_path / "train")
        for a, b in zip(fresh.records, back.records):
            assert np.array_equal(a.pixels, b.pixels)
