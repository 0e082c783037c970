import numpy as np
import pytest

from mde.shiftlab import (
    Brightness,
    CutOut,
    GaussianNoise,
    OverlapSpec,
    Rotation,
    SyntheticDataset,
    apply_shift,
    cycle_stream,
    generate_dataset,
    overlapping_split,
)


def label_only_dataset(class_count, per_class, seed=0):
    """Dataset where only the labels matter (1x1 images), for split protocol tests."""
    n = class_count * per_class
    labels = np.repeat(np.arange(class_count), per_class)
    images = np.random.default_rng(seed).uniform(size=(n, 1, 1, 1))
    return SyntheticDataset(images=images, labels=labels, class_count=class_count, class_ids=tuple(range(class_count)))


class TestGenerateDataset:
    def test_deterministic(self):
        a = generate_dataset(3, 10, seed=42)
        b = generate_dataset(3, 10, seed=42)
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_balanced_and_in_range(self):
        ds = generate_dataset(2, 100, seed=1)
        assert len(ds) == 200
        assert np.bincount(ds.labels).tolist() == [100, 100]
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0

    def test_separable_by_default_net(self):
        from mde.toynet import TrainConfig, default_model, evaluate, train

        ds = generate_dataset(4, 60, seed=7)
        model = train(default_model(4, seed=7), ds.images, ds.labels, TrainConfig(epochs=30, batch_size=32, seed=7))
        acc, _ = evaluate(model, ds.images, ds.labels)
        assert acc >= 0.9

    def test_rejects_single_class(self):
        with pytest.raises(ValueError):
            generate_dataset(1, 10)


class TestApplyShift:
    @pytest.fixture()
    def images(self):
        return generate_dataset(3, 6, seed=3).images

    def test_zero_severity_identities(self, images):
        for spec in (Rotation(0.0), Brightness(0.0), GaussianNoise(0.0), CutOut(0, 4), CutOut(2, 0)):
            out = apply_shift(images, spec, seed=5)
            np.testing.assert_array_equal(out, images)

    def test_rotation_180_involution(self, images):
        once = apply_shift(images, Rotation(180.0))
        twice = apply_shift(once, Rotation(180.0))
        np.testing.assert_array_equal(twice, images)

    def test_rotation_90_matches_index_rotation(self, images):
        # nearest-neighbor with centered grid reproduces an exact index rotation
        out = apply_shift(images, Rotation(90.0))
        expected = np.rot90(images, k=-1, axes=(2, 3))
        np.testing.assert_allclose(out, expected, atol=0)

    def test_rotation_fills_outside_with_mean(self):
        images = np.ones((1, 1, 4, 4))
        images[0, 0, 0, 0] = 0.0
        out = apply_shift(images, Rotation(45.0))
        assert np.isfinite(out).all()
        # corners leave the grid under a 45-degree rotation and take the mean fill
        assert out[0, 0, 0, 0] == pytest.approx(images.mean())

    def test_noise_statistical_oracle(self):
        rng = np.random.default_rng(6)
        images = rng.uniform(size=(50, 1, 16, 16))  # 12800 pixels
        for sigma in (0.1, 0.4):
            out = apply_shift(images, GaussianNoise(sigma), seed=11)
            sample_std = float((out - images).std())
            assert abs(sample_std - sigma) <= 0.05 * sigma

    def test_noise_deterministic_per_seed(self, images):
        a = apply_shift(images, GaussianNoise(0.2), seed=4)
        b = apply_shift(images, GaussianNoise(0.2), seed=4)
        np.testing.assert_array_equal(a, b)
        c = apply_shift(images, GaussianNoise(0.2), seed=5)
        assert not np.array_equal(a, c)

    def test_brightness_clamps_to_range(self, images):
        out = apply_shift(images, Brightness(0.9))
        assert out.max() <= 1.0
        out = apply_shift(images, Brightness(-0.9))
        assert out.min() >= 0.0

    def test_cutout_zeroes_squares(self):
        images = np.ones((4, 2, 16, 16))
        out = apply_shift(images, CutOut(1, 4), seed=9)
        for i in range(4):
            zeros = np.argwhere(out[i, 0] == 0.0)
            assert zeros.shape[0] == 16  # one 4x4 hole, fully inside
            np.testing.assert_array_equal(out[i, 0] == 0.0, out[i, 1] == 0.0)  # all channels cut

    def test_no_nan_inf(self, images):
        for spec in (Rotation(33.0), Brightness(0.5), GaussianNoise(1.0), CutOut(3, 5)):
            assert np.isfinite(apply_shift(images, spec, seed=1)).all()

    def test_invalid_specs(self):
        with pytest.raises(ValueError):
            Rotation(360.0)
        with pytest.raises(ValueError):
            GaussianNoise(-0.1)
        with pytest.raises(ValueError):
            CutOut(-1, 2)


class TestOverlappingSplit:
    def test_disjoint_classes_at_p_zero(self):
        ds = label_only_dataset(10, 20)
        train, test, shared = overlapping_split(ds, OverlapSpec(10, 4, 0.0, seed=1))
        assert shared == 0
        assert not set(train.class_ids) & set(test.class_ids)
        assert len(train) == len(test) == 4 * 20

    def test_identical_classes_at_p_one(self):
        ds = label_only_dataset(10, 20)
        train, test, shared = overlapping_split(ds, OverlapSpec(10, 4, 1.0, seed=2))
        assert shared == 4
        assert set(train.class_ids) == set(test.class_ids)
        assert len(train) == len(test) == 4 * 10  # half of each shared class per side

    def test_sample_sets_always_disjoint(self):
        ds = label_only_dataset(8, 10, seed=3)
        # re-derive index sets by matching rows against the parent images
        for p in (0.0, 0.25, 0.5, 1.0):
            train, test, _ = overlapping_split(ds, OverlapSpec(8, 3, p, seed=4))
            train_rows = {float(v[0, 0, 0]) for v in train.images}
            test_rows = {float(v[0, 0, 0]) for v in test.images}
            assert not train_rows & test_rows

    def test_paper_scale_class_arithmetic(self):
        # 100 classes, 500 samples each, p=0.33, 60 classes per side -> 20 shared.
        # With sample-disjoint sharing each side holds 25k samples.
        ds = label_only_dataset(100, 500, seed=5)
        train, test, shared = overlapping_split(ds, OverlapSpec(100, 60, 0.33, seed=6))
        assert shared == 20
        assert len(set(train.class_ids)) == 60
        assert len(set(test.class_ids)) == 60
        assert len(set(train.class_ids) & set(test.class_ids)) == 20
        assert len(train) == len(test) == 40 * 500 + 20 * 250

    def test_infeasible_rejected(self):
        ds = label_only_dataset(10, 4)
        with pytest.raises(ValueError):
            overlapping_split(ds, OverlapSpec(10, 8, 0.0, seed=0))

    def test_deterministic(self):
        ds = label_only_dataset(10, 6)
        a = overlapping_split(ds, OverlapSpec(10, 4, 0.5, seed=9))
        b = overlapping_split(ds, OverlapSpec(10, 4, 0.5, seed=9))
        np.testing.assert_array_equal(a[0].images, b[0].images)
        np.testing.assert_array_equal(a[1].labels, b[1].labels)


class TestCycleStream:
    def test_full_draw_covers_all_classes(self):
        ds = label_only_dataset(5, 4)
        cycles = cycle_stream(ds, 5, 3, seed=0)
        for sub in cycles:
            assert set(sub.class_ids) == set(range(5))
            assert len(sub) == len(ds)

    def test_deterministic(self):
        ds = label_only_dataset(6, 4)
        a = cycle_stream(ds, 3, 5, seed=7)
        b = cycle_stream(ds, 3, 5, seed=7)
        for x, y in zip(a, b):
            assert x.class_ids == y.class_ids
            np.testing.assert_array_equal(x.images, y.images)

    def test_consecutive_overlap_expectation(self):
        # expected |A intersect B| / K between consecutive draws is (c/K)^2
        ds = label_only_dataset(100, 1, seed=8)
        cycles = cycle_stream(ds, 75, 200, seed=11)
        overlaps = []
        for a, b in zip(cycles, cycles[1:]):
            overlaps.append(len(set(a.class_ids) & set(b.class_ids)) / 100.0)
        assert abs(float(np.mean(overlaps)) - 0.5625) <= 0.01

    def test_c_out_of_range(self):
        ds = label_only_dataset(4, 2)
        with pytest.raises(ValueError):
            cycle_stream(ds, 5, 1, seed=0)
