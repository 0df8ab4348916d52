import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gfz.data import (BALANCED_PREVALENCE, IMBALANCED_PREVALENCE, DatasetSpec, DomainShift,
                      apply_domain_shift, augment, generate_dataset, load_gfzd, render_sample,
                      sample_labels, save_gfzd, split_dataset, _rng)
from gfz.nn import ConfigError


def small_spec(**kw):
    defaults = dict(image_size=16, class_count=3, prevalence=(0.5, 0.4, 0.6),
                    sample_count=40, seed=5)
    defaults.update(kw)
    return DatasetSpec(**defaults)


class TestGeneration:
    def test_deterministic(self):
        spec = small_spec()
        x1, y1 = generate_dataset(spec)
        x2, y2 = generate_dataset(spec)
        assert np.array_equal(x1, x2)
        assert np.array_equal(y1, y2)

    def test_shapes_and_ranges(self):
        x, y = generate_dataset(small_spec())
        assert x.shape == (40, 3, 16, 16)
        assert y.shape == (40, 3)
        assert x.dtype == np.float32
        assert x.min() >= 0.0 and x.max() <= 1.0
        assert set(np.unique(y)) <= {0, 1}

    def test_imbalanced_prevalence_profile(self):
        # empirical rates stay within 3 sigma of the binomial expectation
        spec = DatasetSpec(prevalence=IMBALANCED_PREVALENCE, sample_count=10_000, seed=3)
        labels = sample_labels(spec, _rng(spec.seed, 0))
        rates = labels.mean(axis=0)
        for p, rate in zip(IMBALANCED_PREVALENCE, rates):
            sigma = np.sqrt(p * (1 - p) / 10_000)
            assert abs(rate - p) < 3 * sigma, (p, rate)

    def test_single_balanced_class(self):
        spec = DatasetSpec(class_count=1, prevalence=(0.5,), sample_count=2000, seed=9)
        labels = sample_labels(spec, _rng(spec.seed, 0))
        assert abs(labels.mean() - 0.5) < 3 * np.sqrt(0.25 / 2000)

    def test_rare_class_config_error(self):
        with pytest.raises(ConfigError, match="fewer than one positive"):
            small_spec(prevalence=(0.5, 0.001, 0.6)).validate()

    def test_cooccurrence_boost(self):
        spec = DatasetSpec(prevalence=(0.1, 0.1, 0.1), class_count=3, sample_count=5000,
                           seed=2, cooccurrence=(0, 1, 0.5))
        labels = sample_labels(spec, _rng(spec.seed, 0))
        joint = np.mean((labels[:, 0] == 1) & (labels[:, 1] == 1))
        assert joint > 0.4  # boosted well above the independent 0.01

    def test_label_render_consistency(self):
        # toggling one label changes the rendered pixels; identical labels
        # with the same sample rng render identically
        spec = small_spec()
        labels_on = np.array([1, 0, 1], dtype=np.uint8)
        labels_off = np.array([1, 0, 0], dtype=np.uint8)
        img_a = render_sample(spec, labels_on, _rng(0, 1, 0))
        img_b = render_sample(spec, labels_on, _rng(0, 1, 0))
        img_c = render_sample(spec, labels_off, _rng(0, 1, 0))
        assert np.array_equal(img_a, img_b)
        assert not np.array_equal(img_a, img_c)


class TestDomainShift:
    def test_identity_bit_exact(self):
        x, _ = generate_dataset(small_spec())
        out = apply_domain_shift(x, DomainShift(), seed=0)
        assert out is x

    def test_brightness_zero_blacks_out(self):
        x, _ = generate_dataset(small_spec())
        out = apply_domain_shift(x, DomainShift(brightness=0.0), seed=0)
        assert np.all(out == 0.0)

    def test_noise_reproducible(self):
        x, _ = generate_dataset(small_spec())
        shift = DomainShift(noise_sigma=0.1)
        out1 = apply_domain_shift(x, shift, seed=4)
        out2 = apply_domain_shift(x, shift, seed=4)
        out3 = apply_domain_shift(x, shift, seed=5)
        assert np.array_equal(out1, out2)
        assert not np.array_equal(out1, out3)

    def test_hue_rotation_changes_channels(self):
        x, _ = generate_dataset(small_spec())
        out = apply_domain_shift(x, DomainShift(hue_degrees=120.0), seed=0)
        assert out.shape == x.shape
        assert not np.allclose(out, x)

    def test_background_swap_changes_pixels(self):
        x, _ = generate_dataset(small_spec())
        out = apply_domain_shift(x, DomainShift(background_texture=2), seed=0)
        assert not np.array_equal(out, x)


class TestAugment:
    def test_identity_draw(self):
        img = np.random.default_rng(0).random((3, 8, 8)).astype(np.float32)

        class FixedRng:
            def integers(self, lo, hi):
                return 0

        assert np.array_equal(augment(img, FixedRng()), img)

    def test_flip_involution(self):
        img = np.random.default_rng(0).random((3, 8, 8)).astype(np.float32)

        class FlipRng:
            def integers(self, lo, hi):
                return 1

        once = augment(img, FlipRng())
        twice = augment(once, FlipRng())
        assert np.array_equal(twice, img)

    def test_rot90_four_times_identity(self):
        img = np.random.default_rng(1).random((3, 8, 8)).astype(np.float32)

        class RotRng:
            def integers(self, lo, hi):
                return 3  # rotate 90

        out = img
        for _ in range(4):
            out = augment(out, RotRng())
        assert np.array_equal(out, img)

    @given(st.integers(min_value=0, max_value=2 ** 31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_augment_preserves_pixel_multiset(self, seed):
        rng = np.random.default_rng(seed)
        img = rng.random((3, 6, 6)).astype(np.float32)
        out = augment(img, rng)
        assert np.array_equal(np.sort(out.reshape(3, -1), axis=1),
                              np.sort(img.reshape(3, -1), axis=1))

    def test_non_square_rejected(self):
        with pytest.raises(ConfigError):
            augment(np.zeros((3, 4, 5), dtype=np.float32), np.random.default_rng(0))


class TestSplit:
    def test_exact_sizes(self):
        x = np.zeros((1000, 3, 4, 4), dtype=np.float32)
        y = np.zeros((1000, 2), dtype=np.uint8)
        parts = split_dataset(x, y, (0.5, 0.25, 0.25), seed=1)
        assert [p[0].shape[0] for p in parts] == [500, 250, 250]

    def test_same_seed_same_membership(self):
        rng = np.random.default_rng(0)
        x = rng.random((60, 3, 4, 4)).astype(np.float32)
        y = (rng.random((60, 2)) > 0.5).astype(np.uint8)
        a = split_dataset(x, y, (0.6, 0.2, 0.2), seed=9)
        b = split_dataset(x, y, (0.6, 0.2, 0.2), seed=9)
        for (xa, ya), (xb, yb) in zip(a, b):
            assert np.array_equal(xa, xb) and np.array_equal(ya, yb)

    def test_disjoint_cover(self):
        x = np.arange(97, dtype=np.float32).reshape(97, 1, 1, 1)
        y = np.zeros((97, 1), dtype=np.uint8)
        parts = split_dataset(x, y, (0.7, 0.15, 0.15), seed=2)
        values = np.concatenate([p[0].reshape(-1) for p in parts])
        assert len(values) == 97
        assert set(values.astype(int)) == set(range(97))

    def test_bad_fractions(self):
        x = np.zeros((10, 1, 1, 1), dtype=np.float32)
        y = np.zeros((10, 1), dtype=np.uint8)
        with pytest.raises(ConfigError):
            split_dataset(x, y, (0.5, 0.2), seed=0)


class TestGfzdContainer:
    def test_round_trip_bit_exact(self, tmp_path):
        x, y = generate_dataset(small_spec())
        path = tmp_path / "data.gfzd"
        save_gfzd(path, x, y)
        x2, y2 = load_gfzd(path)
        assert np.array_equal(y, y2)
        # first save quantizes to u8; a second round trip is bit-exact
        save_gfzd(path, x2, y2)
        x3, y3 = load_gfzd(path)
        assert np.array_equal(x2, x3)
        assert np.array_equal(y2, y3)
        assert np.max(np.abs(x - x2)) <= 0.5 / 255.0 + 1e-7

    def test_header_fields(self, tmp_path):
        x, y = generate_dataset(small_spec())
        path = tmp_path / "data.gfzd"
        save_gfzd(path, x, y)
        raw = path.read_bytes()
        assert raw[:4] == b"GFZD"
        assert len(raw) == 16 + 40 * (3 * 16 * 16 + 3)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.gfzd"
        path.write_bytes(b"NOPE" + b"\0" * 32)
        with pytest.raises(ConfigError, match="magic"):
            load_gfzd(path)

    def test_truncated_rejected(self, tmp_path):
        x, y = generate_dataset(small_spec())
        path = tmp_path / "data.gfzd"
        save_gfzd(path, x, y)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(ConfigError, match="truncated"):
            load_gfzd(path)


def test_default_profiles_validate():
    DatasetSpec(prevalence=BALANCED_PREVALENCE, sample_count=100, seed=0).validate()
    DatasetSpec(prevalence=IMBALANCED_PREVALENCE, sample_count=100, seed=0).validate()
