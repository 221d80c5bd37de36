import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.linear_model import LogisticRegression

from remem import data as D
from remem.errors import MagicError, ParameterError, TruncationError, ValidationError, VersionError


def test_generation_is_bit_deterministic():
    a = D.generate_shapes(D.ShapesSpec(n_classes=4, samples_per_class=5, seed=7))
    b = D.generate_shapes(D.ShapesSpec(n_classes=4, samples_per_class=5, seed=7))
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)


def test_different_seed_differs():
    a = D.generate_shapes(D.ShapesSpec(samples_per_class=5, seed=1))
    b = D.generate_shapes(D.ShapesSpec(samples_per_class=5, seed=2))
    assert not np.array_equal(a.images, b.images)


def test_labels_and_counts():
    ds = D.generate_shapes(D.ShapesSpec(n_classes=6, samples_per_class=3))
    assert ds.images.shape == (18, 3, 16, 16)
    assert np.bincount(ds.labels).tolist() == [3] * 6


def test_heavy_noise_is_clamped():
    ds = D.generate_shapes(D.ShapesSpec(samples_per_class=5, noise=0.5, seed=3))
    assert ds.images.min() >= 0 and ds.images.max() <= 1


def test_separable_preset_linear_probe():
    ds = D.preset("separable")
    # weak regularisation: the question is separability, not generalisation
    probe = LogisticRegression(C=100.0, max_iter=5000).fit(ds.flat, ds.labels)
    assert probe.score(ds.flat, ds.labels) > 0.95


def test_vocabulary_limit():
    with pytest.raises(ParameterError):
        D.generate_shapes(D.ShapesSpec(n_classes=D.VOCAB_SIZE + 1))


def test_small_images_rejected():
    with pytest.raises(ParameterError):
        D.generate_shapes(D.ShapesSpec(image_size=7))


def test_unknown_preset():
    with pytest.raises(ParameterError):
        D.preset("imagenet")


class TestSplit:
    def test_exact_stratification(self):
        ds = D.generate_shapes(D.ShapesSpec(n_classes=4, samples_per_class=10))
        tr, te = D.split(ds, (0.5, 0.5), seed=0)
        assert np.bincount(tr.labels).tolist() == [5] * 4
        assert np.bincount(te.labels).tolist() == [5] * 4

    def test_deterministic(self):
        ds = D.generate_shapes(D.ShapesSpec(samples_per_class=10))
        a, _ = D.split(ds, (0.3, 0.7), seed=4)
        b, _ = D.split(ds, (0.3, 0.7), seed=4)
        assert np.array_equal(a.images, b.images)

    def test_tiny_class(self):
        ds = D.generate_shapes(D.ShapesSpec(samples_per_class=1))
        with pytest.raises(ParameterError):
            D.split(ds, (0.5, 0.5))

    def test_fractions_must_sum_to_one(self):
        ds = D.generate_shapes(D.ShapesSpec(samples_per_class=4))
        with pytest.raises(ParameterError):
            D.split(ds, (0.5, 0.6))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(2, 15), st.floats(0.05, 0.95), st.integers(0, 1000))
    def test_disjoint_cover_and_proportions(self, per_class, frac, seed):
        ds = D.generate_shapes(D.ShapesSpec(n_classes=3, image_size=8, samples_per_class=per_class, seed=1))
        # small noiseless shapes can repeat, so tag each row to identify it by content
        ds.images[:, 0, 0, 0] = np.arange(len(ds)) / len(ds)
        tr, te = D.split(ds, (frac, 1 - frac), seed)
        key = lambda d: {d.images[i].tobytes() for i in range(len(d))}  # noqa: E731
        assert not key(tr) & key(te)
        assert len(tr) + len(te) == len(ds)
        for c in range(3):
            n_tr = int((tr.labels == c).sum())
            assert abs(n_tr - per_class * frac) <= 1
            assert n_tr >= 1 and (te.labels == c).sum() >= 1


class TestIo:
    def test_round_trip(self, tmp_path):
        ds = D.preset("memorization", samples_per_class=2)
        p = tmp_path / "d.rmds"
        D.save_dataset(ds, p)
        back = D.load_dataset(p)
        assert np.array_equal(back.labels, ds.labels)
        assert np.array_equal(back.images, D.quantize_u8(ds.images))
        D.save_dataset(back, tmp_path / "again.rmds")
        assert (tmp_path / "again.rmds").read_bytes() == p.read_bytes()

    def test_header_layout(self, tmp_path):
        ds = D.generate_shapes(D.ShapesSpec(n_classes=2, image_size=8, samples_per_class=1))
        p = tmp_path / "d.rmds"
        D.save_dataset(ds, p)
        raw = p.read_bytes()
        assert raw[:4] == b"RMDS"
        assert int.from_bytes(raw[4:8], "little") == 1
        assert int.from_bytes(raw[8:12], "little") == 2
        assert len(raw) == 20 + 2 * (2 + 8 * 8 * 3)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "d.rmds"
        p.write_bytes(b"XXXX" + bytes(16))
        with pytest.raises(MagicError):
            D.load_dataset(p)

    def test_bad_version(self, tmp_path):
        ds = D.generate_shapes(D.ShapesSpec(samples_per_class=1, image_size=8))
        p = tmp_path / "d.rmds"
        D.save_dataset(ds, p)
        raw = bytearray(p.read_bytes())
        raw[4] = 9
        p.write_bytes(bytes(raw))
        with pytest.raises(VersionError):
            D.load_dataset(p)

    def test_truncation_reports_offset(self, tmp_path):
        ds = D.generate_shapes(D.ShapesSpec(samples_per_class=2, image_size=8))
        p = tmp_path / "d.rmds"
        D.save_dataset(ds, p)
        raw = p.read_bytes()
        p.write_bytes(raw[:-10])
        with pytest.raises(TruncationError) as info:
            D.load_dataset(p)
        rec = 2 + 8 * 8 * 3
        assert info.value.offset == 20 + (len(ds) - 1) * rec

    def test_label_out_of_range(self, tmp_path):
        ds = D.generate_shapes(D.ShapesSpec(n_classes=2, samples_per_class=1, image_size=8))
        p = tmp_path / "d.rmds"
        D.save_dataset(ds, p)
        raw = bytearray(p.read_bytes())
        raw[20:22] = (5).to_bytes(2, "little")
        p.write_bytes(bytes(raw))
        with pytest.raises(ValidationError):
            D.load_dataset(p)
