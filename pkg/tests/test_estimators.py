"""Estimator API: validation helpers, sklearn conventions, and small fits."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from drnkit.data import synth_string_dataset
from drnkit.estimators import DrnClassifier, DrnSequenceRecognizer, check_images


class TestCheckImages:
    def test_accepts_nhw(self):
        out = check_images(np.zeros((3, 8, 8), dtype=np.float32))
        assert out.shape == (3, 1, 8, 8)

    def test_accepts_flat_square(self):
        out = check_images(np.zeros((3, 64), dtype=np.float32))
        assert out.shape == (3, 1, 8, 8)

    def test_flat_needs_square_or_hint(self):
        with pytest.raises(ValueError, match="infer"):
            check_images(np.zeros((3, 60), dtype=np.float32))
        out = check_images(np.zeros((3, 60), dtype=np.float32), image_size=(6, 10))
        assert out.shape == (3, 1, 6, 10)

    def test_uint8_scaled(self):
        out = check_images(np.full((1, 4, 4), 255, dtype=np.uint8))
        assert out.max() == pytest.approx(1.0)

    def test_range_enforced(self):
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            check_images(np.full((1, 4, 4), 2.0, dtype=np.float32))

    def test_multichannel_rejected(self):
        with pytest.raises(ValueError, match="single-channel"):
            check_images(np.zeros((2, 3, 8, 8), dtype=np.float32))

    def test_size_hint_enforced(self):
        with pytest.raises(ValueError, match="expected"):
            check_images(np.zeros((2, 8, 8), dtype=np.float32), image_size=(16, 16))


class TestClassifier:
    def test_sklearn_conventions(self):
        clf = DrnClassifier(epochs=1, num_rrdbs=1)
        params = clf.get_params()
        assert params["num_rrdbs"] == 1
        cloned = clone(clf)
        assert cloned.get_params() == params

    def test_predict_before_fit(self):
        with pytest.raises(NotFittedError):
            DrnClassifier().predict(np.zeros((1, 8, 8), dtype=np.float32))

    def test_fit_predict_on_digits(self, digit_glyphs):
        images = digit_glyphs.images[:400, 0]
        labels = np.asarray(digit_glyphs.labels[:400])
        clf = DrnClassifier(shallow_channels=8, num_rrdbs=1, layers_per_block=2,
                            growth_rate=4, learning_rate=0.1, epochs=4,
                            batch_size=32, random_state=0)
        clf.fit(images, labels)
        assert list(clf.classes_) == sorted(set(labels.tolist()))
        probs = clf.predict_proba(images[:32])
        np.testing.assert_allclose(probs.sum(axis=1), np.ones(32), atol=1e-5)
        train_acc = clf.score(images, labels)
        assert train_acc > 0.8

    def test_labels_may_be_arbitrary_values(self, digit_glyphs):
        # three-class subset with non-contiguous labels
        mask = np.isin(digit_glyphs.labels, (0, 4, 7))
        images = digit_glyphs.images[mask][:150, 0]
        labels = np.asarray(digit_glyphs.labels)[mask][:150] * 10
        clf = DrnClassifier(shallow_channels=4, num_rrdbs=1, layers_per_block=1,
                            growth_rate=2, epochs=2, batch_size=32, random_state=1)
        clf.fit(images, labels)
        assert set(clf.predict(images[:20])).issubset({0, 40, 70})

    def test_label_count_mismatch(self):
        with pytest.raises(ValueError, match="labels"):
            DrnClassifier().fit(np.zeros((4, 8, 8), dtype=np.float32), [0, 1])


class TestSequenceRecognizer:
    def test_sklearn_conventions(self):
        rec = DrnSequenceRecognizer(epochs=2)
        assert clone(rec).get_params() == rec.get_params()

    def test_fit_predict_score(self, digit_glyphs_16):
        split = synth_string_dataset(11, digit_glyphs_16, 160, (2, 2), (32, 64))
        texts = ["".join(str(l - 1) for l in seq) for seq in split.labels]
        rec = DrnSequenceRecognizer(alphabet="0123456789", max_label_len=2,
                                    shallow_channels=8, num_rrdbs=1,
                                    layers_per_block=2, growth_rate=4,
                                    learning_rate=0.01, epochs=2, batch_size=32,
                                    dropout_down=0.0, random_state=0)
        rec.fit(split.images, texts)
        decoded = rec.predict(split.images[:10])
        assert len(decoded) == 10
        assert all(isinstance(s, str) for s in decoded)
        assert 0.0 <= rec.score(split.images, texts) <= 1.0

    def test_too_long_label_rejected(self, digit_glyphs_16):
        split = synth_string_dataset(12, digit_glyphs_16, 4, (3, 3), (32, 96))
        texts = ["".join(str(l - 1) for l in seq) for seq in split.labels]
        rec = DrnSequenceRecognizer(max_label_len=2, shallow_channels=4,
                                    num_rrdbs=1, layers_per_block=1, growth_rate=2)
        with pytest.raises(ValueError, match="max_label_len"):
            rec.fit(split.images, texts)

    def test_character_outside_alphabet(self, digit_glyphs_16):
        split = synth_string_dataset(13, digit_glyphs_16, 4, (2, 2), (32, 64))
        rec = DrnSequenceRecognizer(alphabet="01", max_label_len=2,
                                    shallow_channels=4, num_rrdbs=1,
                                    layers_per_block=1, growth_rate=2)
        with pytest.raises(ValueError, match="not in alphabet"):
            rec.fit(split.images, ["97"] * len(split))
