"""Synthetic task generation and the spectrogram front-end."""

import wave as wave_module

import numpy as np
import pytest

from trimlab.data import (
    Dataset,
    FeatureSpec,
    TaskSpec,
    export_wav,
    featurize,
    generate,
    normals,
    tone_class_frequency,
    uniforms,
)


class TestStreams:
    def test_uniform_range_and_determinism(self):
        a = uniforms(1000, 1, 2, 3)
        b = uniforms(1000, 1, 2, 3)
        np.testing.assert_array_equal(a, b)
        assert np.all((a >= 0) & (a < 1))
        assert abs(a.mean() - 0.5) < 0.05

    def test_distinct_streams(self):
        assert not np.array_equal(uniforms(100, 0, 0, 0, 0), uniforms(100, 0, 0, 0, 1))

    def test_normals_moments(self):
        z = normals(20000, 9, 9)
        assert abs(z.mean()) < 0.03
        assert abs(z.std() - 1.0) < 0.03


class TestGenerate:
    def test_bitwise_determinism(self):
        spec = TaskSpec()
        w1, l1 = generate(spec, "train", 17)
        w2, l2 = generate(spec, "train", 17)
        np.testing.assert_array_equal(w1, w2)
        assert l1 == l2

    def test_bad_index_and_split(self):
        spec = TaskSpec()
        with pytest.raises(IndexError):
            generate(spec, "val", 500)
        with pytest.raises(ValueError, match="split"):
            generate(spec, "dev", 0)

    def test_chord_all_absent_is_pure_noise(self):
        spec = TaskSpec(task="chord_tags")
        for i in range(200):
            w, lab = generate(spec, "train", i)
            if lab.sum() == 0:
                assert np.abs(w).max() < 6 * spec.noise_std  # noise only
                return
        pytest.fail("no all-absent draw in 200 clips (p ~ 3.2% each)")

    def test_clean_tone_peak_bin(self):
        # fundamental of class 0 peaks within one bin of round(110 * 256 / 8000) = 4;
        # the negative-frequency image of the rectangular window shifts the peak
        # between bins 3 and 4 depending on phase
        spec = TaskSpec(noise_std=0.0)
        nominal = round(tone_class_frequency(0) * 256 / spec.sample_rate)
        assert nominal == 4
        t = np.arange(256) / spec.sample_rate
        for phase in np.linspace(0, 2 * np.pi, 9):
            clean = np.sin(2 * np.pi * tone_class_frequency(0) * t + phase)
            peak = int(np.argmax(np.abs(np.fft.rfft(clean))[:128]))
            assert abs(peak - nominal) <= 1

    def test_class_distribution_covers_all(self):
        spec = TaskSpec()
        labels = [generate(spec, "train", i)[1] for i in range(300)]
        assert set(labels) == set(range(10))

    def test_pretext_unlabeled(self):
        w, lab = generate(TaskSpec(task="pretext"), "train", 0)
        assert lab is None and w.shape == (4000,)

    def test_split_disjointness(self):
        # no waveform bytes collide across splits
        spec = TaskSpec(train_size=60, val_size=60, test_size=60)
        seen = {generate(spec, s, i)[0].tobytes() for s in ("train", "val", "test") for i in range(60)}
        assert len(seen) == 180


class TestFeaturize:
    def test_zero_waveform_zero_features(self):
        feats = featurize(np.zeros(1000, dtype=np.float32))
        np.testing.assert_array_equal(feats, 0.0)

    def test_frame_count(self):
        # floor((4000 - 256) / 128) + 1 = 30
        assert featurize(np.zeros(4000)).shape == (30, 128)
        assert FeatureSpec().num_frames(4000) == 30

    def test_bin_centered_sinusoid_single_peak(self):
        fs = FeatureSpec()
        bin_idx = 20
        freq = bin_idx * 8000 / fs.frame
        t = np.arange(4000) / 8000
        feats = featurize(np.sin(2 * np.pi * freq * t), fs)
        assert np.all(feats.argmax(axis=1) == bin_idx)

    def test_too_short_rejected(self):
        with pytest.raises(ValueError, match="frame"):
            featurize(np.zeros(100))

    def test_pure_function(self):
        w = generate(TaskSpec(), "train", 0)[0]
        np.testing.assert_array_equal(featurize(w), featurize(w))


class TestDataset:
    def test_shapes_and_caching(self):
        ds = Dataset(TaskSpec(train_size=8, val_size=4, test_size=4))
        feats = ds.features("train")
        assert feats.shape == (8, 30, 128)
        assert ds.labels("train").shape == (8,)
        assert ds.features("train") is feats  # cached

    def test_multilabel_labels(self):
        ds = Dataset(TaskSpec(task="chord_tags", train_size=6, val_size=4, test_size=4))
        labels = ds.labels("train")
        assert labels.shape == (6, 8)
        assert set(np.unique(labels)) <= {0.0, 1.0}

    def test_nearest_centroid_beats_chance(self):
        # label solvability ceiling: mean-feature centroids already separate tones
        ds = Dataset(TaskSpec(train_size=200, val_size=4, test_size=100))
        train = ds.features("train").mean(axis=1)
        trainy = ds.labels("train")
        centroids = np.stack([train[trainy == c].mean(axis=0) for c in range(10)])
        test = ds.features("test").mean(axis=1)
        pred = np.argmin(((test[:, None, :] - centroids[None]) ** 2).sum(-1), axis=1)
        acc = (pred == ds.labels("test")).mean()
        assert acc > 0.5  # chance is 0.1


class TestWavExport:
    def test_export_roundtrip(self, tmp_path):
        w, _ = generate(TaskSpec(), "train", 3)
        path = tmp_path / "clip.wav"
        export_wav(w, path)
        with wave_module.open(str(path), "rb") as f:
            assert f.getnchannels() == 1
            assert f.getsampwidth() == 2
            assert f.getframerate() == 8000
            raw = np.frombuffer(f.readframes(f.getnframes()), dtype="<i2")
        assert raw.shape == (4000,)
        np.testing.assert_allclose(raw / 32767.0, np.clip(w, -1, 1), atol=2e-4)
