"""Deterministic synthetic audio tasks and the spectrogram front-end.

Clips are fully determined by (seed, split, index) through a counter-based
splitmix64 generator, so datasets are reproducible across machines without
carrying any RNG state: ``value_i = mix(fold(seed, split, index, tag) + i*G)``
where ``mix`` is the splitmix64 finalizer (two xor-shift-multiply rounds) and
G is the 64-bit golden-ratio increment. Splits draw from disjoint streams by
construction.

Tasks:

* ``tone_class``  - 10-way classification of harmonic tones, f0 = 110 + 55c Hz
                    with 3 harmonics at amplitudes 1, 1/2, 1/4.
* ``chord_tags``  - 8-tag multilabel: component tones f_k = 130 * 2^(k/4) Hz,
                    each independently present with probability 0.35.
* ``pretext``     - unlabeled random tone mixtures for pretraining.

Features: per-frame magnitude DFT (rectangular window, 256-sample frames,
hop 128), first 128 bins, log1p-compressed.
"""

from __future__ import annotations

import wave as wave_module
from dataclasses import dataclass

import numpy as np

TASKS = ("tone_class", "chord_tags", "pretext")
SPLITS = {"train": 0, "val": 1, "test": 2}

_GOLD = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_SEED0 = np.uint64(0x243F6A8885A308D3)

TONE_AMPS = (1.0, 0.5, 0.25)
TAG_BASE_HZ = 130.0
TAG_PRESENT_P = 0.35
NUM_TONE_CLASSES = 10
NUM_TAGS = 8


@dataclass
class TaskSpec:
    task: str = "tone_class"
    sample_rate: int = 8000
    clip_samples: int = 4000
    noise_std: float = 0.05
    train_size: int = 2000
    val_size: int = 500
    test_size: int = 500
    seed: int = 0

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if min(self.sample_rate, self.clip_samples, self.train_size, self.val_size, self.test_size) <= 0:
            raise ValueError("sizes and rates must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")

    def split_size(self, split: str) -> int:
        return {"train": self.train_size, "val": self.val_size, "test": self.test_size}[split]

    @property
    def num_outputs(self) -> int:
        return {"tone_class": NUM_TONE_CLASSES, "chord_tags": NUM_TAGS, "pretext": 0}[self.task]

    @property
    def loss_kind(self) -> str:
        return {"tone_class": "cross_entropy", "chord_tags": "binary_cross_entropy", "pretext": "masked_mse"}[self.task]

    @property
    def metric_kind(self) -> str:
        return {"tone_class": "w_acc", "chord_tags": "map", "pretext": "neg_mse"}[self.task]

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("task", "sample_rate", "clip_samples", "noise_std", "train_size", "val_size", "test_size", "seed")}


@dataclass
class FeatureSpec:
    frame: int = 256
    hop: int = 128
    bins: int = 128

    def num_frames(self, n_samples: int) -> int:
        return 1 + (n_samples - self.frame) // self.hop


# --------------------------------------------------------------------------
# counter-based splitmix64
# --------------------------------------------------------------------------


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def _fold(*words: int) -> np.uint64:
    z = _SEED0
    with np.errstate(over="ignore"):
        for w in words:
            z = _mix(np.uint64((int(z) + int(_GOLD) + int(w)) % (1 << 64)))
    return z


def uniforms(n: int, *words: int) -> np.ndarray:
    """n uniforms in [0, 1) from the stream keyed by ``words``."""
    base = _fold(*words)
    ctr = np.arange(1, n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = _mix(base + ctr * _GOLD)
    return (z >> np.uint64(11)).astype(np.float64) * 2.0**-53


def normals(n: int, *words: int) -> np.ndarray:
    """n standard normals (Box-Muller over the uniform stream)."""
    m = (n + 1) // 2
    u = uniforms(2 * m, *words)
    u1 = np.maximum(u[:m], 2.0**-53)
    u2 = u[m:]
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
    return z[:n]


# --------------------------------------------------------------------------
# clip generation
# --------------------------------------------------------------------------

_TAG_LABEL, _TAG_PHASE, _TAG_NOISE, _TAG_EXTRA = 0, 1, 2, 3


def _stream_words(spec: TaskSpec, split: str, index: int, tag: int):
    return (spec.seed, SPLITS[split], index, tag)


def tone_class_frequency(c: int) -> float:
    return 110.0 + 55.0 * c


def chord_tag_frequency(k: int) -> float:
    return TAG_BASE_HZ * 2.0 ** (k / 4.0)


def generate(spec: TaskSpec, split: str, index: int):
    """Clip ``index`` of a split: (waveform float32, label).

    Labels: int class for tone_class, uint8 presence vector for chord_tags,
    None for pretext.
    """
    spec.validate()
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    if not 0 <= index < spec.split_size(split):
        raise IndexError(f"index {index} out of range for split {split!r} of size {spec.split_size(split)}")

    t = np.arange(spec.clip_samples, dtype=np.float64) / spec.sample_rate
    wave = np.zeros(spec.clip_samples, dtype=np.float64)

    if spec.task == "tone_class":
        u = uniforms(1, *_stream_words(spec, split, index, _TAG_LABEL))[0]
        label = min(NUM_TONE_CLASSES - 1, int(u * NUM_TONE_CLASSES))
        f0 = tone_class_frequency(label)
        phases = 2 * np.pi * uniforms(len(TONE_AMPS), *_stream_words(spec, split, index, _TAG_PHASE))
        for h, amp in enumerate(TONE_AMPS):
            wave += amp * np.sin(2 * np.pi * f0 * (h + 1) * t + phases[h])
    elif spec.task == "chord_tags":
        u = uniforms(NUM_TAGS, *_stream_words(spec, split, index, _TAG_LABEL))
        present = (u < TAG_PRESENT_P).astype(np.uint8)
        phases = 2 * np.pi * uniforms(NUM_TAGS, *_stream_words(spec, split, index, _TAG_PHASE))
        for k in range(NUM_TAGS):
            if present[k]:
                wave += np.sin(2 * np.pi * chord_tag_frequency(k) * t + phases[k])
        label = present
    else:  # pretext: random mixtures
        u = uniforms(9, *_stream_words(spec, split, index, _TAG_LABEL))
        n_tones = 1 + int(u[0] * 4)
        freqs = 100.0 + u[1 : 1 + n_tones] * 1900.0
        amps = 0.3 + 0.7 * uniforms(n_tones, *_stream_words(spec, split, index, _TAG_EXTRA))
        phases = 2 * np.pi * uniforms(n_tones, *_stream_words(spec, split, index, _TAG_PHASE))
        for f, a, ph in zip(freqs, amps, phases):
            wave += a * np.sin(2 * np.pi * f * t + ph)
        label = None

    if spec.noise_std > 0:
        wave += spec.noise_std * normals(spec.clip_samples, *_stream_words(spec, split, index, _TAG_NOISE))
    return wave.astype(np.float32), label


def featurize(waveform: np.ndarray, feat: FeatureSpec | None = None) -> np.ndarray:
    """log1p magnitude DFT per frame (rectangular window): (frames, bins)."""
    feat = feat or FeatureSpec()
    waveform = np.asarray(waveform)
    if waveform.ndim != 1 or len(waveform) < feat.frame:
        raise ValueError(f"waveform of length {waveform.shape} is shorter than one frame ({feat.frame})")
    n = feat.num_frames(len(waveform))
    frames = np.lib.stride_tricks.sliding_window_view(waveform, feat.frame)[:: feat.hop][:n]
    mag = np.abs(np.fft.rfft(frames.astype(np.float64), axis=1))[:, : feat.bins]
    return np.log1p(mag).astype(np.float32)


class Dataset:
    """Featurized splits of one task, cached on first access.

    Generation is pure and index-addressable; caching only avoids recompute.
    """

    def __init__(self, task: TaskSpec, feat: FeatureSpec | None = None):
        task.validate()
        self.task = task
        self.feat = feat or FeatureSpec()
        self._cache: dict[str, tuple] = {}

    @property
    def feature_dim(self) -> int:
        return self.feat.bins

    @property
    def num_frames(self) -> int:
        return self.feat.num_frames(self.task.clip_samples)

    def size(self, split: str) -> int:
        return self.task.split_size(split)

    def waveform(self, split: str, index: int):
        return generate(self.task, split, index)

    def _materialize(self, split: str):
        n = self.size(split)
        feats = np.empty((n, self.num_frames, self.feat.bins), dtype=np.float32)
        labels = []
        for i in range(n):
            w, lab = generate(self.task, split, i)
            feats[i] = featurize(w, self.feat)
            labels.append(lab)
        if self.task.task == "tone_class":
            labels = np.asarray(labels, dtype=np.int64)
        elif self.task.task == "chord_tags":
            labels = np.asarray(labels, dtype=np.float32)
        else:
            labels = None
        self._cache[split] = (feats, labels)

    def features(self, split: str) -> np.ndarray:
        if split not in self._cache:
            self._materialize(split)
        return self._cache[split][0]

    def labels(self, split: str):
        if split not in self._cache:
            self._materialize(split)
        return self._cache[split][1]


def export_wav(waveform: np.ndarray, path, sample_rate: int = 8000) -> None:
    """Write a clip as 16-bit little-endian PCM WAV for inspection."""
    pcm = np.clip(np.asarray(waveform, dtype=np.float64), -1.0, 1.0)
    pcm = (pcm * 32767.0).astype("<i2")
    with wave_module.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(sample_rate)
        f.writeframes(pcm.tobytes())
