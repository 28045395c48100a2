"""EEG trial -> relative band-power feature sequences."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import signal as sps

MAHNOB_BANDS = ((0.3, 5.0), (5.0, 8.0), (8.0, 12.0), (12.0, 18.0), (18.0, 30.0), (30.0, 45.0))
DEAP_BANDS = ((4.0, 8.0), (8.0, 12.0), (12.0, 18.0), (18.0, 30.0), (30.0, 45.0))


class SignalConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BandSet:
    bands: tuple

    def __post_init__(self):
        bands = tuple((float(lo), float(hi)) for lo, hi in self.bands)
        if not bands:
            raise SignalConfigError("band set is empty")
        for lo, hi in bands:
            if not 0.0 <= lo < hi:
                raise SignalConfigError(f"band ({lo}, {hi}) is not a valid interval")
        for (_, h0), (l1, _) in zip(bands, bands[1:]):
            if l1 < h0:
                raise SignalConfigError("bands must be non-overlapping and increasing")
        object.__setattr__(self, "bands", bands)

    def __len__(self) -> int:
        return len(self.bands)

    def __iter__(self):
        return iter(self.bands)

    def to_list(self) -> list:
        return [list(b) for b in self.bands]


@dataclass
class EegTrial:
    """One recording. ``label`` is a float array (continuous, at ``label_rate``
    Hz) or an int class id."""

    subject_id: str
    trial_id: str
    fs: float
    data: np.ndarray
    label: object = None
    label_rate: Optional[float] = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[0] < 1:
            raise ValueError(f"trial {self.trial_id}: data must be channels x samples")
        if self.fs <= 0:
            raise ValueError(f"trial {self.trial_id}: fs must be positive")
        if self.continuous:
            self.label = np.asarray(self.label, dtype=np.float64)
            expected = round(self.n_samples / self.fs * self.label_rate)
            n = self.label.size
            if n > expected + 1 or n < expected - 1:
                raise ValueError(f"trial {self.trial_id}: {n} labels, expected {expected} +/- 1")
            if n > expected:
                self.label = self.label[:expected]

    @property
    def continuous(self) -> bool:
        return self.label_rate is not None

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]


@dataclass
class FeatureSequence:
    matrix: np.ndarray          # (C*f, t)
    start: int                  # index into the trial's feature/label series
    label: object               # (t,) array for CER, int for DEC
    band_set: BandSet
    channels: list = field(default_factory=list)
    subject_id: str = ""
    trial_id: str = ""

    @property
    def t(self) -> int:
        return self.matrix.shape[1]


@dataclass(frozen=True)
class PreprocessConfig:
    band_set: BandSet = BandSet(MAHNOB_BANDS)
    window_s: float = 2.0
    step_s: float = 0.25
    welch_window_s: float = 1.0
    welch_overlap: float = 0.5
    seq_len: int = 96
    seq_step: int = 32
    average_reference: bool = True
    # feature vector i is paired with label i + offset; None -> last label bin the window covers
    label_offset: Optional[int] = None

    @classmethod
    def mahnob(cls, **kw) -> "PreprocessConfig":
        return cls(**kw)

    @classmethod
    def deap(cls, **kw) -> "PreprocessConfig":
        kw.setdefault("band_set", BandSet(DEAP_BANDS))
        kw.setdefault("seq_len", 25)
        kw.setdefault("seq_step", 16)
        return cls(**kw)

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["band_set"] = self.band_set.to_list()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessConfig":
        d = dict(d)
        if "band_set" in d:
            d["band_set"] = BandSet(tuple(tuple(b) for b in d["band_set"]))
        return cls(**d)


def average_reference(trial: EegTrial) -> EegTrial:
    if trial.n_channels < 2:
        raise ValueError(f"trial {trial.trial_id}: average reference needs >= 2 channels")
    data = trial.data - trial.data.mean(axis=0, keepdims=True)
    return replace(trial, data=data)


def _samples(seconds: float, fs: float, what: str) -> int:
    n = seconds * fs
    if abs(n - round(n)) > 1e-9 or round(n) < 1:
        raise SignalConfigError(f"{what} of {seconds}s is not a whole number of samples at {fs} Hz")
    return int(round(n))


def segment_count(n_samples: int, window: int, step: int) -> int:
    if window > n_samples:
        return 0
    return (n_samples - window) // step + 1


def segment(trial: EegTrial, window_s: float, step_s: float) -> np.ndarray:
    """Sliding windows over the trial, shape ``(n, C, window)``.

    Window i starts at sample ``i * step``; a trailing partial window is dropped.
    """
    w = _samples(window_s, trial.fs, "window")
    st = _samples(step_s, trial.fs, "step")
    n = segment_count(trial.n_samples, w, st)
    if n == 0:
        raise ValueError(f"trial {trial.trial_id}: window {window_s}s longer than trial")
    view = np.lib.stride_tricks.sliding_window_view(trial.data, w, axis=1)[:, ::st][:, :n]
    return np.ascontiguousarray(view.transpose(1, 0, 2))


def welch_psd(x: np.ndarray, fs: float, welch_window_s: float = 1.0,
              welch_overlap_fraction: float = 0.5, detrend="constant"):
    """One-sided Welch density along the last axis.

    Returns ``(freqs, psd)``. Hann window; the integral of ``psd`` over
    frequency matches the signal variance.
    """
    x = np.asarray(x, dtype=np.float64)
    nper = _samples(welch_window_s, fs, "welch window")
    if nper > x.shape[-1]:
        raise ValueError(f"welch window {nper} samples exceeds segment length {x.shape[-1]}")
    if not 0.0 <= welch_overlap_fraction < 1.0:
        raise SignalConfigError("welch overlap must be in [0, 1)")
    noverlap = int(round(nper * welch_overlap_fraction))
    return sps.welch(x, fs=fs, window="hann", nperseg=nper, noverlap=noverlap,
                     detrend=detrend, scaling="density", axis=-1)


def band_masks(freqs: np.ndarray, band_set: BandSet, fs: Optional[float] = None) -> np.ndarray:
    masks = []
    for lo, hi in band_set:
        if fs is not None and hi > fs / 2 + 1e-12:
            raise SignalConfigError(f"band ({lo}, {hi}) exceeds Nyquist {fs / 2}")
        m = (freqs >= lo) & (freqs < hi)
        if not m.any():
            raise SignalConfigError(f"band ({lo}, {hi}) contains no frequency bins")
        masks.append(m)
    return np.array(masks)


def rpsd(psd: np.ndarray, freqs: np.ndarray, band_set: BandSet, fs: Optional[float] = None) -> np.ndarray:
    """Band-mean PSD divided by the sum of band means, per channel.

    ``psd`` is ``(..., n_freq)``; output is ``(..., f)`` and sums to 1 over the
    last axis. A channel with no power in any band gets the uniform 1/f.
    """
    masks = band_masks(freqs, band_set, fs)
    means = np.stack([psd[..., m].mean(axis=-1) for m in masks], axis=-1)
    total = means.sum(axis=-1, keepdims=True)
    f = len(band_set)
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.where(total > 0, means / np.where(total > 0, total, 1.0), 1.0 / f)
    return rel


def build_feature_vector(rel: np.ndarray) -> np.ndarray:
    """Flatten ``(C, f)`` channel-major: index ``c * f + b``."""
    rel = np.asarray(rel)
    return rel.reshape(*rel.shape[:-2], rel.shape[-2] * rel.shape[-1])


def feature_index(channel: int, band: int, n_bands: int) -> int:
    return channel * n_bands + band


def feature_position(index: int, n_bands: int) -> tuple[int, int]:
    return divmod(index, n_bands)


def trial_features(trial: EegTrial, cfg: PreprocessConfig) -> np.ndarray:
    """rPSD vectors in time order, shape ``(n_windows, C*f)``."""
    if cfg.average_reference:
        trial = average_reference(trial)
    segs = segment(trial, cfg.window_s, cfg.step_s)
    freqs, psd = welch_psd(segs, trial.fs, cfg.welch_window_s, cfg.welch_overlap)
    rel = rpsd(psd, freqs, cfg.band_set, trial.fs)
    return build_feature_vector(rel)


def label_offset(cfg: PreprocessConfig, label_rate: float) -> int:
    if cfg.label_offset is not None:
        return cfg.label_offset
    return max(int(round(cfg.window_s * label_rate)) - 1, 0)


def align_labels(vectors: np.ndarray, labels: np.ndarray, offset: int):
    """Pair vector i with ``labels[i + offset]``; trims whichever side runs over."""
    n = min(len(vectors), len(labels) - offset)
    if n <= 0:
        raise ValueError("no overlap between feature and label series")
    return vectors[:n], np.asarray(labels[offset:offset + n], dtype=np.float64)


def sequence_count(n: int, seq_len: int, seq_step: int) -> int:
    return 0 if n < seq_len else (n - seq_len) // seq_step + 1


def build_sequences(vectors: np.ndarray, labels, seq_len: int, seq_step: int,
                    feature_rate: Optional[float] = None, label_rate: Optional[float] = None,
                    band_set: Optional[BandSet] = None, channels: Sequence = (),
                    subject_id: str = "", trial_id: str = "") -> list:
    """Cut a vector series into ``FeatureSequence`` samples.

    ``labels`` is an array the same length as ``vectors`` (continuous, already
    aligned) or a scalar class id shared by every sample.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    if seq_len < 1 or seq_step < 1:
        raise SignalConfigError("seq_len and seq_step must be >= 1")
    if len(vectors) < seq_len:
        raise ValueError(f"{len(vectors)} vectors, shorter than seq_len {seq_len}")
    continuous = np.ndim(labels) > 0
    if continuous:
        if feature_rate is not None and label_rate is not None and not math.isclose(feature_rate, label_rate):
            raise ValueError(f"rate mismatch: features at {feature_rate} Hz, labels at {label_rate} Hz")
        labels = np.asarray(labels, dtype=np.float64)
        if len(labels) != len(vectors):
            raise ValueError(f"rate mismatch: {len(vectors)} vectors vs {len(labels)} labels")
    out = []
    for j in range(sequence_count(len(vectors), seq_len, seq_step)):
        s = j * seq_step
        lab = labels[s:s + seq_len].copy() if continuous else int(labels)
        out.append(FeatureSequence(vectors[s:s + seq_len].T.copy(), s, lab, band_set,
                                   list(channels), subject_id, trial_id))
    return out


def trial_sequences(trial: EegTrial, cfg: PreprocessConfig, channels: Sequence = ()) -> list:
    vectors = trial_features(trial, cfg)
    feature_rate = 1.0 / cfg.step_s
    if trial.continuous:
        vectors, labels = align_labels(vectors, trial.label, label_offset(cfg, trial.label_rate))
        return build_sequences(vectors, labels, cfg.seq_len, cfg.seq_step, feature_rate,
                               trial.label_rate, cfg.band_set, channels, trial.subject_id, trial.trial_id)
    return build_sequences(vectors, int(trial.label), cfg.seq_len, cfg.seq_step, band_set=cfg.band_set,
                           channels=channels, subject_id=trial.subject_id, trial_id=trial.trial_id)
