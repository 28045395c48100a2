"""Trial files, dataset manifests, split planning and synthetic data.

Trial file layout (little-endian)::

    b"MASAEEG1"
    uint16 version | float64 fs | uint32 C | uint64 T | uint8 label_kind
    float64 label_rate | uint64 n_labels | uint32 crc32(payload)
    payload:
      uint16 len + utf-8 subject_id
      uint16 len + utf-8 trial_id
      float32[C*T]          samples, channel-major
      float32[n_labels]     continuous labels   (label_kind 0)
      int32                 class id            (label_kind 1)

The dataset manifest is JSON: ``dataset``, ``band_set``, ``label_rate``,
``label_kind`` and a ``trials`` list of ``{subject_id, trial_id, path, fs, C,
T, label_kind}`` with paths relative to the manifest file.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .numeric import make_rng
from .signal import (DEAP_BANDS, MAHNOB_BANDS, BandSet, EegTrial, PreprocessConfig, band_masks,
                     trial_sequences, welch_psd)

TRIAL_MAGIC = b"MASAEEG1"
TRIAL_VERSION = 1
_HEADER = struct.Struct("<HdIQBdQI")
CONTINUOUS, DISCRETE = 0, 1


class IngestionError(ValueError):
    """A trial file or manifest entry failed validation."""


class SplitError(ValueError):
    pass


# ------------------------------------------------------------------ trial files

def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def dumps_trial(trial: EegTrial) -> bytes:
    data = np.asarray(trial.data, dtype="<f4")
    kind = CONTINUOUS if trial.continuous else DISCRETE
    if kind == CONTINUOUS:
        labels = np.asarray(trial.label, dtype="<f4").tobytes()
        n_labels = int(np.size(trial.label))
    else:
        labels = struct.pack("<i", int(trial.label))
        n_labels = 1
    payload = _pack_str(trial.subject_id) + _pack_str(trial.trial_id) + data.tobytes(order="C") + labels
    header = _HEADER.pack(TRIAL_VERSION, float(trial.fs), data.shape[0], data.shape[1], kind,
                          float(trial.label_rate or 0.0), n_labels, zlib.crc32(payload))
    return TRIAL_MAGIC + header + payload


def loads_trial(blob: bytes, name: str = "<bytes>") -> EegTrial:
    if blob[:8] != TRIAL_MAGIC:
        raise IngestionError(f"trial {name}: bad magic")
    if len(blob) < 8 + _HEADER.size:
        raise IngestionError(f"trial {name}: truncated header")
    version, fs, C, T, kind, label_rate, n_labels, crc = _HEADER.unpack_from(blob, 8)
    if version != TRIAL_VERSION:
        raise IngestionError(f"trial {name}: unsupported version {version}")
    payload = blob[8 + _HEADER.size:]
    if zlib.crc32(payload) != crc:
        raise IngestionError(f"trial {name}: checksum mismatch (truncated or corrupt file)")
    off = 0

    def read_str():
        nonlocal off
        (n,) = struct.unpack_from("<H", payload, off)
        s = payload[off + 2: off + 2 + n].decode("utf-8")
        off += 2 + n
        return s

    subject_id, trial_id = read_str(), read_str()
    n = C * T
    data = np.frombuffer(payload, dtype="<f4", count=n, offset=off).reshape(C, T).astype(np.float64)
    off += 4 * n
    if kind == CONTINUOUS:
        label = np.frombuffer(payload, dtype="<f4", count=n_labels, offset=off).astype(np.float64)
        off += 4 * n_labels
        rate = label_rate
    else:
        (label,) = struct.unpack_from("<i", payload, off)
        off += 4
        rate = None
    if off != len(payload):
        raise IngestionError(f"trial {name}: {len(payload) - off} unexpected trailing bytes")
    return EegTrial(subject_id, trial_id, fs, data, label, rate)


def write_trial(path, trial: EegTrial) -> None:
    Path(path).write_bytes(dumps_trial(trial))


def read_trial(path) -> EegTrial:
    p = Path(path)
    if not p.exists():
        raise IngestionError(f"trial file missing: {p}")
    return loads_trial(p.read_bytes(), p.name)


def float32_exact(x: np.ndarray) -> np.ndarray:
    """Round to float32 and back, so in-memory trials equal their file copy."""
    return np.asarray(x, dtype=np.float32).astype(np.float64)


# ------------------------------------------------------------------ manifests

@dataclass
class DatasetManifest:
    dataset: str
    band_set: BandSet
    label_rate: Optional[float]
    trials: list = field(default_factory=list)
    root: Path = field(default=Path("."))

    def __post_init__(self):
        seen = set()
        channels = set()
        for e in self.trials:
            key = (e["subject_id"], e["trial_id"])
            if key in seen:
                raise IngestionError(f"duplicate trial {key}")
            seen.add(key)
            channels.add(e["C"])
        if len(channels) > 1:
            raise IngestionError(f"trials disagree on channel count: {sorted(channels)}")

    @property
    def label_kind(self) -> str:
        return "continuous" if self.label_rate is not None else "discrete"

    @property
    def subjects(self) -> list:
        return sorted({e["subject_id"] for e in self.trials})

    def to_dict(self) -> dict:
        return {"dataset": self.dataset, "band_set": self.band_set.to_list(),
                "label_rate": self.label_rate, "label_kind": self.label_kind, "trials": self.trials}

    def save(self, path) -> None:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise IngestionError(f"manifest not found: {path}")
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise IngestionError(f"manifest {path} is not valid JSON: {e}") from e
        return cls(d["dataset"], BandSet(tuple(tuple(b) for b in d["band_set"])), d.get("label_rate"),
                   list(d.get("trials", [])), path.parent)


def manifest_entry(trial: EegTrial, path: str) -> dict:
    return {"subject_id": trial.subject_id, "trial_id": trial.trial_id, "path": path,
            "fs": float(trial.fs), "C": trial.n_channels, "T": trial.n_samples,
            "label_kind": "continuous" if trial.continuous else "discrete"}


def load_trial(entry: dict, root=".") -> EegTrial:
    """Read one manifest entry and check the file agrees with it."""
    name = f"{entry['subject_id']}/{entry['trial_id']}"
    trial = read_trial(Path(root) / entry["path"])
    for key, got in (("fs", trial.fs), ("C", trial.n_channels), ("T", trial.n_samples)):
        if entry[key] != got:
            raise IngestionError(f"trial {name}: manifest {key}={entry[key]} but file has {got}")
    kind = "continuous" if trial.continuous else "discrete"
    if entry.get("label_kind", kind) != kind:
        raise IngestionError(f"trial {name}: manifest label_kind={entry['label_kind']}, file {kind}")
    if (trial.subject_id, trial.trial_id) != (entry["subject_id"], entry["trial_id"]):
        raise IngestionError(f"trial {name}: file ids {trial.subject_id}/{trial.trial_id} differ")
    return trial


def labels_csv(trials: Sequence[EegTrial]) -> str:
    """Labels as CSV for inspection: one row per label sample (or per trial for class ids)."""
    lines = ["subject,trial,index,time_s,label"]
    for tr in trials:
        if tr.continuous:
            for i, v in enumerate(np.asarray(tr.label)):
                lines.append(f"{tr.subject_id},{tr.trial_id},{i},{i / tr.label_rate!r},{float(v)!r}")
        else:
            lines.append(f"{tr.subject_id},{tr.trial_id},0,,{int(tr.label)}")
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------ sequences

@dataclass
class SequenceSet:
    """Stacked feature sequences with per-sample provenance."""

    x: np.ndarray               # (N, C*f, t)
    y: np.ndarray               # (N, t) continuous or (N,) class ids
    subject: np.ndarray
    trial: np.ndarray
    start: np.ndarray

    def __len__(self) -> int:
        return len(self.x)

    @property
    def continuous(self) -> bool:
        return self.y.ndim == 2

    def subset(self, idx) -> "SequenceSet":
        idx = np.asarray(idx, dtype=int)
        return SequenceSet(self.x[idx], self.y[idx], self.subject[idx], self.trial[idx], self.start[idx])

    @classmethod
    def concat(cls, sets: Sequence["SequenceSet"]) -> "SequenceSet":
        return cls(*(np.concatenate([getattr(s, f) for s in sets]) for f in
                     ("x", "y", "subject", "trial", "start")))

    @classmethod
    def from_sequences(cls, seqs: list) -> "SequenceSet":
        if not seqs:
            raise ValueError("no sequences")
        x = np.stack([s.matrix for s in seqs])
        if np.ndim(seqs[0].label) > 0:
            y = np.stack([s.label for s in seqs])
        else:
            y = np.array([s.label for s in seqs], dtype=np.int64)
        return cls(x, y, np.array([s.subject_id for s in seqs]), np.array([s.trial_id for s in seqs]),
                   np.array([s.start for s in seqs], dtype=np.int64))


def build_sequence_set(trials: Sequence[EegTrial], cfg: PreprocessConfig) -> SequenceSet:
    seqs = []
    for tr in trials:
        seqs.extend(trial_sequences(tr, cfg))
    return SequenceSet.from_sequences(seqs)


# ------------------------------------------------------------------ splits

@dataclass
class Fold:
    unit: str
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


@dataclass
class SplitPlan:
    strategy: str
    seed: int
    folds: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, "seed": self.seed,
                "folds": [{"unit": f.unit, "train": f.train.tolist(), "val": f.val.tolist(),
                           "test": f.test.tolist()} for f in self.folds]}


def _n_val(n: int, frac: float) -> int:
    if n < 2:
        return 0
    return min(max(int(round(frac * n)), 1), n - 1)


def loso_splits(subjects: Sequence, trials: Sequence = None, val_fraction: float = 0.2, seed: int = 0,
                granularity: str = "segment") -> SplitPlan:
    """One fold per subject; the remaining samples split train/val.

    ``subjects`` (and ``trials``) are per-sample id arrays. ``granularity``
    picks whether the train/val split shuffles samples or whole trials.
    """
    subjects = np.asarray(subjects)
    uniq = sorted(set(subjects.tolist()))
    if len(uniq) < 2:
        raise SplitError("LOSO needs at least two subjects")
    if granularity not in ("segment", "trial"):
        raise SplitError(f"unknown granularity {granularity!r}")
    if granularity == "trial" and trials is None:
        raise SplitError("trial granularity needs per-sample trial ids")
    plan = SplitPlan("loso", seed)
    for i, subj in enumerate(uniq):
        rng = make_rng(seed, 0x1050, i)
        test = np.flatnonzero(subjects == subj)
        pool = np.flatnonzero(subjects != subj)
        if granularity == "segment":
            perm = rng.permutation(pool)
            nv = _n_val(len(perm), val_fraction)
            val, train = np.sort(perm[:nv]), np.sort(perm[nv:])
        else:
            keys = np.array([f"{s}\x00{t}" for s, t in zip(subjects, np.asarray(trials))])
            pool_trials = sorted(set(keys[pool].tolist()))
            order = rng.permutation(len(pool_trials))
            nv = _n_val(len(pool_trials), val_fraction)
            val_keys = {pool_trials[j] for j in order[:nv]}
            is_val = np.array([k in val_keys for k in keys[pool]])
            val, train = pool[is_val], pool[~is_val]
        plan.folds.append(Fold(str(subj), train, val, test))
    return plan


def trialwise_kfold(trials: Sequence, k: int = 10, val_fraction: float = 0.2, seed: int = 0,
                    unit_prefix: str = "") -> SplitPlan:
    """Partition trials (not segments) into k folds; train/val split by trial too."""
    trials = np.asarray(trials)
    uniq = sorted(set(trials.tolist()))
    if len(uniq) < k:
        raise SplitError(f"{len(uniq)} trials, fewer than k={k}")
    rng = make_rng(seed, 0x4F01D)
    order = [uniq[j] for j in rng.permutation(len(uniq))]
    groups = np.array_split(np.arange(len(order)), k)
    plan = SplitPlan(f"trialwise-kfold({k})", seed)
    for fi, g in enumerate(groups):
        test_trials = {order[j] for j in g}
        rest = [t for t in order if t not in test_trials]
        rest = [rest[j] for j in rng.permutation(len(rest))]
        nv = _n_val(len(rest), val_fraction)
        val_trials = set(rest[:nv])
        test = np.flatnonzero(np.isin(trials, list(test_trials)))
        val = np.flatnonzero(np.isin(trials, list(val_trials)))
        train = np.flatnonzero(~np.isin(trials, list(test_trials | val_trials)))
        plan.folds.append(Fold(f"{unit_prefix}fold{fi}", train, val, test))
    return plan


def subject_kfold(subjects: Sequence, trials: Sequence, k: int = 10, val_fraction: float = 0.2,
                  seed: int = 0) -> SplitPlan:
    """Subject-specific trial-wise k-fold, folds of every subject concatenated."""
    subjects, trials = np.asarray(subjects), np.asarray(trials)
    plan = SplitPlan(f"trialwise-kfold({k})", seed)
    for i, subj in enumerate(sorted(set(subjects.tolist()))):
        idx = np.flatnonzero(subjects == subj)
        sub = trialwise_kfold(trials[idx], k, val_fraction, int(make_rng(seed, i).integers(2**31)),
                              unit_prefix=f"{subj}/")
        for f in sub.folds:
            plan.folds.append(Fold(f.unit, idx[f.train], idx[f.val], idx[f.test]))
    return plan


# ------------------------------------------------------------------ synthetic data

SYNTH_FS = 256.0
SYNTH_CHANNELS = 32
SYNTH_DURATION_S = 60.0
LABEL_RATE = 4.0
# electrodes carrying the signal; ordering follows a 10-20 montage roughly front to back
FRONTAL = tuple(range(0, 8))
POSTERIOR = tuple(range(24, 32))


def pink_noise(rng: np.random.Generator, n_channels: int, n: int) -> np.ndarray:
    """Unit-variance 1/f noise per channel, shaped in the frequency domain."""
    spec = rng.standard_normal((n_channels, n // 2 + 1)) + 1j * rng.standard_normal((n_channels, n // 2 + 1))
    f = np.arange(n // 2 + 1, dtype=np.float64)
    f[0] = 1.0
    spec /= np.sqrt(f)
    spec[:, 0] = 0.0
    x = np.fft.irfft(spec, n=n, axis=1)
    return x / x.std(axis=1, keepdims=True)


def latent_valence(rng: np.random.Generator, t: np.ndarray) -> np.ndarray:
    """Smooth signal in [-1, 1]: three slow sinusoids, rescaled to span the range."""
    v = np.zeros_like(t)
    for _ in range(3):
        v += rng.uniform(0.5, 1.0) * np.sin(2 * np.pi * rng.uniform(0.02, 0.06) * t + rng.uniform(0, 2 * np.pi))
    lo, hi = v.min(), v.max()
    return 2.0 * (v - lo) / (hi - lo) - 1.0


def _oscillation(rng, t, freq_lo, freq_hi, n_channels):
    freqs = rng.uniform(freq_lo, freq_hi, size=(n_channels, 1))
    phases = rng.uniform(0, 2 * np.pi, size=(n_channels, 1))
    return np.sqrt(2.0) * np.sin(2 * np.pi * freqs * t[None] + phases)


def synth_cer_trial(rng: np.random.Generator, subject_id: str, trial_id: str, subject_gain: float,
                    duration_s: float = SYNTH_DURATION_S, fs: float = SYNTH_FS,
                    n_channels: int = SYNTH_CHANNELS, channels: Sequence = POSTERIOR) -> EegTrial:
    n = int(round(duration_s * fs))
    t = np.arange(n) / fs
    v = latent_valence(rng, t)
    x = pink_noise(rng, n_channels, n)
    amp = subject_gain * (1.0 + 0.8 * v)
    x[list(channels)] += amp[None] * _oscillation(rng, t, 9.0, 11.0, len(channels))
    n_labels = int(round(duration_s * LABEL_RATE))
    label_t = (np.arange(n_labels) + 0.5) / LABEL_RATE
    labels = np.interp(label_t, t, v)
    return EegTrial(subject_id, trial_id, fs, float32_exact(x), float32_exact(labels), LABEL_RATE)


def synth_dec_trial(rng: np.random.Generator, subject_id: str, trial_id: str, label: int,
                    subject_gain: float, duration_s: float = SYNTH_DURATION_S, fs: float = SYNTH_FS,
                    n_channels: int = SYNTH_CHANNELS) -> EegTrial:
    """Class 1: elevated frontal alpha. Class 0: elevated posterior beta."""
    n = int(round(duration_s * fs))
    t = np.arange(n) / fs
    x = pink_noise(rng, n_channels, n)
    strength = subject_gain * rng.uniform(0.6, 1.2)
    if label == 1:
        x[list(FRONTAL)] += strength * _oscillation(rng, t, 9.0, 11.0, len(FRONTAL))
    else:
        x[list(POSTERIOR)] += strength * _oscillation(rng, t, 20.0, 26.0, len(POSTERIOR))
    return EegTrial(subject_id, trial_id, fs, float32_exact(x), int(label), None)


def _write_dataset(name, band_set, label_rate, trials, out_dir) -> DatasetManifest:
    entries = []
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "trials").mkdir(parents=True, exist_ok=True)
    for tr in trials:
        rel = f"trials/{tr.subject_id}_{tr.trial_id}.eeg"
        if out_dir is not None:
            write_trial(out_dir / rel, tr)
        entries.append(manifest_entry(tr, rel))
    manifest = DatasetManifest(name, band_set, label_rate, entries, Path(out_dir or "."))
    if out_dir is not None:
        manifest.save(out_dir / "manifest.json")
    return manifest


def synth_cer(num_subjects: int, trials_per_subject: int, seed: int = 0, out_dir=None,
              duration_s: float = SYNTH_DURATION_S) -> tuple[DatasetManifest, list]:
    """Continuous-label trials whose posterior alpha amplitude tracks the label."""
    trials = []
    for si in range(num_subjects):
        srng = make_rng(seed, 0xCE5, si)
        gain = srng.uniform(0.8, 1.2)
        for ti in range(trials_per_subject):
            rng = make_rng(seed, 0xCE5, si, ti + 1)
            trials.append(synth_cer_trial(rng, f"S{si:02d}", f"T{ti:02d}", gain, duration_s))
    return _write_dataset("synth-cer", BandSet(MAHNOB_BANDS), LABEL_RATE, trials, out_dir), trials


def synth_dec(num_subjects: int, trials_per_subject: int, seed: int = 0, out_dir=None,
              duration_s: float = SYNTH_DURATION_S) -> tuple[DatasetManifest, list]:
    """Binary-label trials, exactly half of each subject's trials per class."""
    if trials_per_subject % 2:
        raise ValueError("trials_per_subject must be even for a balanced design")
    trials = []
    for si in range(num_subjects):
        srng = make_rng(seed, 0xDEC, si)
        gain = srng.uniform(0.8, 1.2)
        labels = srng.permutation(np.repeat([0, 1], trials_per_subject // 2))
        for ti, lab in enumerate(labels):
            rng = make_rng(seed, 0xDEC, si, ti + 1)
            trials.append(synth_dec_trial(rng, f"S{si:02d}", f"T{ti:02d}", int(lab), gain, duration_s))
    return _write_dataset("synth-dec", BandSet(DEAP_BANDS), None, trials, out_dir), trials


def band_power_oracle(trial: EegTrial) -> int:
    """Closed-form DEC classifier from the generator design.

    Compares frontal alpha power with posterior beta power relative to the
    opposite region; no learning involved.
    """
    freqs, psd = welch_psd(trial.data, trial.fs, 2.0, 0.5)
    alpha, beta = band_masks(freqs, BandSet(((8.0, 12.0), (18.0, 30.0))))
    fa = psd[list(FRONTAL)][:, alpha].mean() / psd[list(POSTERIOR)][:, alpha].mean()
    pb = psd[list(POSTERIOR)][:, beta].mean() / psd[list(FRONTAL)][:, beta].mean()
    return int(fa > pb)
