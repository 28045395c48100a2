"""Feature files, cross-validation runs and run manifests."""
from __future__ import annotations

import hashlib
import json
import os
import subprocess
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .data import (DatasetManifest, IngestionError, SequenceSet, SplitPlan, build_sequence_set, load_trial,
                   loso_splits, subject_kfold, synth_cer, synth_dec)
from .metrics import MetricsReport, classification_scores
from .model import MasaTCN, ModelConfig
from .numeric import FEATURE_MAGIC, dumps_weights, loads_weights, make_rng
from .signal import DEAP_BANDS, PreprocessConfig, label_offset, trial_sequences
from .training import TrainConfig, evaluate_cer, predict, train_model

FEATURE_INDEX = "features.json"


class ConfigConflict(ValueError):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def build_id() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if out.returncode == 0:
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------- preprocessing

def preprocess_dataset(manifest: DatasetManifest, cfg: PreprocessConfig, out_dir) -> dict:
    """Write one feature file per trial plus an index with per-trial counts."""
    if not manifest.trials:
        raise IngestionError("manifest lists no trials")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for e in manifest.trials:
        trial = load_trial(e, manifest.root)
        seqs = trial_sequences(trial, cfg)
        if not seqs:
            raise IngestionError(f"trial {e['subject_id']}/{e['trial_id']}: too short for one sequence")
        x = np.stack([s.matrix for s in seqs])
        y = np.stack([np.atleast_1d(np.asarray(s.label, dtype=np.float64)) for s in seqs])
        if not trial.continuous:
            y = y[:, 0]
        start = np.array([s.start for s in seqs], dtype=np.float64)
        meta = {"subject_id": trial.subject_id, "trial_id": trial.trial_id,
                "label_kind": "continuous" if trial.continuous else "discrete",
                "label_offset": label_offset(cfg, trial.label_rate) if trial.continuous else None}
        name = f"{trial.subject_id}_{trial.trial_id}.feat"
        (out_dir / name).write_bytes(dumps_weights({"x": x, "y": y, "start": start}, meta, FEATURE_MAGIC))
        entries.append({"file": name, "subject_id": trial.subject_id, "trial_id": trial.trial_id,
                        "n_sequences": len(seqs), "shape": list(x.shape[1:])})
    index = {"dataset": manifest.dataset, "label_kind": manifest.label_kind,
             "preprocess": cfg.to_dict(), "num_channels": manifest.trials[0]["C"],
             "num_bands": len(cfg.band_set), "trials": entries}
    write_json(out_dir / FEATURE_INDEX, index)
    return index


def load_features(feature_dir) -> tuple[SequenceSet, dict]:
    feature_dir = Path(feature_dir)
    index_path = feature_dir / FEATURE_INDEX
    if not index_path.exists():
        raise IngestionError(f"no {FEATURE_INDEX} in {feature_dir}; run preprocess first")
    index = json.loads(index_path.read_text())
    sets = []
    for e in index["trials"]:
        _, arr = loads_weights((feature_dir / e["file"]).read_bytes(), FEATURE_MAGIC)
        n = len(arr["x"])
        y = arr["y"] if index["label_kind"] == "continuous" else arr["y"].astype(np.int64)
        sets.append(SequenceSet(arr["x"], y, np.array([e["subject_id"]] * n),
                                np.array([e["trial_id"]] * n), arr["start"].astype(np.int64)))
    if not sets:
        raise IngestionError("feature index lists no trials")
    return SequenceSet.concat(sets), index


# ---------------------------------------------------------------- runs

def fold_seed(seed: int, fold_index: int) -> int:
    return int(make_rng(seed, 0xF01D, fold_index).integers(2 ** 31))


def make_plan(data: SequenceSet, split: str, seed: int, val_fraction: float = 0.2,
              granularity: str = "segment", k: int = 10) -> SplitPlan:
    if split == "loso":
        return loso_splits(data.subject, data.trial, val_fraction, seed, granularity)
    if split == "kfold":
        if data.continuous:
            raise ConfigConflict("trial-wise k-fold is for discrete labels; use --split loso for CER")
        return subject_kfold(data.subject, data.trial, k, val_fraction, seed)
    raise ConfigConflict(f"unknown split {split!r}")


@dataclass
class FoldResult:
    unit: str
    index: int
    scores: dict
    record: dict
    weights: bytes = field(repr=False, default=b"")
    pred: Optional[np.ndarray] = field(repr=False, default=None)
    label: Optional[np.ndarray] = field(repr=False, default=None)


def run_fold(data: SequenceSet, fold, index: int, model_cfg: ModelConfig, train_cfg: TrainConfig) -> FoldResult:
    s = fold_seed(train_cfg.seed, index)
    cfg = TrainConfig(**{**train_cfg.to_dict(), "seed": s})
    model = MasaTCN(model_cfg, seed=s)
    record = train_model(data.subset(fold.train), data.subset(fold.val), model, cfg)
    test = data.subset(fold.test)
    if train_cfg.task == "CER":
        return FoldResult(fold.unit, index, evaluate_cer(model, test), record.to_dict(), model.to_bytes())
    pred = predict(model, test.x).argmax(axis=1)
    return FoldResult(fold.unit, index, classification_scores(pred, test.y), record.to_dict(),
                      model.to_bytes(), pred, test.y)


def _run_fold_args(args):
    return run_fold(*args)


def run_cv(data: SequenceSet, plan: SplitPlan, model_cfg: ModelConfig, train_cfg: TrainConfig,
           jobs: int = 1, progress=None) -> tuple[MetricsReport, list]:
    """Train and test every fold; rows of the report are subjects."""
    args = [(data, f, i, model_cfg, train_cfg) for i, f in enumerate(plan.folds)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_run_fold_args, args))
    else:
        results = []
        for a in args:
            results.append(run_fold(*a))
            if progress:
                progress(results[-1])
    return report_from_folds(train_cfg.task, results), results


def report_from_folds(task: str, results: list) -> MetricsReport:
    """One row per subject.

    CER rows average the subject's fold scores (LOSO has one fold each).
    DEC rows pool the subject's test predictions over its k folds, so every
    trial counts once and F1 stays defined when a fold holds one class only.
    """
    report = MetricsReport(task)
    by_subject: dict = {}
    for r in results:
        by_subject.setdefault(r.unit.split("/")[0], []).append(r)
    for subj in sorted(by_subject):
        if task == "DEC":
            rs = by_subject[subj]
            pooled = classification_scores(np.concatenate([r.pred for r in rs]),
                                           np.concatenate([r.label for r in rs]))
            report.add_row(subj, **pooled)
            continue
        rows = [r.scores for r in by_subject[subj]]
        merged = {}
        for k in report.metric_names:
            vals = [row[k] for row in rows if row.get(k) is not None]
            merged[k] = float(np.mean(vals)) if vals else None
        report.add_row(subj, **merged)
    return report


def run_manifest(command: str, config: dict, seed: int, inputs: dict, outputs: list,
                 started: float) -> dict:
    return {"command": command, "config": config, "seed": seed, "build_id": build_id(),
            "inputs": inputs, "outputs": sorted(str(o) for o in outputs),
            "runtime": {"wall_clock_s": round(time.time() - started, 3),
                        "started_unix": round(started, 3), "pid": os.getpid()}}


# ---------------------------------------------------------------- synthetic end-to-end

def default_configs(task: str, seed: int = 0) -> tuple[ModelConfig, TrainConfig]:
    """Default model and training setup per task ("cer" or "dec")."""
    if task == "cer":
        return ModelConfig(), TrainConfig.cer(seed=seed)
    model = ModelConfig(num_bands=len(DEAP_BANDS), width=16, num_tcn_blocks=1, head="classification")
    return model, TrainConfig.dec(seed=seed)


def synthetic_cv(task: str, num_subjects: int, trials_per_subject: int, seed: int = 0,
                 model_cfg: Optional[ModelConfig] = None, train_cfg: Optional[TrainConfig] = None,
                 jobs: int = 1, progress=None, k: int = 10) -> tuple[MetricsReport, list, SplitPlan]:
    """Generate, featurize and cross-validate a synthetic dataset in memory."""
    gen = synth_cer if task == "cer" else synth_dec
    _, trials = gen(num_subjects, trials_per_subject, seed=seed)
    pre = PreprocessConfig.mahnob() if task == "cer" else PreprocessConfig.deap()
    data = build_sequence_set(trials, pre)
    m_def, t_def = default_configs(task, seed)
    plan = make_plan(data, "loso" if task == "cer" else "kfold", seed, k=k)
    report, results = run_cv(data, plan, model_cfg or m_def, train_cfg or t_def, jobs, progress)
    return report, results, plan
