"""Losses, plateau schedule and the CER / two-stage DEC training loops."""
from __future__ import annotations

import dataclasses
import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import SequenceSet
from .metrics import accuracy, ccc, concordance, f1_binary, regression_scores
from .model import MasaTCN
from .numeric import AdamState, Tape, Tensor, adam_step, log_softmax, make_rng

log = logging.getLogger(__name__)


class TrainConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    task: str = "CER"
    lr: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 2
    max_epochs: int = 15
    early_stop_patience: int = 10
    scheduler_patience: int = 5
    scheduler_factor: float = 0.5
    label_smoothing: float = 0.0
    stage2_enabled: bool = False
    stage2_max_epochs: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.task not in ("CER", "DEC"):
            raise TrainConfigError("task must be CER or DEC")
        if self.lr < 0:
            raise TrainConfigError("lr must be non-negative")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise TrainConfigError("label_smoothing must be in [0, 1)")
        if self.early_stop_patience < 1 or self.scheduler_patience < 1:
            raise TrainConfigError("patience values must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise TrainConfigError("batch_size must be >= 1 and max_epochs >= 0")

    @classmethod
    def cer(cls, **kw) -> "TrainConfig":
        return cls(**kw)

    @classmethod
    def dec(cls, **kw) -> "TrainConfig":
        base = dict(task="DEC", lr=1e-3, batch_size=32, max_epochs=100, label_smoothing=0.1,
                    stage2_enabled=True)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class RunRecord:
    train_loss: list = field(default_factory=list)
    val_metric: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    best_epoch: int = -1
    best_metric: float = float("-inf")
    stage2_criterion: Optional[float] = None
    stage2_loss: list = field(default_factory=list)
    stopped_early: bool = False
    seed: int = 0
    config: dict = field(default_factory=dict)
    weights: Optional[dict] = field(default=None, repr=False)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("weights")
        return d


# ---------------------------------------------------------------- losses

def ccc_loss(pred: Tensor, label) -> Tensor:
    """Batch mean of ``1 - CCC`` per sample, population moments.

    Samples whose label sequence is constant are skipped with a warning.
    """
    label = np.asarray(label, dtype=np.float64)
    if pred.shape != label.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape}, label {label.shape}")
    if pred.ndim == 1:
        pred = pred.reshape(1, -1)
        label = label.reshape(1, -1)
    keep = label.var(axis=1) > 0
    if not keep.all():
        warnings.warn(f"ccc_loss: skipping {int((~keep).sum())} sample(s) with constant labels")
        if not keep.any():
            raise ValueError("ccc_loss: every label sequence is constant")
        pred = pred[np.flatnonzero(keep)]
        label = label[keep]
    mp = pred.mean(axis=1, keepdims=True)
    my = label.mean(axis=1, keepdims=True)
    dp = pred - mp
    dy = label - my
    vp = (dp * dp).mean(axis=1)
    vy = (dy * dy).mean(axis=1)
    cov = (dp * dy).mean(axis=1)
    c = concordance(mp.reshape(-1), my.reshape(-1), vp, vy, cov)
    return (1.0 - c).mean()


def smoothed_targets(labels, num_classes: int, eps: float) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"labels must lie in [0, {num_classes})")
    onehot = np.eye(num_classes)[labels]
    return (1.0 - eps) * onehot + eps / num_classes


def cross_entropy_smoothed(logits: Tensor, labels, eps: float = 0.0) -> Tensor:
    """Softmax cross-entropy against ``(1-eps) * onehot + eps/K``, batch mean."""
    K = logits.shape[-1]
    if K < 2:
        raise ValueError("cross-entropy needs at least two classes")
    target = smoothed_targets(labels, K, eps)
    return -(log_softmax(logits, axis=-1) * target).sum(axis=-1).mean()


# ---------------------------------------------------------------- schedule

@dataclass
class PlateauScheduler:
    """Multiply lr by ``factor`` after ``patience`` epochs without a strict improvement."""

    lr: float
    patience: int = 5
    factor: float = 0.5
    best: float = float("-inf")
    bad_epochs: int = 0

    def step(self, metric: float) -> float:
        if metric > self.best:
            self.best = metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.bad_epochs = 0
        return self.lr


def lr_schedule_step(state: PlateauScheduler, val_metric: float) -> float:
    return state.step(val_metric)


# ---------------------------------------------------------------- loops

def _grads(model: MasaTCN) -> dict:
    return {k: p.grad for k, p in model.params.items() if p.grad is not None}


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def predict(model: MasaTCN, x: np.ndarray, batch_size: int = 16) -> np.ndarray:
    outs = [model.predict(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
    return np.concatenate(outs)


def _loss(model: MasaTCN, out: Tensor, y: np.ndarray, cfg: TrainConfig) -> Tensor:
    if model.cfg.head == "regression":
        return ccc_loss(out, y)
    return cross_entropy_smoothed(out, y, cfg.label_smoothing)


def train_epoch(model: MasaTCN, data: SequenceSet, cfg: TrainConfig, lr: float, state: AdamState,
                shuffle_rng: np.random.Generator, dropout_rng: np.random.Generator) -> float:
    losses = []
    for idx in _batches(len(data), cfg.batch_size, shuffle_rng):
        for p in model.params.values():
            p.zero_grad()
        with Tape() as tape:
            out = model(data.x[idx], training=True, rng=dropout_rng)
            loss = _loss(model, out, data.y[idx], cfg)
        tape.backward(loss)
        adam_step(model.params, _grads(model), state, lr, weight_decay=cfg.weight_decay)
        losses.append(loss.item())
    return float(np.mean(losses))


def evaluate_loss(model: MasaTCN, data: SequenceSet, cfg: TrainConfig, batch_size: int = 32) -> float:
    """Size-weighted mean loss in eval mode."""
    total = 0.0
    for i in range(0, len(data), batch_size):
        out = model(data.x[i:i + batch_size])
        total += _loss(model, out, data.y[i:i + batch_size], cfg).item() * len(out.data)
    return total / len(data)


def validation_metric(model: MasaTCN, data: SequenceSet) -> float:
    """CCC of the flattened predictions (CER) or sequence accuracy (DEC)."""
    pred = predict(model, data.x)
    if model.cfg.head == "regression":
        return ccc(pred.ravel(), data.y.ravel())
    return accuracy(pred.argmax(axis=1), data.y)


def _fit(model, train, val, cfg, record, rngs) -> AdamState:
    shuffle_rng, dropout_rng = rngs
    state = AdamState()
    sched = PlateauScheduler(cfg.lr, cfg.scheduler_patience, cfg.scheduler_factor)
    lr = cfg.lr
    since_best = 0
    record.weights = model.state()
    for epoch in range(cfg.max_epochs):
        record.lr.append(lr)
        record.train_loss.append(train_epoch(model, train, cfg, lr, state, shuffle_rng, dropout_rng))
        metric = validation_metric(model, val)
        record.val_metric.append(metric)
        log.debug("epoch %d loss %.5f val %.5f lr %.2e", epoch, record.train_loss[-1], metric, lr)
        if metric > record.best_metric:
            record.best_metric, record.best_epoch = metric, epoch
            record.weights = model.state()
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.early_stop_patience:
                record.stopped_early = True
                break
        lr = sched.step(metric)
    return state


def _check(train: SequenceSet, val: SequenceSet) -> None:
    if len(train) == 0 or len(val) == 0:
        raise ValueError("training and validation sets must be non-empty")


def train_cer(train: SequenceSet, val: SequenceSet, model: MasaTCN, cfg: TrainConfig) -> RunRecord:
    """Minimise CCC loss; keep the weights of the best validation CCC."""
    _check(train, val)
    if not train.continuous:
        raise TrainConfigError("CER training needs continuous labels")
    record = RunRecord(seed=cfg.seed, config={"train": cfg.to_dict(), "model": model.cfg.to_dict()})
    _fit(model, train, val, cfg, record, (make_rng(cfg.seed, 1), make_rng(cfg.seed, 2)))
    model.load_state(record.weights)
    return record


def train_dec(train: SequenceSet, val: SequenceSet, model: MasaTCN, cfg: TrainConfig) -> RunRecord:
    """Stage I selects on validation accuracy; stage II refits on train+val.

    Stage II starts from the stage-I weights and stops as soon as an epoch's
    training loss is at or below the training loss of the selected epoch.
    """
    _check(train, val)
    if train.continuous:
        raise TrainConfigError("DEC training needs discrete labels")
    record = RunRecord(seed=cfg.seed, config={"train": cfg.to_dict(), "model": model.cfg.to_dict()})
    shuffle_rng, dropout_rng = make_rng(cfg.seed, 1), make_rng(cfg.seed, 2)
    _fit(model, train, val, cfg, record, (shuffle_rng, dropout_rng))
    model.load_state(record.weights)
    if not cfg.stage2_enabled or record.best_epoch < 0:
        return record
    criterion = record.train_loss[record.best_epoch]
    record.stage2_criterion = criterion
    combined = SequenceSet.concat([train, val])
    if evaluate_loss(model, combined, cfg) <= criterion:
        return record
    state = AdamState()
    for _ in range(cfg.stage2_max_epochs):
        loss = train_epoch(model, combined, cfg, cfg.lr, state, shuffle_rng, dropout_rng)
        record.stage2_loss.append(loss)
        if loss <= criterion:
            break
    record.weights = model.state()
    return record


def train_model(train: SequenceSet, val: SequenceSet, model: MasaTCN, cfg: TrainConfig) -> RunRecord:
    if cfg.task == "CER":
        return train_cer(train, val, model, cfg)
    return train_dec(train, val, model, cfg)


# ---------------------------------------------------------------- evaluation

def stitch_trial(pred: np.ndarray, starts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Average overlapping sequence predictions onto the trial's index axis.

    Returns ``(indices, values)`` for every index covered by some sequence.
    """
    t = pred.shape[1]
    n = int(starts.max()) + t
    acc = np.zeros(n)
    cnt = np.zeros(n)
    for p, s in zip(pred, starts):
        acc[s:s + t] += p
        cnt[s:s + t] += 1
    idx = np.flatnonzero(cnt)
    return idx, acc[idx] / cnt[idx]


def trial_traces(model: MasaTCN, data: SequenceSet) -> list:
    """Per-trial ``(subject, trial, index, prediction, label)`` traces for CER."""
    pred = predict(model, data.x)
    out = []
    keys = sorted(set(zip(data.subject.tolist(), data.trial.tolist())))
    for subj, trial in keys:
        sel = np.flatnonzero((data.subject == subj) & (data.trial == trial))
        idx, p = stitch_trial(pred[sel], data.start[sel])
        _, y = stitch_trial(data.y[sel], data.start[sel])
        out.append((subj, trial, idx, p, y))
    return out


def evaluate_cer(model: MasaTCN, data: SequenceSet) -> dict:
    """Per-trial RMSE/PCC/CCC averaged over trials."""
    rows = [regression_scores(p, y) for *_, p, y in trial_traces(model, data)]
    out = {}
    for k in ("rmse", "pcc", "ccc"):
        vals = [r[k] for r in rows if r[k] is not None]
        out[k] = float(np.mean(vals)) if vals else None
    return out


def evaluate_dec(model: MasaTCN, data: SequenceSet) -> dict:
    pred = predict(model, data.x).argmax(axis=1)
    return {"acc": accuracy(pred, data.y), "f1": f1_binary(pred, data.y, 1)}
