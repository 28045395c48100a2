import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from masa_tcn import training
from masa_tcn.data import SequenceSet
from masa_tcn.metrics import ccc
from masa_tcn.model import MasaTCN, ModelConfig
from masa_tcn.numeric import Tensor
from masa_tcn.training import (PlateauScheduler, TrainConfig, TrainConfigError, ccc_loss, cross_entropy_smoothed,
                               lr_schedule_step, smoothed_targets, stitch_trial, train_cer, train_dec)

from .conftest import leaf, numeric_grad, rel_error, tape_grads

TINY = ModelConfig(num_channels=3, num_bands=2, width=4, anchor_lengths=(3, 5))


def cer_set(n=6, t=16, seed=0, subject="S0"):
    r = np.random.default_rng(seed)
    x = r.uniform(size=(n, TINY.feature_dim, t))
    y = np.tanh(x[:, 0] - x[:, 1] + 0.1 * r.normal(size=(n, t)))
    return SequenceSet(x, y, np.array([subject] * n), np.array([f"T{i // 2}" for i in range(n)]),
                       np.array([8 * (i % 2) for i in range(n)]))


def dec_set(n=8, t=6, seed=0):
    r = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = r.uniform(size=(n, TINY.feature_dim, t)) + y[:, None, None] * np.linspace(0, 1, TINY.feature_dim)[:, None]
    return SequenceSet(x, y, np.array(["S0"] * n), np.array([f"T{i}" for i in range(n)]), np.zeros(n, int))


class TestCccLoss:
    def test_examples(self, rng):
        y = rng.normal(size=(2, 10))
        assert ccc_loss(Tensor(y), y).item() == pytest.approx(0.0, abs=1e-14)
        y0 = y - y.mean(axis=1, keepdims=True)
        assert ccc_loss(Tensor(-y0), y0).item() == pytest.approx(2.0, abs=1e-14)

    def test_matches_metric(self, rng):
        p, y = rng.normal(size=(3, 12)), rng.normal(size=(3, 12))
        expected = np.mean([1 - ccc(a, b) for a, b in zip(p, y)])
        assert ccc_loss(Tensor(p), y).item() == pytest.approx(expected, abs=1e-14)

    def test_gradient(self, rng):
        p = leaf(rng.normal(size=(2, 9)))
        y = rng.normal(size=(2, 9))
        (g,) = tape_grads(lambda: ccc_loss(p, y), p)
        assert rel_error(g, numeric_grad(lambda: ccc_loss(p, y).item(), p.data)) < 1e-4

    @given(st.integers(0, 10 ** 6))
    def test_range(self, seed):
        r = np.random.default_rng(seed)
        v = ccc_loss(Tensor(r.normal(size=(2, 8)) * r.uniform(0.1, 5)), r.normal(size=(2, 8))).item()
        assert -1e-12 <= v <= 2 + 1e-12

    def test_constant_labels_skipped(self, rng):
        y = np.vstack([np.ones(6), rng.normal(size=6)])
        p = rng.normal(size=(2, 6))
        with pytest.warns(UserWarning, match="constant"):
            v = ccc_loss(Tensor(p), y).item()
        assert v == pytest.approx(1 - ccc(p[1], y[1]))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ccc_loss(Tensor(np.zeros((2, 3))), np.zeros((2, 4)))


class TestCrossEntropy:
    def test_smoothed_target(self):
        np.testing.assert_allclose(smoothed_targets([1], 2, 0.1), [[0.05, 0.95]])

    def test_uniform_logits(self):
        assert cross_entropy_smoothed(Tensor(np.zeros((3, 2))), [0, 1, 1]).item() == pytest.approx(math.log(2))

    def test_plain_when_unsmoothed(self, rng):
        z = rng.normal(size=(4, 3))
        lab = np.array([0, 2, 1, 1])
        logp = z - np.log(np.exp(z).sum(1, keepdims=True))
        assert cross_entropy_smoothed(Tensor(z), lab).item() == pytest.approx(-logp[np.arange(4), lab].mean())

    @given(st.integers(0, 10 ** 6), st.floats(0, 0.9))
    def test_bounded_below_by_target_entropy(self, seed, eps):
        r = np.random.default_rng(seed)
        z, lab = r.normal(size=(5, 2)) * 3, r.integers(0, 2, 5)
        t = smoothed_targets(lab, 2, eps)
        ent = -(t * np.log(t, where=t > 0, out=np.zeros_like(t))).sum(1).mean()
        assert cross_entropy_smoothed(Tensor(z), lab, eps).item() >= ent - 1e-12

    def test_gradient(self, rng):
        z = leaf(rng.normal(size=(3, 2)))
        lab = [0, 1, 1]
        (g,) = tape_grads(lambda: cross_entropy_smoothed(z, lab, 0.1), z)
        assert rel_error(g, numeric_grad(lambda: cross_entropy_smoothed(z, lab, 0.1).item(), z.data)) < 1e-4

    def test_label_range(self):
        with pytest.raises(ValueError):
            cross_entropy_smoothed(Tensor(np.zeros((1, 2))), [2])


class TestScheduler:
    def test_improving_keeps_lr(self):
        s = PlateauScheduler(1e-3)
        assert [lr_schedule_step(s, m) for m in range(10)] == [1e-3] * 10

    def test_six_flat_epochs_one_halving(self):
        s = PlateauScheduler(1e-3, patience=5, factor=0.5)
        lrs = [s.step(0.5) for _ in range(6)]
        assert lrs[:5] == [1e-3] * 5 and lrs[5] == 5e-4

    def test_two_reductions_quarter(self):
        s = PlateauScheduler(1.0, patience=2, factor=0.5)
        for _ in range(5):
            s.step(0.0)
        assert s.lr == 0.25

    def test_threshold_is_strict(self):
        s = PlateauScheduler(1.0, patience=1)
        s.step(0.3)
        assert s.step(0.3) == 0.5


class TestConfig:
    def test_defaults_and_dec(self):
        c = TrainConfig()
        assert (c.lr, c.weight_decay, c.batch_size, c.max_epochs) == (1e-4, 1e-4, 2, 15)
        d = TrainConfig.dec()
        assert (d.lr, d.batch_size, d.max_epochs, d.label_smoothing, d.stage2_enabled) == (1e-3, 32, 100, 0.1, True)

    @pytest.mark.parametrize("kw", [dict(task="XYZ"), dict(lr=-1), dict(label_smoothing=1.0),
                                    dict(early_stop_patience=0), dict(batch_size=0)])
    def test_invalid(self, kw):
        with pytest.raises(TrainConfigError):
            TrainConfig(**kw)


class TestLoops:
    def test_cer_deterministic_and_best_retained(self):
        cfg = TrainConfig(lr=3e-3, max_epochs=4, seed=2)
        recs, preds = [], []
        for _ in range(2):
            m = MasaTCN(TINY, seed=1)
            recs.append(train_cer(cer_set(), cer_set(4, seed=1), m, cfg))
            preds.append(m.predict(cer_set(4, seed=1).x))
        a, b = recs
        assert a.to_dict() == b.to_dict()
        assert np.array_equal(preds[0], preds[1])
        assert a.best_metric == max(a.val_metric) == a.val_metric[a.best_epoch]
        assert len(a.lr) == len(a.train_loss) == len(a.val_metric)

    def test_retained_weights_score_the_best_metric(self):
        m = MasaTCN(TINY, seed=1)
        val = cer_set(4, seed=1)
        rec = train_cer(cer_set(), val, m, TrainConfig(lr=3e-3, max_epochs=5))
        assert training.validation_metric(m, val) == rec.best_metric

    def test_early_stop(self):
        m = MasaTCN(TINY, seed=1)
        rec = train_cer(cer_set(), cer_set(4, seed=1), m,
                        TrainConfig(lr=0.0, max_epochs=30, early_stop_patience=3))
        assert rec.stopped_early and len(rec.train_loss) == 4

    def test_wrong_label_kind(self):
        with pytest.raises(TrainConfigError):
            train_cer(dec_set(), dec_set(), MasaTCN(TINY), TrainConfig())
        with pytest.raises(ValueError):
            train_cer(cer_set(), cer_set(0), MasaTCN(TINY), TrainConfig())

    def dec_model(self):
        return MasaTCN(ModelConfig(**{**TINY.to_dict(), "head": "classification"}), seed=3)

    def test_stage2_disabled_keeps_stage1_weights(self, monkeypatch):
        cfg = TrainConfig.dec(max_epochs=3, stage2_enabled=False)
        m1 = self.dec_model()
        r1 = train_dec(dec_set(), dec_set(4, seed=1), m1, cfg)
        assert r1.stage2_loss == [] and r1.stage2_criterion is None
        # stage II that halts immediately must leave the same weights
        monkeypatch.setattr(training, "evaluate_loss", lambda *a, **k: -np.inf)
        m2 = self.dec_model()
        r2 = train_dec(dec_set(), dec_set(4, seed=1), m2, TrainConfig.dec(max_epochs=3))
        assert r2.stage2_loss == [] and r2.stage2_criterion == r2.train_loss[r2.best_epoch]
        assert all(np.array_equal(m1.state()[k], m2.state()[k]) for k in m1.params)

    def test_stage2_stops_at_criterion(self, monkeypatch):
        monkeypatch.setattr(training, "evaluate_loss", lambda *a, **k: np.inf)
        rec = train_dec(dec_set(), dec_set(4, seed=1), self.dec_model(), TrainConfig.dec(max_epochs=3))
        assert 1 <= len(rec.stage2_loss) <= 50
        assert rec.stage2_loss[-1] <= rec.stage2_criterion or len(rec.stage2_loss) == 50
        assert all(l > rec.stage2_criterion for l in rec.stage2_loss[:-1])


def test_stitch_averages_overlap():
    pred = np.array([[1.0, 1.0, 1.0, 1.0], [3.0, 3.0, 3.0, 3.0]])
    idx, vals = stitch_trial(pred, np.array([0, 2]))
    assert idx.tolist() == [0, 1, 2, 3, 4, 5]
    assert vals.tolist() == [1, 1, 2, 2, 3, 3]
