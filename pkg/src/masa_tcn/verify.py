"""Self-checks: finite differences, causality, receptive field and metric oracles."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import metrics
from .model import MasaTCN, ModelConfig, empirical_receptive_field, receptive_field
from .numeric import Tape, Tensor, conv2d, make_rng
from .signal import MAHNOB_BANDS, BandSet, PreprocessConfig, rpsd, welch_psd
from .training import TrainConfig, ccc_loss, predict, train_epoch
from .numeric import AdamState


@dataclass
class CheckResult:
    name: str
    passed: bool
    max_error: float
    detail: str = ""

    def __post_init__(self):
        self.passed, self.max_error = bool(self.passed), float(self.max_error)

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"[{flag}] {self.name:<18} max_error={self.max_error:.3e}  {self.detail}"


# ---------------------------------------------------------------- gradients

def sample_param_entries(params: dict, n: int, rng: np.random.Generator) -> list:
    """``n`` distinct ``(name, flat_index)`` pairs drawn uniformly over all entries."""
    names = list(params)
    sizes = np.array([params[k].size for k in names])
    total = int(sizes.sum())
    flat = rng.choice(total, size=min(n, total), replace=False)
    bounds = np.cumsum(sizes)
    out = []
    for f in np.sort(flat):
        i = int(np.searchsorted(bounds, f, side="right"))
        out.append((names[i], int(f - (bounds[i - 1] if i else 0))))
    return out


def gradient_check(model: MasaTCN, loss_fn: Callable[[Tensor], Tensor], x: np.ndarray, n_params: int = 200,
                   eps: float = 1e-5, seed: int = 0, floor: float = 1e-8) -> tuple[float, int]:
    """Max relative error between tape gradients and central differences.

    Dropout is active with a mask fixed by ``seed`` so both evaluations see
    the same network. Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """

    def run(with_tape: bool):
        rng = make_rng(seed, 0xD0)
        if with_tape:
            with Tape() as tape:
                loss = loss_fn(model(x, training=True, rng=rng))
            tape.backward(loss)
            return loss.item()
        return loss_fn(model(x, training=True, rng=rng)).item()

    for p in model.params.values():
        p.zero_grad()
    run(True)
    analytic = {k: (p.grad if p.grad is not None else np.zeros(p.shape)) for k, p in model.params.items()}
    worst = 0.0
    entries = sample_param_entries(model.params, n_params, make_rng(seed, 0x6AD))
    for name, i in entries:
        arr = model.params[name].data.reshape(-1)
        orig = arr[i]
        arr[i] = orig + eps
        up = run(False)
        arr[i] = orig - eps
        down = run(False)
        arr[i] = orig
        num = (up - down) / (2 * eps)
        a = analytic[name].reshape(-1)[i]
        worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
    return worst, len(entries)


def check_gradients(n_params: int = 200, seed: int = 0) -> CheckResult:
    cfg = ModelConfig(num_channels=8, num_bands=6, width=16, num_tcn_blocks=1)
    model = MasaTCN(cfg, seed=seed)
    rng = make_rng(seed, 0x6C)
    x = rng.uniform(0, 1, size=(2, cfg.feature_dim, 24))
    y = np.cumsum(rng.normal(size=(2, 24)), axis=1)
    err, n = gradient_check(model, lambda out: ccc_loss(out, y), x, n_params, seed=seed)
    return CheckResult("gradient", err < 1e-4, err, f"{n} params, tol 1e-4")


# ---------------------------------------------------------------- conv oracle

def naive_conv2d(x, w, stride=(1, 1), dilation=(1, 1), left_pad_w=0) -> np.ndarray:
    """Direct summation; slow, obviously correct."""
    x = np.pad(x, ((0, 0), (0, 0), (left_pad_w, 0)))
    ci, H, W = x.shape
    co, _, kh, kw = w.shape
    oh = (H - dilation[0] * (kh - 1) - 1) // stride[0] + 1
    ow = (W - dilation[1] * (kw - 1) - 1) // stride[1] + 1
    out = np.zeros((co, oh, ow))
    for o in range(co):
        for i in range(oh):
            for j in range(ow):
                acc = 0.0
                for c in range(ci):
                    for a in range(kh):
                        for b in range(kw):
                            acc += w[o, c, a, b] * x[c, i * stride[0] + a * dilation[0], j * stride[1] + b * dilation[1]]
                out[o, i, j] = acc
    return out


def check_conv(n_cases: int = 8, seed: int = 0) -> CheckResult:
    rng = make_rng(seed, 0xC0)
    worst = 0.0
    for _ in range(n_cases):
        ci, co = rng.integers(1, 4, size=2)
        kh, kw = rng.integers(1, 4, size=2)
        sh, dw = int(rng.integers(1, 3)), int(rng.integers(1, 4))
        pad = int(rng.integers(0, 2)) * (kw - 1) * dw
        H = int(kh + rng.integers(0, 5))
        W = int((kw - 1) * dw + 1 + rng.integers(0, 6))
        x = rng.normal(size=(ci, H, W))
        w = rng.normal(size=(co, ci, kh, kw))
        got = conv2d(Tensor(x), Tensor(w), (sh, 1), (1, dw), pad).data
        ref = naive_conv2d(x, w, (sh, 1), (1, dw), pad)
        worst = max(worst, float(np.abs(got - ref).max()))
    return CheckResult("conv_oracle", worst <= 1e-12, worst, f"{n_cases} shapes, tol 1e-12")


# ---------------------------------------------------------------- causality and field

def causality_probe(model: MasaTCN, n_trials: int = 100, length: int = 48, seed: int = 0) -> int:
    """Count trials where an output before the perturbed index changed at all."""
    rng = make_rng(seed, 0xCA05)
    violations = 0
    for _ in range(n_trials):
        x = rng.normal(size=(1, model.cfg.feature_dim, length))
        base = model.predict(x)
        p = int(rng.integers(0, length))
        x2 = x.copy()
        x2[0, :, p:] += rng.normal(size=(model.cfg.feature_dim, length - p))
        after = model.predict(x2)
        if not np.array_equal(base[..., :p], after[..., :p]):
            violations += 1
    return violations


def check_causality(n_trials: int = 100, seed: int = 0, cfg: ModelConfig | None = None) -> CheckResult:
    model = MasaTCN(cfg or ModelConfig(), seed=seed)
    bad = causality_probe(model, n_trials, seed=seed)
    return CheckResult("causality", bad == 0, float(bad), f"{n_trials} perturbations, violations={bad}")


def random_field_configs(n: int, seed: int = 0, width: int = 4) -> list:
    rng = make_rng(seed, 0xF1E)
    out = []
    for _ in range(n):
        pool = [3, 5, 15]
        k = int(rng.integers(1, 4))
        anchors = tuple(sorted(rng.choice(pool, size=k, replace=False).tolist()))
        out.append(ModelConfig(num_channels=4, num_bands=3, width=width, anchor_lengths=anchors,
                               num_tcn_blocks=int(rng.integers(0, 4)),
                               sat_dilation=int(rng.choice([1, 2, 4]))))
    return out


def check_receptive_field(n_configs: int = 10, seed: int = 0) -> tuple[CheckResult, list]:
    rows = []
    worst = 0
    for cfg in random_field_configs(n_configs, seed):
        rf = receptive_field(cfg)
        probe = empirical_receptive_field(MasaTCN(cfg, seed=seed))
        rows.append((cfg, rf, probe))
        worst = max(worst, abs(probe.field - rf.analytic) + int(probe.lower_bound))
    return CheckResult("receptive_field", worst == 0, float(worst), f"{n_configs} configs"), rows


# ---------------------------------------------------------------- metric oracles

def _mean(v):
    return math.fsum(v) / len(v)


def brute_rmse(p, y):
    return math.sqrt(_mean([(a - b) ** 2 for a, b in zip(p, y)]))


def brute_pcc(p, y):
    mp, my = _mean(p), _mean(y)
    num = math.fsum((a - mp) * (b - my) for a, b in zip(p, y))
    den = math.sqrt(math.fsum((a - mp) ** 2 for a in p) * math.fsum((b - my) ** 2 for b in y))
    return num / den


def brute_ccc(p, y):
    mp, my = _mean(p), _mean(y)
    vp = _mean([(a - mp) ** 2 for a in p])
    vy = _mean([(b - my) ** 2 for b in y])
    cov = _mean([(a - mp) * (b - my) for a, b in zip(p, y)])
    return 2 * cov / (vp + vy + (mp - my) ** 2)


def brute_acc_f1(p, y):
    tp = sum(1 for a, b in zip(p, y) if a == 1 and b == 1)
    fp = sum(1 for a, b in zip(p, y) if a == 1 and b != 1)
    fn = sum(1 for a, b in zip(p, y) if a != 1 and b == 1)
    acc = sum(1 for a, b in zip(p, y) if a == b) / len(p)
    f1 = 0.0 if 2 * tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)
    return acc, f1


def check_metrics(n_pairs: int = 1000, seed: int = 0) -> CheckResult:
    rng = make_rng(seed, 0x3E7)
    worst = 0.0
    ok = True
    for _ in range(n_pairs):
        n = int(rng.integers(3, 40))
        y = rng.normal(size=n)
        p = rng.uniform(-1, 1) * y + rng.normal(scale=rng.uniform(0.05, 2), size=n) + rng.normal()
        pl, yl = p.tolist(), y.tolist()
        errs = [abs(metrics.rmse(p, y) - brute_rmse(pl, yl)),
                abs(metrics.pcc(p, y) - brute_pcc(pl, yl)),
                abs(metrics.ccc(p, y) - brute_ccc(pl, yl)),
                abs(metrics.ccc(y, y) - 1.0)]
        pc, yc = rng.integers(0, 2, size=n), rng.integers(0, 2, size=n)
        acc, f1 = brute_acc_f1(pc.tolist(), yc.tolist())
        errs += [abs(metrics.accuracy(pc, yc) - acc), abs(metrics.f1_binary(pc, yc) - f1)]
        worst = max(worst, *errs)
        ok &= abs(metrics.ccc(p, y)) <= abs(metrics.pcc(p, y)) + 1e-15
    return CheckResult("metric_oracles", ok and worst <= 1e-12, worst,
                       f"{n_pairs} pairs, tol 1e-12, attenuation {'holds' if ok else 'VIOLATED'}")


# ---------------------------------------------------------------- signal

def sinusoid_alpha_mass(fs: float = 256.0, seconds: float = 2.0, band_set: BandSet = BandSet(MAHNOB_BANDS)) -> float:
    t = np.arange(int(fs * seconds)) / fs
    x = np.sin(2 * np.pi * 10.0 * t)[None, :]
    freqs, psd = welch_psd(x, fs)
    rel = rpsd(psd, freqs, band_set, fs)
    alpha = [i for i, b in enumerate(band_set.bands) if tuple(b) == (8.0, 12.0)][0]
    return float(rel[0, alpha])


def check_signal(seed: int = 0) -> CheckResult:
    mass = sinusoid_alpha_mass()
    rng = make_rng(seed, 0x516)
    x = rng.normal(size=(8, 512))
    freqs, psd = welch_psd(x, 256.0)
    dev = float(np.abs(rpsd(psd, freqs, BandSet(MAHNOB_BANDS), 256.0).sum(axis=1) - 1).max())
    return CheckResult("signal_oracle", mass > 0.95 and dev <= 1e-9, dev, f"alpha mass {mass:.4f} (> 0.95)")


# ---------------------------------------------------------------- overfitting

def overfit_check(task: str, max_steps: int = 200, target: float = None, seed: int = 0) -> tuple:
    """Train on a tiny fixed set until the train metric reaches ``target``.

    CER: one batch of two sequences from one synthetic trial, target CCC 0.99.
    DEC: every sequence of four synthetic trials (two per class), target ACC 0.95.
    Dropout is off; returns ``(CheckResult, steps_used, metric_trace)``.
    """
    import dataclasses

    from .data import build_sequence_set, synth_cer, synth_dec
    from .experiment import default_configs

    model_cfg, train_cfg = default_configs(task, seed)
    model_cfg = dataclasses.replace(model_cfg, dropout_rate=0.0)
    if task == "cer":
        _, trials = synth_cer(1, 1, seed=seed)
        data = build_sequence_set(trials, PreprocessConfig.mahnob()).subset([0, 1])
        target = 0.99 if target is None else target
        train_cfg = TrainConfig.cer(lr=1e-3, batch_size=2, seed=seed)
    else:
        _, trials = synth_dec(1, 4, seed=seed)
        data = build_sequence_set(trials, PreprocessConfig.deap())
        target = 0.95 if target is None else target
    model = MasaTCN(model_cfg, seed=seed)
    state, trace, steps = AdamState(), [], 0
    shuffle, drop = make_rng(seed, 0x0F1), make_rng(seed, 0x0F2)
    per_epoch = -(-len(data) // train_cfg.batch_size)
    while steps < max_steps:
        train_epoch(model, data, train_cfg, train_cfg.lr, state, shuffle, drop)
        steps += per_epoch
        out = predict(model, data.x)
        score = metrics.ccc(out.ravel(), data.y.ravel()) if task == "cer" else metrics.accuracy(out.argmax(1), data.y)
        trace.append(score)
        if score >= target:
            break
    name = "overfit_" + task
    return CheckResult(name, trace[-1] >= target, trace[-1],
                       f"train {'CCC' if task == 'cer' else 'ACC'} after {steps} steps (target {target})"), steps, trace


def run_all(quick: bool = False, seed: int = 0) -> list:
    n = 40 if quick else 200
    return [check_conv(seed=seed), check_gradients(n, seed), check_causality(20 if quick else 100, seed),
            check_receptive_field(4 if quick else 10, seed)[0], check_metrics(200 if quick else 1000, seed),
            check_signal(seed)]
