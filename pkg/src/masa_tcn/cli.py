"""Command-line entry point: synth, preprocess, train, verify, predict.

Exit codes: 0 success, 2 configuration error, 3 ingestion error,
4 verification failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import verify as checks
from .data import DatasetManifest, IngestionError, SplitError, synth_cer, synth_dec
from .experiment import (ConfigConflict, default_configs, load_features, make_plan, preprocess_dataset, run_cv, run_manifest,
                         sha256_file, write_json)
from .metrics import regression_scores, classification_scores
from .model import MasaTCN, ModelConfig, ModelConfigError
from .numeric import WeightFileError, load_weights
from .signal import DEAP_BANDS, MAHNOB_BANDS, BandSet, PreprocessConfig, SignalConfigError
from .training import TrainConfig, TrainConfigError, predict as batch_predict, trial_traces

EXIT_OK, EXIT_CONFIG, EXIT_INGEST, EXIT_VERIFY = 0, 2, 3, 4

log = logging.getLogger("masa_tcn")


class ConfigError(ValueError):
    pass


CONFIG_ERRORS = (ConfigError, ConfigConflict, ModelConfigError, TrainConfigError, SignalConfigError, SplitError)
INGEST_ERRORS = (IngestionError, WeightFileError, FileNotFoundError)


def data_path(p) -> Path:
    """Relative paths resolve against $MASA_DATA_DIR when it is set."""
    p = Path(p)
    root = os.environ.get("MASA_DATA_DIR")
    if root and not p.is_absolute() and not p.exists():
        return Path(root) / p
    return p


def _echo(title: str, cfg: dict) -> None:
    print(f"# effective {title}")
    print(json.dumps(cfg, indent=1, sort_keys=True))


def _read_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: invalid JSON ({e})") from e
    unknown = set(cfg) - {"model", "train", "split", "preprocess"}
    if unknown:
        raise ConfigError(f"{p}: unknown sections {sorted(unknown)}")
    return cfg


def _check_keys(section: str, values: dict, cls) -> None:
    names = {f.name for f in dataclasses.fields(cls)}
    bad = set(values) - names
    if bad:
        raise ConfigError(f"unknown {section} keys: {sorted(bad)}")


# ---------------------------------------------------------------- configuration

def task_defaults(task: str) -> dict:
    model, train = default_configs(task)
    return {"model": model.to_dict(), "train": train.to_dict(),
            "split": {"strategy": "loso" if task == "cer" else "kfold", "val_fraction": 0.2,
                      "granularity": "segment", "k": 10}}


def _flag_overrides(args) -> dict:
    model, train, split = {}, {}, {}
    if args.width is not None:
        model["width"] = args.width
    if args.depth is not None:
        if args.depth < 2 or args.depth % 2:
            raise ConfigError("--depth must be an even number >= 2 (SAT counts as 2, each block as 2)")
        model["num_tcn_blocks"] = (args.depth - 2) // 2
    if args.anchors is not None:
        try:
            model["anchor_lengths"] = [int(a) for a in args.anchors.split(",") if a.strip()]
        except ValueError as e:
            raise ConfigError(f"--anchors expects comma-separated ints, got {args.anchors!r}") from e
    if args.dilation is not None:
        model["sat_dilation"] = args.dilation
    if args.fusion is not None:
        model["fusion_mode"] = args.fusion
    if args.spatial is not None:
        model["spatial_order"] = args.spatial
    if args.mean_fusion_head is not None:
        model["mean_fusion_head"] = args.mean_fusion_head == "on"
    for flag, key in (("epochs", "max_epochs"), ("lr", "lr"), ("batch_size", "batch_size")):
        if getattr(args, flag) is not None:
            train[key] = getattr(args, flag)
    if args.seed is not None:
        train["seed"] = args.seed
    if args.split is not None:
        split["strategy"] = args.split
    if args.granularity is not None:
        split["granularity"] = args.granularity
    return {"model": model, "train": train, "split": split}


def resolve_train_config(args, index: dict) -> tuple[ModelConfig, TrainConfig, dict]:
    """Defaults < config file < flags; geometry comes from the feature index."""
    task = args.task
    layers = [task_defaults(task), _read_config(args.config), _flag_overrides(args)]
    eff = {"model": {}, "train": {}, "split": {}}
    for layer in layers:
        for sec in eff:
            eff[sec].update(layer.get(sec, {}))
    eff["model"]["num_channels"] = index["num_channels"]
    eff["model"]["num_bands"] = index["num_bands"]
    eff["train"]["task"] = task.upper()
    _check_keys("model", eff["model"], ModelConfig)
    _check_keys("train", eff["train"], TrainConfig)
    bad = set(eff["split"]) - {"strategy", "val_fraction", "granularity", "k"}
    if bad:
        raise ConfigError(f"unknown split keys: {sorted(bad)}")
    model_cfg = ModelConfig.from_dict(eff["model"])
    train_cfg = TrainConfig(**eff["train"])
    continuous = index["label_kind"] == "continuous"
    if task == "cer" and not continuous:
        raise ConfigConflict("--task cer needs continuous labels; these features carry class ids")
    if task == "dec" and continuous:
        raise ConfigConflict("--task dec needs class labels; these features are continuous")
    if eff["split"]["strategy"] == "kfold" and continuous:
        raise ConfigConflict("trial-wise k-fold is for discrete labels; use --split loso for CER")
    if (model_cfg.head == "regression") != continuous:
        raise ConfigConflict(f"head={model_cfg.head} does not match {index['label_kind']} labels")
    eff["model"], eff["train"] = model_cfg.to_dict(), train_cfg.to_dict()
    return model_cfg, train_cfg, eff


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    started = time.time()
    out = Path(args.out)
    gen = synth_cer if args.kind == "cer" else synth_dec
    manifest, _ = gen(args.subjects, args.trials, seed=args.seed, out_dir=out)
    outputs = [out / "manifest.json"] + [out / e["path"] for e in manifest.trials]
    cfg = {"kind": args.kind, "subjects": args.subjects, "trials": args.trials}
    write_json(out / "run_manifest.json", run_manifest("synth", cfg, args.seed, {}, outputs, started))
    print(f"wrote {len(manifest.trials)} trials to {out}")
    return EXIT_OK


def _bands(text: str) -> BandSet:
    if text in ("mahnob", "deap"):
        return BandSet(MAHNOB_BANDS if text == "mahnob" else DEAP_BANDS)
    try:
        return BandSet(tuple(tuple(float(v) for v in b.split("-")) for b in text.split(",")))
    except ValueError as e:
        raise ConfigError(f"--bands: expected 'mahnob', 'deap' or 'lo-hi,lo-hi,...', got {text!r}") from e


def cmd_preprocess(args) -> int:
    started = time.time()
    mpath = data_path(args.manifest)
    if not mpath.exists():
        raise IngestionError(f"manifest not found: {mpath}")
    manifest = DatasetManifest.load(mpath)
    preset = args.preset or ("deap" if manifest.label_kind == "discrete" else "mahnob")
    base = PreprocessConfig.deap() if preset == "deap" else PreprocessConfig.mahnob()
    eff = base.to_dict()
    eff.update(_read_config(args.config).get("preprocess", {}))
    over = {"window_s": args.window, "step_s": args.step, "seq_len": args.seq_len, "seq_step": args.seq_step}
    eff.update({k: v for k, v in over.items() if v is not None})
    if args.bands:
        eff["band_set"] = _bands(args.bands).to_list()
    cfg = PreprocessConfig.from_dict(eff)
    _echo("preprocess config", cfg.to_dict())
    out = Path(args.out)
    index = preprocess_dataset(manifest, cfg, out)
    print(f"{'subject':<10}{'trial':<10}{'sequences':>10}  shape")
    for e in index["trials"]:
        print(f"{e['subject_id']:<10}{e['trial_id']:<10}{e['n_sequences']:>10}  {tuple(e['shape'])}")
    inputs = {str(mpath): sha256_file(mpath)}
    for e in manifest.trials:
        p = Path(manifest.root) / e["path"]
        inputs[str(p)] = sha256_file(p)
    outputs = [out / "features.json"] + [out / e["file"] for e in index["trials"]]
    write_json(out / "run_manifest.json",
               run_manifest("preprocess", {"preprocess": cfg.to_dict()}, 0, inputs, outputs, started))
    return EXIT_OK


def _write_traces(path: Path, model: MasaTCN, data) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if data.continuous:
        w.writerow(["subject", "trial", "index", "prediction", "label"])
        for subj, trial, idx, p, y in trial_traces(model, data):
            for i, a, b in zip(idx, p, y):
                w.writerow([subj, trial, int(i), repr(float(a)), repr(float(b))])
    else:
        logits = batch_predict(model, data.x)
        w.writerow(["subject", "trial", "start", "prediction", "label"])
        for s, t, st, p, y in zip(data.subject, data.trial, data.start, logits.argmax(axis=1), data.y):
            w.writerow([s, t, int(st), int(p), int(y)])
    path.write_text(buf.getvalue())


def cmd_train(args) -> int:
    started = time.time()
    fdir = data_path(args.features)
    data, index = load_features(fdir)
    model_cfg, train_cfg, eff = resolve_train_config(args, index)
    _echo("train config", eff)
    sp = eff["split"]
    plan = make_plan(data, sp["strategy"], train_cfg.seed, sp["val_fraction"], sp["granularity"], sp["k"])
    print(f"# {len(plan.folds)} folds, {len(data)} sequences, {MasaTCN(model_cfg).num_params} parameters")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def progress(r):
        shown = " ".join(f"{k}={v:.4f}" for k, v in r.scores.items() if v is not None)
        print(f"fold {r.index:>3} {r.unit:<14} {shown}", flush=True)

    report, results = run_cv(data, plan, model_cfg, train_cfg, jobs=args.jobs, progress=progress)
    outputs = []
    for r, fold in zip(results, plan.folds):
        fd = out / "folds" / f"{r.index:03d}_{r.unit.replace('/', '_')}"
        fd.mkdir(parents=True, exist_ok=True)
        write_json(fd / "record.json", {**r.record, "unit": r.unit, "scores": r.scores})
        (fd / "weights.bin").write_bytes(r.weights)
        rec = r.record
        rows = ["epoch,train_loss,val_metric,lr"] + [
            f"{i},{rec['train_loss'][i]!r},{rec['val_metric'][i]!r},{rec['lr'][i]!r}"
            for i in range(len(rec["train_loss"]))]
        (fd / "trace.csv").write_text("\n".join(rows) + "\n")
        model = MasaTCN.from_bytes(r.weights)
        _write_traces(fd / "test_predictions.csv", model, data.subset(fold.test))
        outputs += [fd / n for n in ("record.json", "weights.bin", "trace.csv", "test_predictions.csv")]
    (out / "report.csv").write_text(report.to_csv())
    (out / "table.txt").write_text(report.table())
    write_json(out / "report.json", report.to_dict())
    write_json(out / "split_plan.json", plan.to_dict())
    outputs += [out / n for n in ("report.csv", "table.txt", "report.json", "split_plan.json")]
    inputs = {str(fdir / "features.json"): sha256_file(fdir / "features.json")}
    for e in index["trials"]:
        inputs[str(fdir / e["file"])] = sha256_file(fdir / e["file"])
    manifest = run_manifest("train", eff, train_cfg.seed, inputs, outputs, started)
    manifest["num_params"] = MasaTCN(model_cfg).num_params
    manifest["runtime"]["jobs"] = args.jobs
    write_json(out / "run_manifest.json", manifest)
    print(report.table(), end="")
    return EXIT_OK


def cmd_verify(args) -> int:
    started = time.time()
    results = checks.run_all(quick=args.quick, seed=args.seed)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print("verify: " + ("all checks passed" if not failed else f"FAILED: {', '.join(failed)}"))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "verify.json", [dataclasses.asdict(r) for r in results])
        write_json(out / "run_manifest.json",
                   run_manifest("verify", {"quick": args.quick}, args.seed, {}, [out / "verify.json"], started))
    return EXIT_VERIFY if failed else EXIT_OK


def predict_csv(model: MasaTCN, data) -> str:
    """Per-index predictions plus a per-trial score footer."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    footer = []
    if data.continuous:
        w.writerow(["subject", "trial", "index", "prediction", "label"])
        for subj, trial, idx, p, y in trial_traces(model, data):
            for i, a, b in zip(idx, p, y):
                w.writerow([subj, trial, int(i), repr(float(a)), repr(float(b))])
            s = regression_scores(p, y)
            pcc = "nan" if s["pcc"] is None else f"{s['pcc']:.6f}"
            footer.append(f"# {subj}/{trial} rmse={s['rmse']:.6f} pcc={pcc} ccc={s['ccc']:.6f}")
    else:
        pred = batch_predict(model, data.x).argmax(axis=1)
        w.writerow(["subject", "trial", "start", "prediction", "label"])
        for row in zip(data.subject, data.trial, data.start, pred, data.y):
            w.writerow([row[0], row[1], int(row[2]), int(row[3]), int(row[4])])
        s = classification_scores(pred, data.y)
        footer.append(f"# all acc={s['acc']:.6f} f1={s['f1']:.6f}")
    return buf.getvalue() + "\n".join(footer) + "\n"


def cmd_predict(args) -> int:
    started = time.time()
    ckpt = Path(args.checkpoint)
    manifest, state = load_weights(ckpt)
    cfg = ModelConfig.from_dict(manifest["config"]["model"])
    fdir = data_path(args.features)
    data, index = load_features(fdir)
    if args.subject:
        data = data.subset(np.flatnonzero(data.subject == args.subject))
    if args.trial:
        data = data.subset(np.flatnonzero(data.trial == args.trial))
    if len(data) == 0:
        raise ConfigError("no sequences match the --subject/--trial filter")
    if data.x.shape[1] != cfg.feature_dim:
        raise ConfigError(f"checkpoint expects {cfg.feature_dim} feature rows "
                          f"(C={cfg.num_channels}, f={cfg.num_bands}); features have {data.x.shape[1]}")
    if (cfg.head == "regression") != data.continuous:
        raise ConfigError(f"checkpoint head {cfg.head} does not match {index['label_kind']} labels")
    model = MasaTCN.from_bytes(ckpt.read_bytes())
    text = predict_csv(model, data)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)
    print("".join(line + "\n" for line in text.splitlines() if line.startswith("#")), end="")
    inputs = {str(ckpt): sha256_file(ckpt), str(fdir / "features.json"): sha256_file(fdir / "features.json")}
    cfg_echo = {"model": cfg.to_dict(), "subject": args.subject, "trial": args.trial}
    write_json(out.with_suffix(".manifest.json"), run_manifest("predict", cfg_echo, 0, inputs, [out], started))
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="masa-tcn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("kind", choices=["cer", "dec"])
    s.add_argument("--subjects", type=int, default=8)
    s.add_argument("--trials", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", help="trials -> feature sequences")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--preset", choices=["mahnob", "deap"])
    s.add_argument("--bands", help="'mahnob', 'deap' or 'lo-hi,lo-hi,...' in Hz")
    s.add_argument("--window", type=float)
    s.add_argument("--step", type=float)
    s.add_argument("--seq-len", type=int)
    s.add_argument("--seq-step", type=int)
    s.add_argument("--config")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", help="cross-validated training and evaluation")
    s.add_argument("--features", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--task", choices=["cer", "dec"], default="cer")
    s.add_argument("--split", choices=["loso", "kfold"])
    s.add_argument("--granularity", choices=["segment", "trial"])
    s.add_argument("--seed", type=int)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--width", type=int)
    s.add_argument("--depth", type=int)
    s.add_argument("--anchors", help="comma-separated anchor lengths, e.g. 3,5,15")
    s.add_argument("--dilation", type=int, help="starting dilation of the SAT layer")
    s.add_argument("--fusion", choices=["attentive", "concat", "mean"])
    s.add_argument("--spatial", choices=["early", "late"])
    s.add_argument("--mean-fusion-head", choices=["on", "off"])
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--config")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("verify", help="gradient, causality, receptive-field and oracle checks")
    s.add_argument("--quick", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("predict", help="per-index predictions from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--subject")
    s.add_argument("--trial")
    s.set_defaults(func=cmd_predict)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CONFIG_ERRORS as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except INGEST_ERRORS as e:
        print(f"ingestion error: {e}", file=sys.stderr)
        return EXIT_INGEST


if __name__ == "__main__":
    sys.exit(main())
