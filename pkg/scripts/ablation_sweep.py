"""Sweep one ablation axis on synthetic CER data and print a row per setting.

    python scripts/ablation_sweep.py fusion --subjects 4 --trials 4
    python scripts/ablation_sweep.py dilation --epochs 5
"""
import argparse
import dataclasses
import time

from masa_tcn.experiment import default_configs, synthetic_cv
from masa_tcn.model import expected_param_count, receptive_field

AXES = {
    "dilation": [{"sat_dilation": d} for d in (1, 2, 4)],
    "anchors": [{"anchor_lengths": a} for a in ((3,), (3, 5), (3, 5, 15), (3, 5, 15, 31))],
    "depth": [{"num_tcn_blocks": m} for m in (0, 1, 2, 3)],
    "width": [{"width": s} for s in (16, 32, 64)],
    "fusion": [{"fusion_mode": f} for f in ("mean", "concat", "attentive")],
    "spatial": [{"spatial_order": o} for o in ("early", "late")],
}


def main():
    p = argparse.ArgumentParser()
    p.add_argument("axis", choices=sorted(AXES))
    p.add_argument("--subjects", type=int, default=8)
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    args = p.parse_args()
    base_model, base_train = default_configs("cer", args.seed)
    if args.epochs is not None:
        base_train = dataclasses.replace(base_train, max_epochs=args.epochs)
    print(f"{'setting':<34}{'params':>9}{'field':>7}{'RMSE':>9}{'PCC':>9}{'CCC':>9}{'min':>7}")
    for change in AXES[args.axis]:
        cfg = dataclasses.replace(base_model, **change)
        t0 = time.time()
        report, _, _ = synthetic_cv("cer", args.subjects, args.trials, args.seed, cfg, base_train, args.jobs)
        agg = report.aggregate()
        label = ", ".join(f"{k}={v}" for k, v in change.items())
        print(f"{label:<34}{expected_param_count(cfg):>9}{receptive_field(cfg).analytic:>7}"
              + "".join(f"{agg[k]['mean']:>9.4f}" for k in ("rmse", "pcc", "ccc"))
              + f"{(time.time() - t0) / 60:>7.1f}", flush=True)


if __name__ == "__main__":
    main()
