"""Sensitivity sweeps over the prompt loss weight and the queue size.

    python3 scripts/sweep.py lambda --seeds 0 1 2 3 4
    python3 scripts/sweep.py queue --sizes 0 64 256 1024 --dataset MUTAG --root data

Without --dataset the synthetic two-class motif set is used.
"""
import argparse
import dataclasses

import numpy as np

from sglpt.config import EvalConfig, preset
from sglpt.data import load_dataset, synthetic_motif_dataset
from sglpt.evaluate import run_protocol
from sglpt.gnn import ModelState
from sglpt.pretrain import pretrain


def pretrained(bundle, cfg, seed, **pre_overrides):
    m = cfg.model
    model = ModelState(bundle.feature_dim, m.hidden, m.num_layers, seed=seed, activation=m.activation,
                       norm=m.norm, readout=m.readout)
    pcfg = dataclasses.replace(cfg.pretrain, seed=seed, **pre_overrides)
    pretrain(model, bundle.graphs, pcfg)
    return model


def sweep_lambda(bundle, cfg, seeds, values):
    rows = {lam: [] for lam in values}
    for seed in seeds:
        model = pretrained(bundle, cfg, seed)
        ev = EvalConfig(runs=1, seed=seed)
        for lam in values:
            pc = dataclasses.replace(cfg.prompt, lambda_prompt=lam)
            rows[lam].append(run_protocol(bundle, model, "semi-supervised-prompt", ev, pc).mean)
    return rows


def sweep_queue(bundle, cfg, seeds, sizes):
    rows = {q: [] for q in sizes}
    for seed in seeds:
        ev = EvalConfig(runs=1, seed=seed)
        for q in sizes:
            model = pretrained(bundle, cfg, seed, global_=dataclasses.replace(cfg.pretrain.global_, queue_size=q))
            rows[q].append(run_protocol(bundle, model, "unsupervised-probe", ev).mean)
    return rows


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("what", choices=("lambda", "queue"))
    ap.add_argument("--dataset")
    ap.add_argument("--root", default="data")
    ap.add_argument("--preset", default="mutag-prompt")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--values", type=float, nargs="+", default=[0.0, 0.1, 0.3, 0.5, 0.7, 0.9])
    ap.add_argument("--sizes", type=int, nargs="+", default=[0, 64, 256, 512, 1024])
    args = ap.parse_args()
    bundle = load_dataset(args.root, args.dataset) if args.dataset else synthetic_motif_dataset(200, seed=0)
    cfg = preset(args.preset)
    if args.what == "lambda":
        rows, label = sweep_lambda(bundle, cfg, args.seeds, args.values), "lambda_prompt"
    else:
        rows, label = sweep_queue(bundle, cfg, args.seeds, args.sizes), "queue size"
    print(f"{bundle.name}: accuracy vs {label} over seeds {args.seeds}")
    for key, vals in rows.items():
        print(f"  {key:>8g}  {np.mean(vals):.4f} ± {np.std(vals, ddof=1) if len(vals) > 1 else 0.0:.4f}")
