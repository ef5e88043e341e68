"""Pretrain -> evaluate -> prompt-tune -> report for one dataset, through the CLI entry point.

    python3 scripts/run_pipeline.py --dataset MUTAG --preset mutag --seeds 0 1 2 --out runs/mutag

Dataset files are looked up under $SGL_DATA_ROOT, then --root.
"""
import argparse
import sys
from pathlib import Path

from sglpt.cli import main

PROTOCOLS = "unsupervised-probe,semi-supervised-ft,semi-supervised-prompt,fewshot-ft,fewshot-prompt"


def run(argv):
    code = main(argv)
    if code != 0:
        print(f"step failed with exit code {code}: sglpt {' '.join(argv)}", file=sys.stderr)
        sys.exit(code)


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--dataset", default="MUTAG")
    ap.add_argument("--preset", default="mutag")
    ap.add_argument("--root", default="data")
    ap.add_argument("--out", default="runs/pipeline")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--protocols", default=PROTOCOLS)
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    base = ["--preset", args.preset, "--dataset", args.dataset, "--root", args.root]
    out = Path(args.out)
    for seed in args.seeds:
        s = ["--seed", str(seed)]
        seed_dir = out / f"seed{seed}"
        run(["pretrain", *base, *s, "--out", str(seed_dir / "pretrain")])
        ckpt = str(seed_dir / "pretrain" / "pretrain.ckpt")
        run(["evaluate", *base, *s, "--checkpoint", ckpt, "--protocols", args.protocols,
             "--jobs", str(args.jobs), "--out", str(seed_dir / "evaluate")])
        run(["prompt-tune", *base, *s, "--checkpoint", ckpt, "--mode", "frozen",
             "--out", str(seed_dir / "prompt")])
    run(["report", str(out)])
