"""Command line: ``sglpt {pretrain,prompt-tune,evaluate,report}``.

Exit codes: 0 success, 1 config error, 2 data error (including incomplete
reports and incompatible checkpoints), 3 numeric abort.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, dump_config, load_config
from .data import DataError, load_dataset, make_split
from .evaluate import PROTOCOLS, MetricRecord, run_protocol
from .gnn import ModelState
from .optim import ContractViolation
from .pretrain import NumericAbort, pretrain
from .prompt import predict, prompt_tune
from .runlog import MetricLog, check_compatible, load_model, read_jsonl, save_model, write_jsonl

log = logging.getLogger("sglpt")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class IncompleteRun(DataError):
    pass


def _with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    cfg.seed = seed
    cfg.pretrain = dataclasses.replace(cfg.pretrain, seed=seed)
    cfg.prompt = dataclasses.replace(cfg.prompt, seed=seed)
    cfg.eval = dataclasses.replace(cfg.eval, seed=seed)
    return cfg


def build_config(args) -> RunConfig:
    cfg = load_config(args.config, args.preset)
    if args.seed is not None:
        cfg = _with_seed(cfg, args.seed)
    if args.out is not None:
        cfg.out = args.out
    if getattr(args, "mode", None):
        cfg.prompt = dataclasses.replace(cfg.prompt, mode=args.mode)
    if getattr(args, "dataset", None):
        cfg.dataset = args.dataset
    if getattr(args, "root", None):
        cfg.root = args.root
    return cfg


def _prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(dump_config(cfg))
    return out


def _load_source(source: str | None, cfg: RunConfig, feature_dim: int) -> tuple[ModelState, str]:
    if source is None:
        raise ConfigError("a checkpoint is required for this stage", "--checkpoint")
    if source == "random":
        m = cfg.model
        return ModelState(feature_dim, m.hidden, m.num_layers, seed=cfg.seed, activation=m.activation,
                          norm=m.norm, readout=m.readout), "random-init"
    model, meta = load_model(source)
    check_compatible(model, feature_dim)
    return model, meta.get("method", "SGL")


def cmd_pretrain(cfg: RunConfig) -> Path:
    bundle = load_dataset(cfg.root, cfg.dataset)
    out = _prepare_out(cfg)
    m = cfg.model
    model = ModelState(bundle.feature_dim, m.hidden, m.num_layers, seed=cfg.seed,
                       activation=m.activation, norm=m.norm, readout=m.readout)
    mlog = MetricLog(out / "pretrain.metrics.jsonl", "pretrain", cfg.config_hash())
    pretrain(model, bundle.graphs, cfg.pretrain, callback=mlog.write)
    ckpt = out / "pretrain.ckpt"
    save_model(ckpt, model, {"stage": "pretrain", "method": "SGL", "seed": cfg.seed,
                             "config_hash": cfg.config_hash(), "steps": cfg.pretrain.epochs,
                             "dataset": bundle.name})
    return ckpt


def cmd_prompt_tune(cfg: RunConfig, checkpoint: str) -> Path:
    bundle = load_dataset(cfg.root, cfg.dataset)
    model, method = _load_source(checkpoint, cfg, bundle.feature_dim)
    out = _prepare_out(cfg)
    pc = cfg.prompt
    if pc.mode == "frozen":
        split = make_split(bundle.labels, "kshot", cfg.seed, k=cfg.eval.shots)
    else:
        split = make_split(bundle.labels, "label_rate", cfg.seed, rate=cfg.eval.label_rate)
    (tr, te), = split
    mlog = MetricLog(out / "prompt.metrics.jsonl", "prompt-tune", cfg.config_hash())
    model.prototypes = None
    prompt_tune(model, bundle.subset(tr), bundle.num_classes, pc, callback=mlog.write)
    probs, pred = predict(model, bundle.subset(te))
    test_acc = float(np.mean(pred == bundle.labels[te]))
    mlog.write(pc.epochs, {"test_acc": test_acc})
    write_jsonl(out / "predictions.jsonl",
                ({"graph_id": int(bundle.graphs[i].id), "probabilities": [float(p) for p in probs[k]],
                  "predicted": int(pred[k]), "label": int(bundle.labels[i])} for k, i in enumerate(te)))
    ckpt = out / "prompt.ckpt"
    save_model(ckpt, model, {"stage": "prompt-tune", "method": f"{method}-PT", "seed": cfg.seed,
                             "config_hash": cfg.config_hash(), "steps": pc.epochs, "mode": pc.mode,
                             "dataset": bundle.name})
    return ckpt


def cmd_evaluate(cfg: RunConfig, checkpoint: str, jobs: int = 1, method: str | None = None) -> list[dict]:
    bundle = load_dataset(cfg.root, cfg.dataset)
    model, src_method = _load_source(checkpoint, cfg, bundle.feature_dim)
    method = method or src_method
    out = _prepare_out(cfg)
    rows = []
    for protocol in cfg.eval.protocols:
        if protocol not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {protocol!r}", "eval.protocols")
        row = {"protocol": protocol, "config_hash": cfg.config_hash(), "seed": cfg.seed}
        try:
            rec = run_protocol(bundle, model, protocol, cfg.eval, cfg.prompt, method=method, workers=jobs)
            row.update(dataclasses.asdict(rec), status="ok")
        except (ValueError, ContractViolation) as e:
            row.update(dataset=bundle.name, method=method, status="failed", error=str(e))
        rows.append(row)
    write_jsonl(out / "records.jsonl", rows)
    failed = [r["protocol"] for r in rows if r["status"] != "ok"]
    if failed:
        raise IncompleteRun(f"protocols did not complete: {', '.join(failed)}")
    return rows


def aggregate(rows: list[dict]) -> list[MetricRecord]:
    cells: dict[tuple, list[float]] = defaultdict(list)
    for r in rows:
        if r.get("status") == "ok":
            cells[(r["dataset"], r["method"], r["split"], r["metric"], r["protocol"])].extend(r["values"])
    return [MetricRecord.from_values(d, m, s, k, vals, protocol=p)
            for (d, m, s, k, p), vals in sorted(cells.items())]


def cmd_report(run_dir: str | Path) -> tuple[list[MetricRecord], str]:
    run_dir = Path(run_dir)
    files = sorted(run_dir.rglob("records.jsonl")) if run_dir.is_dir() else []
    rows = [r for f in files for r in read_jsonl(f)]
    if not rows:
        raise IncompleteRun(f"no metric records under {run_dir} (0 records in {len(files)} files)")
    records = aggregate(rows)
    table = "\n".join(r.row() for r in records)
    (run_dir / "report.txt").write_text(table + "\n")
    write_jsonl(run_dir / "report.jsonl", (dataclasses.asdict(r) for r in records))
    missing = [f"{r.get('dataset')} | {r.get('method')} | {r['protocol']}" for r in rows if r.get("status") != "ok"]
    if missing:
        raise IncompleteRun("missing cells:\n  " + "\n  ".join(missing) + ("\n" + table if table else ""))
    return records, table


def parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sglpt", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=False):
        sp.add_argument("--config", help="sectioned key=value config file")
        sp.add_argument("--preset", help="named preset, e.g. mutag or mutag-prompt")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--dataset", help="dataset name (overrides config)")
        sp.add_argument("--root", help="dataset root (the SGL_DATA_ROOT variable wins)")
        if checkpoint:
            sp.add_argument("--checkpoint", help="checkpoint path, or 'random' for an untrained encoder")

    common(sub.add_parser("pretrain", help="self-supervised pre-training"))
    sp = sub.add_parser("prompt-tune", help="prompt tuning from a checkpoint")
    common(sp, checkpoint=True)
    sp.add_argument("--mode", choices=("full", "frozen"))
    sp = sub.add_parser("evaluate", help="run evaluation protocols")
    common(sp, checkpoint=True)
    sp.add_argument("--jobs", type=int, default=1, help="parallel folds/episodes")
    sp.add_argument("--mode", choices=("full", "frozen"))
    sp.add_argument("--method", help="method tag written to the records")
    sp.add_argument("--protocols", help="comma-separated protocol list (overrides config)")
    sp = sub.add_parser("report", help="aggregate records under a run directory")
    sp.add_argument("run_dir")
    return p


def main(argv=None) -> int:
    args = parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        if args.command == "report":
            _, table = cmd_report(args.run_dir)
            print(table)
            return EXIT_OK
        cfg = build_config(args)
        if args.command == "pretrain":
            print(cmd_pretrain(cfg))
        elif args.command == "prompt-tune":
            print(cmd_prompt_tune(cfg, args.checkpoint))
        else:
            if args.protocols:
                cfg.eval = dataclasses.replace(
                    cfg.eval, protocols=tuple(s.strip() for s in args.protocols.split(",") if s.strip()))
            for r in cmd_evaluate(cfg, args.checkpoint, args.jobs, args.method):
                print(MetricRecord(**{f.name: r[f.name] for f in dataclasses.fields(MetricRecord)}).row())
        return EXIT_OK
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericAbort as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError, ContractViolation, KeyError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
