import json

import numpy as np
import pytest

from sglpt import cli
from sglpt.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, main
from sglpt.config import load_config
from sglpt.data import synthetic_motif_dataset, write_tudataset
from sglpt.optim import load_checkpoint, save_checkpoint
from sglpt.pretrain import NumericAbort
from sglpt.runlog import read_jsonl

import oracles

TINY = """[run]
preset = mutag
dataset = SYNTH
[model]
hidden = 8
num_layers = 2
[pretrain]
epochs = 2
batch_size = 16
[pretrain.global]
queue_size = 32
[prompt]
epochs = 2
batch_size = 16
[eval]
folds = 3
runs = 2
episodes = 3
probe_epochs = 30
finetune_epochs = 1
label_rate = 0.25
"""


@pytest.fixture
def env(tmp_path, monkeypatch):
    monkeypatch.delenv("SGL_DATA_ROOT", raising=False)
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
    write_tudataset(synthetic_motif_dataset(30, seed=3), tmp_path / "data")
    cfg = tmp_path / "tiny.ini"
    cfg.write_text(TINY)
    return tmp_path, ["--config", str(cfg), "--root", str(tmp_path / "data")]


def _pretrain(env, out="pre", seed=0):
    tmp, base = env
    assert main(["pretrain", *base, "--seed", str(seed), "--out", str(tmp / out)]) == EXIT_OK
    return tmp / out


def test_pretrain_writes_checkpoint_and_log(env):
    out = _pretrain(env)
    rows = read_jsonl(out / "pretrain.metrics.jsonl")
    assert {r["epoch"] for r in rows} == {0, 1}
    assert {"stage", "epoch", "metric", "value", "timestamp", "config_hash"} <= set(rows[0])
    _, meta = load_checkpoint(out / "pretrain.ckpt")
    assert meta["config_hash"] == rows[0]["config_hash"] and meta["method"] == "SGL"
    assert (out / "config.ini").exists()


def test_rerun_metric_logs_bit_identical(env):
    a, b = _pretrain(env, "a"), _pretrain(env, "b")
    assert (a / "pretrain.metrics.jsonl").read_bytes() == (b / "pretrain.metrics.jsonl").read_bytes()
    assert (a / "pretrain.ckpt").read_bytes() == (b / "pretrain.ckpt").read_bytes()


def test_checkpoint_load_save_byte_identical(env, tmp_path):
    out = _pretrain(env)
    tensors, meta = load_checkpoint(out / "pretrain.ckpt")
    save_checkpoint(tmp_path / "again.ckpt", tensors, meta)
    assert (tmp_path / "again.ckpt").read_bytes() == (out / "pretrain.ckpt").read_bytes()


def test_prompt_tune_outputs(env):
    tmp, base = env
    ckpt = _pretrain(env) / "pretrain.ckpt"
    out = tmp / "pt"
    assert main(["prompt-tune", *base, "--checkpoint", str(ckpt), "--mode", "frozen", "--out", str(out)]) == 0
    metrics = {r["metric"] for r in read_jsonl(out / "prompt.metrics.jsonl")}
    assert {"loss_local", "loss_proto", "train_acc", "test_acc"} <= metrics
    preds = read_jsonl(out / "predictions.jsonl")
    assert len(preds) == 28  # 1-shot, 2 classes, 30 graphs
    assert all(abs(sum(p["probabilities"]) - 1) < 1e-9 for p in preds)
    _, meta = load_checkpoint(out / "prompt.ckpt")
    assert meta["method"] == "SGL-PT" and meta["mode"] == "frozen"
    assert "prototypes" in load_checkpoint(out / "prompt.ckpt")[0]


def test_evaluate_and_report(env, capsys):
    tmp, base = env
    ckpt = _pretrain(env) / "pretrain.ckpt"
    run = tmp / "runs"
    for seed in (0, 1):
        assert main(["evaluate", *base, "--checkpoint", str(ckpt), "--seed", str(seed),
                     "--protocols", "unsupervised-probe", "--out", str(run / f"s{seed}")]) == EXIT_OK
    capsys.readouterr()
    assert main(["report", str(run)]) == EXIT_OK
    line = capsys.readouterr().out.strip()
    assert line.startswith("SYNTH | SGL | probe | acc ")
    # hand recomputation of the two-seed aggregate
    values = [v for s in (0, 1) for v in read_jsonl(run / f"s{s}" / "records.jsonl")[0]["values"]]
    mean, std = np.mean(values), oracles.sample_std(values)
    assert line == f"SYNTH | SGL | probe | acc {mean:.4f} ± {std:.4f}"
    rec = read_jsonl(run / "report.jsonl")[0]
    assert rec["runs"] == 4 and rec["mean"] == pytest.approx(mean, abs=1e-12)


def test_evaluate_all_protocols_parallel(env):
    tmp, base = env
    out = tmp / "all"
    protocols = "unsupervised-probe,semi-supervised-ft,semi-supervised-prompt,fewshot-ft,fewshot-prompt"
    assert main(["evaluate", *base, "--checkpoint", "random", "--protocols", protocols, "--jobs", "2",
                 "--out", str(out)]) == EXIT_OK
    rows = read_jsonl(out / "records.jsonl")
    assert [r["protocol"] for r in rows] == protocols.split(",")
    assert all(r["status"] == "ok" and r["config_hash"] for r in rows)
    assert {r["method"] for r in rows} == {"random-init", "random-init-PT"}


def test_bad_config_exit_1(env, tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[pretrain]\nlambda_pre = 3\n")
    assert main(["pretrain", "--config", str(bad)]) == EXIT_CONFIG
    assert main(["pretrain", "--preset", "cora"]) == EXIT_CONFIG


def test_missing_dataset_exit_2_names_path(env, capsys):
    tmp, base = env
    code = main(["pretrain", *base, "--dataset", "GONE", "--out", str(tmp / "x")])
    assert code == EXIT_DATA and "GONE" in capsys.readouterr().err


def test_empty_report_dir_exit_2(tmp_path, capsys):
    assert main(["report", str(tmp_path)]) == EXIT_DATA
    assert "0 records" in capsys.readouterr().err


def test_incompatible_checkpoint_exit_2(env, tmp_path, capsys):
    tmp, base = env
    ckpt = _pretrain(env) / "pretrain.ckpt"
    other = tmp_path / "other"
    write_tudataset(synthetic_motif_dataset(10, seed=0, num_types=7, name="OTHER"), other)
    code = main(["evaluate", *base, "--root", str(other), "--dataset", "OTHER", "--checkpoint", str(ckpt),
                 "--out", str(tmp / "o")])
    err = capsys.readouterr().err
    assert code == EXIT_DATA and "feature dim" in err


def test_failed_protocol_exit_2_lists_missing_cell(env, capsys):
    tmp, base = env
    run = tmp / "partial"
    bad = tmp / "bad_eval.ini"
    bad.write_text(TINY.replace("folds = 3", "folds = 99"))
    code = main(["evaluate", "--config", str(bad), "--root", str(tmp / "data"), "--checkpoint", "random",
                 "--protocols", "unsupervised-probe,fewshot-ft", "--out", str(run)])
    assert code == EXIT_DATA
    capsys.readouterr()
    assert main(["report", str(run)]) == EXIT_DATA
    err = capsys.readouterr().err
    assert "missing cells" in err and "unsupervised-probe" in err
    assert (run / "report.txt").read_text().startswith("SYNTH | random-init | 1-shot-ft")


def test_numeric_abort_exit_3(env, monkeypatch):
    def boom(*a, **k):
        raise NumericAbort("non-finite loss", 0, "epoch0-batch0")
    monkeypatch.setattr(cli, "pretrain", boom)
    tmp, base = env
    assert main(["pretrain", *base, "--out", str(tmp / "n")]) == EXIT_NUMERIC


def test_missing_checkpoint_argument(env):
    tmp, base = env
    assert main(["prompt-tune", *base, "--out", str(tmp / "p")]) == EXIT_CONFIG
    assert main(["prompt-tune", *base, "--checkpoint", str(tmp / "nope.ckpt"), "--out", str(tmp / "p")]) == EXIT_DATA


def test_config_hash_in_every_artifact(env):
    tmp, base = env
    ckpt = _pretrain(env) / "pretrain.ckpt"
    out = tmp / "ev"
    main(["evaluate", *base, "--checkpoint", str(ckpt), "--protocols", "fewshot-ft", "--out", str(out)])
    (rec,) = read_jsonl(out / "records.jsonl")
    assert rec["config_hash"] == load_config(out / "config.ini").config_hash()
    pre = read_jsonl(ckpt.parent / "pretrain.metrics.jsonl")
    assert {r["config_hash"] for r in pre} == {load_config(ckpt.parent / "config.ini").config_hash()}
    assert load_checkpoint(ckpt)[1]["config_hash"] == pre[0]["config_hash"]
