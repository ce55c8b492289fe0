import csv
import json
import subprocess
import sys

import pytest
import torch

from conftest import CONFIGS, FIXTURES, micro_model
from changediff import config as C
from changediff.checkpoint import load_checkpoint, save_checkpoint
from changediff.cli import main
from changediff.schedule import build_schedule
from changediff.textspace import build_vocab


def small(tmp_path, **extra):
    sets = {
        "data.root": tmp_path / "data",
        "paths.run": tmp_path / "run",
        "data.train_size": 8, "data.val_size": 4, "data.test_size": 4,
        "schedule.T": 20,
        "denoiser.seq_len": 12, "denoiser.d_model": 16, "denoiser.heads": 2, "denoiser.ssa_depth": 1,
        "train.max_steps": 10, "train.batch_size": 4,
    }
    sets.update(extra)
    out = []
    for k, v in sets.items():
        out += ["--set", f"{k}={v}"]
    return out


def test_end_to_end(tmp_path):
    args = small(tmp_path)
    assert main(["datagen", *args]) == 0
    assert main(["train", *args]) == 0
    run = tmp_path / "run"
    for name in ("metrics.jsonl", "metrics.json", "config.ini", "manifest.json", "checkpoint/weights.safetensors"):
        assert (run / name).is_file(), name
    assert len((run / "metrics.jsonl").read_text().splitlines()) == 10

    trace = tmp_path / "trace.csv"
    assert main(["sample", *args, "--split", "val", "--trace", str(trace)]) == 0
    lines = (run / "captions_val.tsv").read_text().splitlines()
    assert [line.split("\t")[0] for line in lines] == [f"val_{i:06d}" for i in range(4)]
    assert (run / "captions_val.tsv.manifest.json").is_file()
    assert len(trace.read_text().splitlines()) == 1 + 4 * 20

    report = tmp_path / "eval.json"
    assert main(["eval", *args, "--candidates", str(run / "captions_val.tsv"), "--output", str(report)]) == 0
    metrics = json.loads(report.read_text())
    assert metrics["n_items"] == 4 and 0.0 <= metrics["bleu4"] <= 1.0

    before = tmp_path / "data/images/test/A/test_000000.png"
    after = tmp_path / "data/images/test/B/test_000000.png"
    out = tmp_path / "one.tsv"
    assert main(["sample", *args, "--pair", str(before), str(after), "--output", str(out)]) == 0
    assert out.read_text().startswith("test_000000\t")


def test_eval_on_references_scores_one(tmp_path, capsys):
    index = FIXTURES / "levir_mini" / "LevirCCcaptions.json"
    cands = tmp_path / "c.tsv"
    cands.write_text("train_000001\ta white house appears\ntest_000001\ta house is built\n")
    assert main(["eval", "--candidates", str(cands), "--index", str(index)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["bleu4"] == pytest.approx(1.0) and report["rougeL"] == 1.0


def test_exit_codes(tmp_path):
    assert main(["train", "--set", "train.bogus=1"]) == 2
    assert main(["train", "--set", "train.lr=fast"]) == 2
    assert main(["train", "--config", str(tmp_path / "missing.ini")]) == 2
    assert main(["train", "--set", "schedule.kind=cosine"]) == 2
    assert main(["train", *small(tmp_path)]) == 3
    assert main(["sample", *small(tmp_path)]) == 3
    bad = tmp_path / "c.tsv"
    bad.write_text("nowhere_000001\ta road\n")
    assert main(["eval", "--candidates", str(bad), "--index", str(FIXTURES / "levir_mini/LevirCCcaptions.json")]) == 3
    bad.write_text("no tab here\n")
    assert main(["eval", "--candidates", str(bad), "--index", str(FIXTURES / "levir_mini/LevirCCcaptions.json")]) == 3


def test_inspect_schedule_csv(tmp_path):
    out = tmp_path / "s.csv"
    assert main(["inspect-schedule", "--set", "schedule.T=30", "--output", str(out)]) == 0
    rows = list(csv.reader(out.read_text().splitlines()))
    assert rows[0] == ["t", "alpha", "alpha_bar", "posterior_variance"]
    assert len(rows) == 31
    assert float(rows[1][3]) == 0.0
    assert float(rows[-1][2]) == build_schedule("sqrt", 30).alpha_bar(30)


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "changediff", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "inspect-schedule" in res.stdout


# -- config ------------------------------------------------------------------------------


def test_shipped_configs_parse():
    toy = C.load_config(CONFIGS / "toy.ini")
    assert toy["schedule.T"] == 200 and toy["denoiser.d_model"] == 64 and toy["denoiser.attn_residual"] is True
    full = C.load_config(CONFIGS / "levir_cc.ini")
    assert full["schedule.T"] == 2000 and full["backbone.kind"] == "resnet101"
    C.schedule_from(full)
    C.train_from(full)


def test_overrides_and_dump_round_trip(tmp_path):
    cfg = C.load_config(None, ["denoiser.ssa_depth=5", "train.deterministic=no", "schedule.alpha0=0.9"])
    assert cfg["denoiser.ssa_depth"] == 5 and cfg["train.deterministic"] is False
    path = tmp_path / "c.ini"
    path.write_text(C.dump_config(cfg))
    assert C.load_config(path) == cfg
    with pytest.raises(C.ConfigError):
        C.load_config(None, ["noequals"])
    with pytest.raises(C.ConfigError):
        C.denoiser_from(C.load_config(None, ["denoiser.ssa_depth=0"]), 16, 64)


# -- checkpoints -----------------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    vocab = build_vocab([["a", "b"]])
    model = micro_model(vocab_size=len(vocab), seed=4)
    sched = build_schedule("sqrt", 15, alpha0=0.97)
    save_checkpoint(tmp_path / "ck", model, vocab, sched, step=12)
    back, v2, s2, manifest = load_checkpoint(tmp_path / "ck")
    assert v2 == vocab and s2.T == 15 and s2.alpha0 == 0.97 and manifest["step"] == 12
    x, idi = torch.randn(2, 3, 4, dtype=torch.float64), torch.randn(2, 4, 5, dtype=torch.float64)
    assert torch.equal(back.denoise(x, 3, idi), model.denoise(x, 3, idi))
    assert torch.equal(back.embedding.weight, model.embedding.weight)

    (tmp_path / "ck" / "vocab.txt").write_text("<pad>\n<start>\n<end>\n<unk>\nzz\nyy\n")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "ck")
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nothing")


def test_tied_rounding_shares_table():
    from changediff.model import CaptionDiffusion
    from conftest import micro_config

    m = CaptionDiffusion(micro_config(), 6, tie_rounding=True)
    assert m.rounding.proj.weight is m.embedding.weight
