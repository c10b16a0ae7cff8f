import csv
import json
from pathlib import Path

import pytest

from findna import cli
from findna.config import ConfigError, apply_overrides, build, load_source, parse_ini, resolve_seed, to_ini
from findna.seqcore import format_fasta, write_labeled_csv
from findna.synthetic import motif_dataset, motif_genome

MICRO = ["--config", "micro"]


def run(tmp_path, *argv):
    return cli.main([*argv, "--runs-dir", str(tmp_path / "runs")])


def only_run(tmp_path, command):
    dirs = sorted((tmp_path / "runs").glob(f"{command}-*"))
    assert dirs, "no run directory"
    return dirs[-1]


@pytest.fixture
def corpus(tmp_path):
    path = tmp_path / "g.fa"
    path.write_text(format_fasta([motif_genome(2_000, seed=0)]))
    return path


@pytest.fixture
def labeled(tmp_path):
    path = tmp_path / "data.csv"
    write_labeled_csv(path, motif_dataset(40, 12, seed=1))
    return path


def test_print_config_echoes_full_size_defaults(capsys):
    assert cli.main(["pretrain", "--config", "paper_defaults", "--print-config"]) == 0
    out = capsys.readouterr().out
    for needle in ("channels = 308", "hidden = 512", "num_layers = 4", "max_length = 1010", "alpha = 0.5",
                   "tau_s = 0.1", "tau_t = 0.04", "num_cls = 10", "beta = 0.996", "lambda_start = 0.996",
                   "epochs = 50", "warmup_fraction = 0.3"):
        assert needle in out, needle
    assert "lr = 0.01" in out and "weight_decay = 0.1" in out


def test_config_layering():
    vals = apply_overrides(load_source("micro"), ["distill.alpha=0.25", "mixer.hidden=4"])
    built = build(vals)
    assert built["distill"].alpha == 0.25 and built["mixer"].hidden == 4
    assert build(parse_ini(to_ini(built)))["distill"] == built["distill"]
    for bad in (["nosection"], ["distill.unknown=1"], ["distill.alpha=abc"], ["foo.bar=1"]):
        with pytest.raises(ConfigError):
            build(apply_overrides(load_source("micro"), bad))
    with pytest.raises(ConfigError):
        load_source("no_such_preset_or_file")


def test_seed_precedence(monkeypatch):
    monkeypatch.setenv("FINDNA_SEED", "17")
    assert resolve_seed(None, 3) == 17
    assert resolve_seed(5, 3) == 5
    monkeypatch.setenv("FINDNA_SEED", "x")
    with pytest.raises(ConfigError):
        resolve_seed(None)
    monkeypatch.delenv("FINDNA_SEED")
    assert resolve_seed(None, 3) == 3


def test_pretrain_zero_epochs_writes_checkpoint_and_manifest(tmp_path, capsys):
    assert run(tmp_path, "pretrain", *MICRO, "--epochs", "0") == 0
    rd = only_run(tmp_path, "pretrain")
    assert (rd / "final.ckpt").is_file()
    assert capsys.readouterr().out.strip() == str(rd / "final.ckpt")
    manifest = json.loads((rd / "run_manifest.json").read_text())
    assert manifest["command"] == "pretrain" and manifest["config"]["mixer"]["channels"] == 8
    lines = (rd / "loss.csv").read_text().splitlines()
    assert lines == [",".join(cli.LOSS_CSV_HEADER)]


def test_pretrain_is_reproducible(tmp_path, corpus):
    args = ["pretrain", *MICRO, "--corpus", str(corpus), "--windows", "6", "--window", "16",
            "--epochs", "1", "--seed", "4", "--checkpoint-every", "1"]
    assert run(tmp_path / "a", *args) == 0
    assert run(tmp_path / "b", *args) == 0
    ra, rb = only_run(tmp_path / "a", "pretrain"), only_run(tmp_path / "b", "pretrain")
    la, lb = (ra / "loss.csv").read_text(), (rb / "loss.csv").read_text()
    assert la == lb and len(la.splitlines()) == 4
    assert (ra / "final.ckpt").read_bytes() == (rb / "final.ckpt").read_bytes()
    assert (ra / "epoch001.ckpt").is_file()


def test_pretrain_usage_errors(tmp_path, capsys):
    assert run(tmp_path, "pretrain", *MICRO, "--epochs", "1") == 2
    assert run(tmp_path, "pretrain", *MICRO, "--corpus", str(tmp_path / "missing.fa")) == 2
    assert run(tmp_path, "pretrain", "--config", "micro", "--set", "mixer.channels=3") == 2
    bad = tmp_path / "bad.fa"
    bad.write_text(">x\nACGZ\n")
    assert run(tmp_path, "pretrain", *MICRO, "--corpus", str(bad)) == 2
    assert "findna pretrain" in capsys.readouterr().err


def test_probe_and_finetune_reports(tmp_path, labeled):
    assert run(tmp_path, "pretrain", *MICRO, "--epochs", "0") == 0
    ckpt = only_run(tmp_path, "pretrain") / "final.ckpt"
    for network in ("teacher", "student"):
        assert run(tmp_path, "probe", *MICRO, "--checkpoint", str(ckpt), "--data", str(labeled),
                   "--network", network, "--epochs", "2", "--batch", "8") == 0
        rd = only_run(tmp_path, "probe")
        report = json.loads((rd / f"probe_{network}.json").read_text())
        assert report["network"] == network and report["num_test"] == 4
        assert (rd / f"probe_{network}.csv").is_file() and (rd / "data_with_splits.csv").is_file()
    assert run(tmp_path, "finetune", *MICRO, "--checkpoint", str(ckpt), "--data", str(labeled),
               "--epochs", "1", "--batch", "8") == 0
    assert (only_run(tmp_path, "finetune") / "finetune_teacher.json").is_file()


def test_probe_missing_checkpoint_is_usage_error(tmp_path, labeled, capsys):
    code = run(tmp_path, "probe", *MICRO, "--checkpoint", str(tmp_path / "nope.ckpt"), "--data", str(labeled))
    assert code == 2 and "checkpoint" in capsys.readouterr().err
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"not a checkpoint")
    assert run(tmp_path, "probe", *MICRO, "--checkpoint", str(junk), "--data", str(labeled)) == 2


def test_augstats(tmp_path, capsys):
    common = ["augstats", "--random", "20", "--length", "50", "--seed", "0"]
    assert run(tmp_path, *common, "--pairs", "M+NoAug", "DITM+RN", "--assert-min", "M+NoAug") == 0
    rows = list(csv.reader((only_run(tmp_path, "augstats") / "kl.csv").open()))
    assert rows[0] == ["pair", "kl"] and [r[0] for r in rows[1:]] == ["M+NoAug", "DITM+RN"]
    assert float(rows[1][1]) < float(rows[2][1])
    assert run(tmp_path, *common, "--pairs", "DITM+RN", "M+NoAug", "--assert-min", "DITM+RN") == 1
    assert run(tmp_path, *common, "--pairs", "M+M", "--tie-seeds") == 0
    assert "M+M,0\n" in capsys.readouterr().out
    assert run(tmp_path, *common, "--pairs", "Q+M") == 2


def test_gradcheck_command(tmp_path, capsys):
    assert run(tmp_path, "gradcheck") == 0
    assert (only_run(tmp_path, "gradcheck") / "gradcheck.txt").read_text().splitlines()[-1].startswith("worst:")
    assert run(tmp_path, "gradcheck", "--tolerance", "0") == 1


def test_bench_command(tmp_path, capsys):
    assert run(tmp_path, "bench", *MICRO, "--batches", "2", "--length", "12") == 0
    rows = list(csv.DictReader((only_run(tmp_path, "bench") / "bench.csv").open()))
    assert [r["mode"] for r in rows] == ["findna", "cm_mnm"]
    assert all(float(r["ms_per_batch"]) > 0 for r in rows)
    flops = cli.full_scale_flops()
    assert flops["findna"] > flops["cm_mnm"]
    assert "ratio findna/cm_mnm" in capsys.readouterr().out


def test_run_directories_are_unique(tmp_path):
    a = cli.make_run_dir(tmp_path, "x", {"k": 1})
    b = cli.make_run_dir(tmp_path, "x", {"k": 1})
    assert a != b and a.is_dir() and b.is_dir()
