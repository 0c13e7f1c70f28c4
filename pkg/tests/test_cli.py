import hashlib
import json

import numpy as np
import pytest

from maskpredict import cli, cmlm
from maskpredict import experiments as ex
from maskpredict.data import BOS, EOS, LENGTH, MASK, PAD


def run(*argv):
    return cli.run([str(a) for a in argv])


def digest(directory):
    h = hashlib.sha256()
    for p in sorted(directory.iterdir()):
        h.update(p.name.encode() + p.read_bytes())
    return h.hexdigest()


GEN = ("--task", "dict_swap", "--vocab-size", "10", "--min-len", "2", "--max-len", "8",
       "--n-train", "120", "--n-valid", "20", "--n-test", "12")
TRAIN = ("--steps", "30", "--max-tokens", "256", "--warmup", "5")


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    d = {"data": root / "data", "ar": root / "ar", "dist": root / "dist", "raw": root / "raw",
         "student": root / "student"}
    assert run("gen-data", *GEN, "--out", d["data"]) == 0
    assert run("train", "--data", d["data"], "--model", "ar", *TRAIN, "--out", d["ar"]) == 0
    assert run("distill", "--data", d["data"], "--teacher", d["ar"] / "model.ckpt", "--out", d["dist"]) == 0
    assert run("train", "--data", d["data"], *TRAIN, "--out", d["raw"]) == 0
    assert run("train", "--data", d["dist"], *TRAIN, "--out", d["student"]) == 0
    return d


def test_gen_data_twice_is_identical(tmp_path):
    assert run("gen-data", "--task", "copy", "--seed", "1", "--n-train", "50", "--out", tmp_path / "a") == 0
    assert run("gen-data", "--task", "copy", "--seed", "1", "--n-train", "50", "--out", tmp_path / "b") == 0
    for name in ("train.tsv", "valid.tsv", "test.tsv", "vocab.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_usage_errors_exit_1(tmp_path, capsys):
    assert run("gen-data", "--bogus", "1", "--out", tmp_path / "x") == 1
    assert "usage" in capsys.readouterr().err
    assert run("frobnicate") == 1
    assert run() == 1
    assert run("train", "--data", tmp_path / "missing", "--out", tmp_path / "y") == 1
    assert "does not exist" in capsys.readouterr().err
    assert run("decode", "--out", tmp_path / "z") == 1
    assert run("gen-data", "--n-train", "many", "--out", tmp_path / "w") == 1
    assert run("gen-data", "--help") == 0


def test_runtime_failure_exits_2(tmp_path, capsys):
    assert run("gen-data", "--task", "nonsense", "--out", tmp_path / "d") == 2
    assert "unknown task" in capsys.readouterr().err


def test_config_file_then_flags(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("# sizes\ntask = reverse\nn_train=40\nn-valid=7\n")
    assert run("gen-data", "--config", cfg, "--n-train", "30", "--out", tmp_path / "r") == 0
    resolved = dict(line.split("=", 1) for line in (tmp_path / "r" / "config.txt").read_text().splitlines())
    assert resolved["command"] == "gen-data"
    assert (resolved["task"], resolved["n_train"], resolved["n_valid"]) == ("reverse", "30", "7")
    assert len((tmp_path / "r" / "train.tsv").read_text().splitlines()) == 30
    cfg.write_text("colour=blue\n")
    assert run("gen-data", "--config", cfg, "--out", tmp_path / "s") == 1


def test_default_run_directory_from_env(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.RUNS_ENV, str(tmp_path))
    assert run("gen-data", "--n-train", "20", "--n-valid", "5", "--n-test", "5") == 0
    assert run("gen-data", "--n-train", "20", "--n-valid", "5", "--n-test", "5") == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == ["gen-data-001", "gen-data-002"]


def test_pipeline_outputs(pipeline):
    for name in ("ar", "raw", "student"):
        assert (pipeline[name] / "model.ckpt").is_file()
        log_lines = (pipeline[name] / "train.log").read_text().splitlines()
        assert sum(line.startswith("train step=") for line in log_lines) == 30
    original = (pipeline["data"] / "train.tsv").read_text().splitlines()
    distilled = (pipeline["dist"] / "train.tsv").read_text().splitlines()
    assert len(original) == len(distilled)
    assert [line.split("\t")[0] for line in original] == [line.split("\t")[0] for line in distilled]
    for name in ("valid.tsv", "test.tsv"):
        assert (pipeline["dist"] / name).read_bytes() == (pipeline["data"] / name).read_bytes()


def test_decode_evaluate_and_inputs_untouched(pipeline, tmp_path, capsys):
    before = digest(pipeline["data"])
    out = tmp_path / "dec"
    assert run("decode", "--data", pipeline["data"], "--checkpoint", pipeline["raw"] / "model.ckpt",
               "--T", "3", "--ell", "2", "--out", out) == 0
    hyps = (out / "hyp.txt").read_text().splitlines()
    cands = (out / "candidates.txt").read_text().splitlines()
    assert len(hyps) == len(cands) == 12
    capsys.readouterr()
    assert run("evaluate", "--data", pipeline["data"], "--hyp", out / "hyp.txt",
               "--candidates", out / "candidates.txt", "--out", tmp_path / "ev") == 0
    report = json.loads(capsys.readouterr().out)
    assert set(report) == {"bleu", "repetition_rate", "bucket_bleu", "length_precision", "n_sentences"}
    assert report["n_sentences"] == 12 and 0 <= report["bleu"] <= 100
    assert json.loads((tmp_path / "ev" / "metrics.json").read_text()) == report
    (tmp_path / "short.txt").write_text("a b\n")
    assert run("evaluate", "--data", pipeline["data"], "--hyp", tmp_path / "short.txt",
               "--out", tmp_path / "ev2") == 2
    assert digest(pipeline["data"]) == before


def test_decode_gold_length_T1_is_single_pass_argmax(pipeline, tmp_path):
    out = tmp_path / "gold"
    assert run("decode", "--data", pipeline["data"], "--checkpoint", pipeline["raw"] / "model.ckpt",
               "--gold-length", "--T", "1", "--out", out) == 0
    task = ex.load_task(pipeline["data"])
    model = ex.load_model(pipeline["raw"] / "model.ckpt")
    want = []
    for (s, t) in task.test:
        logits = cmlm.cmlm_forward(task.vocab.encode(s), cmlm.all_masked(len(t)), model).token_logits.data.copy()
        logits[:, [PAD, MASK, LENGTH, BOS, EOS]] = -np.inf
        want.append(" ".join(task.vocab.decode(logits.argmax(-1).tolist())))
    assert (out / "hyp.txt").read_text().splitlines() == want


def test_analyze_and_bench(pipeline, tmp_path):
    out = tmp_path / "an"
    assert run("analyze", "--data", pipeline["data"], "--cmlm", pipeline["student"] / "model.ckpt",
               "--raw-cmlm", pipeline["raw"] / "model.ckpt", "--out", out) == 0
    for name in ("repetitions.tsv", "buckets.tsv", "length_candidates.tsv", "distillation.tsv"):
        assert len((out / name).read_text().splitlines()) >= 2, name
    b = tmp_path / "bench"
    assert run("bench", "--data", pipeline["data"], "--cmlm", pipeline["raw"] / "model.ckpt",
               "--ar", pipeline["ar"] / "model.ckpt", "--T", "2,3", "--ell", "1", "--b", "1,5",
               "--repeats", "1", "--limit", "6", "--out", b) == 0
    lines = (b / "bench.tsv").read_text().splitlines()
    assert lines[0].split("\t") == ["config", "seconds", "sent_per_sec", "bleu", "speedup"]
    assert len(lines) == 1 + 2 + 2
