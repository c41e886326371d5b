from pathlib import Path

import pytest

from mmichat.cli import EXIT_CODES, main

ROOT = Path(__file__).resolve().parents[1]
TINY = str(ROOT / "configs" / "tiny.ini")


def run(*argv):
    return main(list(argv))


def top1(path):
    rows = [l.split("\t") for l in Path(path).read_text().splitlines() if not l.startswith("#")]
    return [r[2] for r in rows if r[1] == "1"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert run("--config", TINY, "--out-dir", str(out), "prepare") == 0
    assert run("--config", TINY, "--out-dir", str(out), "train") == 0
    return out


def test_eval_identity(tmp_path, capsys):
    f = tmp_path / "ref.txt"
    f.write_text("hello there my friend\nhow are you today\n")
    assert run("--out-dir", str(tmp_path / "o"), "eval", "--hyp", str(f), "--ref", str(f)) == 0
    assert "BLEU       100.00" in capsys.readouterr().out
    kv = (tmp_path / "ref.txt.report.kv").read_text()
    assert "bleu:1.000000" in kv


def test_eval_length_mismatch(tmp_path, capsys):
    (tmp_path / "h").write_text("a\nb\n")
    (tmp_path / "r").write_text("a\n")
    code = run("--out-dir", str(tmp_path / "o"), "eval", "--hyp", str(tmp_path / "h"),
               "--ref", str(tmp_path / "r"))
    assert code == EXIT_CODES["input"]
    assert capsys.readouterr().err.startswith("error: input:")


def test_antilm_lambda_zero_matches_baseline(trained):
    out = str(trained)
    assert run("--config", TINY, "--out-dir", out, "decode", "--split", "dev",
               "--output", str(trained / "b.nbest")) == 0
    assert run("--config", TINY, "--out-dir", out, "decode", "--split", "dev", "--mode", "anti_lm",
               "--lambda", "0", "--gamma-len", "0", "--output", str(trained / "a.nbest")) == 0
    # anti_lm rows also carry LM scores, so compare the responses themselves
    assert "\n".join(top1(trained / "a.nbest")).encode() == "\n".join(top1(trained / "b.nbest")).encode()


def test_rerank_lambda_zero_keeps_order(trained):
    out = str(trained)
    assert run("--config", TINY, "--out-dir", out, "decode", "--split", "dev") == 0
    assert run("--config", TINY, "--out-dir", out, "rerank", "--split", "dev", "--lambda", "0",
               "--output", str(trained / "r.nbest")) == 0
    base = trained / "decode" / "dev.baseline.nbest"
    assert top1(trained / "r.nbest") == top1(base)


def test_tune_and_use_tuned(trained, capsys):
    out = str(trained)
    assert run("--config", TINY, "--out-dir", out, "decode", "--split", "dev") == 0
    assert run("--config", TINY, "--out-dir", out, "tune", "--mode", "bidi") == 0
    assert "dev_bleu=" in capsys.readouterr().out
    assert (trained / "tune" / "bidi.weights").is_file()
    assert run("--config", TINY, "--out-dir", out, "rerank", "--split", "dev", "--use-tuned") == 0
    assert run("--config", TINY, "--out-dir", out, "tune", "--mode", "anti_lm", "--method", "mert") == 0
    assert (trained / "manifests" / "tune.json").is_file()


def test_greedy_decode_and_eval(trained, capsys):
    out = str(trained)
    assert run("--config", TINY, "--out-dir", out, "decode", "--split", "test", "--mode", "greedy") == 0
    assert run("--config", TINY, "--out-dir", out, "eval", "--split", "test", "--system", "greedy") == 0
    assert capsys.readouterr().out.startswith("greedy: ")


def test_missing_artifact(tmp_path, capsys):
    code = run("--config", TINY, "--out-dir", str(tmp_path), "decode")
    assert code == EXIT_CODES["missing-artifact"]
    assert capsys.readouterr().err.startswith("error: missing-artifact:")


def test_config_violations_listed(tmp_path, capsys):
    code = run("--config", TINY, "--out-dir", str(tmp_path), "--set", "train.batch_size=0",
               "--set", "decode.beam_size=0", "train")
    assert code == EXIT_CODES["config"]
    err = capsys.readouterr().err
    assert "batch_size" in err and "beam_size" in err


def test_unknown_key(tmp_path, capsys):
    assert run("--out-dir", str(tmp_path), "--set", "train.nope=1", "train") == EXIT_CODES["config"]
    assert "train.nope" in capsys.readouterr().err


def test_missing_data_paths(tmp_path, capsys):
    assert run("--out-dir", str(tmp_path), "prepare") == EXIT_CODES["config"]
    assert "data.train" in capsys.readouterr().err


def test_prepare_from_files(tmp_path):
    for split in ("train", "dev", "test"):
        (tmp_path / f"{split}.tsv").write_text("hello there\thi you\nhow are you\tfine thanks\n" * 3)
    args = ["--out-dir", str(tmp_path / "o"), "--set", "data.min_count=1", "prepare"]
    args += [f"--{s}={tmp_path / (s + '.tsv')}" for s in ("train", "dev", "test")]
    assert run(*args) == 0
    assert "hello" in (tmp_path / "o" / "vocab.txt").read_text().split()
    # inputs untouched
    assert (tmp_path / "train.tsv").read_text().count("\n") == 6


def test_subcommand_flags_after_command(tmp_path, capsys):
    assert run("train", "--out-dir", str(tmp_path), "--set", "train.clip_norm=0") == EXIT_CODES["config"]
    assert "clip" in capsys.readouterr().err
