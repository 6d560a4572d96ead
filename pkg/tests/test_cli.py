import hashlib
import io
import json
import struct

import pytest

from hermit import cli
from hermit.corpus import parse_conll, parse_conll_predictions
from hermit.model import load

SMALL = ["--set", "embedding_mode=trainable-lookup", "--set", "embedding_dim=8",
         "--set", "hidden_size=8", "--set", "attention_width=4",
         "--set", "max_epochs=2", "--set", "patience=2", "--set", "lr=0.01"]


def run(capsys, *argv, stdin=None, monkeypatch=None):
    if stdin is not None:
        monkeypatch.setattr("sys.stdin", io.StringIO(stdin))
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert cli.main(["train", "--data", "toy", "--out", str(out), "--seed", "1", *SMALL]) == 0
    return out


# ------------------------------------------------------------------- train

def test_train_default_config_writes_checkpoint_and_history(tmp_path, capsys):
    code, out, _ = run(capsys, "train", "--data", "toy", "--out", tmp_path,
                       "--set", "max_epochs=2", "--set", "patience=2")
    assert code == 0 and "best epoch" in out
    model, extra = load(tmp_path / "model.hmt")
    assert model.config.hidden_size == 200 and model.config.embedding_dim == 1024
    history = (tmp_path / "history.jsonl").read_text().splitlines()
    assert 1 <= len(history) <= 2
    assert extra["best_epoch"] in (1, 2)


def test_train_ablation_flag(tmp_path, capsys):
    code, _, _ = run(capsys, "train", "--data", "toy", "--out", tmp_path,
                     "--ablation=-sa-cn-crf", *SMALL)
    assert code == 0
    cfg = load(tmp_path / "model.hmt")[0].config
    assert not (cfg.use_self_attention or cfg.use_shortcuts or cfg.use_crf)


def test_train_twice_is_reproducible(tmp_path, trained, capsys):
    code, _, _ = run(capsys, "train", "--data", "toy", "--out", tmp_path, "--seed", "1", *SMALL)
    assert code == 0
    assert (tmp_path / "model.hmt").read_bytes() == (trained / "model.hmt").read_bytes()
    assert (tmp_path / "history.jsonl").read_text() == (trained / "history.jsonl").read_text()


def test_manifest_checksums(trained):
    manifest = json.loads((trained / "manifest.json").read_text())
    assert manifest["command"] == "train" and manifest["seed"] == 1
    ckpt = manifest["outputs"]["checkpoint"]
    assert ckpt["sha256"] == hashlib.sha256((trained / "model.hmt").read_bytes()).hexdigest()
    assert manifest["config"]["model"]["hidden_size"] == 8
    assert manifest["started"] <= manifest["finished"]


# --------------------------------------------------------------------- tag

def test_tag_plain_text(trained, capsys, monkeypatch):
    code, out, _ = run(capsys, "tag", "--model", trained / "model.hmt",
                       stdin="where can i find starbucks ?\n", monkeypatch=monkeypatch)
    assert code == 0
    rows = out.strip().splitlines()
    assert len(rows) == 6 and all(len(r.split()) == 4 for r in rows)
    assert [r.split()[0] for r in rows] == "where can i find starbucks ?".split()


def test_tag_empty_input(trained, capsys, monkeypatch):
    code, out, _ = run(capsys, "tag", "--model", trained / "model.hmt", stdin="",
                       monkeypatch=monkeypatch)
    assert (code, out) == (0, "")


def test_tag_conll_keeps_gold(trained, fixtures, capsys):
    code, out, _ = run(capsys, "tag", "--model", trained / "model.hmt", "--format", "conll",
                       "--input", fixtures / "eval_gold.conll")
    assert code == 0
    pairs = parse_conll_predictions(out)
    assert [g for g, _ in pairs] == parse_conll((fixtures / "eval_gold.conll").read_text())


def test_tag_then_eval(trained, fixtures, tmp_path, capsys):
    pred = tmp_path / "pred.conll"
    _, out, _ = run(capsys, "tag", "--model", trained / "model.hmt", "--format", "conll",
                    "--input", fixtures / "eval_gold.conll")
    pred.write_text(out)
    code, text, _ = run(capsys, "eval", "--gold", fixtures / "eval_gold.conll", "--pred", pred)
    assert code == 0 and "combined" in text


def test_tag_rejects_bad_checkpoint_version(trained, tmp_path, capsys, monkeypatch):
    blob = bytearray((trained / "model.hmt").read_bytes())
    blob[4:8] = struct.pack("<I", 99)
    bad = tmp_path / "bad.hmt"
    bad.write_bytes(bytes(blob))
    code, _, err = run(capsys, "tag", "--model", bad, stdin="hello\n", monkeypatch=monkeypatch)
    assert code == 2 and "version" in err


# -------------------------------------------------------------------- eval

def test_eval_gold_against_itself(fixtures, capsys, tmp_path):
    gold = fixtures / "eval_gold.conll"
    code, _, _ = run(capsys, "eval", "--gold", gold, "--pred", gold, "--out", tmp_path / "m.tsv")
    assert code == 0
    values = {}
    for line in (tmp_path / "m.tsv").read_text().splitlines():
        task, metric, value = line.split("\t")[:3]
        values[f"{task}.{metric}"] = float(value)
    for key in ("da.f1", "fr.f1", "ar.f1", "intent.f1", "combined.f1", "combined.em"):
        assert values[key] == 1.0


def test_eval_golden_file(fixtures, capsys, tmp_path):
    code, _, _ = run(capsys, "eval", "--gold", fixtures / "eval_gold.conll",
                     "--pred", fixtures / "eval_pred.conll", "--out", tmp_path / "m.tsv")
    assert code == 0
    assert (tmp_path / "m.tsv").read_text() == (fixtures / "eval_golden.tsv").read_text()
    assert (tmp_path / "manifest.json").exists()


def test_eval_misaligned_files(fixtures, capsys, tmp_path):
    short = tmp_path / "short.conll"
    text = (fixtures / "eval_gold.conll").read_text()
    short.write_text(text.rsplit("\n\n", 2)[0] + "\n")
    code, _, err = run(capsys, "eval", "--gold", fixtures / "eval_gold.conll", "--pred", short)
    assert code == 2 and err


def test_eval_token_mismatch_names_sentence(fixtures, capsys, tmp_path):
    text = (fixtures / "eval_gold.conll").read_text().replace("kitchen", "garden")
    other = tmp_path / "other.conll"
    other.write_text(text)
    code, _, err = run(capsys, "eval", "--gold", fixtures / "eval_gold.conll", "--pred", other)
    assert code == 2 and "e2" in err


# ---------------------------------------------------------------- crossval

def test_crossval_two_folds_and_self_compare(tmp_path, capsys):
    out = tmp_path / "cv"
    code, text, _ = run(capsys, "crossval", "--data", "toy", "--k", "2", "--out", out, *SMALL)
    assert code == 0
    folds = (out / "folds.tsv").read_text().splitlines()
    assert {line.split("\t")[0] for line in folds} == {"0", "1"}
    agg = (out / "aggregate.tsv").read_text()
    assert "combined\tf1\t" in agg and "combined.f1" in text
    code, text, _ = run(capsys, "crossval", "--compare", out / "folds.tsv", out / "folds.tsv")
    assert code == 0 and "p=1.0000" in text


# ----------------------------------------------------------------- convert

def test_convert_calendar(fixtures, capsys):
    code, out, _ = run(capsys, "convert", "--nlubm-in", fixtures / "calendar.jsonl")
    assert code == 0
    rows = [r for r in out.splitlines() if r and not r.startswith("#")]
    assert len(rows) == 8 and all(len(r.split()) == 4 for r in rows)
    assert rows[1].split()[3] == "B-event_name"


def test_convert_bad_json(tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{not json\n")
    assert run(capsys, "convert", "--nlubm-in", bad)[0] == 2


# ------------------------------------------------------------ usage/config

def test_usage_errors_exit_one(capsys):
    assert run(capsys, "train")[0] == 1
    assert run(capsys, "nonsense")[0] == 1
    assert run(capsys, "train", "--data", "toy", "--out", "x", "--set", "bogus=1")[0] == 1


def test_config_parsing():
    model, train = cli.parse_config_text(
        "# comment\nhidden_size = 32\nuse_crf = false\nlr = 0.01  # inline\n"
        "embedding_source = none\n")
    assert model == {"hidden_size": 32, "use_crf": False, "embedding_source": None}
    assert train == {"lr": 0.01}
    with pytest.raises(cli.UsageError):
        cli.parse_config_text("hidden_size = many")
    with pytest.raises(cli.UsageError):
        cli.parse_config_text("just words")


def test_flag_overrides_config_file(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("hidden_size = 6\nmax_epochs = 1\npatience = 1\n")
    code, _, _ = run(capsys, "train", "--data", "toy", "--config", cfg, "--out", tmp_path / "o",
                     "--set", "embedding_mode=trainable-lookup", "--set", "embedding_dim=4",
                     "--set", "hidden_size=5")
    assert code == 0
    assert load(tmp_path / "o" / "model.hmt")[0].config.hidden_size == 5
