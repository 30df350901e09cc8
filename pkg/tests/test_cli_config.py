import csv
import hashlib
import json

import numpy as np
import pytest

from udavt import cli
from udavt.config import (ExperimentConfig, default_config, dump_config, load_config, parse_config)
from udavt.errors import ConfigError

TINY_INI = """\
[experiment]
format_version = 1
seeds = 0, 1
dtype = float64

[data]
shift_level = severe
num_classes = 3
train_per_class = 4
test_per_class = 2
frame_size = 8
channels = 2
frames = 2

[model]
patch_size = 4
embed_dim = 8
heads = 2
spatial_layers = 1
temporal_layers = 1
projection_dim = 4

[phase1]
epochs = 2
batch_size = 4
eval_every = 1

[phase2]
epochs = 2
batch_size_per_domain = 4
"""


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY_INI)
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# config parsing


def test_parse_sets_fields_and_syncs_model():
    cfg = parse_config(TINY_INI)
    assert cfg.train.seeds == [0, 1] and cfg.train.dtype == "float64"
    assert cfg.model.num_classes == 3 and cfg.model.frame_size == 8 and cfg.model.frames_per_video == 2
    assert cfg.train.phase1.epochs == 2 and cfg.train.phase2.batch_size_per_domain == 4
    assert cfg.data.shift.texture_swap is True


def test_dump_round_trip():
    cfg = parse_config(TINY_INI)
    again = parse_config(dump_config(cfg))
    assert again.to_dict() == cfg.to_dict() and again.config_hash() == cfg.config_hash()
    for preset in ("identity", "mild", "severe"):
        d = default_config(preset)
        assert parse_config(dump_config(d)).to_dict() == d.to_dict()


def test_config_hash_tracks_content():
    a, b = default_config(), default_config()
    assert a.config_hash() == b.config_hash()
    b.train.phase2.alpha = 0.5
    assert a.config_hash() != b.config_hash()


@pytest.mark.parametrize("text,line,fragment", [
    ("[phase2]\nalpha = 0.1\nnum_heads = 3\n", 3, "[phase2] num_heads: unknown key"),
    ("[model]\nembed_dim = 8\nnum_classes = 4\n", 3, "set it in [data]"),
    ("[extras]\nfoo = 1\n", 1, "unknown section"),
    ("[phase1]\n\nepochs = many\n", 3, "cannot parse"),
    ("[data]\nshift_level = extreme\n", 2, "unknown shift preset"),
    ("[experiment]\nformat_version = 9\n", 2, "unsupported format_version"),
])
def test_bad_config_names_the_line(text, line, fragment):
    with pytest.raises(ConfigError) as info:
        parse_config(text, "x.ini")
    msg = str(info.value)
    assert f"x.ini:{line}" in msg and fragment in msg


def test_semantic_validation():
    with pytest.raises(ConfigError):
        parse_config("[phase2]\nlr = 0\n")
    with pytest.raises(ConfigError):
        parse_config("[data]\nnoise_std = 3\n")


def test_unknown_key_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[phase2]\nalpha = 0.1\nqueue_size = 10\n")
    assert run("gen-data", "--config", bad, "--out", tmp_path / "o") == 2
    err = capsys.readouterr().err
    assert "bad.ini:3" in err and "queue_size" in err


def test_missing_config_file_exits_2(tmp_path):
    assert run("gen-data", "--config", tmp_path / "nope.ini", "--out", tmp_path) == 2


# ---------------------------------------------------------------------------
# commands


def test_gen_data_writes_then_skips(tiny, tmp_path, capsys):
    out = tmp_path / "o"
    assert run("gen-data", "--config", tiny, "--out", out) == 0
    first = capsys.readouterr().out
    assert first.count("(written)") == 4 and "config_hash=" in first
    files = sorted((out / "data").glob("*.bin"))
    assert len(files) == 4
    digests = [hashlib.sha256(f.read_bytes()).hexdigest() for f in files]
    assert run("gen-data", "--config", tiny, "--out", out) == 0
    second = capsys.readouterr().out
    assert second.count("cache valid, skipped") == 4
    assert digests == [hashlib.sha256(f.read_bytes()).hexdigest() for f in files]


def test_out_dir_from_environment(tiny, tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_DIR_ENV, str(tmp_path / "env_out"))
    assert run("gen-data", "--config", tiny) == 0
    assert len(list((tmp_path / "env_out" / "data").glob("*.bin"))) == 4


def test_phase2_without_checkpoint_exits_2(tiny, tmp_path, capsys):
    assert run("train", "--config", tiny, "--out", tmp_path, "--phase", "2") == 2
    assert "phase-1 checkpoint" in capsys.readouterr().err


def test_unknown_method_exits_2(tiny, tmp_path):
    assert run("train", "--config", tiny, "--out", tmp_path, "--method", "dann") == 2


def test_train_outputs_and_columns(tiny, tmp_path):
    out = tmp_path / "o"
    assert run("train", "--config", tiny, "--out", out, "--phase", "1", "--seed", "0") == 0
    p1 = cli.phase1_dir(out, 0)
    assert (p1 / "checkpoint.ckpt").is_file()
    assert run("train", "--config", tiny, "--out", out, "--phase", "2", "--method", "source_only") == 0
    assert run("train", "--config", tiny, "--out", out, "--phase", "2", "--method", "udavt") == 0

    with open(cli.run_dir(out, "source_only", 0) / "metrics.csv", newline="") as fh:
        header = next(csv.reader(fh))
    assert header == list(cli.BASE_COLUMNS)

    ud = _read_csv(cli.run_dir(out, "udavt", 0) / "metrics.csv")
    assert {"loss_ib", "pair_count", "queue_fill", "pseudo_label_acc"} <= set(ud[0])
    assert [r["phase"] for r in ud] == ["2", "2"]

    cfg = load_config(tiny)
    summary = json.loads((cli.run_dir(out, "udavt", 0) / "summary.json").read_text())
    assert summary["config_hash"] == cfg.config_hash() and summary["seed"] == 0
    assert summary["artifact_version"] == cli.ARTIFACT_VERSION
    for row in ud:
        assert row["config_hash"] == cfg.config_hash() and row["seed"] == "0"


def test_explicit_checkpoint_must_match_model(tiny, tmp_path):
    out = tmp_path / "o"
    assert run("train", "--config", tiny, "--out", out, "--phase", "1") == 0
    other = tmp_path / "other.ini"
    other.write_text(TINY_INI.replace("embed_dim = 8", "embed_dim = 12"))
    ckpt = cli.phase1_dir(out, 0) / "checkpoint.ckpt"
    assert run("train", "--config", other, "--out", out, "--phase", "2", "--checkpoint", ckpt) == 2


def test_summary_json_is_byte_identical_on_rerun(tiny, tmp_path):
    blobs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert run("train", "--config", tiny, "--out", out, "--phase", "both", "--seed", "1") == 0
        blobs.append((cli.run_dir(out, "udavt", 1) / "summary.json").read_bytes())
    assert blobs[0] == blobs[1]


def test_non_finite_training_exits_3(tiny, tmp_path):
    blow = tmp_path / "blow.ini"
    blow.write_text(TINY_INI.replace("[phase1]\n", "[phase1]\nlr = 1e300\n"))
    out = tmp_path / "o"
    with np.errstate(all="ignore"):
        assert run("train", "--config", blow, "--out", out, "--phase", "both") == 3
    failure = json.loads((cli.run_dir(out, "udavt", 0) / "failure.json").read_text())
    assert failure["diagnostics"]["phase"] == 1 and failure["diagnostics"]["sample_ids"]


def test_matrix_matches_per_run_summaries(tiny, tmp_path):
    out = tmp_path / "o"
    variants = ["source_only", "udavt", "udavt_no_queue"]
    assert run("matrix", "--config", tiny, "--out", out, "--variants", ",".join(variants)) == 0
    rows = {r["variant"]: r for r in _read_csv(out / "matrix.csv")}
    assert set(rows) == set(variants)
    for v in variants:
        accs = [json.loads((cli.run_dir(out, v, s) / "summary.json").read_text())["result"]["target_test_acc"]
                for s in (0, 1)]
        assert float(rows[v]["mean"]) == pytest.approx(np.mean(accs), abs=1e-12)
        assert float(rows[v]["std"]) == pytest.approx(np.std(accs), abs=1e-12)
        assert rows[v]["n"] == "2" and rows[v]["seeds"] == "0 1" and rows[v]["failed_seeds"] == ""
    meta = json.loads((out / "matrix.json").read_text())
    assert meta["seeds"] == [0, 1]


def test_matrix_rejects_bad_arguments(tiny, tmp_path):
    assert run("matrix", "--config", tiny, "--out", tmp_path, "--variants", "nope") == 2
    assert run("matrix", "--config", tiny, "--out", tmp_path, "--seeds", "a,b") == 2


def test_export_attention(tiny, tmp_path):
    out = tmp_path / "o"
    assert run("train", "--config", tiny, "--out", out, "--phase", "1") == 0
    ckpt = cli.phase1_dir(out, 0) / "checkpoint.ckpt"
    dest = tmp_path / "att.json"
    assert run("export-attention", "--config", tiny, "--out", out, "--checkpoint", ckpt,
               "--samples", 5, "--out-file", dest) == 0
    doc = json.loads(dest.read_text())
    assert len(doc["records"]) == 5 and doc["config_hash"] == load_config(tiny).config_hash()
    for r in doc["records"]:
        assert abs(sum(r["weights"]) - 1) < 1e-6 and len(set(r["top2"])) == 2
    assert run("export-attention", "--config", tiny, "--out", out, "--checkpoint", ckpt,
               "--samples", 0) == 2
    assert run("export-attention", "--config", tiny, "--out", out, "--checkpoint", tmp_path / "x.ckpt") == 2


def test_default_config_is_valid():
    for preset in ("identity", "mild", "severe"):
        cfg = default_config(preset)
        assert isinstance(cfg, ExperimentConfig)
        cfg.validate()
