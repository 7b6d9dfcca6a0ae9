import csv
import hashlib
import json

import pytest

from dastraffic import cli, sim


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    assert run("simulate", "--site", "palacio", "--seconds", 150, "--seed", 7, "--out", root / "sim") == 0
    assert run("preprocess", "--input", root / "sim", "--band", "0.1:30", "--out", root / "pre") == 0
    assert run("featurize", "--input", root / "pre", "--deltas", "--spatial", "--segment-s", 10,
               "--out", root / "feat") == 0
    return root


def test_simulate_contract(pipeline):
    out = pipeline / "sim"
    assert {p.name for p in out.iterdir()} == {"scene.dasb", "annotations.jsonl", "scene.json", "manifest.json"}
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "simulate" and manifest["seed"] == 7
    for name, digest in manifest["outputs"].items():
        assert hashlib.sha256((out / name).read_bytes()).hexdigest() == digest
    assert set(manifest["seed_streams"]) >= {"sim", "folds", "init", "dropout", "search"}
    assert sim.read_dasb(out / "scene.dasb").shape == (3, 150 * 250)


def test_featurize_writes_324_wide_segments(pipeline):
    from dastraffic.features import read_fseq
    segs = sorted((pipeline / "feat" / "segments").glob("*.fseq"))
    assert len(segs) == 17
    seq = read_fseq(segs[0])
    assert seq.D == 324 and seq.T == 17 and seq.sps == (0, 1, 2)


def test_replay_is_byte_identical(pipeline, tmp_path):
    assert run("replay", pipeline / "feat" / "manifest.json", "--out", tmp_path / "again") == 0
    for p in sorted((pipeline / "feat" / "segments").glob("*.fseq")):
        assert (tmp_path / "again" / "segments" / p.name).read_bytes() == p.read_bytes()


def test_train_transfer_export(pipeline, tmp_path):
    assert run("train", "--input", pipeline / "feat", "--arch", "bi-TA", "--hidden", 4, "--epochs", 2,
               "--folds", 3, "--out", tmp_path / "tr") == 0
    metrics = json.loads((tmp_path / "tr" / "metrics.json").read_text())
    assert 0 <= metrics["acc"] <= 100 and metrics["params"] > 0
    assert run("transfer", "--model", tmp_path / "tr" / "model.mdl", "--target", pipeline / "feat",
               "--source", pipeline / "feat", "--split", tmp_path / "tr" / "metrics.json",
               "--groups", "A:1-3", "--out", tmp_path / "tf") == 0
    summary = json.loads((tmp_path / "tf" / "transfer.json").read_text())
    assert set(summary) == {"A", "source"} and "drop_pp" in summary["A"]
    assert run("export", "--model", tmp_path / "tr" / "model.mdl", "--input", pipeline / "feat",
               "--segment", "sp1_0003", "--out", tmp_path / "ex") == 0
    assert (tmp_path / "ex" / "sp1_0003_s1_TA.csv").exists()


def test_export_without_attention_fails(pipeline, tmp_path, capsys):
    assert run("train", "--input", pipeline / "feat", "--arch", "lstm", "--hidden", 3, "--epochs", 1,
               "--folds", 3, "--out", tmp_path / "tr") == 0
    assert run("export", "--model", tmp_path / "tr" / "model.mdl", "--input", pipeline / "feat",
               "--out", tmp_path / "ex") == 2
    assert "nothing to export" in capsys.readouterr().err


def test_validation_errors_exit_2(pipeline, tmp_path):
    assert run("simulate", "--site", "granada", "--out", tmp_path / "x") == 2
    assert run("simulate", "--seconds", 30, "--out", tmp_path / "x") == 2
    assert run("preprocess", "--input", tmp_path / "missing", "--out", tmp_path / "y") == 2
    assert run("preprocess", "--input", pipeline / "sim", "--band", "40:20", "--out", tmp_path / "y") == 2
    assert run("train", "--input", pipeline / "feat", "--arch", "TA-SA-TA", "--out", tmp_path / "z") == 2
    assert run("featurize", "--input", pipeline / "pre", "--bogus", "--out", tmp_path / "z") == 2
    assert run("transfer", "--model", tmp_path / "none.mdl", "--target", pipeline / "feat",
               "--out", tmp_path / "t") == 2


def test_corrupt_input_exit_2(pipeline, tmp_path):
    bad = tmp_path / "bad"
    bad.mkdir()
    raw = bytearray((pipeline / "sim" / "scene.dasb").read_bytes())
    raw[4] = 9
    (bad / "scene.dasb").write_bytes(bytes(raw))
    (bad / "annotations.jsonl").write_text("")
    assert run("preprocess", "--input", bad, "--out", tmp_path / "o") == 2


@pytest.mark.slow
def test_ablate_all_gives_24_rows(pipeline, tmp_path):
    assert run("ablate", "--input", pipeline / "feat", "--archs", "all", "--trials", 5, "--folds", 2,
               "--epochs", 1, "--space-hidden", "3:4", "--space-layers", "1:1", "--out", tmp_path / "ab") == 0
    rows = list(csv.reader((tmp_path / "ab" / "report.csv").open()))
    assert len(rows) == 25
    assert rows[0][:6] == ["Model", "Acc(%)", "F1(%)", "#Param(M)", "RI-Acc(%)", "RPI(%)"]
    assert {r[0] for r in rows[1:]} == {a for a in cli.layers.ARCHS} | {f"{a}+Δ" for a in cli.layers.ARCHS}
