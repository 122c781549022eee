import json
import subprocess
import sys
import wave

import numpy as np
import pytest

from atisr.cli import main

SMALL = {
    "seed": 3,
    "data": {"n_train": 8, "n_dev": 2, "n_test": 3, "min_chars": 3, "max_chars": 5},
    "arch": {"proj_dim": 12, "enc_hidden": 8, "dec_hidden": 16, "emb_dim": 8, "att_dim": 8},
    "teacher": {"epochs": 2, "batch_size": 4},
    "student": {"epochs": 2, "batch_size": 4},
}


def run_pipeline(root):
    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "exp.json"
    cfg.write_text(json.dumps(SMALL))
    c = ["--config", str(cfg)]
    assert main(["gen-data", *c, "--out", str(root / "data")]) == 0
    assert main(["train-teacher", *c, "--data", str(root / "data"), "--out", str(root / "teacher")]) == 0
    assert main(["distill", *c, "--data", str(root / "data"), "--teacher", str(root / "teacher"),
                 "--look-ahead", "1", "--out", str(root / "seg")]) == 0
    assert main(["train-student", *c, "--data", str(root / "seg"), "--state", "keep", "--init", "last-char",
                 "--out", str(root / "student")]) == 0
    reports = []
    for name, model, mode in (("topline", "teacher", "full"), ("baseline", "teacher", "baseline"),
                              ("atisr", "student", "isr")):
        out = root / "reports" / f"{name}.json"
        assert main(["eval", *c, "--model", str(root / model), "--data", str(root / "data"),
                     "--mode", mode, "--label", name, "--out", str(out)]) == 0
        reports.append(str(out))
    assert main(["decode", *c, "--model", str(root / "student"), "--data", str(root / "data"),
                 "--mode", "isr", "--out", str(root / "hyps.jsonl")]) == 0
    assert main(["report", *c, *reports, "--out", str(root / "table.txt")]) == 0
    return reports


def test_end_to_end_and_byte_identical(tmp_path):
    a = run_pipeline(tmp_path / "a")
    b = run_pipeline(tmp_path / "b")
    for ra, rb in zip(a, b):
        da, db = json.loads(open(ra).read()), json.loads(open(rb).read())
        embedded = da["provenance"]["config"]
        assert embedded["seed"] == 3 and embedded["data"] == SMALL["data"]
        # reports embed the manifest path; everything else must match byte for byte
        da["provenance"].pop("manifest"), db["provenance"].pop("manifest")
        assert json.dumps(da, sort_keys=True) == json.dumps(db, sort_keys=True)
    assert (tmp_path / "a" / "table.txt").read_bytes() == (tmp_path / "b" / "table.txt").read_bytes()
    student = json.loads((tmp_path / "a" / "student" / "model.json").read_text())
    assert student["meta"]["isr"]["look_ahead"] == 1
    assert student["meta"]["teacher_hash"]
    hyps = [json.loads(l) for l in (tmp_path / "a" / "hyps.jsonl").read_text().splitlines()]
    assert len(hyps) == 3 and all({"id", "steps", "transcript", "offsets"} <= set(h) for h in hyps)


def test_same_dir_rerun_byte_identical(tmp_path):
    run_pipeline(tmp_path)
    first = {p.name: p.read_bytes() for p in (tmp_path / "reports").iterdir()}
    run_pipeline(tmp_path)
    assert first == {p.name: p.read_bytes() for p in (tmp_path / "reports").iterdir()}


def test_missing_checkpoint(tmp_path, capsys):
    main(["gen-data", "--config", str(_cfg(tmp_path)), "--out", str(tmp_path / "data")])
    code = main(["eval", "--model", str(tmp_path / "nope"), "--data", str(tmp_path / "data"),
                 "--out", str(tmp_path / "r.json")])
    assert code == 1
    assert str(tmp_path / "nope") in capsys.readouterr().err


def _cfg(tmp_path):
    p = tmp_path / "exp.json"
    p.write_text(json.dumps(SMALL))
    return p


def test_unknown_flag_exit_2():
    r = subprocess.run([sys.executable, "-m", "atisr", "eval", "--bogus"], capture_output=True, text=True)
    assert r.returncode == 2 and "usage" in r.stderr


def test_unknown_config_key(tmp_path, capsys):
    (tmp_path / "bad.json").write_text('{"sed": 1}')
    assert main(["gen-data", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path)]) == 1
    assert "sed" in capsys.readouterr().err


def test_featurize(tmp_path):
    t = np.arange(16000) / 16000
    pcm = (0.3 * np.sin(2 * np.pi * 440 * t) * 32767).astype("<i2")
    with wave.open(str(tmp_path / "a.wav"), "wb") as w:
        w.setnchannels(1), w.setsampwidth(2), w.setframerate(16000)
        w.writeframes(pcm.tobytes())
    (tmp_path / "list.tsv").write_text("utt1\ta.wav\thello\n")
    assert main(["featurize", "--input", str(tmp_path / "list.tsv"), "--out", str(tmp_path / "feats")]) == 0
    rec = json.loads((tmp_path / "feats" / "train.jsonl").read_text())
    assert rec["frames"] == 77 and rec["dim"] == 80 and rec["transcript"] == "hello"
