import json

import pytest

from edclab.artifact import read_manifest
from edclab.cli import main
from edclab.config import bundled_config_path
from edclab.post_eval import ssrs_lr

TOY = str(bundled_config_path("toy1d"))


@pytest.fixture
def run(tmp_path):
    log = tmp_path / "runs.jsonl"

    def _run(*argv):
        return main(["--cache-dir", str(tmp_path / "cache"), "--run-log", str(log), *argv])
    _run.records = lambda: [json.loads(line) for line in log.read_text().splitlines()]
    return _run


def _checksum(path):
    return read_manifest(path).artifact_checksum


@pytest.fixture
def toy_artifact(tmp_path, run):
    out = tmp_path / "art"
    assert run("condense", "--config", TOY, "--out", str(out)) == 0
    return out


def test_condense_smoke_and_determinism(tmp_path, run, toy_artifact):
    assert (toy_artifact / "manifest.json").exists()
    again = tmp_path / "art2"
    assert run("condense", "--config", TOY, "--out", str(again)) == 0
    assert _checksum(toy_artifact) == _checksum(again)
    recs = run.records()
    assert recs[0]["artifacts"]["checksum"] == recs[1]["artifacts"]["checksum"]
    assert len(recs) == 2 and all(r["subcommand"] == "condense" and r["exit_status"] == 0
                                  for r in recs)


def test_missing_dataset_names_path(tmp_path, run, capsys):
    missing = tmp_path / "nowhere" / "data.npz"
    code = run("condense", "--config", TOY, "--dataset", str(missing), "--out", str(tmp_path / "o"))
    assert code == 1
    assert str(missing) in capsys.readouterr().err
    (rec,) = run.records()
    assert rec["exit_status"] == 1 and str(missing) in rec["message"]


def test_invalid_flag_value_is_validation_error(tmp_path, run):
    assert run("condense", "--config", TOY, "--alpha", "1.5", "--out", str(tmp_path / "o")) == 1


def test_flags_override_file_and_are_echoed(tmp_path, run):
    out = tmp_path / "o"
    assert run("condense", "--config", TOY, "--iters", "7", "--seed", "3", "--out", str(out)) == 0
    (rec,) = run.records()
    assert rec["config"]["synth_iters"] == 7 and rec["config"]["seed"] == 3
    assert rec["config"]["synth_lr"] == 0.05        # from the file
    assert rec["config"]["tau"] == 4.0              # default
    assert len((out / "synthesis_log.jsonl").read_text().splitlines()) == 7


def test_label_eval_ssrs(run, toy_artifact):
    assert run("label", "--artifact", str(toy_artifact)) == 0
    assert run("eval", "--artifact", str(toy_artifact), "--schedule", "ssrs", "--zeta", "2",
               "--epochs", "12") == 0
    summary = json.loads((toy_artifact / "eval" / "summary.json").read_text())
    assert 0.0 <= summary["final_ema_acc"] <= 1.0
    lines = (toy_artifact / "eval" / "eval.jsonl").read_text().splitlines()
    lrs = [json.loads(line)["lr"] for line in lines]
    lr0 = run.records()[-1]["config"]["eval_lr"]
    assert lrs == pytest.approx([lr0 * ssrs_lr(i, 12, 2.0) for i in range(12)], abs=1e-15)
    assert len(run.records()) == 3


def test_eval_without_labels_is_rejected(run, toy_artifact):
    assert run("eval", "--artifact", str(toy_artifact)) == 1
    assert run("eval", "--artifact", str(toy_artifact), "--hard-labels") == 0


def test_tampered_artifact_exits_integrity(run, toy_artifact):
    manifest = toy_artifact / "manifest.json"
    data = json.loads(manifest.read_text())
    data["config"]["seed"] = 99
    manifest.write_text(json.dumps(data))
    assert run("eval", "--artifact", str(toy_artifact), "--hard-labels") == 3
    assert run.records()[-1]["exit_status"] == 3


def test_tampered_tensor_exits_integrity(run, toy_artifact):
    blob = toy_artifact / "images.bin"
    raw = bytearray(blob.read_bytes())
    raw[0] ^= 0xFF
    blob.write_bytes(bytes(raw))
    assert run("label", "--artifact", str(toy_artifact)) == 3


def test_verify_theory(tmp_path, run, capsys):
    report = tmp_path / "oracle.jsonl"
    assert run("verify-theory", "--report", str(report), "--trials", "10") == 0
    recs = [json.loads(line) for line in report.read_text().splitlines()]
    assert recs and all({"check", "passed", "error", "measured"} <= set(r) for r in recs)
    assert "kl_bound" in capsys.readouterr().out
    assert run("verify-theory", "--trials", "2", "--inject-bad-bound") != 0
    assert "injected" in run.records()[-1]["artifacts"]["failing"]


def test_pipeline_and_probe(tmp_path, run):
    out = tmp_path / "pipe"
    assert run("pipeline", "--config", TOY, "--iters", "50", "--epochs", "3", "--out", str(out)) == 0
    assert (out / "eval" / "summary.json").exists()
    assert run("probe", "--artifact", str(out / "artifact"), "--probes", "4", "--trials", "3",
               "--probe-batch", "2") == 0
    probe = json.loads((out / "artifact" / "probe.json").read_text())
    assert probe["hessian_fro"] >= 0 and -1 <= probe["cos_condensed"] <= 1
