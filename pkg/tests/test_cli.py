import json
import subprocess
import sys

import pytest

from mudok.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main

TINY = {
    "synthetic": {"items_per_domain": 30, "n_users": 12, "interactions_per_user": 8, "text_examples_per_domain": 100,
                  "feature_dim": 32},
    "pretrain": {"batch_size": 16, "epochs": 2, "d_feat": 32, "d_model": 16, "heads": 2, "tau": 0.5, "lam": 0.5,
                 "learning_rate": 3e-3, "cross_batch_negatives": True},
    "tuning": {"epochs": 2},
}


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "tiny.json").write_text(json.dumps(TINY))
    return tmp_path


def _run(workdir, *args):
    return main([*args, "--workdir", str(workdir), "--config", "tiny.json", "--output-dir", "out"])


def test_census_writes_all_report_files(tmp_path, capsys):
    assert main(["census", "--workdir", str(tmp_path), "--output-dir", "r"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "tensor-walk" in out and "closed-form" in out
    for suffix in ("json", "txt", "tsv", "png"):
        assert (tmp_path / "r" / f"census.{suffix}").stat().st_size > 0


def test_no_figures_flag(tmp_path):
    assert main(["census", "--workdir", str(tmp_path), "--output-dir", "r", "--no-figures"]) == EXIT_OK
    assert not (tmp_path / "r" / "census.png").exists()


def test_pretrain_then_tune_then_eval(workdir):
    assert _run(workdir, "pretrain") == EXIT_OK
    out = workdir / "out"
    assert (out / "encoder.mdkc").exists() and (out / "encoder.json").exists()
    assert (out / "pretrain.png").read_bytes()[:4] == b"\x89PNG"
    rows = (out / "pretrain.tsv").read_text().splitlines()
    assert rows[0].startswith("name\tl_con\tl_kg") and len(rows) == 3
    assert _run(workdir, "tune-rec", "--checkpoint", "out/encoder.mdkc") == EXIT_OK
    report = json.loads((out / "tune-rec.json").read_text())
    assert report["meta"]["frozen_check"]["ok"]
    assert _run(workdir, "eval", "--checkpoint", "out/tuned_rec.mdkc") == EXIT_OK
    ev = json.loads((out / "eval.json").read_text())["rows"][0]
    assert ev["Recall@5"] == pytest.approx(report["rows"][0]["Recall@5"], abs=1e-6)


def test_tune_text_base(workdir):
    assert _run(workdir, "tune-text", "--mode", "base") == EXIT_OK
    row = json.loads((workdir / "out" / "tune-text.json").read_text())["rows"][0]
    assert {"Acc", "macro-F1", "micro-F1"} <= set(row)


def test_gen_synth_round_trip(workdir):
    assert main(["gen-synth", "--workdir", str(workdir), "--config", "tiny.json", "--out", "bench"]) == EXIT_OK
    assert _run(workdir, "tune-rec", "--mode", "base", "--manifest", "bench/manifest.json") == EXIT_OK


def test_transfer_and_ablate(workdir):
    assert _run(workdir, "transfer", "--no-full") == EXIT_OK
    names = [r["name"] for r in json.loads((workdir / "out" / "transfer.json").read_text())["rows"]]
    assert names == ["OOD-pretrained", "no-pretrain"]
    assert _run(workdir, "ablate") == EXIT_OK


@pytest.mark.parametrize("args", [
    ["pretrain", "--bogus"],
    ["tune-rec", "--mode", "fancy"],
    ["pretrain", "--exclude", "books", "music", "movies"],
    ["tune-rec", "--target", "nowhere"],
    ["eval"],
])
def test_configuration_errors_exit_1(workdir, args):
    assert _run(workdir, *args) == EXIT_CONFIG


def test_missing_config_file(tmp_path):
    assert main(["pretrain", "--workdir", str(tmp_path), "--config", "absent.json"]) == EXIT_CONFIG


def test_runtime_failure_exits_2(workdir):
    (workdir / "broken.mdkc").write_bytes(b"MDKC\x01")
    assert _run(workdir, "eval", "--checkpoint", "broken.mdkc") == EXIT_RUNTIME


def test_console_script_module_entry(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mudok.cli", "census", "--workdir", str(tmp_path), "--no-figures",
                           "--entities", "100", "--items", "10"], capture_output=True, text=True)
    assert proc.returncode == 0 and "tensor-walk" in proc.stdout
