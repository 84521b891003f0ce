import csv
import json
import subprocess
import sys

import pytest

from milpool import cli

SMALL_DATA = ["--strong", "6", "--weak", "6", "--unlabeled", "6", "--validation", "4", "--frames", "40",
              "--set", "num_classes=3", "--set", "feature_dim=8"]
FAST_TRAIN = ["--epochs", "2", "--confidence-epochs", "1", "--stage2-epochs", "1",
              "--set", "hidden_dims=6", "--set", "context_radius=1", "--set", "batch_size=8",
              "--set", "confidence_batch_size=4", "--set", "shift_std=4"]


def run(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert cli.main(["gen-data", "--out", str(d)] + SMALL_DATA) == 0
    return d


@pytest.fixture(scope="module")
def stage1_dir(tmp_path_factory, data_dir):
    d = tmp_path_factory.mktemp("run")
    assert cli.main(["train", "--stage", "1", "--data", str(data_dir), "--out", str(d)] + FAST_TRAIN) == 0
    return d


def test_no_command_is_usage_error(capsys):
    assert run([], capsys)[0] == 1


def test_bad_flag_is_usage_error(capsys):
    assert run(["train", "--bogus"], capsys)[0] == 1
    assert run(["train", "--stage", "3", "--data", "x", "--out", "y"], capsys)[0] == 1


def test_gen_data_reports_counts(tmp_path, capsys):
    code, out, _ = run(["gen-data", "--out", str(tmp_path / "d")] + SMALL_DATA, capsys)
    assert code == 0
    assert "strong=6 weak=6 unlabeled=6 validation=4" in out


def test_gen_data_default_counts_echoed():
    spec = cli.dataset_spec_from({}, {})
    assert spec.counts() == {"strong": 200, "weak": 150, "unlabeled": 1400, "validation": 100}


def test_gen_data_refuses_overwrite(tmp_path, capsys):
    d = str(tmp_path / "d")
    assert run(["gen-data", "--out", d] + SMALL_DATA, capsys)[0] == 0
    code, _, err = run(["gen-data", "--out", d] + SMALL_DATA, capsys)
    assert code == 2 and "--force" in err
    assert run(["gen-data", "--out", d, "--force"] + SMALL_DATA, capsys)[0] == 0


def test_gen_data_seed_checksums_repeat(tmp_path, capsys):
    outs = []
    for name in ("a", "b"):
        code, out, _ = run(["gen-data", "--seed", "7", "--out", str(tmp_path / name)] + SMALL_DATA, capsys)
        assert code == 0
        outs.append([line for line in out.splitlines() if line.startswith(("sha256", "digest"))])
    assert outs[0] == outs[1] and len(outs[0]) == 5
    _, other, _ = run(["gen-data", "--seed", "8", "--out", str(tmp_path / "c")] + SMALL_DATA, capsys)
    assert [x for x in other.splitlines() if x.startswith("digest")] != outs[0][-1:]


def test_unknown_config_key(tmp_path, capsys):
    code, _, err = run(["gen-data", "--out", str(tmp_path), "--set", "bogus=1"], capsys)
    assert code == 2 and "bogus" in err


def test_bad_config_value(tmp_path, capsys):
    assert run(["gen-data", "--out", str(tmp_path), "--set", "strong=many"], capsys)[0] == 2


def test_config_file_then_flags(tmp_path):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text("# experiment\nlam = 0.01\nalpha = 0.5\nepochs = 7\n")
    args = cli.build_parser().parse_args(["train", "--stage", "1", "--config", str(cfg), "--set", "alpha=0.25", "--epochs", "9"])
    settings = cli.merged_settings(args)
    tc = cli.train_config_from(settings, cli._train_overrides(args))
    assert (tc.lam, tc.alpha, tc.epochs) == (0.01, 0.25, 9)


def test_missing_config_file(capsys):
    assert run(["gen-data", "--config", "/nonexistent.cfg", "--out", "x"], capsys)[0] == 2


def test_missing_data_is_data_error(tmp_path, capsys):
    assert run(["train", "--stage", "1", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")], capsys)[0] == 2


def test_stage2_needs_stage1(tmp_path, data_dir, capsys):
    code, _, err = run(["train", "--stage", "2", "--data", str(data_dir), "--out", str(tmp_path)] + FAST_TRAIN, capsys)
    assert code == 2 and "stage 1" in err


def test_stage1_outputs(stage1_dir):
    for name in ("stage1_student.ckpt", "stage1_teacher.ckpt", "stage1_epochs.csv", "stage1_report.json",
                 "stage1_scores.csv", "stage1_reliability_confidence.csv", "run.json"):
        assert (stage1_dir / name).exists(), name
    meta = json.loads((stage1_dir / "run.json").read_text())
    assert "stage1" in meta["scores"]


def test_stage2_alpha_zero_marked_confidence_free(tmp_path, data_dir, stage1_dir, capsys):
    code, out, _ = run(["train", "--stage", "2", "--data", str(data_dir), "--from", str(stage1_dir),
                        "--out", str(tmp_path), "--alpha", "0"] + FAST_TRAIN, capsys)
    assert code == 0
    assert "confidence-free" in out
    meta = json.loads((tmp_path / "run.json").read_text())
    assert meta["retrain"]["confidence_free"] is True
    assert "stage2" in meta["scores"]


def test_stage2_prob09_logs_discards(tmp_path, data_dir, stage1_dir, capsys):
    code, out, _ = run(["train", "--stage", "2", "--data", str(data_dir), "--from", str(stage1_dir),
                        "--out", str(tmp_path), "--ablation", "prob09"] + FAST_TRAIN, capsys)
    assert code == 0
    line = next(x for x in out.splitlines() if x.startswith("predicted entries"))
    discarded = int(line.split("discarded:")[1])
    meta = json.loads((tmp_path / "run.json").read_text())
    assert meta["retrain"]["discarded_entries"] == discarded
    assert meta["retrain"]["ablation"] == "prob09"


def test_evaluate_oracle_perfect(tmp_path, data_dir, capsys):
    out_csv = tmp_path / "oracle.csv"
    code, out, _ = run(["evaluate", "--oracle", "--data", str(data_dir), "--segment", "--out", str(out_csv)], capsys)
    assert code == 0
    rows = list(csv.DictReader(open(out_csv)))
    assert list(rows[0].keys()) == ["class", "ER", "F1", "DEL", "INS", "Ntp", "Nfp", "Nfn", "Nref"]
    scored = [r for r in rows if int(r["Nref"]) > 0]
    assert scored and all(float(r["ER"]) == 0.0 and float(r["F1"]) == 1.0 for r in scored)
    assert (tmp_path / "oracle_segment.csv").exists()
    assert "segment" in out


def test_evaluate_checkpoint(tmp_path, data_dir, stage1_dir, capsys):
    events = tmp_path / "events.json"
    code, out, _ = run(["evaluate", "--checkpoint", str(stage1_dir / "stage1_teacher.ckpt"), "--data", str(data_dir),
                        "--events-out", str(events)], capsys)
    assert code == 0 and "event" in out and "segment" not in out
    assert len(json.loads(events.read_text())) == 4


def test_evaluate_needs_checkpoint(data_dir, capsys):
    assert run(["evaluate", "--data", str(data_dir)], capsys)[0] == 1


def test_evaluate_corrupt_checkpoint(tmp_path, data_dir, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    assert run(["evaluate", "--checkpoint", str(bad), "--data", str(data_dir)], capsys)[0] == 2


def test_report_outputs(tmp_path, stage1_dir, capsys):
    code, out, _ = run(["report", str(stage1_dir), "--out", str(tmp_path)], capsys)
    assert code == 0
    for name in ("n_curves.svg", "n_curves.csv", "er_table.svg", "er_table.csv"):
        assert (tmp_path / name).exists(), name
    rel = list(csv.reader(open(tmp_path / f"reliability_{stage1_dir.name}.csv")))
    assert len(rel) - 1 == 10
    assert (tmp_path / f"reliability_{stage1_dir.name}.svg").read_text().count("<svg") == 1
    table = list(csv.DictReader(open(tmp_path / "er_table.csv")))
    assert [r["model"] for r in table] == ["MT-SSED"]


def test_report_missing_run(tmp_path, capsys):
    assert run(["report", str(tmp_path / "nothing"), "--out", str(tmp_path / "o")], capsys)[0] == 2


def test_check_passes(capsys):
    code, out, _ = run(["check"], capsys)
    assert code == 0
    assert out.count("PASS") == 5 and "FAIL" not in out


def test_check_failure_exit_code(monkeypatch, capsys):
    import milpool.selfcheck as sc

    monkeypatch.setattr(sc, "run_all", lambda: [("broken", False, "forced")])
    assert run(["check"], capsys)[0] == 3


def test_numerical_failure_exit_code(monkeypatch, tmp_path, data_dir, capsys):
    from milpool.pipeline import NumericalFailure

    def boom(*a, **k):
        raise NumericalFailure("loss is nan")

    monkeypatch.setattr(cli, "train_stage1", boom)
    code, _, err = run(["train", "--stage", "1", "--data", str(data_dir), "--out", str(tmp_path)], capsys)
    assert code == 3 and "numerical" in err


@pytest.mark.parametrize("value,code", [("2", 0), ("zero", 2), ("0", 2)])
def test_thread_env(monkeypatch, capsys, value, code):
    monkeypatch.setenv("MILPOOL_THREADS", value)
    monkeypatch.setattr(cli, "cmd_check", lambda args: 0)
    assert run(["check"], capsys)[0] == code


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "milpool.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "gen-data" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "milpool.cli", "frobnicate"], capture_output=True, text=True)
    assert proc.returncode == 1
