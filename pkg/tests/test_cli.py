import json
import math
import subprocess
import sys

import pytest

from emofuse.cli import build_parser, main
from emofuse.config import config_fields


@pytest.fixture
def fixture_pair(tmp_path):
    train, val = tmp_path / "train.jsonl", tmp_path / "val.jsonl"
    assert main(["gen-data", "--out", str(train), "--records", "40", "--dim", "8", "--speech-len", "3",
                 "--text-len", "2", "--seed", "1", "--holdout", "10"]) == 0
    (tmp_path / "train.holdout.jsonl").rename(val)
    (tmp_path / "train.holdout.jsonl.meta.json").rename(str(val) + ".meta.json")
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"d_z": 8, "fe_heads": 2, "d_p": 8, "d_h": 8, "lr": 1e-3,
                               "train_data": str(train), "val_data": str(val)}))
    return tmp_path, cfg


def test_gen_data_deterministic_and_histogram(tmp_path, capsys):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    for p in (a, b):
        assert main(["gen-data", "--classes", "4", "--records", "100", "--seed", "7", "--dim", "4", "--out", str(p)]) == 0
    assert a.read_bytes() == b.read_bytes()
    line = capsys.readouterr().out.splitlines()[0]
    hist = json.loads(line.split("class histogram ")[1].split(", inconsistent")[0])
    assert sum(hist) == 100 and len(hist) == 4


def test_gen_data_inconsistency_within_binomial_bounds(tmp_path, capsys):
    n, rate = 1000, 0.5
    assert main(["gen-data", "--records", str(n), "--inconsistency", str(rate), "--dim", "4",
                 "--out", str(tmp_path / "x.jsonl")]) == 0
    count = int(capsys.readouterr().out.strip().rsplit(" ", 1)[1])
    half_width = 2.576 * math.sqrt(n * rate * (1 - rate))
    assert abs(count - n * rate) <= half_width


def test_gen_data_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["gen-data", "--out", str(blocker / "x.jsonl"), "--records", "5"]) == 2


def test_train_writes_artifacts(fixture_pair):
    root, cfg = fixture_pair
    out = root / "run"
    assert main(["train", "--config", str(cfg), "--steps", "10", "--out", str(out)]) == 0
    rows = (out / "loss_log.csv").read_text().splitlines()
    assert len(rows) == 11 and rows[0].startswith("step,mse,kld,")
    assert (out / "checkpoint.bin").read_bytes()[:5] == b"DRKF1"
    metrics = json.loads((out / "metrics.json").read_text())
    assert {"train", "val", "val_discrimination"} <= set(metrics)


def test_train_log_is_reproducible(fixture_pair):
    root, cfg = fixture_pair
    logs = []
    for name in ("a", "b"):
        assert main(["train", "--config", str(cfg), "--steps", "50", "--out", str(root / name)]) == 0
        logs.append((root / name / "loss_log.csv").read_bytes())
    assert logs[0] == logs[1]
    assert main(["train", "--config", str(cfg), "--steps", "50", "--seed", "1", "--out", str(root / "c")]) == 0
    assert (root / "c" / "loss_log.csv").read_bytes() != logs[0]


def test_train_missing_dataset(tmp_path):
    assert main(["train", "--train-data", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path)]) == 2
    assert main(["train", "--out", str(tmp_path)]) == 2


def test_bad_config_values(fixture_pair):
    root, cfg = fixture_pair
    assert main(["train", "--config", str(cfg), "--tau", "0"]) == 2
    assert main(["train", "--config", str(cfg), "--fe-heads", "3"]) == 2
    bad = root / "bad.json"
    bad.write_text(json.dumps({"not_a_key": 1}))
    assert main(["train", "--config", str(bad)]) == 2


def test_unknown_flag_rejected():
    with pytest.raises(SystemExit) as info:
        main(["train", "--bogus", "1"])
    assert info.value.code == 2


def test_numerical_failure_exits_3(fixture_pair, capsys):
    root, cfg = fixture_pair
    assert main(["train", "--config", str(cfg), "--steps", "5", "--lr", "1e300", "--ae-init-scale", "1e150",
                 "--out", str(root / "nan")]) == 3
    assert "step 0" in capsys.readouterr().err


def test_eval_matches_training_metrics(fixture_pair, capsys):
    root, cfg = fixture_pair
    out = root / "run"
    assert main(["train", "--config", str(cfg), "--steps", "30", "--out", str(out)]) == 0
    assert main(["eval", "--config", str(cfg), "--checkpoint", str(out / "checkpoint.bin"), "--out", str(out)]) == 0
    assert "WACC" in capsys.readouterr().out
    trained = json.loads((out / "metrics.json").read_text())
    evaluated = json.loads((out / "eval_metrics.json").read_text())
    assert evaluated["metrics"] == trained["val"]
    assert evaluated["discrimination"] == trained["val_discrimination"]


def test_eval_wrong_width_checkpoint(fixture_pair, capsys):
    root, cfg = fixture_pair
    out = root / "run"
    assert main(["train", "--config", str(cfg), "--steps", "2", "--out", str(out)]) == 0
    wide = root / "wide.jsonl"
    assert main(["gen-data", "--out", str(wide), "--records", "8", "--dim", "16"]) == 0
    capsys.readouterr()
    assert main(["eval", "--config", str(cfg), "--d-z", "16", "--checkpoint", str(out / "checkpoint.bin"),
                 "--data", str(wide), "--out", str(out)]) == 2
    assert "shape mismatch" in capsys.readouterr().err


def test_eval_fresh_model_is_at_chance(tmp_path):
    # An untrained net maps each class cluster mostly to one class, so a single
    # model's accuracy swings widely; chance level is a statement about the
    # average over random initialisations.
    data = tmp_path / "d.jsonl"
    assert main(["gen-data", "--out", str(data), "--records", "500", "--dim", "8", "--seed", "3"]) == 0
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"d_z": 8, "fe_heads": 2, "d_p": 8, "d_h": 8, "train_data": str(data)}))
    accs = []
    for seed in range(20):
        run = tmp_path / f"r{seed}"
        assert main(["train", "--config", str(cfg), "--seed", str(seed), "--steps", "0", "--out", str(run)]) == 0
        assert main(["eval", "--config", str(cfg), "--seed", str(seed), "--checkpoint", str(run / "checkpoint.bin"),
                     "--data", str(data), "--out", str(run)]) == 0
        accs.append(json.loads((run / "eval_metrics.json").read_text())["metrics"]["acc_weighted"])
    assert abs(sum(accs) / len(accs) - 0.25) <= 0.15


def test_export_embeddings_command(fixture_pair):
    root, cfg = fixture_pair
    out = root / "run"
    assert main(["train", "--config", str(cfg), "--steps", "2", "--out", str(out)]) == 0
    for name in ("e1.csv", "e2.csv"):
        assert main(["export-embeddings", "--config", str(cfg), "--checkpoint", str(out / "checkpoint.bin"),
                     "--csv", str(root / name)]) == 0
    lines = (root / "e1.csv").read_text().splitlines()
    assert len(lines) == 11 and len(lines[0].split(",")) == 8 + 2
    assert (root / "e1.csv").read_bytes() == (root / "e2.csv").read_bytes()


def test_gradcheck_reports_nine_components(capsys):
    assert main(["gradcheck", "--trials", "1", "--coords", "2"]) == 0
    rows = [l for l in capsys.readouterr().out.splitlines() if l.endswith(")") and ("PASS" in l or "FAIL" in l)]
    names = [r.split()[0] for r in rows]
    assert len(names) == 10 and names[-1] == "total" and len(set(names[:-1])) == 9


def test_gradcheck_fails_on_corrupted_backward(monkeypatch, capsys):
    import emofuse.numcore as numcore
    monkeypatch.setattr(numcore, "_silu_grad", lambda x, s: 0.5 * s)
    assert main(["gradcheck", "--trials", "1", "--coords", "2"]) == 1
    assert "offending parameters:" in capsys.readouterr().err


def test_gradcheck_enforces_small_dims():
    assert main(["gradcheck", "--d-z", "32", "--fe-heads", "8"]) == 2
    assert main(["gradcheck", "--M", "4"]) == 2


@pytest.mark.parametrize("command", ["train", "eval", "export-embeddings", "gradcheck"])
def test_help_documents_every_config_key(command, capsys):
    with pytest.raises(SystemExit):
        build_parser().parse_args([command, "--help"])
    text = capsys.readouterr().out
    for f in config_fields():
        assert "--" + f.name.replace("_", "-") in text


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "emofuse.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "gen-data" in res.stdout
