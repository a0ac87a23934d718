from __future__ import annotations

import csv
import json
import subprocess
import sys

import pytest

from hybridnorm.cli import main
from hybridnorm.diagnostics import LEMMAS

SMALL_MODEL = ["model.layers=2", "model.d_model=8", "model.heads=2", "model.vocab_size=20",
               "model.context_length=8", "train.batch_size=2", "train.dataset_length=400",
               "train.eval_batches=1"]


def _rows(path):
    with open(path) as f:
        return list(csv.reader(f))


def test_flops_needs_no_seed(tmp_path, capsys):
    assert main(["flops", "--out-dir", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "flops.csv")
    assert len(rows) == 3
    row = dict(zip(rows[0], rows[2]))
    assert row["scheme"] == "HybridNorm" and row["flops_ratio"] == "1/3328"
    assert "HybridNorm" in capsys.readouterr().out


def test_missing_seed_is_usage_error(tmp_path, capsys):
    assert main(["gradcheck", "--out-dir", str(tmp_path)]) == 2
    assert "seed" in capsys.readouterr().err


@pytest.mark.parametrize(
    "argv,field",
    [
        (["bounds", "--seed", "1", "bounds.trials=0"], "bounds.trials"),
        (["bounds", "--seed", "1", "bounds.colour=red"], "bounds.colour"),
        (["train", "--seed", "1", "model.layers=0"], "model.layers"),
        (["train", "--seed", "1", "train.lr_peak=fast"], "train.lr_peak"),
        (["gradcheck", "--seed", "1", "gradcheck.variants=[Foo]"], "gradcheck.variants"),
        (["profile", "--seed", "1", "profile.steps=[1, 999]"], "profile.steps"),
    ],
)
def test_config_errors_name_the_field(tmp_path, capsys, argv, field):
    assert main(argv + ["--out-dir", str(tmp_path)]) == 2
    assert f"config error: {field}" in capsys.readouterr().err


def test_bad_flag_exits_two():
    with pytest.raises(SystemExit) as info:
        main(["train", "--bogus"])
    assert info.value.code == 2


def test_config_file_and_override_precedence(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("seed: 4\ngradcheck:\n  variants: [QKV]\n  seeds: 3\n  dims: [[3, 4, 2]]\n")
    out = tmp_path / "out"
    assert main(["gradcheck", "--config", str(cfg), "--out-dir", str(out), "gradcheck.seeds=1"]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["seed"] == 4 and man["config"]["gradcheck.seeds"] == 1
    assert man["inputs"]["overrides"] == ["gradcheck.seeds=1"]
    assert len(_rows(out / "gradcheck.csv")) == 1 + 4


def test_corrupted_jacobian_fails_gradcheck(tmp_path, capsys):
    fwd, jac = LEMMAS["PreQK"]

    def broken(x, w):
        j = jac(x, w)
        j.dS_dWK.matrix[...] *= 1.01
        return j

    lemmas = {**LEMMAS, "PreQK": (fwd, broken)}
    code = main(["gradcheck", "--seed", "0", "--out-dir", str(tmp_path), "gradcheck.seeds=2"], _lemmas=lemmas)
    assert code == 1
    err = capsys.readouterr().err
    assert "FAIL PreQK dWK" in err and "dWQ" not in err
    assert json.loads((tmp_path / "manifest.json").read_text())["status"] == "fail"


def test_bounds_csv_rows_and_gates(tmp_path):
    out = tmp_path / "b"
    args = ["bounds", "--seed", "3", "--out-dir", str(out), "bounds.trials=4", "bounds.dims=[[3,4,2]]"]
    assert main(args) == 0
    rows = _rows(out / "bounds.csv")
    assert len(rows) == 1 + 3 * 4 * 4
    keys = {(r[0], r[4], r[5]) for r in rows[1:]}
    assert len(keys) == 3 * 4 * 4
    coupling = {r[0]: r for r in _rows(out / "coupling.csv")[1:]}
    assert float(coupling["PreNorm"][3]) == pytest.approx(5.0) and float(coupling["QKV"][3]) == 1.0


def test_printed_gate_reports_violations(tmp_path):
    # the seed-7 instance contradicts the printed value-weight bound
    code = main(["bounds", "--seed", "0", "--out-dir", str(tmp_path), "bounds.gate=printed",
                 "bounds.variants=[QKV]", "bounds.trials=100"])
    assert code == 1


def test_train_manifest_replay_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--seed", "2", "--out-dir", str(a), "train.total_steps=6", "train.warmup_steps=2",
                 "train.lr_peak=3e-3"] + SMALL_MODEL) == 0
    man = json.loads((a / "manifest.json").read_text())
    assert man["config"]["train.lr_peak"] == 0.003
    assert main(["train", "--config", str(a / "manifest.json"), "--out-dir", str(b)]) == 0
    man_b = json.loads((b / "manifest.json").read_text())
    assert man_b["outputs"] == man["outputs"] and set(man["outputs"]) == {"metrics.csv", "eval.csv", "checkpoint.bin"}
    for name in man["outputs"]:
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_manifest_command_mismatch(tmp_path):
    assert main(["flops", "--out-dir", str(tmp_path)]) == 0
    assert main(["train", "--config", str(tmp_path / "manifest.json"), "--out-dir", str(tmp_path / "x")]) == 2


def test_profile_outputs(tmp_path):
    args = ["profile", "--seed", "1", "--out-dir", str(tmp_path), "profile.schemes=[HybridNorm]",
            "profile.steps=[1, 3]", "profile.batch=2", "train.total_steps=5", "train.warmup_steps=1"] + SMALL_MODEL
    assert main(args) == 0
    rows = _rows(tmp_path / "profile_HybridNorm.csv")
    assert rows[0] == ["run_id", "scheme", "init", "seed", "step", "layer", "metric", "value", "divergent"]
    assert len(rows) == 1 + 2 * 2 * 3
    assert {r[4] for r in rows[1:]} == {"1", "3"}
    recs = json.loads((tmp_path / "profile_HybridNorm.json").read_text())
    assert [r["step"] for r in recs] == [1, 3]


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "hybridnorm", "flops", "--out-dir", str(tmp_path), "flops.d=96"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "PreNorm" in res.stdout
