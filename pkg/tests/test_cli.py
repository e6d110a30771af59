import csv
import json
import os
import subprocess
import sys

import pytest

from mfsmp.cli import Results, emit_report, main, run_experiment
from mfsmp.config import parse_config


def write(path, text):
    path.write_text(text)
    return str(path)


ZERO_H = "[experiment]\npreset = zero-h\n[grid]\nK = 8\n[ensemble]\nM_outer = 8\nN_inner = 8\n"


def test_forward_zero_h(tmp_path):
    cfg = write(tmp_path / "z.ini", ZERO_H)
    assert main(["forward", "--config", cfg, "--out", str(tmp_path / "out")]) == 0
    with open(tmp_path / "out" / "zero-h_forward.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["experiment_id", "quantity", "index", "value", "stderr"]
    mart = [r for r in rows if r["quantity"] == "L_martingale"]
    assert len(mart) == 9
    assert all(float(r["value"]) == 1.0 and float(r["stderr"]) == 0.0 for r in mart)
    summary = json.loads((tmp_path / "out" / "zero-h_forward.json").read_text())
    assert summary["passed"] is True and len(summary["plan_hash"]) == 64


def test_taylor_schema():
    cfg = parse_config(
        "[experiment]\npreset = smp-reference\n[grid]\nK = 32\n[ensemble]\nM_outer = 8\nN_inner = 8\n"
        "[spike]\neps_ladder = 0.4, 0.2, 0.1, 0.05\n"
    )
    res = run_experiment(cfg, "taylor")
    t = res.summary["taylor"]
    for key in ("slope_e0", "slope_e1", "slope_e2"):
        assert isinstance(t[key], float)
    assert set(res.checks) == {"taylor.X", "taylor.L", "taylor.U"}


def test_same_config_same_bytes(tmp_path):
    cfg = write(tmp_path / "z.ini", ZERO_H)
    outs = []
    for n, threads in enumerate(("1", "3")):
        out = tmp_path / f"o{n}"
        assert main(["forward", "--config", cfg, "--out", str(out), "--threads", threads]) == 0
        outs.append(out)
    for name in ("zero-h_forward.csv", "zero-h_forward.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_seed_override_changes_hash(tmp_path):
    cfg = write(tmp_path / "z.ini", ZERO_H)
    main(["forward", "--config", cfg, "--out", str(tmp_path / "a")])
    main(["forward", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "8"])
    a = json.loads((tmp_path / "a" / "zero-h_forward.json").read_text())
    b = json.loads((tmp_path / "b" / "zero-h_forward.json").read_text())
    assert a["plan_hash"] != b["plan_hash"] and b["config"]["seed"] == 8


def test_exit_code_error(tmp_path, capsys):
    bad = write(tmp_path / "bad.ini", "[experiment]\npreset = zero-h\n[grid]\nK = -4\n")
    assert main(["forward", "--config", bad, "--out", str(tmp_path)]) == 1
    assert "error [" in capsys.readouterr().err
    assert main(["forward", "--config", str(tmp_path / "missing.ini")]) == 1


def test_exit_code_failed_check(tmp_path, capsys):
    # a coarse linear-filtering run misses the filter tolerance
    cfg = write(
        tmp_path / "lf.ini",
        "[experiment]\npreset = linear-filtering\n[grid]\nK = 4\n[ensemble]\nM_outer = 4\nN_inner = 2\n",
    )
    assert main(["filter-check", "--config", cfg, "--out", str(tmp_path)]) == 2
    assert "FAIL filter" in capsys.readouterr().out


def test_threads_flag_validated(tmp_path):
    cfg = write(tmp_path / "z.ini", ZERO_H)
    assert main(["forward", "--config", cfg, "--threads", "0", "--out", str(tmp_path)]) == 1


def test_emit_report_empty_and_nested(tmp_path):
    res = Results("e", "forward")
    out = tmp_path / "a" / "b" / "c"
    csv_path, json_path = emit_report(res, str(out))
    assert open(csv_path).read() == "experiment_id,quantity,index,value,stderr\n"
    assert json.loads(open(json_path).read()) == {}


def test_emit_report_overwrites(tmp_path):
    res = Results("e", "forward")
    res.add("x", 0, 1.5, 0.1)
    emit_report(res, str(tmp_path))
    res.rows[0] = ("x", 0, 2.5, 0.1)
    csv_path, _ = emit_report(res, str(tmp_path))
    assert "2.5" in open(csv_path).read() and "1.5" not in open(csv_path).read()
    assert sorted(os.listdir(tmp_path)) == ["e_forward.csv", "e_forward.json"]


def test_emit_report_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError):
        emit_report(Results("e", "forward"), str(blocker / "sub"))


def test_console_entry_point(tmp_path):
    cfg = write(tmp_path / "z.ini", ZERO_H)
    proc = subprocess.run(
        [sys.executable, "-m", "mfsmp.cli", "forward", "--config", cfg, "--out", str(tmp_path)],
        capture_output=True,
        text=True,
        env=dict(os.environ, MFSMP_THREADS="2"),
    )
    assert proc.returncode == 0, proc.stderr
    assert "PASS forward.L_martingale" in proc.stdout
