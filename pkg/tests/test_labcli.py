import json

import numpy as np
import pytest

from rostelab.labcli import load_net_dump, main
from rostelab.qnet import forward


def run_cli(*argv):
    return main(list(argv))


def read(path):
    return path.read_bytes()


def test_fwht_check_default_sweep(tmp_path):
    out = tmp_path / "o"
    assert run_cli("fwht-check", "--out", str(out), "--seed", "1") == 0
    assert (out / "results.csv").exists()
    assert (out / "manifest.json").exists()
    assert (out / "config.json").exists()


def test_fwht_check_unsupported_dim(tmp_path, capsys):
    cfgf = tmp_path / "c.json"
    cfgf.write_text(json.dumps({"dims": [48]}))
    code = run_cli("fwht-check", "--config", str(cfgf), "--out", str(tmp_path / "o"))
    assert code == 2
    assert "power-of-two" in capsys.readouterr().err


def test_prop1_trials_zero_is_config_error(tmp_path):
    cfgf = tmp_path / "c.json"
    cfgf.write_text(json.dumps({"trials": 0}))
    assert run_cli("prop1", "--config", str(cfgf), "--out", str(tmp_path / "o")) == 2


def test_prop1_small_grid_passes_and_is_deterministic(tmp_path):
    cfgf = tmp_path / "c.json"
    cfgf.write_text(json.dumps({"trials": 200, "dims": [16, 64], "bits": [2, 4]}))
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_cli("prop1", "--config", str(cfgf), "--out", str(a), "--seed", "3") == 0
    assert run_cli("prop1", "--config", str(cfgf), "--out", str(b), "--seed", "3") == 0
    assert read(a / "results.csv") == read(b / "results.csv")


def test_unknown_config_key_rejected(tmp_path):
    cfgf = tmp_path / "c.json"
    cfgf.write_text(json.dumps({"bogus": 1}))
    assert run_cli("prop1", "--config", str(cfgf), "--out", str(tmp_path / "o")) == 2


def test_fig4_outlier_ordering(tmp_path):
    cfgf = tmp_path / "c.json"
    cfgf.write_text(json.dumps({"T": 60, "data_count": 256}))
    out = tmp_path / "o"
    assert run_cli("fig4", "--config", str(cfgf), "--out", str(out), "--seed", "0") == 0
    rows = (out / "results.csv").read_text().splitlines()
    assert rows[0] == "step,e_ste,e_roste"
    for row in rows[1:]:
        step, e_ste, e_roste = row.split(",")
        if int(step) > 10:
            assert float(e_roste) < float(e_ste)


def test_fig4_no_outlier_control_runs(tmp_path):
    cfgf = tmp_path / "c.json"
    cfgf.write_text(json.dumps({"T": 30, "data_count": 128, "outlier_scale": 1.0}))
    assert run_cli("fig4", "--config", str(cfgf), "--out", str(tmp_path / "o")) == 0


def test_train_dump_roundtrip_reproduces_forward(tmp_path):
    cfgf = tmp_path / "c.json"
    cfgf.write_text(json.dumps({"T": 40, "data_count": 128}))
    out = tmp_path / "o"
    assert run_cli("train", "--config", str(cfgf), "--out", str(out), "--seed", "5") == 0
    net, blob = load_net_dump(out / "model.json")
    net2, _ = load_net_dump(out / "model.json")
    x = np.random.default_rng(0).standard_normal((7, net.layers[0].in_dim))
    a, _ = forward(net, x)
    b, _ = forward(net2, x)
    assert np.max(np.abs(a - b)) <= 1e-12
    assert blob["completed_steps"] == 40


def test_train_resume_continues_identically(tmp_path):
    full_cfg = tmp_path / "full.json"
    full_cfg.write_text(json.dumps({"T": 80, "data_count": 128}))
    out_full = tmp_path / "full"
    assert run_cli("train", "--config", str(full_cfg), "--out", str(out_full), "--seed", "5") == 0

    short_cfg = tmp_path / "short.json"
    short_cfg.write_text(json.dumps({"T": 40, "data_count": 128}))
    out_short = tmp_path / "short"
    assert run_cli("train", "--config", str(short_cfg), "--out", str(out_short), "--seed", "5") == 0

    res_cfg = tmp_path / "res.json"
    res_cfg.write_text(
        json.dumps({"T": 80, "data_count": 128, "resume_from": str(out_short / "model.json")})
    )
    out_res = tmp_path / "res"
    assert run_cli("train", "--config", str(res_cfg), "--out", str(out_res), "--seed", "5") == 0

    full_rows = {
        r.split(",")[0]: r for r in (out_full / "results.csv").read_text().splitlines()[1:]
    }
    res_rows = {
        r.split(",")[0]: r for r in (out_res / "results.csv").read_text().splitlines()[1:]
    }
    overlap = [s for s in res_rows if int(s) > 40]
    assert overlap
    for s in overlap:
        assert res_rows[s] == full_rows[s]


def test_select_heuristic_quality(tmp_path):
    cfgf = tmp_path / "c.json"
    cfgf.write_text(json.dumps({"instances": 25}))
    out = tmp_path / "o"
    assert run_cli("select", "--config", str(cfgf), "--out", str(out), "--seed", "1") == 0


def test_config_echo_reproduces_run(tmp_path):
    cfgf = tmp_path / "c.json"
    cfgf.write_text(json.dumps({"T": 30, "data_count": 128}))
    a = tmp_path / "a"
    assert run_cli("fig4", "--config", str(cfgf), "--out", str(a), "--seed", "2") == 0
    echoed = json.loads((a / "config.json").read_text())
    echo_cfg = tmp_path / "echo.json"
    keep = {k: v for k, v in echoed.items() if k not in ("experiment", "output_dir", "threads")}
    echo_cfg.write_text(json.dumps(keep))
    b = tmp_path / "b"
    assert run_cli("fig4", "--config", str(echo_cfg), "--out", str(b)) == 0
    assert read(a / "results.csv") == read(b / "results.csv")


def test_env_seed_override(tmp_path, monkeypatch):
    cfgf = tmp_path / "c.json"
    cfgf.write_text(json.dumps({"T": 20, "data_count": 128}))
    monkeypatch.setenv("ROSTE_SEED", "9")
    out = tmp_path / "o"
    assert run_cli("fig4", "--config", str(cfgf), "--out", str(out), "--seed", "2") == 0
    echoed = json.loads((out / "config.json").read_text())
    assert echoed["seed"] == 9
