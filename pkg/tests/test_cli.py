import json
from pathlib import Path

import numpy as np
import pytest

from qfcsim.cli import main
from qfcsim.timetag import load_timetags

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

LIFETIME = """
[run]
seed = 3
pump_mW = 110
[schedule]
pulses_per_sequence = 1
n_repetitions = 7500000
"""


def write(tmp_path, text, name="run.ini"):
    p = tmp_path / name
    p.write_text(text)
    return p


def run(*argv):
    return main([str(a) for a in argv])


def test_version(capsys):
    with pytest.raises(SystemExit) as ei:
        main(["--version"])
    assert ei.value.code == 0
    assert "qfcsim" in capsys.readouterr().out


def test_simulate_is_deterministic(tmp_path):
    cfg = write(tmp_path, LIFETIME)
    assert run("simulate", "--config", cfg, "--out", tmp_path / "a") == 0
    assert run("simulate", "--config", cfg, "--out", tmp_path / "b", "--threads", "3") == 0
    for name in ("visible.qtag", "telecom.qtag"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert ma["files"] == mb["files"]
    assert ma["config"]["schedule"]["n_repetitions"] == 7_500_000
    assert run("simulate", "--config", cfg, "--out", tmp_path / "c", "--seed", "4") == 0
    assert (tmp_path / "c" / "visible.qtag").read_bytes() != (tmp_path / "a" / "visible.qtag").read_bytes()


def test_simulate_then_analyze(tmp_path):
    cfg = write(tmp_path, LIFETIME)
    run("simulate", "--config", cfg, "--out", tmp_path / "sim")
    vis = load_timetags(tmp_path / "sim" / "visible.qtag")
    assert 5000 < len(vis) < 6500
    assert run("analyze", "--config", cfg, "--out", tmp_path / "va", tmp_path / "sim" / "visible.qtag") == 0
    s = json.loads((tmp_path / "va" / "summary.json").read_text())["channels"]["0"]
    # signal-window photons per excitation: 7.1e-4 * 0.80
    expect = 7.1e-4 * 0.80 * 7.5e6
    got = s["rates"]["p_signal"] * 7.5e6
    assert abs(got - expect) < 4 * np.sqrt(expect)
    assert abs(s["lifetime_fit"]["params"]["tau_ns"] - 12.9) < 1.5
    assert abs(s["arrival_offset_ns"]) < 1.5
    rows = (tmp_path / "va" / "histogram_ch0.csv").read_text().splitlines()
    assert rows[0] == "bin_start_ps,count" and len(rows) == 201

    assert run("analyze", "--config", cfg, "--out", tmp_path / "ta", tmp_path / "sim" / "telecom.qtag") == 0
    t = json.loads((tmp_path / "ta" / "summary.json").read_text())["channels"]["1"]
    assert abs(t["arrival_offset_ns"] - 90.0) < 1.5
    assert t["path_delay_ns"] == 90.0


def test_analyze_empty_file(tmp_path):
    from qfcsim.timetag import TimeTagStream, make_records, save_timetags
    cfg = write(tmp_path, LIFETIME)
    save_timetags(TimeTagStream(make_records([]), 200_000), tmp_path / "empty.qtag")
    assert run("analyze", "--config", cfg, "--out", tmp_path / "o", tmp_path / "empty.qtag") == 0
    s = json.loads((tmp_path / "o" / "summary.json").read_text())["channels"]["0"]
    assert s["n_tags"] == 0 and s["rates"]["p_signal"] == 0
    assert "empty" in s["flags"] and s["lifetime_fit"] is None


def test_missing_config_no_outputs(tmp_path, capsys):
    out = tmp_path / "out"
    assert run("simulate", "--config", tmp_path / "nope.ini", "--out", out) == 2
    assert not out.exists()
    assert "nope.ini" in capsys.readouterr().err


def test_bad_config_line_number(tmp_path, capsys):
    cfg = write(tmp_path, "[run]\nseed = 1\n[emitter]\nlifetime_nss = 3\n")
    assert run("plan", "--config", cfg, "--out", tmp_path / "o") == 2
    assert "run.ini:4:" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_data_errors_exit_3(tmp_path):
    cfg = write(tmp_path, LIFETIME)
    bad = tmp_path / "bad.qtag"
    bad.write_bytes(b"NOPE" + bytes(40))
    assert run("analyze", "--config", cfg, "--out", tmp_path / "o", bad) == 3
    assert run("analyze", "--config", cfg, "--out", tmp_path / "o", tmp_path / "missing.qtag") == 3
    run("simulate", "--config", cfg, "--out", tmp_path / "sim")
    raw = (tmp_path / "sim" / "visible.qtag").read_bytes()
    (tmp_path / "cut.qtag").write_bytes(raw[:-7])
    assert run("analyze", "--config", cfg, "--out", tmp_path / "o", tmp_path / "cut.qtag") == 3
    other = write(tmp_path, LIFETIME + "pulse_spacing_ns = 100\n", "other.ini")
    assert run("analyze", "--config", other, "--out", tmp_path / "o", tmp_path / "sim" / "visible.qtag") == 3
    assert not (tmp_path / "o").exists() or not any((tmp_path / "o").iterdir())


def test_sweep_argument_errors(tmp_path):
    cfg = write(tmp_path, LIFETIME)
    assert run("sweep", "--config", cfg, "--out", tmp_path / "o", "--powers", "50,100") == 2
    assert run("sweep", "--config", cfg, "--out", tmp_path / "o", "--powers", "a,b") == 2
    # all below 20 mW: the maximum is not bracketed
    assert run("sweep", "--config", cfg, "--out", tmp_path / "o", "--powers", "2,5,10,15,19") == 4
    assert not (tmp_path / "o").exists() or not any((tmp_path / "o").iterdir())


def test_sweep_outputs(tmp_path):
    cfg = write(tmp_path, LIFETIME)
    powers = ",".join(str(p) for p in range(10, 401, 39))
    assert run("sweep", "--config", cfg, "--out", tmp_path / "s", "--powers", powers) == 0
    fits = json.loads((tmp_path / "s" / "fits.json").read_text())
    assert abs(fits["efficiency_fit"]["params"]["K"] / 9610 - 1) < 0.05
    assert len(fits["points"]) == 11
    header = (tmp_path / "s" / "sweep.csv").read_text().splitlines()[0]
    assert header.startswith("pump_mW,p_signal,p_signal_err,p_noise,p_noise_err,snr")
    assert (tmp_path / "s" / "snr_curve.csv").exists()


def test_sweep_zero_signal(tmp_path):
    cfg = write(tmp_path, LIFETIME + "[emitter]\np_photon_per_pulse = 0\n")
    assert run("sweep", "--config", cfg, "--out", tmp_path / "z", "--powers",
               ",".join(str(p) for p in range(10, 401, 39))) == 0
    e = json.loads((tmp_path / "z" / "fits.json").read_text())["efficiency_fit"]
    assert abs(e["params"]["p_max"]) <= 3 * e["std_errors"]["p_max"]


HBT_OFF = """
[run]
seed = 2
hbt = true
[emitter]
p_photon_per_pulse = 0.05
shelve_prob = 0
[schedule]
n_repetitions = 200000
"""


def test_g2_shelving_off_side_peaks_flat(tmp_path):
    cfg = write(tmp_path, HBT_OFF)
    assert run("simulate", "--config", cfg, "--out", tmp_path / "sim") == 0
    a, b = tmp_path / "sim" / "visible_a.qtag", tmp_path / "sim" / "visible_b.qtag"
    assert run("g2", "--config", cfg, "--out", tmp_path / "g", a, b) == 0
    g = json.loads((tmp_path / "g" / "g2.json").read_text())
    assert g["k"] == list(range(-5, 6))
    for k, v, e in zip(g["k"], g["g2"], g["g2_err"]):
        if k == 0:
            assert v < 0.05
        else:
            assert abs(v - 1) < 4 * e
    assert run("g2", "--config", cfg, "--out", tmp_path / "g2", a, a) == 2
    copy = tmp_path / "copy.qtag"
    copy.write_bytes(a.read_bytes())
    assert run("g2", "--config", cfg, "--out", tmp_path / "g2", a, copy) == 2
    assert not (tmp_path / "g2").exists()


def test_g2_chunk_size_invariant(tmp_path, monkeypatch):
    from qfcsim import cli
    cfg = write(tmp_path, HBT_OFF.replace("shelve_prob = 0", "shelve_prob = 0.05\ndark_mean_pulses = 10"))
    assert run("simulate", "--config", cfg, "--out", tmp_path / "sim") == 0
    a, b = tmp_path / "sim" / "visible_a.qtag", tmp_path / "sim" / "visible_b.qtag"
    assert run("g2", "--config", cfg, "--out", tmp_path / "big", a, b) == 0
    monkeypatch.setattr(cli, "READ_CHUNK_RECORDS", 997)
    assert run("g2", "--config", cfg, "--out", tmp_path / "small", b, a) == 0
    big = json.loads((tmp_path / "big" / "g2.json").read_text())
    small = json.loads((tmp_path / "small" / "g2.json").read_text())
    assert big["raw"] == small["raw"][::-1]
    assert big["raw"][6] > 500


def test_plan_variants(tmp_path):
    assert run("plan", "--config", CONFIGS / "plan.ini", "--out", tmp_path / "p") == 0
    rep = json.loads((tmp_path / "p" / "plan.json").read_text())
    assert 2.3 <= rep["crossover_km"] <= 2.9
    assert abs(rep["crossover_km"] - rep["closed_form_km"]) < 1e-3
    assert (tmp_path / "p" / "rates.csv").read_text().startswith("separation_km,rate_unconverted,rate_converted")

    eq = write(tmp_path, "[planner]\neta_conversion = 1\nqe_telecom = 0.8\n", "eq.ini")
    assert run("plan", "--config", eq, "--out", tmp_path / "q") == 0
    assert json.loads((tmp_path / "q" / "plan.json").read_text())["crossover_km"] == 0.0

    flat = write(tmp_path, "[planner]\nalpha_telecom_db_per_km = 8\n", "flat.ini")
    assert run("plan", "--config", flat, "--out", tmp_path / "r") == 0
    rep = json.loads((tmp_path / "r" / "plan.json").read_text())
    assert rep["crossover_km"] is None and "never changes" in rep["no_crossover"]
