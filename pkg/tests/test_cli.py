import math
import re
from collections import Counter

import numpy as np
import pytest

from cos2phi import BiasPoint, Truncation
from cos2phi import cli
from cos2phi import paramfit as pf
from cos2phi.units import TABLE_I_CIRCUIT


def _run(tmp_path, *argv, name="out"):
    out = tmp_path / name
    code = cli.main([*argv, "--out", str(out)])
    return code, out


def _body(path):
    return [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]


def test_spectrum_rows_per_transition(tmp_path):
    code, out = _run(tmp_path, "spectrum", "--flux-sweep", "pi±0.05", "--n", "101")
    assert code == 0
    rows = [r.split(",") for r in _body(out / "spectrum.csv")]
    assert rows[0] == ["phi_ext_rad", "N_g", "qp_parity", "from_label", "to_label", "freq_GHz",
                       "abs_mel_N", "abs_mel_sinphi"]
    by_flux = Counter(r[0] for r in rows[1:])
    assert len(by_flux) == 101
    # every bias point lists the same set of transitions
    per_point = set(by_flux.values())
    assert len(per_point) == 1
    assert len(rows) - 1 == 101 * per_point.pop()


def test_spectrum_rerun_is_byte_identical(tmp_path):
    a = _run(tmp_path, "spectrum", "--n", "5", "--flux-sweep", "3:3.2", name="a")[1]
    b = _run(tmp_path, "spectrum", "--n", "5", "--flux-sweep", "3:3.2", name="b")[1]
    assert (a / "spectrum.csv").read_bytes() == (b / "spectrum.csv").read_bytes()


def test_header_carries_config_hash(tmp_path):
    _, out = _run(tmp_path, "spectrum", "--phi-ext", "pi")
    head = [ln for ln in (out / "spectrum.csv").read_text().splitlines() if ln.startswith("#")]
    assert head[0].startswith("# cos2phi ")
    assert re.fullmatch(r"# config_sha256 [0-9a-f]{64}", head[1])
    _, other = _run(tmp_path, "spectrum", "--phi-ext", "0.9pi", name="other")
    assert (other / "spectrum.csv").read_text().splitlines()[1] != head[1]


def test_sweet_spot_doublet_row(tmp_path):
    _, out = _run(tmp_path, "spectrum", "--phi-ext", "pi")
    rows = [r.split(",") for r in _body(out / "spectrum.csv")[1:]]
    f = [float(r[5]) for r in rows if r[3] == "0+" and r[4] == "0-"]
    assert len(f) == 1 and abs(f[0] - 0.0136) < 0.002


def test_symmetric_junctions_silence_dielectric_doublet_loss(tmp_path):
    code, out = _run(tmp_path, "rates", "--n", "1", "--epsilon", "0")
    assert code == 0
    for name in ("rates_one_mode.csv", "rates_three_mode.csv"):
        rows = [r.split(",") for r in _body(out / name)[1:]]
        vals = [float(r[3]) for r in rows if r[1] == "doublet" and r[2] == "dielectric_shunt"]
        assert vals == [0.0]


def test_dephase_at_sweet_spot_has_no_decay(tmp_path):
    code, out = _run(tmp_path, "dephase", "--n", "20")
    assert code == 0
    f = [float(r.split(",")[1]) for r in _body(out / "envelope.csv")[1:]]
    assert f == [1.0] * 20
    assert "T2_echo_s=inf" in (out / "dephase_report.txt").read_text()


def test_jumps_seeded_runs_agree(tmp_path):
    args = ["jumps", "--seed", "5", "--shots", "20000"]
    a = _run(tmp_path, *args, name="a")[1]
    b = _run(tmp_path, *args, name="b")[1]
    c = _run(tmp_path, "jumps", "--seed", "6", "--shots", "20000", name="c")[1]
    assert (a / "record.csv").read_bytes() == (b / "record.csv").read_bytes()
    assert (a / "record.csv").read_bytes() != (c / "record.csv").read_bytes()
    # re-estimating the written record reproduces the report body
    code, d = _run(tmp_path, "jumps", "--record", str(a / "record.csv"), name="d")
    assert code == 0
    assert _body(d / "jumps_report.txt") == _body(a / "jumps_report.txt")


def test_calibrate_round_trip(tmp_path):
    disp = tmp_path / "disp.csv"
    lines = ["nbar_proxy,freq_GHz,state"]
    for s, c, k in (("0p", 100.5e-6, -4e-6), ("0m", -100.5e-6, 22e-6)):
        lines += [f"{x},{7.1 + c - k * x!r},{s}" for x in range(6)]
    disp.write_text("\n".join(lines) + "\n")
    code, out = _run(tmp_path, "calibrate", "--dispersive", str(disp))
    assert code == 0
    vals = dict(ln.split("=") for ln in _body(out / "calibration.txt"))
    assert math.isclose(float(vals["chi_GHz"]), -201e-6, rel_tol=1e-6)


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    biases = [BiasPoint(0.4 * math.pi, 0.0), BiasPoint(0.8 * math.pi, 0.0), BiasPoint(math.pi, 0.5)]
    d = pf.synthetic_dataset(TABLE_I_CIRCUIT, biases, 6, Truncation(6, 8))
    path = tmp_path_factory.mktemp("fit") / "data.csv"
    with open(path, "w") as fh:
        pf.write_dataset_csv(d, fh)
    return path


def test_fit_subcommand_writes_report(tmp_path, small_dataset):
    code, out = _run(tmp_path, "fit", "--data", str(small_dataset), "--n-max", "6", "--n-fock", "8")
    assert code == 0
    text = (out / "fit_report.txt").read_text()
    assert "converged" in text
    assert (out / "fit_params.toml").exists()


def test_exit_code_numeric(tmp_path, small_dataset, capsys):
    with pytest.warns(pf.FitWarning):
        code, out = _run(tmp_path, "fit", "--data", str(small_dataset), "--n-max", "6", "--n-fock", "8",
                         "--perturb", "0.2", "--max-iter", "1")
    assert code == cli.EXIT_NUMERIC
    assert "numerical failure" in capsys.readouterr().err
    # the best iterate is kept for inspection
    assert (out / "fit_report.txt").exists()


@pytest.mark.parametrize("argv", [
    ["calibrate"],
    ["calibrate", "--charge", "does-not-exist.csv"],
    ["spectrum", "--flux-sweep", "3:2:1"],
    ["spectrum", "--n", "0", "--flux-sweep", "3:3.1"],
    ["rates", "--threads", "0"],
])
def test_exit_code_config(tmp_path, argv, capsys):
    code, out = _run(tmp_path, *argv)
    assert code == cli.EXIT_CONFIG
    assert capsys.readouterr().err.startswith("cos2phi: ")
    assert not out.exists()


def test_exit_code_config_for_bad_parameter_file(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[circuit]\nE_J = -1\nE_CJ = 1\nE_L = 1\nE_CS = 1\nepsilon = 0\n")
    assert _run(tmp_path, "spectrum", "--params", str(bad), "--model", "three-mode")[0] == cli.EXIT_CONFIG


def test_exit_code_data(tmp_path):
    bad = tmp_path / "charge.csv"
    bad.write_text("N_g,signal\n0,1\n0.1,1\n")
    assert _run(tmp_path, "calibrate", "--charge", str(bad))[0] == cli.EXIT_DATA
    rec = tmp_path / "rec.csv"
    rec.write_text("t_s,outcome\n0,0p\n1e-5,banana\n")
    assert _run(tmp_path, "jumps", "--record", str(rec), name="j")[0] == cli.EXIT_DATA


def test_threads_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("COS2PHI_THREADS", "zero")
    assert _run(tmp_path, "spectrum")[0] == cli.EXIT_CONFIG


@pytest.mark.parametrize("text,expected", [
    ("pi", math.pi), ("0.5pi", 0.5 * math.pi), ("-pi", -math.pi), ("1.25", 1.25), ("2*pi", 2 * math.pi),
])
def test_parse_angle(text, expected):
    assert math.isclose(cli.parse_angle(text), expected)


def test_parse_range():
    lo, hi = cli.parse_range("pi±0.05", angle=True)
    assert math.isclose(lo, math.pi - 0.05) and math.isclose(hi, math.pi + 0.05)
    assert cli.parse_range("0:0.5", angle=False) == (0.0, 0.5)
    with pytest.raises(cli.ConfigError):
        cli.parse_range("0.5", angle=False)
