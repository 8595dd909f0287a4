import csv
import json

import numpy as np
import pytest

from bayespec.cli_io import (
    EXIT_CONFIG, EXIT_DATA, ConfigError, DataError, config_from_dict, load_config, load_spectrum, main,
    parse_spectrum, write_spectrum,
)
from bayespec.likelihood import Spectrum
from bayespec.model import Basis, BackgroundKind

QUICK_FLAGS = ["--iterations", "300", "--burn-in", "150", "--replicas", "4", "--kmax", "2"]


def test_parse_two_rows():
    s = parse_spectrum("161.0 5\n161.04 7\n")
    assert s.x.tolist() == [161.0, 161.04] and s.y.tolist() == [5, 7]


def test_non_integer_count_reports_line():
    with pytest.raises(DataError, match="non-integer count at line 1"):
        parse_spectrum("161.0 5.5")
    with pytest.raises(DataError, match="non-integer count at line 3"):
        parse_spectrum("# header\n160.0 1\n161.0 2.25\n")


def test_descending_rows_sorted_with_pairs_intact():
    s = parse_spectrum("162.0, 3\n161.0, 9\n# comment\n\n160.0,1  # trailing\n")
    assert s.x.tolist() == [160.0, 161.0, 162.0]
    assert s.y.tolist() == [1, 9, 3]


@pytest.mark.parametrize("text", ["161.0 5\n161.0 6\n", "161.0 5\n", "", "161 -1\n162 2\n", "161 1 2\n162 2\n",
                                  "abc 1\n162 2\n"])
def test_bad_spectra_rejected(text):
    with pytest.raises(DataError):
        parse_spectrum(text)


def test_integral_float_counts_accepted():
    assert parse_spectrum("1 5.0\n2 7e0\n").y.tolist() == [5, 7]


def test_spectrum_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    x = np.sort(rng.uniform(150, 170, 50))
    s = Spectrum(x, rng.poisson(30.0, 50))
    write_spectrum(tmp_path / "s.txt", s)
    back = load_spectrum(tmp_path / "s.txt")
    np.testing.assert_array_equal(back.x, s.x)
    np.testing.assert_array_equal(back.y, s.y)


def test_config_defaults():
    cfg = config_from_dict({})
    assert cfg.preset == "Synthetic4" and cfg.K_range == (1, 5)
    assert cfg.sampler.replicas == 32 and cfg.sampler.gamma == 1.5
    assert cfg.basis is Basis.GAUSSIAN and cfg.hyper.background_kind is BackgroundKind.CONSTANT


def test_config_preset_T(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"preset": "Synthetic4", "T": 10, "K_range": [1, 5]}))
    cfg = load_config(path)
    # amplitude rate 2/T
    assert cfg.hyper.lambda_a == pytest.approx(0.2)
    assert cfg.hyper.background.nu_B == 1.0


def test_config_mos2_defaults_and_overrides():
    cfg = config_from_dict({"preset": "MoS2_5", "T": 400, "hyper": {"xi_0": 3.0, "background": {"eta_c": 1.5}},
                            "sampler": {"iterations": 500, "burn_in": 100}})
    assert cfg.basis is Basis.PSEUDO_VOIGT and cfg.hyper.background_kind is BackgroundKind.SHIRLEY
    assert (cfg.sampler.replicas, cfg.sampler.gamma) == (64, 1.25)
    assert cfg.hyper.xi_0 == 3.0 and cfg.hyper.background.eta_c == 1.5
    assert cfg.hyper.background.nu_start == 140.0


@pytest.mark.parametrize("d, msg", [
    ({"K_range": [5, 1]}, "empty K range"),
    ({"colour": 1}, "unknown key"),
    ({"sampler": {"seeds": 1}}, "unknown key"),
    ({"hyper": {"background": {"nu_start": 1.0}}}, "unknown key"),
    ({"preset": "X"}, "unknown preset"),
    ({"T": -1}, "positive"),
    ({"sampler": {"iterations": 10, "burn_in": 10}}, "burn_in"),
    ({"hyper": {"eta_a": -2}}, "positive"),
    ({"hyper": {"background": {"kind": "shirley"}}}, "required"),
])
def test_config_errors(d, msg):
    with pytest.raises(ConfigError, match=msg):
        config_from_dict(d)


def test_effective_config_round_trip():
    for d in ({}, {"preset": "MoS2_5", "T": 16.0, "bins": 20, "vma": {"T": [4.0], "replications": 2}}):
        cfg = config_from_dict(d)
        assert config_from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def fitted(tmp_path_factory):
    d = tmp_path_factory.mktemp("fit")
    assert main(["simulate", "--T", "100", "--seed", "1", "--out", str(d / "s.txt")]) == 0
    assert main(["fit", str(d / "s.txt"), "--out", str(d / "out"), "--serial", "--seed", "4"] + QUICK_FLAGS) == 0
    return d


def test_fit_outputs(fitted):
    out = fitted / "out"
    fe = _read_csv(out / "free_energy.csv")
    assert [r["K"] for r in fe] == ["1", "2"]
    assert abs(sum(float(r["p_K"]) for r in fe) - 1.0) < 1e-9
    curve = _read_csv(out / "fit_curve.csv")
    comps = [k for k in curve[0] if k.startswith("peak_")] + ["background"]
    for row in curve:
        assert abs(sum(float(row[k]) for k in comps) - float(row["f"])) < 1e-9 * max(1.0, float(row["f"]))
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["selected_K"] == int(max(fe, key=lambda r: float(r["p_K"]))["K"])
    assert manifest["config"]["sampler"]["seed"] == 4
    samples = _read_csv(out / "samples.csv")
    assert len(samples) == 15
    hist = _read_csv(out / "histograms.csv")
    K = manifest["selected_K"]
    for k in range(1, K + 1):
        assert sum(int(r["count"]) for r in hist if r["peak"] == str(k)) == len(samples)
    assert "wall_clock_s" in json.loads((out / "timing.json").read_text())


def test_replay_is_byte_identical(fitted):
    assert main(["replay", str(fitted / "out" / "manifest.json"), "--out", str(fitted / "replay")]) == 0
    for name in ("free_energy.csv", "fit_curve.csv", "samples.csv", "histograms.csv", "manifest.json"):
        assert (fitted / "out" / name).read_bytes() == (fitted / "replay" / name).read_bytes()


def test_evidence_command_writes_table_only(fitted):
    out = fitted / "ev"
    assert main(["evidence", str(fitted / "s.txt"), "--out", str(out), "--serial"] + QUICK_FLAGS) == 0
    assert (out / "free_energy.csv").exists() and not (out / "samples.csv").exists()


def test_exit_codes(tmp_path, fitted, capsys):
    bad_cfg = tmp_path / "bad.json"
    bad_cfg.write_text('{"K_range": [5, 1]}')
    assert main(["fit", str(fitted / "s.txt"), "--config", str(bad_cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "empty K range" in capsys.readouterr().err
    bad_data = tmp_path / "bad.txt"
    bad_data.write_text("161.0 5.5\n162.0 1\n")
    assert main(["fit", str(bad_data), "--out", str(tmp_path / "o")]) == EXIT_DATA
    assert "non-integer count at line 1" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["fit"])
    assert exc.value.code == 2


def test_threads_env(monkeypatch, fitted, tmp_path):
    monkeypatch.setenv("BAYESPEC_THREADS", "zero")
    assert main(["fit", str(fitted / "s.txt"), "--out", str(tmp_path / "o")] + QUICK_FLAGS) == EXIT_CONFIG
