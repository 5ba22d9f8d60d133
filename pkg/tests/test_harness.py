import csv
import json
import math

import numpy as np
import pytest
from click.testing import CliRunner

from fido_sidechan.cli import main
from fido_sidechan.harness import (
    N_CURVE,
    OBSERVATION_COLUMNS,
    SEED_ENV,
    SUMMARY_COLUMNS,
    SWEEP_COLUMNS,
    CalibrationError,
    Mode,
    Scenario,
    calibrate,
    emit_report,
    load_scenario,
    measure_silent_probes,
    run_scenario,
    scenario_from_text,
    sweep_configuration,
)
from fido_sidechan.authenticator import Scheme
from fido_sidechan.client import ClientProfile
from fido_sidechan.profiles import ConfigError, load_authenticator_profile

ATTACK_TEXT = """\
# small attack
seed = 7
authenticator_profile = hyperfido
client_profile = chromium_unpatched
user_subject = 2
n = 10
trials = 20
mode = ATTACK
name = small
"""


def write(tmp_path, text, name="s.scenario"):
    path = tmp_path / name
    path.write_text(text)
    return path


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))


# --- scenario parsing -------------------------------------------------------------


def test_scenario_parse_defaults():
    s = scenario_from_text("seed = 3\nauthenticator_profile = feitian\n")
    assert s.seed == 3 and s.n == 60 and s.trials == 30
    assert s.mode is Mode.ATTACK and s.client_profile == "chromium_unpatched"


def test_scenario_parse_full():
    s = scenario_from_text(ATTACK_TEXT)
    assert (s.n, s.trials, s.user_subject, s.name) == (10, 20, 2, "small")


@pytest.mark.parametrize(
    "text",
    [
        "authenticator_profile = hyperfido\n",
        "seed = x\nauthenticator_profile = hyperfido\n",
        "seed = 1\nauthenticator_profile = hyperfido\nmode = WHATEVER\n",
        "seed = 1\nauthenticator_profile = hyperfido\nbogus = 1\n",
        "seed = 1\nauthenticator_profile = hyperfido\nuser_subject = 9\n",
        "seed = 1\nauthenticator_profile = hyperfido\ntrials = 0\n",
        "seed = 1\nauthenticator_profile = hyperfido\nn = 0\n",
    ],
)
def test_scenario_parse_errors(text):
    with pytest.raises(ConfigError):
        scenario_from_text(text)


def test_seed_env_override(tmp_path, monkeypatch):
    path = write(tmp_path, ATTACK_TEXT)
    monkeypatch.setenv(SEED_ENV, "99")
    assert load_scenario(path).seed == 99
    monkeypatch.setenv(SEED_ENV, "nope")
    with pytest.raises(ConfigError):
        load_scenario(path)


def test_missing_scenario_file(tmp_path):
    with pytest.raises(ConfigError):
        load_scenario(tmp_path / "absent.scenario")


# --- calibration ----------------------------------------------------------------


@pytest.mark.parametrize("name,target", [("hyperfido", 10_070.0), ("feitian", 2_210.0)])
def test_calibrate_presets(name, target):
    tuned = calibrate(name, target, probes=4000, seed=1)
    assert tuned.delta == pytest.approx(target)
    rnd, wrong = measure_silent_probes(tuned, 4000, seed=2)
    assert abs(wrong.mean() - rnd.mean() - target) <= 0.05 * target


def test_calibrate_preserves_cost_split():
    base = load_authenticator_profile("hyperfido")
    tuned = calibrate(base, 2 * base.delta, probes=2000)
    assert tuned.cost_aes_decrypt / tuned.cost_origin_compare == pytest.approx(
        base.cost_aes_decrypt / base.cost_origin_compare
    )
    assert tuned.cost_mac_verify == base.cost_mac_verify


def test_calibrate_constant_time_to_zero():
    # constant-time hides the stage, so any target gives zero measured delta
    calibrate("constant_time", 0.0, probes=4000)
    with pytest.raises(CalibrationError):
        calibrate("constant_time", 10_070.0, probes=4000)


def test_calibrate_rejects_negative_target():
    with pytest.raises(ValueError):
        calibrate("hyperfido", -1.0, probes=10)


def test_silent_probe_cost_closed_form():
    from conftest import make_profile

    rnd, wrong = measure_silent_probes(make_profile(), 100)
    assert set(rnd.tolist()) == {2500.0}
    assert set(wrong.tolist()) == {2500.0 + 7000.0 + 3070.0}


# --- scenario runs ----------------------------------------------------------------


def test_baseline_clusters_separate():
    report = run_scenario(Scenario(seed=1, authenticator_profile="hyperfido", trials=200, mode=Mode.BASELINE))
    rnd = [r["elapsed_µs"] for r in report.rows if r["list_composition"] == "RANDOM"]
    wrong = [r["elapsed_µs"] for r in report.rows if r["list_composition"] == "WRONG_ORIGIN"]
    assert len(rnd) == len(wrong) == 200
    assert abs(np.mean(wrong) - np.mean(rnd) - 10_070) < 0.05 * 10_070
    assert max(rnd) < min(wrong)
    assert report.summary[0]["error_rate"] == 0.0


def test_attack_report_outputs(tmp_path):
    report = run_scenario(scenario_from_text(ATTACK_TEXT))
    files = {p.name for p in emit_report(report, tmp_path)}
    assert {"observations.csv", "summary.csv", "plotdata_error_vs_n.dat", "verdict.json", "scenario.txt"} <= files

    rows = read_csv(tmp_path / "observations.csv")
    assert tuple(rows[0]) == OBSERVATION_COLUMNS
    assert len(rows) == 1 + 2 * 20
    assert [r[1] for r in rows[1:3]] == ["10xRANDOM+ANCHOR", "10xCANDIDATE+ANCHOR"]
    assert all(r[3] == "OK" for r in rows[1:])

    summary = read_csv(tmp_path / "summary.csv")
    assert tuple(summary[0]) == SUMMARY_COLUMNS
    assert [int(r[1]) for r in summary[1:]] == list(N_CURVE)

    curve = (tmp_path / "plotdata_error_vs_n.dat").read_text().splitlines()
    assert len(curve) == 5
    assert [int(float(line.split()[0])) for line in curve] == list(N_CURVE)

    verdict = json.loads((tmp_path / "verdict.json").read_text())
    assert verdict["n"] == 10 and verdict["linked"] in (True, False)


def test_floats_written_with_three_decimals(tmp_path):
    emit_report(run_scenario(scenario_from_text(ATTACK_TEXT)), tmp_path)
    rows = read_csv(tmp_path / "observations.csv")
    elapsed = rows[1][OBSERVATION_COLUMNS.index("elapsed_µs")]
    assert len(elapsed.split(".")[1]) == 3


def test_custom_n_joins_curve():
    s = Scenario(seed=1, authenticator_profile="hyperfido", n=3, trials=10)
    report = run_scenario(s)
    assert [row["n"] for row in report.summary] == sorted(set(N_CURVE) | {3})
    assert len(report.plots["error_vs_n"]) == len(N_CURVE)


def test_sweep_report(tmp_path):
    s = Scenario(seed=2, authenticator_profile="hyperfido", n=20, trials=30, mode=Mode.MITIGATION_SWEEP)
    report = run_scenario(s)
    emit_report(report, tmp_path)
    rows = read_csv(tmp_path / "sweep.csv")
    assert tuple(rows[0]) == SWEEP_COLUMNS
    by_toggle = {r[0]: r for r in rows[1:]}
    assert len(by_toggle) == 8
    cap = by_toggle["list_cap_20"]
    assert cap[SWEEP_COLUMNS.index("error_rate")] == "nan"
    assert cap[SWEEP_COLUMNS.index("defeated")] == "true"


def test_sweep_configuration_toggles():
    profile = load_authenticator_profile("hyperfido")
    client = ClientProfile("c")
    assert sweep_configuration("dedup", profile, client)[1].dedup_before_ctap
    assert sweep_configuration("list_cap_20", profile, client)[1].max_allow_list == 20
    assert sweep_configuration("kdf", profile, client)[0].scheme is Scheme.KDF_DERIVED
    assert sweep_configuration("resident", profile, client)[0].scheme is Scheme.RESIDENT
    with pytest.raises(ValueError):
        sweep_configuration("magic", profile, client)


def test_same_seed_same_bytes(tmp_path):
    s = scenario_from_text(ATTACK_TEXT)
    emit_report(run_scenario(s), tmp_path / "a")
    emit_report(run_scenario(s), tmp_path / "b")
    for name in ("observations.csv", "summary.csv", "plotdata_error_vs_n.dat"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_different_seed_differs(tmp_path):
    a = run_scenario(Scenario(seed=1, authenticator_profile="hyperfido", n=5, trials=10))
    b = run_scenario(Scenario(seed=2, authenticator_profile="hyperfido", n=5, trials=10))
    assert [r["elapsed_µs"] for r in a.rows] != [r["elapsed_µs"] for r in b.rows]


def test_nan_verdict_written_as_null(tmp_path):
    s = Scenario(seed=1, authenticator_profile="hyperfido", client_profile="windows10", n=60, trials=10)
    report = run_scenario(s)
    emit_report(report, tmp_path)
    verdict = json.loads((tmp_path / "verdict.json").read_text())
    assert verdict["error_rate"] is None and verdict["linked"] is None
    assert math.isnan(report.verdict["error_rate"])


# --- CLI --------------------------------------------------------------------------


def test_cli_profiles():
    result = CliRunner().invoke(main, ["profiles"])
    assert result.exit_code == 0
    assert "hyperfido" in result.output and "delta=10070" in result.output


def test_cli_run_ok(tmp_path):
    path = write(tmp_path, ATTACK_TEXT)
    out = tmp_path / "out"
    result = CliRunner().invoke(main, ["run", "--scenario", str(path), "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert (out / "observations.csv").exists()
    assert "verdict: linked=" in result.output


def test_cli_run_config_errors(tmp_path):
    runner = CliRunner()
    assert runner.invoke(main, ["run", "--scenario", str(tmp_path / "none")]).exit_code == 2
    bad = write(tmp_path, "seed = 1\nauthenticator_profile = no_such_token\n")
    assert runner.invoke(main, ["run", "--scenario", str(bad)]).exit_code == 2


def test_cli_calibrate(tmp_path):
    runner = CliRunner()
    out = tmp_path / "tuned.profile"
    result = runner.invoke(
        main, ["calibrate", "--profile", "feitian", "--delta-us", "2210", "--probes", "2000", "--out", str(out)]
    )
    assert result.exit_code == 0, result.output
    assert load_authenticator_profile(str(out)).delta == pytest.approx(2210.0)
    result = runner.invoke(main, ["calibrate", "--profile", "constant_time", "--delta-us", "5000", "--probes", "2000"])
    assert result.exit_code == 1
    result = runner.invoke(main, ["calibrate", "--profile", "hyperfido", "--delta-us", "-5"])
    assert result.exit_code == 2


def test_cli_dump_wire(tmp_path):
    path = write(tmp_path, "seed = 1\nauthenticator_profile = hyperfido\nmode = BASELINE\ntrials = 2\n")
    result = CliRunner().invoke(main, ["--dump-wire", "run", "--scenario", str(path), "--out", str(tmp_path / "o")])
    assert result.exit_code == 0
    lines = [line for line in result.output.splitlines() if line.startswith(("req ", "resp "))]
    assert len(lines) == 2 * 4
    req = bytes.fromhex(lines[0].split()[1])
    assert req[0] == 0x02
    assert bytes.fromhex(lines[1].split()[1]) == b"\x2e"
