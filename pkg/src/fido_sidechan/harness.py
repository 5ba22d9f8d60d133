"""Scenario runner: calibration, direct probe timing, attack and mitigation sweeps."""

from __future__ import annotations

import csv
import enum
import hashlib
import io
import json
import logging
import math
import os
import threading
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .attack import (
    ADVERSARY_RP,
    OTHER_RP,
    AttackObservation,
    Filler,
    fit_threshold,
    link_verdict,
    make_victim,
    run_attack,
)
from .authenticator import Authenticator, AuthenticatorProfile, Scheme
from .client import SUBJECTS, ClientProfile
from .profiles import ConfigError, load_authenticator_profile, load_client_profile, parse_kv
from .sim import Drbg, SimClock
from .wire import CredentialDescriptor, GetAssertionRequest, encode_get_assertion

log = logging.getLogger(__name__)

SEED_ENV = "FIDO_SIDECHAN_SEED"
N_CURVE = (1, 5, 10, 20, 60)
SWEEP_TOGGLES = (
    "none",
    "dedup",
    "random_delay",
    "list_cap_20",
    "list_cap_64",
    "constant_time",
    "kdf",
    "resident",
)
SWEEP_RANDOM_DELAY_US = (0.0, 2_000_000.0)
# published per-handle gaps, µs
TABLE1_DELTA_US = {"hyperfido": 10_070.0, "feitian": 2_210.0}

OBSERVATION_COLUMNS = (
    "scenario_id",
    "list_composition",
    "n",
    "outcome",
    "elapsed_µs",
    "silent_probes",
    "presence_µs",
)
SUMMARY_COLUMNS = ("scheme", "n", "trials", "mean_te_µs", "mean_td_µs", "error_rate")
SWEEP_COLUMNS = (
    "mitigation",
    "scheme",
    "client",
    "n",
    "trials",
    "usable_e",
    "usable_d",
    "mean_te_µs",
    "mean_td_µs",
    "error_rate",
    "defeated",
)


class Mode(enum.Enum):
    BASELINE = "BASELINE"
    ATTACK = "ATTACK"
    MITIGATION_SWEEP = "MITIGATION_SWEEP"
    CALIBRATE = "CALIBRATE"
    AUDIO = "AUDIO"


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Scenario:
    seed: int
    authenticator_profile: str
    client_profile: str = "chromium_unpatched"
    user_subject: int = 1
    n: int = 60
    trials: int = 30
    mode: Mode = Mode.ATTACK
    name: str = "scenario"
    audio_error_std: float = 1000.0
    delta_us: Optional[float] = None
    foreign_candidate: bool = False

    def __post_init__(self):
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.n < 1:
            raise ConfigError("n must be >= 1")
        if self.user_subject not in SUBJECTS:
            raise ConfigError(f"user_subject must be one of {sorted(SUBJECTS)}")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")


def scenario_from_text(text: str, name: str = "scenario") -> Scenario:
    kv = parse_kv(text, name)
    known = {f for f in Scenario.__dataclass_fields__}
    unknown = set(kv) - known
    if unknown:
        raise ConfigError(f"{name}: unknown scenario keys {sorted(unknown)}")
    try:
        return Scenario(
            seed=int(kv["seed"]),
            authenticator_profile=kv["authenticator_profile"],
            client_profile=kv.get("client_profile", "chromium_unpatched"),
            user_subject=int(kv.get("user_subject", 1)),
            n=int(kv.get("n", 60)),
            trials=int(kv.get("trials", 30)),
            mode=Mode(kv.get("mode", "ATTACK").upper()),
            name=kv.get("name", name),
            audio_error_std=float(kv.get("audio_error_std", 1000.0)),
            delta_us=float(kv["delta_us"]) if "delta_us" in kv else None,
            foreign_candidate=kv.get("foreign_candidate", "false").lower() == "true",
        )
    except KeyError as exc:
        raise ConfigError(f"{name}: missing key {exc.args[0]!r}") from None
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from None


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read scenario {path}: {exc}") from None
    scenario = scenario_from_text(text, path.stem)
    override = os.environ.get(SEED_ENV)
    if override:
        try:
            scenario = replace(scenario, seed=int(override))
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {override!r}") from None
    return scenario


@dataclass
class ExperimentReport:
    scenario: Scenario
    rows: list[dict] = field(default_factory=list)
    summary: list[dict] = field(default_factory=list)
    plots: dict[str, list[tuple[float, float]]] = field(default_factory=dict)
    verdict: Optional[dict] = None
    sweep: list[dict] = field(default_factory=list)
    runtime_s: float = 0.0


def _ss(seed: int, *path: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, *path])


def _silent_frame(handle: bytes, rp_id: str) -> bytes:
    cdh = hashlib.sha256(handle).digest()
    return encode_get_assertion(
        GetAssertionRequest(rp_id, cdh, (CredentialDescriptor(handle),), up=False)
    )


def measure_silent_probes(
    profile: AuthenticatorProfile, count: int, seed: int = 0, wire_log=None
) -> tuple[np.ndarray, np.ndarray]:
    """Time single-handle silent probes sent straight to the token.

    Alternates a fresh random handle of the scheme's length with a genuine
    handle issued for another relying party. Returns per-class elapsed µs.
    """
    drbg_ss, jitter_ss, handle_ss = _ss(seed, 0xCA1).spawn(3)
    token = Authenticator(
        profile, Drbg(drbg_ss.generate_state(8).tobytes()), np.random.default_rng(jitter_ss)
    )
    _, wrong_origin = token.make_credential(OTHER_RP)
    rng = np.random.default_rng(handle_ss)
    clock = SimClock()
    random_us, wrong_us = [], []
    for i in range(count):
        is_random = i % 2 == 0
        handle = rng.bytes(profile.handle_length) if is_random else wrong_origin
        frame = _silent_frame(handle, ADVERSARY_RP)
        t0 = clock.now
        if wire_log is not None:
            wire_log("req", frame)
        reply = token.process(frame, clock)
        if wire_log is not None:
            wire_log("resp", reply)
        (random_us if is_random else wrong_us).append(clock.now - t0)
    return np.asarray(random_us), np.asarray(wrong_us)


def _calibrate(
    profile: AuthenticatorProfile,
    target_delta_us: float,
    tolerance: float = 0.05,
    probes: int = 10_000,
    seed: int = 0,
) -> tuple[AuthenticatorProfile, float]:
    if target_delta_us < 0:
        raise ValueError("target delta must be >= 0")
    split = profile.cost_aes_decrypt + profile.cost_origin_compare
    aes_share = profile.cost_aes_decrypt / split if split > 0 else 0.5
    tuned = replace(
        profile,
        cost_aes_decrypt=target_delta_us * aes_share,
        cost_origin_compare=target_delta_us * (1 - aes_share),
    )
    rnd, wrong = measure_silent_probes(tuned, probes, seed)
    measured = float(np.mean(wrong) - np.mean(rnd))
    if target_delta_us > 0:
        ok = abs(measured - target_delta_us) <= tolerance * target_delta_us
        allowed = f"±{tolerance:.1%}"
    else:
        # zero target: accept anything within 4 standard errors of zero
        se = math.sqrt(np.var(wrong) / len(wrong) + np.var(rnd) / len(rnd))
        ok = abs(measured) <= 4 * se + 1e-9
        allowed = f"±{4 * se:.1f} µs"
    if not ok:
        raise CalibrationError(
            f"{profile.name}: measured delta {measured:.1f} µs misses target "
            f"{target_delta_us:.1f} µs ({allowed})"
        )
    return tuned, measured


def calibrate(
    profile: AuthenticatorProfile | str,
    target_delta_us: float,
    tolerance: float = 0.05,
    probes: int = 10_000,
    seed: int = 0,
) -> AuthenticatorProfile:
    """Set decrypt + origin-compare cost to ``target_delta_us`` and verify it
    with ``probes`` simulated silent probes. Raises CalibrationError on a miss."""
    if isinstance(profile, str):
        profile = load_authenticator_profile(profile)
    return _calibrate(profile, target_delta_us, tolerance, probes, seed)[0]


def _mean(values) -> float:
    return float(np.mean(values)) if len(values) else float("nan")


def _observation_rows(scenario_id: str, observations: list[AttackObservation]) -> list[dict]:
    return [
        {
            "scenario_id": scenario_id,
            "list_composition": o.plan.composition,
            "n": o.plan.n,
            "outcome": o.outcome.value,
            "elapsed_µs": o.elapsed,
            "silent_probes": o.silent_probes,
            "presence_µs": o.presence_us,
        }
        for o in observations
    ]


def _interleave(a: list, b: list) -> list:
    out = []
    for i in range(max(len(a), len(b))):
        out.extend(x[i] for x in (a, b) if i < len(x))
    return out


def attack_error(
    profile: AuthenticatorProfile,
    client: ClientProfile,
    subject: int,
    n: int,
    trials: int,
    seed: int,
    *,
    filler: Filler = Filler.RANDOM,
    audio_error_std: Optional[float] = None,
    foreign: bool = False,
    stream: int = 0,
    wire_log=None,
):
    """One attack run; returns (obs_e, obs_d, classifier or None)."""
    victim_ss, attack_ss = _ss(seed, 0xA77, stream).spawn(2)
    victim = make_victim(profile, victim_ss)
    candidate = victim.foreign_candidate if foreign else victim.linked_candidate
    obs_e, obs_d = run_attack(
        candidate,
        victim.anchor,
        n,
        trials,
        client,
        victim.authenticator,
        SUBJECTS[subject],
        np.random.default_rng(attack_ss),
        baseline_filler=filler,
        audio_error_std=audio_error_std,
        wire_log=wire_log,
    )
    clf = None
    if len(obs_e) >= 10 and len(obs_d) >= 10:
        clf = fit_threshold(obs_e, obs_d)
    return obs_e, obs_d, clf


def sweep_configuration(
    toggle: str, profile: AuthenticatorProfile, client: ClientProfile
) -> tuple[AuthenticatorProfile, ClientProfile]:
    if toggle == "none":
        return profile, client
    if toggle == "dedup":
        return profile, replace(client, dedup_before_ctap=True)
    if toggle == "random_delay":
        return profile, replace(client, random_error_delay_range=SWEEP_RANDOM_DELAY_US)
    if toggle == "list_cap_20":
        return profile, replace(client, max_allow_list=20)
    if toggle == "list_cap_64":
        return profile, replace(client, max_allow_list=64)
    if toggle == "constant_time":
        return profile.with_scheme(Scheme.WRAP_CONSTANT_TIME), client
    if toggle == "kdf":
        return profile.with_scheme(Scheme.KDF_DERIVED), client
    if toggle == "resident":
        return profile.with_scheme(Scheme.RESIDENT), client
    raise ValueError(f"unknown mitigation toggle {toggle!r}")


def mitigation_sweep(
    profile: AuthenticatorProfile,
    client: ClientProfile,
    subject: int,
    n: int,
    trials: int,
    seed: int,
    toggles=SWEEP_TOGGLES,
) -> list[dict]:
    """Same attack against each mitigation; a toggle defeats the attack when
    per-call classification error exceeds 40% or no call completes."""
    rows = []
    for i, toggle in enumerate(toggles):
        prof, cli = sweep_configuration(toggle, profile, client)
        obs_e, obs_d, clf = attack_error(
            prof, cli, subject, n, trials, seed, filler=Filler.RANDOM_REPEATED, stream=i
        )
        error = clf.test_error if clf else float("nan")
        rows.append(
            {
                "mitigation": toggle,
                "scheme": prof.scheme.value,
                "client": cli.name,
                "n": n,
                "trials": trials,
                "usable_e": len(obs_e),
                "usable_d": len(obs_d),
                "mean_te_µs": _mean([o.timing for o in obs_e]),
                "mean_td_µs": _mean([o.timing for o in obs_d]),
                "error_rate": error,
                "defeated": clf is None or error > 0.40,
            }
        )
    return rows


def run_scenario(s: Scenario, wire_log=None) -> ExperimentReport:
    started = time.perf_counter()
    profile = load_authenticator_profile(s.authenticator_profile)
    client = load_client_profile(s.client_profile)
    report = ExperimentReport(s)

    if s.mode in (Mode.BASELINE, Mode.CALIBRATE):
        if s.mode is Mode.CALIBRATE:
            target = s.delta_us
            if target is None:
                target = TABLE1_DELTA_US.get(s.authenticator_profile)
            if target is None:
                raise ConfigError("CALIBRATE needs delta_us for non-preset profiles")
            profile, _ = _calibrate(profile, target, seed=s.seed)
        rnd, wrong = measure_silent_probes(profile, 2 * s.trials, s.seed, wire_log)
        for label, values in (("RANDOM", rnd), ("WRONG_ORIGIN", wrong)):
            report.plots[f"timing_{label.lower()}"] = list(enumerate(values.tolist()))
        for r, w in zip(rnd, wrong):
            for label, value in (("RANDOM", r), ("WRONG_ORIGIN", w)):
                report.rows.append(
                    {
                        "scenario_id": s.name,
                        "list_composition": label,
                        "n": 1,
                        "outcome": "NO_CREDENTIALS",
                        "elapsed_µs": float(value),
                        "silent_probes": 1,
                        "presence_µs": 0.0,
                    }
                )
        error = fit_threshold(rnd, wrong).test_error if s.trials >= 10 else float("nan")
        report.summary.append(
            {
                "scheme": profile.scheme.value,
                "n": 1,
                "trials": s.trials,
                "mean_te_µs": _mean(rnd),
                "mean_td_µs": _mean(wrong),
                "error_rate": error,
            }
        )

    elif s.mode in (Mode.ATTACK, Mode.AUDIO):
        audio = s.audio_error_std if s.mode is Mode.AUDIO else None
        curve = sorted(set(N_CURVE) | {s.n})
        for k, n in enumerate(curve):
            obs_e, obs_d, clf = attack_error(
                profile,
                client,
                s.user_subject,
                n,
                s.trials,
                s.seed,
                audio_error_std=audio,
                foreign=s.foreign_candidate,
                stream=k,
                wire_log=wire_log if n == s.n else None,
            )
            error = clf.test_error if clf else float("nan")
            if n in N_CURVE:
                report.plots.setdefault("error_vs_n", []).append((n, error))
            report.summary.append(
                {
                    "scheme": profile.scheme.value,
                    "n": n,
                    "trials": s.trials,
                    "mean_te_µs": _mean([o.timing for o in obs_e]),
                    "mean_td_µs": _mean([o.timing for o in obs_d]),
                    "error_rate": error,
                }
            )
            if n != s.n:
                continue
            report.rows = _observation_rows(s.name, _interleave(obs_e, obs_d))
            report.plots["timing_e"] = [(i, o.timing) for i, o in enumerate(obs_e)]
            report.plots["timing_d"] = [(i, o.timing) for i, o in enumerate(obs_d)]
            linked, margin = None, float("nan")
            if clf is not None:
                _, verdict = link_verdict(obs_e, obs_d)
                linked, margin = verdict.linked, verdict.margin
            report.verdict = {
                "profile": profile.name,
                "scheme": profile.scheme.value,
                "n": n,
                "trials": s.trials,
                "error_rate": error,
                "linked": linked,
                "margin_µs": margin,
            }

    elif s.mode is Mode.MITIGATION_SWEEP:
        report.sweep = mitigation_sweep(profile, client, s.user_subject, s.n, s.trials, s.seed)
        for row in report.sweep:
            report.summary.append(
                {
                    "scheme": f"{row['scheme']}/{row['mitigation']}",
                    "n": row["n"],
                    "trials": row["trials"],
                    "mean_te_µs": row["mean_te_µs"],
                    "mean_td_µs": row["mean_td_µs"],
                    "error_rate": row["error_rate"],
                }
            )
        report.plots["error_by_mitigation"] = [
            (i, row["error_rate"]) for i, row in enumerate(report.sweep)
        ]

    report.runtime_s = time.perf_counter() - started
    return report


def _cell(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return "nan" if math.isnan(value) else f"{value:.3f}"
    return str(value)


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(row[c]) for c in columns])
    return buf.getvalue()


_dir_locks: dict[Path, threading.Lock] = {}
_dir_locks_guard = threading.Lock()


def _lock_for(path: Path) -> threading.Lock:
    with _dir_locks_guard:
        return _dir_locks.setdefault(path.resolve(), threading.Lock())


def emit_report(r: ExperimentReport, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    files: dict[str, str] = {
        "observations.csv": _csv_text(OBSERVATION_COLUMNS, r.rows),
        "summary.csv": _csv_text(SUMMARY_COLUMNS, r.summary),
    }
    for name, points in r.plots.items():
        files[f"plotdata_{name}.dat"] = "".join(f"{_cell(float(x))} {_cell(float(y))}\n" for x, y in points)
    if r.sweep:
        files["sweep.csv"] = _csv_text(SWEEP_COLUMNS, r.sweep)
    if r.verdict is not None:
        verdict = {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in r.verdict.items()}
        files["verdict.json"] = json.dumps(verdict, indent=2, ensure_ascii=False) + "\n"
    files["scenario.txt"] = "".join(
        f"{k} = {v.value if isinstance(v, enum.Enum) else v}\n" for k, v in asdict(r.scenario).items()
    )

    written = []
    with _lock_for(out):
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot create output directory {out}: {exc}") from exc
        for name, text in files.items():
            path = out / name
            try:
                path.write_text(text, encoding="utf-8")
            except OSError as exc:
                raise OSError(f"cannot write {path}: {exc}") from exc
            written.append(path)
    return written
