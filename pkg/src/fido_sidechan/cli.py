"""Command-line entry point.

Exit codes: 0 success, 1 scenario failure, 2 configuration error.
"""

from __future__ import annotations

import logging
import os
import sys

import click

from . import harness
from .client import SUBJECTS
from .profiles import (
    AUTHENTICATOR_PRESETS,
    ConfigError,
    authenticator_profile_to_text,
    load_authenticator_profile,
    load_client_profile,
)
from .wire import CtapError, hexdump

EXIT_FAILURE = 1
EXIT_CONFIG = 2


def _wire_printer(direction: str, frame: bytes) -> None:
    click.echo(f"{direction} {hexdump(frame)}", err=True)


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


@click.group()
@click.option("--dump-wire", is_flag=True, help="Print every CTAP frame as hex on stderr.")
@click.option("-v", "--verbose", is_flag=True)
@click.pass_context
def main(ctx, dump_wire, verbose):
    """Simulate the FIDO2 key-handle timing side channel."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s")
    ctx.obj = {"wire_log": _wire_printer if dump_wire else None}


@main.command()
@click.option("--profile", "profile_name", required=True, help="Preset name or .profile path.")
@click.option("--delta-us", type=float, required=True, help="Target per-handle delta (µs).")
@click.option("--tolerance", type=float, default=0.05, show_default=True)
@click.option("--probes", type=int, default=10_000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), help="Write the calibrated profile here.")
def calibrate(profile_name, delta_us, tolerance, probes, seed, out):
    """Tune a profile's decrypt + origin-compare cost to a target delta."""
    try:
        profile = load_authenticator_profile(profile_name)
        if delta_us < 0:
            raise ConfigError("--delta-us must be >= 0")
        seed = int(os.environ.get(harness.SEED_ENV, seed))
    except (ConfigError, ValueError) as exc:
        _fail(EXIT_CONFIG, str(exc))
    try:
        tuned, measured = harness._calibrate(profile, delta_us, tolerance, probes, seed)
    except harness.CalibrationError as exc:
        _fail(EXIT_FAILURE, str(exc))
    text = authenticator_profile_to_text(tuned)
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        click.echo(text, nl=False)
    click.echo(f"measured delta {measured:.1f} µs (target {delta_us:.1f} µs)", err=True)


@main.command()
@click.option("--scenario", "scenario_path", required=True, type=click.Path())
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None)
@click.pass_context
def run(ctx, scenario_path, out_dir):
    """Run one scenario file and write its CSV / plot data."""
    try:
        scenario = harness.load_scenario(scenario_path)
        load_authenticator_profile(scenario.authenticator_profile)
        load_client_profile(scenario.client_profile)
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    try:
        report = harness.run_scenario(scenario, wire_log=ctx.obj["wire_log"])
        out_dir = out_dir or f"out/{scenario.name}"
        harness.emit_report(report, out_dir)
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    except (harness.CalibrationError, CtapError, OSError, ValueError) as exc:
        _fail(EXIT_FAILURE, str(exc))
    _echo_summary(report)
    click.echo(f"wrote {out_dir} ({report.runtime_s:.2f} s)", err=True)


@main.command()
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--profile", "profile_name", default="hyperfido", show_default=True)
@click.option("--client", "client_name", default="chromium_unpatched", show_default=True)
@click.option("--subject", type=click.IntRange(1, len(SUBJECTS)), default=1, show_default=True)
@click.option("-n", "n", type=int, default=60, show_default=True)
@click.option("--trials", type=int, default=300, show_default=True)
@click.option("--seed", type=int, default=1, show_default=True)
def sweep(out_dir, profile_name, client_name, subject, n, trials, seed):
    """Run the attack against every mitigation toggle."""
    try:
        seed = int(os.environ.get(harness.SEED_ENV, seed))
        scenario = harness.Scenario(
            seed=seed,
            authenticator_profile=profile_name,
            client_profile=client_name,
            user_subject=subject,
            n=n,
            trials=trials,
            mode=harness.Mode.MITIGATION_SWEEP,
            name="sweep",
        )
        load_authenticator_profile(profile_name)
        load_client_profile(client_name)
    except (ConfigError, ValueError) as exc:
        _fail(EXIT_CONFIG, str(exc))
    try:
        report = harness.run_scenario(scenario)
        harness.emit_report(report, out_dir)
    except (CtapError, OSError, ValueError) as exc:
        _fail(EXIT_FAILURE, str(exc))
    for row in report.sweep:
        click.echo(
            f"{row['mitigation']:<14} error={harness._cell(row['error_rate']):>6} "
            f"usable={row['usable_e']}/{row['usable_d']} "
            f"{'DEFEATED' if row['defeated'] else 'attack works'}"
        )


@main.command("profiles")
def list_profiles():
    """List the shipped authenticator presets and their per-handle delta."""
    for name in AUTHENTICATOR_PRESETS:
        p = load_authenticator_profile(name)
        click.echo(f"{name:<18} {p.scheme.value:<20} delta={p.delta:.0f} µs")


def _echo_summary(report):
    for row in report.summary:
        click.echo(
            f"{row['scheme']:<28} n={row['n']:<3} te={harness._cell(row['mean_te_µs']):>14} "
            f"td={harness._cell(row['mean_td_µs']):>14} error={harness._cell(row['error_rate'])}"
        )
    if report.verdict:
        click.echo(f"verdict: linked={report.verdict['linked']}")


if __name__ == "__main__":
    main()
