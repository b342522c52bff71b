"""Command line interface.

Exit codes: 0 success (or verification/requirements pass), 1 failure of a
verification or requirements check, 2 usage error.
"""

from __future__ import annotations

import json
import sys

import click

from .errors import DiceError, EmptyTrace, InvalidConfig, IoFailure
from .harness import (
    MetricsReport,
    RequirementsAssumptions,
    ScenarioConfig,
    check_requirements,
    run_scenario,
    verify_ledger,
)
from .workload import calibration_report, generate


@click.group()
def main() -> None:
    """Desk-scale simulator of the DICE roaming-settlement protocol."""


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="Scenario config JSON (defaults apply when omitted).")
@click.option("--out-dir", required=True, type=click.Path())
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--days", type=int, default=None, help="Override the horizon in days.")
@click.option("--mode", type=click.Choice(["lbo", "hr"]), default=None)
@click.option("--dump-proofs", type=click.Path(), is_flag=False, flag_value="proofs.jsonl",
              default=None, help="Write accepted proofs as JSON-Lines (optionally to FILE).")
@click.option("--dump-events", type=click.Path(), is_flag=False, flag_value="events.jsonl",
              default=None, help="Write session events as JSON-Lines (optionally to FILE).")
def simulate(config_path, out_dir, seed, days, mode, dump_proofs, dump_events) -> None:
    """Run a full scenario and write report.json, ledger.jsonl, settlement.csv."""
    try:
        config = ScenarioConfig.from_json_file(config_path) if config_path else ScenarioConfig()
        if seed is not None:
            config.seed = seed
        if days is not None:
            config.days = days
        if mode is not None:
            config.mode = mode
        report = run_scenario(config, out_dir, dump_proofs=dump_proofs, dump_events=dump_events)
    except (InvalidConfig,) as exc:
        raise click.UsageError(str(exc))
    except IoFailure as exc:
        click.echo(f"i/o failure: {exc}", err=True)
        sys.exit(1)
    click.echo(
        f"sessions={report.sessions_completed} onchain={report.onchain_tx_total} "
        f"offchain={report.offchain_proofs_total} -> {out_dir}"
    )


@main.group()
def ledger() -> None:
    """Ledger file tools."""


@ledger.command("verify")
@click.option("--path", required=True, type=click.Path())
def ledger_verify(path) -> None:
    """Recompute all hashes, signatures and the token supply of a chain."""
    try:
        result = verify_ledger(path)
    except IoFailure as exc:
        click.echo(f"i/o failure: {exc}", err=True)
        sys.exit(1)
    if result.valid:
        click.echo("valid")
        sys.exit(0)
    where = "?" if result.first_invalid_height is None else result.first_invalid_height
    click.echo(f"INVALID at height {where}: {result.reason}")
    sys.exit(1)


@main.command()
@click.option("--report", "report_path", required=True, type=click.Path())
@click.option("--tps-capacity", type=int, default=20_000, show_default=True)
@click.option("--concentration-hours", type=float, default=4.0, show_default=True)
@click.option("--traffic-tb-per-day", type=float, default=10.0, show_default=True,
              help="Assumed visited-MNO daily roamer traffic, in terabytes.")
@click.option("--avg-mno-factor", type=float, default=None,
              help="Average-member size ratio; defaults to the report's config value.")
def requirements(report_path, tps_capacity, concentration_hours, traffic_tb_per_day,
                 avg_mno_factor) -> None:
    """Project the run to consortium scale and check TPS feasibility."""
    try:
        report = MetricsReport.from_json_file(report_path)
    except (OSError, json.JSONDecodeError, TypeError) as exc:
        click.echo(f"cannot read report: {exc}", err=True)
        sys.exit(1)
    assumptions = RequirementsAssumptions(
        tps_capacity=tps_capacity,
        concentration_hours=concentration_hours,
        visited_mno_daily_bytes=int(traffic_tb_per_day * 1e12),
        avg_mno_factor=avg_mno_factor,
    )
    verdict = check_requirements(report, assumptions)
    click.echo(json.dumps(verdict.to_dict(), indent=2, sort_keys=True))
    sys.exit(0 if verdict.passed else 1)


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None)
def calibrate(config_path) -> None:
    """Generate the workload only and print its calibration statistics."""
    try:
        config = ScenarioConfig.from_json_file(config_path) if config_path else ScenarioConfig()
        trace = generate(config.workload())
        stats = calibration_report(trace)
    except InvalidConfig as exc:
        raise click.UsageError(str(exc))
    except (EmptyTrace, DiceError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    click.echo(json.dumps(stats.to_dict(), indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
