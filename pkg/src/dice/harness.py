"""Scenario runner, metrics aggregation and the requirements audit.

One simulated visited MNO is driven at desk scale through the full
protocol for every synthetic roamer; results extrapolate to the
consortium-wide figures used for the throughput feasibility check.
"""

from __future__ import annotations

import json
import random
from collections import Counter
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import jsonschema

from . import codec, settlement
from .errors import Expired, InvalidConfig, IoFailure, LedgerParseError
from .ledger import load_blocks_jsonl, verify_blocks
from .protocol import ACTIVE, CHANNEL_OPEN, LBO, SETTLED, AgreementTerms, DiceEngine, events_to_jsonl
from .settlement import make_claim, model_from_dict, write_settlement_csv
from .tokenbank import Mno, TokenBank, tokens_for_bytes
from .workload import SessionEventTrace, WorkloadConfig, generate

DAY = 86_400

SCENARIO_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "days": {"type": "integer", "minimum": 1},
        "scale": {"type": "number", "exclusiveMinimum": 0},
        "mode": {"enum": ["lbo", "hr"]},
        "vmno": {"type": "string", "minLength": 1},
        "num_mnos": {"type": "integer", "minimum": 1},
        "roamers_per_vmno_day": {"type": "integer", "minimum": 1},
        "churn_fraction_range": {
            "type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1},
            "minItems": 2, "maxItems": 2,
        },
        "stay_days_median": {"type": "number", "exclusiveMinimum": 0},
        "silent_fraction": {"type": "number", "minimum": 0, "maximum": 1},
        "daily_traffic_median_bytes": {"type": "integer", "minimum": 1},
        "traffic_dispersion": {"type": "number", "minimum": 0},
        "home_country_top10_share": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "home_mno_top10_traffic_share": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "num_home_countries": {"type": "integer", "minimum": 1},
        "num_home_mnos": {"type": "integer", "minimum": 1},
        "initial_allotment": {"type": "integer", "minimum": 1},
        "expected_visit_bytes": {"type": "integer", "minimum": 1},
        "charging": {"type": "object"},
        "timelock_window_s": {"type": "integer", "minimum": 1},
        "inactivity_window_s": {"type": "integer", "minimum": 1},
        "round_up_final_block": {"type": "boolean"},
        "tps_capacity": {"type": "integer", "minimum": 1},
        "concentration_hours": {"type": "number", "exclusiveMinimum": 0},
        "avg_mno_factor": {"type": "number", "exclusiveMinimum": 0},
    },
}


@dataclass
class ScenarioConfig:
    seed: int = 42
    days: int = 28
    scale: float = 0.001
    mode: str = LBO
    vmno: str = "V-001"
    num_mnos: int = 800
    roamers_per_vmno_day: int = 400_000
    churn_fraction_range: tuple[float, float] = (0.10, 0.30)
    stay_days_median: float = 2.5
    silent_fraction: float = 0.5
    daily_traffic_median_bytes: int = 1_000_000
    traffic_dispersion: float = 1.0
    home_country_top10_share: float = 0.60
    home_mno_top10_traffic_share: float = 0.50
    num_home_countries: int = 188
    num_home_mnos: int = 400
    initial_allotment: int = 100
    expected_visit_bytes: int = 2_500_000
    charging: dict = field(default_factory=lambda: {"model": "per_unit", "rate": 0.04})
    timelock_window_s: int = 7 * DAY
    inactivity_window_s: int = DAY
    round_up_final_block: bool = True
    tps_capacity: int = 20_000
    concentration_hours: float = 4.0
    # Ratio of the average consortium member's inbound-roaming volume to the
    # modeled (medium-large) operator's; reconciles the per-operator counts
    # with the published consortium-wide aggregates.
    avg_mno_factor: float = 0.02

    def workload(self) -> WorkloadConfig:
        return WorkloadConfig(
            seed=self.seed,
            num_mnos=self.num_mnos,
            roamers_per_vmno_day=self.roamers_per_vmno_day,
            churn_fraction_range=tuple(self.churn_fraction_range),
            stay_days_median=self.stay_days_median,
            silent_fraction=self.silent_fraction,
            daily_traffic_median_bytes=self.daily_traffic_median_bytes,
            traffic_dispersion=self.traffic_dispersion,
            home_country_top10_share=self.home_country_top10_share,
            home_mno_top10_traffic_share=self.home_mno_top10_traffic_share,
            num_home_countries=self.num_home_countries,
            num_home_mnos=self.num_home_mnos,
            days=self.days,
            scale=self.scale,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["churn_fraction_range"] = list(self.churn_fraction_range)
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "ScenarioConfig":
        try:
            jsonschema.validate(raw, SCENARIO_SCHEMA)
        except jsonschema.ValidationError as exc:
            raise InvalidConfig(exc.message) from None
        data = dict(raw)
        if "churn_fraction_range" in data:
            data["churn_fraction_range"] = tuple(data["churn_fraction_range"])
        return cls(**data)

    @classmethod
    def from_json_file(cls, path) -> "ScenarioConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise IoFailure(str(exc)) from None
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"not valid JSON: {exc}") from None
        return cls.from_dict(raw)


# --- metrics -----------------------------------------------------------------


@dataclass
class MetricsReport:
    config: dict
    onchain_tx_total: int
    onchain_tx_by_kind: dict[str, int]
    offchain_proofs_total: int
    peak_onchain_tps: int
    sessions_completed: int
    silent_sessions: int
    bytes_serviced: int
    tokens_settled_by_pair: dict[str, int]
    fiat_cleared_by_pair: dict[str, float]
    extrapolated: dict

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")) + "\n"

    @classmethod
    def from_json_file(cls, path) -> "MetricsReport":
        with open(path, "r", encoding="utf-8") as fh:
            return cls(**json.load(fh))


def extrapolate(raw: float, scale: float, num_mnos: int) -> int:
    """Desk-scale count -> consortium-wide count; round-half-up via round()."""
    return int(round(raw * num_mnos / scale))


# --- scenario runner -----------------------------------------------------------

# Event priorities fix the order of same-second actions.
_P_BOUNDARY, _P_ARRIVE, _P_TRAFFIC, _P_DEPART, _P_CLOSEOUT, _P_REDEEM = range(6)


def run_scenario(
    config: ScenarioConfig,
    out_dir,
    *,
    trace: Optional[SessionEventTrace] = None,
    dump_proofs: bool | str = False,
    dump_events: bool | str = False,
    on_seal=None,
) -> MetricsReport:
    """Drive every roamer in the trace through the protocol end to end.

    Deterministic for a fixed config; ``trace`` may inject a handcrafted
    workload in place of the generated one.  ``on_seal`` (if given) is
    called with the engine after every sealed block, for audit hooks.
    ``dump_proofs``/``dump_events`` accept True (default file name in
    out_dir) or an explicit path.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(str(exc)) from None
    if trace is None:
        trace = generate(config.workload())

    hmnos = sorted({a.hmno for a in trace.arrivals})
    roamers = [a.roamer for a in trace.arrivals]
    mnos = [Mno(config.vmno)] + [Mno(h) for h in hmnos]
    engine = DiceEngine(
        mnos, roamers,
        seed=config.seed,
        timelock_window=config.timelock_window_s,
        inactivity_window=config.inactivity_window_s,
        round_up_final_block=config.round_up_final_block,
    )
    model = model_from_dict(config.charging)
    for hmno in hmnos:
        engine.register_agreement(
            hmno, config.vmno,
            AgreementTerms(frozenset({hmno}), dict(config.charging)), 0,
        )

    offset_rng = random.Random(codec.derive_seed(config.seed, "offsets"))
    offsets = {a.roamer: offset_rng.randrange(DAY) for a in trace.arrivals}

    events: list[tuple[int, int, int, str, tuple]] = []
    seq = 0

    def push(t: int, prio: int, action: str, payload: tuple) -> None:
        nonlocal seq
        events.append((t, prio, seq, action, payload))
        seq += 1

    horizon = config.days * DAY
    for a in trace.arrivals:
        t_arr = a.day * DAY + offsets[a.roamer]
        push(t_arr, _P_ARRIVE, "arrive", (a,))
        for day, nbytes in trace.traffic.get(a.roamer, ()):
            push(day * DAY + offsets[a.roamer], _P_TRAFFIC, "traffic", (a.roamer, nbytes))
        dep_day = a.day + a.stay_days
        if dep_day <= config.days:
            push(dep_day * DAY + offsets[a.roamer], _P_DEPART, "depart", (a.roamer,))
    for d in range(1, config.days + 1):
        push(d * DAY, _P_BOUNDARY, "boundary", ())
    push(horizon, _P_CLOSEOUT, "closeout", ())
    push(horizon, _P_REDEEM, "redeem", ())
    events.sort(key=lambda e: (e[0], e[1], e[2]))

    session_of: dict[str, str] = {}
    settlement_rows: list[dict] = []

    def seal(now: int) -> None:
        block = engine.seal_if_pending(now)
        if block is not None and on_seal is not None:
            on_seal(engine)

    for now, _prio, _seq, action, payload in events:
        if action == "arrive":
            (a,) = payload
            wallets = engine.bank.create_identities(a.hmno, a.roamer, 1, [config.initial_allotment], now)
            session = engine.new_session(a.roamer, wallets[0], a.hmno, config.vmno, config.mode, now)
            session_of[a.roamer] = session.session_id
            engine.attach_check(session, now)
            if config.mode == LBO:
                engine.provision_profile(session)
            deposit = min(
                engine.bank.balance(wallets[0], a.hmno),
                tokens_for_bytes(config.expected_visit_bytes),
            )
            engine.open_session_channel(session, deposit, now)
        elif action == "traffic":
            roamer, nbytes = payload
            session = engine.sessions[session_of[roamer]]
            if session.state in (CHANNEL_OPEN, ACTIVE):
                try:
                    engine.session_traffic(session, nbytes, now)
                except Expired:
                    pass  # channel contract lapsed; the sweep will close it
        elif action == "depart":
            (roamer,) = payload
            session = engine.sessions[session_of[roamer]]
            if session.state in (CHANNEL_OPEN, ACTIVE):
                engine.detach(session, now)
        elif action == "boundary":
            engine.timeout_sweep(now)
            seal(now)
        elif action == "closeout":
            for session in engine.sessions.values():
                if session.state in (CHANNEL_OPEN, ACTIVE):
                    engine.detach(session, now)
        elif action == "redeem":
            for hmno in hmnos:
                claim = make_claim(engine.bank, model, config.vmno, hmno, (0, horizon))
                if claim is None:
                    continue
                tokens = sum(engine.bank.lot(l).amount for l in claim.lot_ids)
                settlement.redeem(engine, claim, now)
                settlement_rows.append({
                    "period_start": 0,
                    "period_end": horizon,
                    "vmno": config.vmno,
                    "hmno": hmno,
                    "tokens": tokens,
                    "model": config.charging["model"],
                    "fiat": f"{claim.fiat_due:.6f}",
                })
            seal(now)

    def resolve(option, default_name):
        name = option if isinstance(option, str) else default_name
        path = Path(name)
        return path if path.is_absolute() else out_dir / path

    report = _build_report(config, engine, trace)
    try:
        (out_dir / "report.json").write_text(report.to_json(), encoding="utf-8")
        engine.ledger.save_jsonl(out_dir / "ledger.jsonl")
        write_settlement_csv(out_dir / "settlement.csv", settlement_rows)
        if dump_proofs:
            engine.channels.dump_proofs(resolve(dump_proofs, "proofs.jsonl"))
        if dump_events:
            all_events = [ev for s in engine.sessions.values() for ev in s.events]
            all_events.sort(key=lambda ev: (ev["time"], ev["session_id"]))
            events_to_jsonl(all_events, resolve(dump_events, "events.jsonl"))
    except OSError as exc:
        raise IoFailure(str(exc)) from None
    return report


def _build_report(config: ScenarioConfig, engine: DiceEngine, trace: SessionEventTrace) -> MetricsReport:
    by_kind: Counter = Counter()
    per_second: Counter = Counter()
    for tx in engine.ledger.all_txs():
        by_kind[tx.payload.kind] += 1
        per_second[tx.timestamp] += 1
    onchain_total = sum(by_kind.values())
    peak_tps = max(per_second.values()) if per_second else 0

    tokens_by_pair: dict[str, int] = {}
    for ch in engine.channels.channels.values():
        if ch.paid_at_close:
            key = f"{ch.vmno}|{ch.issuer}"
            tokens_by_pair[key] = tokens_by_pair.get(key, 0) + ch.paid_at_close
    fiat_by_pair: dict[str, float] = {}
    for tx in engine.ledger.all_txs():
        if tx.payload.kind == "redeem":
            key = f"{tx.payload.vmno}|{tx.payload.hmno}"
            fiat_by_pair[key] = fiat_by_pair.get(key, 0.0) + tx.payload.fiat

    sessions_completed = sum(1 for s in engine.sessions.values() if s.state == SETTLED)
    offchain_total = len(engine.channels.accepted_proofs)
    bytes_serviced = engine.channels.serviced_bytes_total()
    factor_args = (config.scale, config.num_mnos)
    extrapolated = {
        "onchain_tx_total": extrapolate(onchain_total, *factor_args),
        "offchain_proofs_total": extrapolate(offchain_total, *factor_args),
        "sessions_completed": extrapolate(sessions_completed, *factor_args),
        "bytes_serviced": extrapolate(bytes_serviced, *factor_args),
        "peak_onchain_tps": extrapolate(peak_tps, *factor_args),
    }
    return MetricsReport(
        config=config.to_dict(),
        onchain_tx_total=onchain_total,
        onchain_tx_by_kind=dict(sorted(by_kind.items())),
        offchain_proofs_total=offchain_total,
        peak_onchain_tps=peak_tps,
        sessions_completed=sessions_completed,
        silent_sessions=sum(1 for a in trace.arrivals if a.silent),
        bytes_serviced=bytes_serviced,
        tokens_settled_by_pair=dict(sorted(tokens_by_pair.items())),
        fiat_cleared_by_pair=dict(sorted(fiat_by_pair.items())),
        extrapolated=extrapolated,
    )


# --- requirements audit ----------------------------------------------------------


@dataclass
class RequirementsAssumptions:
    tps_capacity: int = 20_000
    concentration_hours: float = 4.0
    visited_mno_daily_bytes: Optional[int] = 10_000_000_000_000  # 10 TB/day
    billing_granularity_bytes: int = 100_000
    avg_mno_factor: Optional[float] = None  # default: from the report config


@dataclass
class RequirementsVerdict:
    capacity_tps: int
    projected_peak_tps: float
    headroom_ratio: float
    daily_onchain_projected: float        # consortium-wide
    daily_offchain_projected: float       # per visited MNO
    daily_offchain_consortium: float
    passed: bool

    def to_dict(self) -> dict:
        return asdict(self)


def check_requirements(report: MetricsReport, assumptions: RequirementsAssumptions) -> RequirementsVerdict:
    """Extrapolate the desk-scale run to consortium scale and test it
    against the reference ledger capacity."""
    cfg = report.config
    scale = float(cfg["scale"])
    days = int(cfg["days"])
    num_mnos = int(cfg["num_mnos"])
    factor = assumptions.avg_mno_factor
    if factor is None:
        factor = float(cfg.get("avg_mno_factor", 1.0))

    onchain_daily_full = report.onchain_tx_total / days / scale
    daily_onchain = onchain_daily_full * num_mnos * factor
    if assumptions.visited_mno_daily_bytes is not None:
        daily_offchain = assumptions.visited_mno_daily_bytes / assumptions.billing_granularity_bytes
    else:
        daily_offchain = report.offchain_proofs_total / days / scale
    daily_offchain_consortium = daily_offchain * num_mnos * factor

    peak = daily_onchain / (assumptions.concentration_hours * 3600.0)
    return RequirementsVerdict(
        capacity_tps=assumptions.tps_capacity,
        projected_peak_tps=peak,
        headroom_ratio=assumptions.tps_capacity / peak if peak > 0 else float("inf"),
        daily_onchain_projected=daily_onchain,
        daily_offchain_projected=daily_offchain,
        daily_offchain_consortium=daily_offchain_consortium,
        passed=peak < assumptions.tps_capacity,
    )


# --- persisted-ledger verification --------------------------------------------------


@dataclass
class LedgerFileReport:
    valid: bool
    first_invalid_height: Optional[int] = None
    reason: str = ""

    @property
    def exit_code(self) -> int:
        return 0 if self.valid else 1


def verify_ledger(path) -> LedgerFileReport:
    """Full integrity pass over a persisted chain: hashes, signatures,
    links, then a bank replay with supply-closure cross-check."""
    if not Path(path).exists():
        raise IoFailure(f"no such file: {path}")
    try:
        blocks = load_blocks_jsonl(path)
    except LedgerParseError as exc:
        return LedgerFileReport(False, exc.line, f"parse error: {exc}")
    verdict = verify_blocks(blocks)
    if not verdict.valid:
        return LedgerFileReport(False, verdict.first_invalid_height, verdict.reason)
    if blocks:
        replayed = _ReplayLedger(blocks)
        mnos = {m: Mno(m) for m in blocks[0].roster}
        try:
            bank = TokenBank.rebuild_from_ledger(replayed, mnos)
        except Exception as exc:
            return LedgerFileReport(False, None, f"replay failed: {exc}")
        if not bank.supply_closure_ok():
            return LedgerFileReport(False, None, "supply closure violated")
    return LedgerFileReport(True)


class _ReplayLedger:
    """Read-only view over loaded blocks, sufficient for a bank rebuild."""

    def __init__(self, blocks):
        self.chain = blocks
        self.signer_backend = codec.KeyedMacSigner(blocks[0].keys if blocks else {})
        self._index = {}
        for block in blocks:
            for tx in block.txs:
                self._index[tx.tx_id] = tx

    def all_txs(self):
        for block in self.chain:
            yield from block.txs

    def get_tx(self, tx_id):
        return self._index.get(tx_id)
