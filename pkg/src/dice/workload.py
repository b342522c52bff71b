"""Deterministic synthetic inbound-roamer workload for one visited MNO.

The generator reproduces the published population dynamics of a real
operator: daily arrivals at 10-30% of the standing population, geometric
stays with a 2.5-day median, half the roamers silent, log-normal daily
traffic with a 1MB median, and power-law home-country / home-MNO
popularity calibrated so the top 10 carry the reported shares.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import EmptyTrace, InvalidConfig


@dataclass
class WorkloadConfig:
    seed: int = 42
    num_mnos: int = 800                      # consortium size used for extrapolation
    roamers_per_vmno_day: int = 400_000      # standing inbound population, full scale
    churn_fraction_range: tuple[float, float] = (0.10, 0.30)
    stay_days_median: float = 2.5
    silent_fraction: float = 0.5
    daily_traffic_median_bytes: int = 1_000_000
    traffic_dispersion: float = 1.0          # log-scale sigma
    home_country_top10_share: float = 0.60
    home_mno_top10_traffic_share: float = 0.50
    num_home_countries: int = 188
    num_home_mnos: int = 400
    days: int = 28
    scale: float = 0.001                     # desk-scale downsampling factor

    def validate(self) -> None:
        lo, hi = self.churn_fraction_range
        checks = [
            self.days >= 1,
            self.scale > 0,
            0.0 <= lo <= hi <= 1.0,
            0.0 <= self.silent_fraction <= 1.0,
            0.0 < self.home_country_top10_share <= 1.0,
            0.0 < self.home_mno_top10_traffic_share <= 1.0,
            self.stay_days_median > 0,
            self.daily_traffic_median_bytes > 0,
            self.traffic_dispersion >= 0,
            self.num_home_countries >= 1,
            self.num_home_mnos >= 1,
            self.roamers_per_vmno_day >= 1,
        ]
        if not all(checks):
            raise InvalidConfig(f"invalid workload config: {self}")


@dataclass
class Arrival:
    day: int
    roamer: str
    hmno: str
    home_country: str
    stay_days: int
    silent: bool
    carried_over: bool = False


@dataclass
class SessionEventTrace:
    config: WorkloadConfig
    arrivals: list[Arrival] = field(default_factory=list)
    # roamer -> [(day, bytes), ...], present only for non-silent roamers
    traffic: dict[str, list[tuple[int, int]]] = field(default_factory=dict)

    def total_bytes(self) -> int:
        return sum(b for rows in self.traffic.values() for _, b in rows)


# --- popularity laws ---------------------------------------------------------


def _top_share(alpha: float, n: int, k: int) -> float:
    weights = np.arange(1, n + 1, dtype=float) ** -alpha
    total = weights.sum()
    return float(weights[:k].sum() / total)


def solve_powerlaw_exponent(n: int, top_k: int, target_share: float) -> float:
    """Exponent of a truncated discrete power law whose top-k mass matches
    the target; solved by bisection (the share is monotone in alpha)."""
    if n <= top_k:
        return 1.0
    lo, hi = 0.0, 16.0
    if _top_share(hi, n, top_k) < target_share:
        return hi
    for _ in range(200):
        mid = (lo + hi) / 2.0
        if _top_share(mid, n, top_k) < target_share:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2.0


def powerlaw_probs(n: int, top_k: int, target_share: float) -> np.ndarray:
    alpha = solve_powerlaw_exponent(n, top_k, target_share)
    weights = np.arange(1, n + 1, dtype=float) ** -alpha
    return weights / weights.sum()


def assign_mnos_to_countries(mno_probs: np.ndarray, country_probs: np.ndarray) -> np.ndarray:
    """Greedy mapping of MNO ranks onto countries so the country mass
    induced by drawing an MNO tracks the country popularity targets."""
    deficit = country_probs.astype(float).copy()
    assignment = np.zeros(len(mno_probs), dtype=int)
    for m in range(len(mno_probs)):
        c = int(np.argmax(deficit))
        assignment[m] = c
        deficit[c] -= mno_probs[m]
    return assignment


# --- generation ---------------------------------------------------------------


def generate(config: WorkloadConfig) -> SessionEventTrace:
    """Pure function of the config: same seed, byte-identical trace."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    trace = SessionEventTrace(config)

    mno_probs = powerlaw_probs(config.num_home_mnos, 10, config.home_mno_top10_traffic_share)
    country_probs = powerlaw_probs(config.num_home_countries, 10, config.home_country_top10_share)
    mno_country = assign_mnos_to_countries(mno_probs, country_probs)

    # Daily departure probability of the geometric stay law, parameterized
    # so the interpolated median sits at the configured value.
    p_depart = 1.0 - 2.0 ** (-1.0 / config.stay_days_median)
    mu = math.log(config.daily_traffic_median_bytes)
    sigma = config.traffic_dispersion
    lo, hi = config.churn_fraction_range

    cohort = max(1, round(config.roamers_per_vmno_day * config.scale))
    active: list[Arrival] = []
    remaining: list[int] = []       # days left, aligned with `active`
    seq = 0

    for day in range(config.days):
        if day == 0:
            n_arrivals = cohort  # initial standing population
        else:
            n_arrivals = int(round(float(rng.uniform(lo, hi)) * len(active)))
        if n_arrivals > 0:
            stays = rng.geometric(p_depart, size=n_arrivals)
            silents = rng.random(n_arrivals) < config.silent_fraction
            homes = rng.choice(config.num_home_mnos, size=n_arrivals, p=mno_probs)
            for i in range(n_arrivals):
                stay = int(stays[i])
                arrival = Arrival(
                    day=day,
                    roamer=f"r-{seq:07d}",
                    hmno=f"H{homes[i] + 1:03d}",
                    home_country=f"C{mno_country[homes[i]] + 1:03d}",
                    stay_days=stay,
                    silent=bool(silents[i]),
                    carried_over=day + stay > config.days,
                )
                seq += 1
                trace.arrivals.append(arrival)
                active.append(arrival)
                remaining.append(stay)
        # Traffic for every non-silent roamer active today.
        talkers = [a for a in active if not a.silent]
        if talkers:
            draws = rng.lognormal(mean=mu, sigma=sigma, size=len(talkers))
            for arrival, raw in zip(talkers, draws):
                nbytes = max(1, int(round(float(raw))))
                trace.traffic.setdefault(arrival.roamer, []).append((day, nbytes))
        # Departures at end of day.
        keep_a, keep_r = [], []
        for arrival, left in zip(active, remaining):
            if left > 1:
                keep_a.append(arrival)
                keep_r.append(left - 1)
        active, remaining = keep_a, keep_r
    return trace


# --- calibration ---------------------------------------------------------------


@dataclass
class CalibrationStats:
    arrivals_total: int
    silent_share: float
    median_stay_days: float
    median_daily_traffic_bytes: float
    top10_country_share: float
    top10_mno_traffic_share: float
    total_bytes: int
    days: int
    churn_in_band_fraction: float

    def to_dict(self) -> dict:
        return asdict(self)


def calibration_report(trace: SessionEventTrace) -> CalibrationStats:
    """Single-pass recount of the raw trace; no generator state involved."""
    if not trace.arrivals:
        raise EmptyTrace("no arrivals in trace")
    config = trace.config

    silent = sum(1 for a in trace.arrivals if a.silent)
    stays = np.array([a.stay_days for a in trace.arrivals], dtype=float)
    daily = np.array(
        [b for rows in trace.traffic.values() for _, b in rows], dtype=float
    )

    by_country: dict[str, int] = {}
    bytes_by_mno: dict[str, int] = {}
    for a in trace.arrivals:
        by_country[a.home_country] = by_country.get(a.home_country, 0) + 1
    for a in trace.arrivals:
        rows = trace.traffic.get(a.roamer)
        if rows:
            bytes_by_mno[a.hmno] = bytes_by_mno.get(a.hmno, 0) + sum(b for _, b in rows)

    def top10_share(counts: dict[str, int]) -> float:
        values = sorted(counts.values(), reverse=True)
        total = sum(values)
        return sum(values[:10]) / total if total else 0.0

    # Daily churn ratio: arrivals over the population standing at day start.
    arrivals_by_day = [0] * config.days
    for a in trace.arrivals:
        arrivals_by_day[a.day] += 1
    active_start = [0] * config.days
    for a in trace.arrivals:
        for d in range(a.day + 1, min(a.day + a.stay_days, config.days)):
            active_start[d] += 1
    lo, hi = config.churn_fraction_range
    band_lo, band_hi = lo * 0.8, hi * 1.1  # tolerance around the configured band
    in_band = 0
    measurable = 0
    for d in range(config.days):
        if active_start[d] == 0:
            continue
        measurable += 1
        ratio = arrivals_by_day[d] / active_start[d]
        if band_lo <= ratio <= band_hi:
            in_band += 1

    return CalibrationStats(
        arrivals_total=len(trace.arrivals),
        silent_share=silent / len(trace.arrivals),
        median_stay_days=float(np.median(stays)),
        median_daily_traffic_bytes=float(np.median(daily)) if daily.size else 0.0,
        top10_country_share=top10_share(by_country),
        top10_mno_traffic_share=top10_share(bytes_by_mno),
        total_bytes=int(daily.sum()) if daily.size else 0,
        days=config.days,
        churn_in_band_fraction=in_band / measurable if measurable else 0.0,
    )


# --- persistence ----------------------------------------------------------------


def save_trace_jsonl(trace: SessionEventTrace, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"kind": "config", **asdict(trace.config)},
                            separators=(",", ":"), sort_keys=True) + "\n")
        for a in trace.arrivals:
            fh.write(json.dumps({"kind": "arrival", **asdict(a)},
                                separators=(",", ":"), sort_keys=True) + "\n")
        for roamer in trace.traffic:
            for day, nbytes in trace.traffic[roamer]:
                fh.write(json.dumps({"kind": "traffic", "roamer": roamer,
                                     "day": day, "bytes": nbytes},
                                    separators=(",", ":"), sort_keys=True) + "\n")


def load_trace_jsonl(path) -> SessionEventTrace:
    trace = None
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            kind = rec.pop("kind")
            if kind == "config":
                rec["churn_fraction_range"] = tuple(rec["churn_fraction_range"])
                trace = SessionEventTrace(WorkloadConfig(**rec))
            elif kind == "arrival":
                trace.arrivals.append(Arrival(**rec))
            elif kind == "traffic":
                trace.traffic.setdefault(rec["roamer"], []).append((rec["day"], rec["bytes"]))
    if trace is None:
        raise EmptyTrace(str(path))
    return trace
