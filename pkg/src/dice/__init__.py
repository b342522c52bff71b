"""Desk-scale deterministic simulator of the DICE roaming-settlement protocol."""

from .channel import BalanceProof, ChannelManager, PaymentChannel, TrafficMeter
from .harness import (
    MetricsReport,
    RequirementsAssumptions,
    RequirementsVerdict,
    ScenarioConfig,
    check_requirements,
    run_scenario,
    verify_ledger,
)
from .ledger import Block, Ledger, QueryFilter, Transaction, ValidityReport
from .protocol import AgreementTerms, DiceEngine, RoamerSession, SessionEvents
from .settlement import (
    ChargingModel,
    Fixed,
    Parity,
    PerUnit,
    RedemptionClaim,
    make_claim,
    price,
    redeem,
    validate_provenance,
)
from .tokenbank import Mno, TokenBank, TokenLot, Wallet
from .workload import (
    CalibrationStats,
    SessionEventTrace,
    WorkloadConfig,
    calibration_report,
    generate,
)

__version__ = "0.1.0"

__all__ = [
    "BalanceProof", "ChannelManager", "PaymentChannel", "TrafficMeter",
    "MetricsReport", "RequirementsAssumptions", "RequirementsVerdict",
    "ScenarioConfig", "check_requirements", "run_scenario", "verify_ledger",
    "Block", "Ledger", "QueryFilter", "Transaction", "ValidityReport",
    "AgreementTerms", "DiceEngine", "RoamerSession", "SessionEvents",
    "ChargingModel", "Fixed", "Parity", "PerUnit", "RedemptionClaim",
    "make_claim", "price", "redeem", "validate_provenance",
    "Mno", "TokenBank", "TokenLot", "Wallet",
    "CalibrationStats", "SessionEventTrace", "WorkloadConfig",
    "calibration_report", "generate",
    "__version__",
]
