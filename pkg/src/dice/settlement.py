"""Financial clearing: provenance-checked token redemption against issuers.

A VMNO may only convert tokens to money if every claimed lot was issued by
the counterparty to one of its own customers and reached the VMNO through a
payment-channel close.  Anything else (direct transfers, relays, forged
lineages, self-issued tokens) is rejected, which is the anti-laundering
core of the scheme.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Union

from .errors import AlreadyBurned, ProvenanceRejected
from .ledger import ChannelClose, ChannelOpen, Issue, Ledger, Redeem, make_transaction
from .tokenbank import TokenBank, treasury_wallet_id

# --- charging models --------------------------------------------------------


@dataclass(frozen=True)
class PerUnit:
    rate: float  # currency per token
    name = "per_unit"


@dataclass(frozen=True)
class Fixed:
    flat: float              # currency per settlement period
    discount: float = 0.0    # post-discount adjustment, in [0, 1]
    name = "fixed"


@dataclass(frozen=True)
class Parity:
    """1 roaming coin buys 1MB and costs 1 euro (tokens are 100KB each)."""
    tokens_per_mb: int = 10
    euro_per_mb: float = 1.0
    name = "parity"


ChargingModel = Union[PerUnit, Fixed, Parity]


def model_to_dict(model: ChargingModel) -> dict:
    if isinstance(model, PerUnit):
        return {"model": "per_unit", "rate": model.rate}
    if isinstance(model, Fixed):
        return {"model": "fixed", "flat": model.flat, "discount": model.discount}
    return {"model": "parity", "tokens_per_mb": model.tokens_per_mb, "euro_per_mb": model.euro_per_mb}


def model_from_dict(spec: dict) -> ChargingModel:
    kind = spec["model"]
    if kind == "per_unit":
        return PerUnit(rate=float(spec["rate"]))
    if kind == "fixed":
        return Fixed(flat=float(spec["flat"]), discount=float(spec.get("discount", 0.0)))
    if kind == "parity":
        return Parity(
            tokens_per_mb=int(spec.get("tokens_per_mb", 10)),
            euro_per_mb=float(spec.get("euro_per_mb", 1.0)),
        )
    raise ValueError(f"unknown charging model {kind!r}")


def price(model: ChargingModel, tokens: int, period_usage=None) -> float:
    """Currency due for a token count under the given model; pure."""
    if tokens < 0:
        raise ValueError("tokens must be non-negative")
    if isinstance(model, PerUnit):
        return tokens * model.rate
    if isinstance(model, Fixed):
        return model.flat * (1.0 - model.discount)
    return tokens / model.tokens_per_mb * model.euro_per_mb


# --- redemption claims and provenance ----------------------------------------


@dataclass
class RedemptionClaim:
    vmno: str
    hmno: str
    lot_ids: list[str]
    period: tuple[int, int]
    fiat_due: float


def make_claim(bank: TokenBank, model: ChargingModel, vmno: str, hmno: str,
               period: tuple[int, int]) -> Optional[RedemptionClaim]:
    """Claim every hmno-issued lot currently held by the VMNO treasury."""
    treasury = treasury_wallet_id(vmno)
    if treasury not in bank.wallets:
        return None
    lots = bank.lots_of(treasury, issuer=hmno)
    if not lots:
        return None
    lot_ids = sorted(l.lot_id for l in lots)
    tokens = sum(l.amount for l in lots)
    return RedemptionClaim(vmno, hmno, lot_ids, period, price(model, tokens))


@dataclass
class ProvenanceVerdict:
    accepted: bool
    offending_lot: Optional[str] = None
    reason: Optional[str] = None


def validate_provenance(bank: TokenBank, ledger: Ledger, claim: RedemptionClaim) -> ProvenanceVerdict:
    """ACCEPT iff every lot was issued by claim.hmno to an hmno customer and
    reached the VMNO wallet through a close of one of the VMNO's channels."""
    channel_vmno: dict[str, str] = {}
    for tx in ledger.all_txs():
        if isinstance(tx.payload, ChannelOpen):
            channel_vmno[tx.payload.channel] = tx.payload.vmno
    treasury = treasury_wallet_id(claim.vmno)
    for lot_id in claim.lot_ids:
        lot = bank.lot(lot_id)

        root = lot.lineage[0]
        root_tx = ledger.get_tx(root.tx_id)
        if root_tx is None or not isinstance(root_tx.payload, Issue) \
                or root_tx.payload.wallet != root.holder:
            return ProvenanceVerdict(False, lot_id, "missing-issuance")
        if root_tx.payload.issuer != claim.hmno:
            return ProvenanceVerdict(False, lot_id, "wrong-issuer")
        first_wallet = bank.wallets.get(root.holder)
        if first_wallet is None or first_wallet.home_mno != claim.hmno:
            return ProvenanceVerdict(False, lot_id, "not-customer-wallet")

        if lot.holder != treasury:
            return ProvenanceVerdict(False, lot_id, "not-held-by-claimant")
        acquisition = lot.lineage[-1]
        cause = ledger.get_tx(acquisition.tx_id)
        if cause is None or not isinstance(cause.payload, ChannelClose):
            return ProvenanceVerdict(False, lot_id, "not-service-payment")
        if channel_vmno.get(cause.payload.channel) != claim.vmno:
            return ProvenanceVerdict(False, lot_id, "not-service-payment")
    return ProvenanceVerdict(True)


def redeem(engine, claim: RedemptionClaim, now: int) -> bytes:
    """Burn the claimed lots, record the redemption on-chain and move fiat.

    ``engine`` is the protocol engine; it owns the bank, the ledger and the
    per-MNO fiat accounts.
    """
    for lot_id in claim.lot_ids:
        if engine.bank.lot(lot_id).burned:
            raise AlreadyBurned(lot_id)
    verdict = validate_provenance(engine.bank, engine.ledger, claim)
    if not verdict.accepted:
        raise ProvenanceRejected(f"{verdict.offending_lot}: {verdict.reason}")
    tx = make_transaction(
        now, claim.vmno,
        Redeem(claim.vmno, claim.hmno, tuple(claim.lot_ids), claim.fiat_due),
        engine.signer,
    )
    tx_id = engine.ledger.submit(tx)
    engine.bank.burn(claim.lot_ids, tx_id)
    engine.fiat[claim.vmno] = engine.fiat.get(claim.vmno, 0.0) + claim.fiat_due
    engine.fiat[claim.hmno] = engine.fiat.get(claim.hmno, 0.0) - claim.fiat_due
    return tx_id


# --- reporting ---------------------------------------------------------------

SETTLEMENT_COLUMNS = ["period_start", "period_end", "vmno", "hmno", "tokens", "model", "fiat"]


def write_settlement_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=SETTLEMENT_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
