"""Unidirectional roamer-to-VMNO payment channels.

Two on-chain transactions per channel (open, close); everything in between
is signed off-chain balance proofs, one per completed 100KB traffic block.
The hashed time-lock works as usual: the first proof reveals the preimage
the VMNO needs to claim funds, and an unclaimed deposit refunds to the
roamer after expiry.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from typing import Optional

from . import codec
from .codec import Signer
from .errors import (
    AlreadyClosed,
    BadPreimage,
    BadSignature,
    ChannelNotOpen,
    Expired,
    GapSeq,
    InsufficientBalance,
    Overdraft,
    StaleProof,
    UnknownChannel,
    ZeroDeposit,
)
from .ledger import ChannelClose, ChannelOpen, Ledger, make_transaction
from .tokenbank import TOKEN_BLOCK_BYTES, TokenBank

OPEN, CLOSED = "open", "closed"

DEFAULT_TIMELOCK_WINDOW = 7 * 86_400     # longer than the typical stay
DEFAULT_INACTIVITY_WINDOW = 86_400       # auto-close after a day of silence


@dataclass(frozen=True)
class BalanceProof:
    channel_id: str
    seq: int
    cumulative: int
    preimage: Optional[bytes]  # present only on seq 1
    signature: bytes

    def to_record(self) -> dict:
        return {
            "channel_id": self.channel_id,
            "seq": self.seq,
            "cumulative": self.cumulative,
            "preimage": self.preimage.hex() if self.preimage else None,
            "signature": self.signature.hex(),
        }


def proof_digest(channel_id: str, seq: int, cumulative: int) -> bytes:
    return codec.digest(["proof", channel_id, seq, cumulative])


@dataclass
class TrafficMeter:
    channel_id: str
    bytes_total: int = 0          # serviced bytes (capped by the deposit)
    blocks_paid: int = 0
    unserviced_bytes: int = 0
    exhausted: bool = False


@dataclass
class PaymentChannel:
    channel_id: str
    roamer_wallet: str
    roamer: str
    vmno: str
    issuer: str
    deposit: int
    hashlock: bytes
    timelock_expiry: int
    last_activity: int
    cumulative_paid: int = 0
    last_seq: int = 0
    preimage_revealed: bool = False
    status: str = OPEN
    open_tx: bytes = b""
    close_tx: Optional[bytes] = None
    paid_at_close: Optional[int] = None
    refunded_at_close: Optional[int] = None
    meter: Optional[TrafficMeter] = None

    def __post_init__(self):
        if self.meter is None:
            self.meter = TrafficMeter(self.channel_id)


class ChannelManager:
    """Owns channel state; mutated only by the protocol engine's loop."""

    def __init__(
        self,
        ledger: Ledger,
        bank: TokenBank,
        signer: Signer,
        *,
        timelock_window: int = DEFAULT_TIMELOCK_WINDOW,
        inactivity_window: int = DEFAULT_INACTIVITY_WINDOW,
        round_up_final_block: bool = True,
        preimage_seed: int = 0,
    ):
        self.ledger = ledger
        self.bank = bank
        self.signer = signer
        self.timelock_window = timelock_window
        self.inactivity_window = inactivity_window
        self.round_up_final_block = round_up_final_block
        self.channels: dict[str, PaymentChannel] = {}
        self.accepted_proofs: list[BalanceProof] = []
        self._latest: dict[str, BalanceProof] = {}   # VMNO-side store
        self._preimages: dict[str, bytes] = {}       # roamer-side secrets
        self._rng = random.Random(preimage_seed)
        self._seq = 0

    # -- lifecycle

    def open_channel(self, wallet_id: str, vmno: str, deposit: int, now: int) -> str:
        if deposit < 1:
            raise ZeroDeposit(str(deposit))
        wallet = self.bank.wallet(wallet_id)
        issuer = wallet.home_mno
        if self.bank.spendable(wallet_id, issuer) < deposit:
            raise InsufficientBalance(
                f"{wallet_id} has {self.bank.spendable(wallet_id, issuer)} spendable < {deposit}"
            )
        channel_id = f"ch-{self._seq:07d}"
        self._seq += 1
        preimage = self._rng.randbytes(32)
        hashlock = codec.sha256(preimage)
        expiry = now + self.timelock_window
        tx = make_transaction(
            now, wallet.owner or wallet_id,
            ChannelOpen(channel_id, wallet_id, vmno, deposit, hashlock, expiry),
            self.signer,
        )
        tx_id = self.ledger.submit(tx)
        self.ledger.grant_channel_scope(channel_id, {vmno, issuer})
        self.bank.lock(wallet_id, channel_id, deposit)
        ch = PaymentChannel(
            channel_id=channel_id,
            roamer_wallet=wallet_id,
            roamer=wallet.owner or wallet_id,
            vmno=vmno,
            issuer=issuer,
            deposit=deposit,
            hashlock=hashlock,
            timelock_expiry=expiry,
            last_activity=now,
            open_tx=tx_id,
        )
        self.channels[channel_id] = ch
        self._preimages[channel_id] = preimage
        return channel_id

    def channel(self, channel_id: str) -> PaymentChannel:
        ch = self.channels.get(channel_id)
        if ch is None:
            raise UnknownChannel(channel_id)
        return ch

    # -- off-chain payments

    def pay_for_traffic(self, channel_id: str, new_bytes: int, now: int) -> list[BalanceProof]:
        """Roamer side: meter traffic and emit one proof per completed block.

        Service stops at the deposit: excess bytes are recorded as
        unserviced on the meter rather than raising.
        """
        ch = self.channel(channel_id)
        if ch.status != OPEN:
            raise ChannelNotOpen(channel_id)
        if now >= ch.timelock_expiry:
            raise Expired(channel_id)
        meter = ch.meter
        capacity = ch.deposit * TOKEN_BLOCK_BYTES
        take = min(new_bytes, capacity - meter.bytes_total)
        meter.bytes_total += take
        if take < new_bytes:
            meter.unserviced_bytes += new_bytes - take
            meter.exhausted = True
        proofs = []
        target_blocks = meter.bytes_total // TOKEN_BLOCK_BYTES
        while meter.blocks_paid < target_blocks:
            meter.blocks_paid += 1
            seq = ch.last_seq + 1
            cumulative = meter.blocks_paid
            preimage = self._preimages[channel_id] if seq == 1 else None
            sig = self.signer.sign(ch.roamer, proof_digest(channel_id, seq, cumulative))
            proofs.append(BalanceProof(channel_id, seq, cumulative, preimage, sig))
            ch.last_seq = seq
            ch.cumulative_paid = cumulative
        ch.last_activity = now
        return proofs

    def receive_proof(self, vmno: str, proof: BalanceProof) -> BalanceProof:
        """VMNO side: validate and store the latest balance proof."""
        ch = self.channel(proof.channel_id)
        if ch.vmno != vmno or ch.status != OPEN:
            raise ChannelNotOpen(proof.channel_id)
        if not self.signer.verify(
            ch.roamer, proof_digest(proof.channel_id, proof.seq, proof.cumulative), proof.signature
        ):
            raise BadSignature(f"proof seq {proof.seq}")
        latest = self._latest.get(proof.channel_id)
        expected_seq = (latest.seq if latest else 0) + 1
        if proof.seq < expected_seq:
            raise StaleProof(f"seq {proof.seq} <= {expected_seq - 1}")
        if proof.seq > expected_seq:
            raise GapSeq(f"seq {proof.seq}, expected {expected_seq}")
        if proof.cumulative > ch.deposit:
            raise Overdraft(f"cumulative {proof.cumulative} > deposit {ch.deposit}")
        if proof.cumulative <= (latest.cumulative if latest else 0):
            raise StaleProof(f"cumulative {proof.cumulative} does not increase")
        if proof.seq == 1:
            if proof.preimage is None or codec.sha256(proof.preimage) != ch.hashlock:
                raise BadPreimage(proof.channel_id)
            ch.preimage_revealed = True
        self._latest[proof.channel_id] = proof
        self.accepted_proofs.append(proof)
        return proof

    def latest_accepted(self, channel_id: str) -> Optional[BalanceProof]:
        return self._latest.get(channel_id)

    # -- close paths

    def close_channel(self, channel_id: str, now: int, *, closer: Optional[str] = None) -> bytes:
        """Settle on-chain: pay the VMNO its due, refund the rest."""
        ch = self.channel(channel_id)
        if ch.status == CLOSED:
            raise AlreadyClosed(channel_id)
        latest = self._latest.get(channel_id)
        final_seq = latest.seq if latest else 0
        paid = 0
        if ch.preimage_revealed:
            # Without the revealed preimage the VMNO cannot claim anything,
            # so sub-100KB-only channels refund in full.
            paid = latest.cumulative if latest else 0
            partial = ch.meter.bytes_total > paid * TOKEN_BLOCK_BYTES
            if self.round_up_final_block and partial and paid < ch.deposit:
                paid += 1
        refunded = ch.deposit - paid
        tx = make_transaction(
            now, closer or ch.roamer,
            ChannelClose(channel_id, paid, refunded, final_seq),
            self.signer,
        )
        tx_id = self.ledger.submit(tx)
        # Release the escrow; the refund simply becomes spendable again.
        self.bank.release_lock(ch.roamer_wallet, channel_id)
        if paid:
            self.bank.transfer(ch.roamer_wallet, self.bank.treasury(ch.vmno), ch.issuer, paid, tx_id)
        ch.status = CLOSED
        ch.close_tx = tx_id
        ch.paid_at_close = paid
        ch.refunded_at_close = refunded
        return tx_id

    def timeout_sweep(self, now: int) -> list[str]:
        """Close idle channels with the latest stored proof; refund expired
        channels whose preimage was never revealed."""
        closed = []
        for channel_id in list(self.channels):
            ch = self.channels[channel_id]
            if ch.status != OPEN:
                continue
            expired_unclaimed = now >= ch.timelock_expiry and not ch.preimage_revealed
            idle = now - ch.last_activity >= self.inactivity_window
            if expired_unclaimed or idle:
                self.close_channel(channel_id, now, closer=ch.vmno)
                closed.append(channel_id)
        return closed

    # -- debug / audit surfaces

    def dump_proofs(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for proof in self.accepted_proofs:
                fh.write(json.dumps(proof.to_record(), separators=(",", ":")) + "\n")

    def serviced_bytes_total(self) -> int:
        return sum(ch.meter.bytes_total for ch in self.channels.values())
