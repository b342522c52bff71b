"""Append-only consortium ledger with deterministic round-robin sealing.

Consensus is intentionally trivial: a fixed roster seals blocks in turn and
every hash is recomputable, so two identical submission sequences produce
byte-identical chains.  Confidentiality is modeled through per-channel read
scopes enforced at query time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional

from . import codec
from .codec import ZERO_DIGEST, Signer
from .errors import (
    BadSignature,
    DuplicateTx,
    EmptyPending,
    LedgerParseError,
    PayloadRejected,
    UnknownReader,
    UnknownSigner,
)

# --- transaction payloads ---------------------------------------------------


@dataclass(frozen=True)
class Issue:
    issuer: str
    wallet: str
    amount: int
    kind = "issue"

    def to_fields(self) -> dict:
        return {"issuer": self.issuer, "wallet": self.wallet, "amount": self.amount}


@dataclass(frozen=True)
class AgreementRegistration:
    hmno: str
    vmno: str
    accepts: tuple[str, ...]
    charging: dict
    kind = "agreement"

    def to_fields(self) -> dict:
        return {
            "hmno": self.hmno,
            "vmno": self.vmno,
            "accepts": list(self.accepts),
            "charging": self.charging,
        }


@dataclass(frozen=True)
class AttachCheck:
    roamer_wallet: str
    vmno: str
    hmno: str
    accepted: bool
    kind = "attach"

    def to_fields(self) -> dict:
        return {
            "roamer_wallet": self.roamer_wallet,
            "vmno": self.vmno,
            "hmno": self.hmno,
            "accepted": self.accepted,
        }


@dataclass(frozen=True)
class ChannelOpen:
    channel: str
    wallet: str
    vmno: str
    deposit: int
    hashlock: bytes
    timelock_expiry: int
    kind = "channel_open"

    def to_fields(self) -> dict:
        return {
            "channel": self.channel,
            "wallet": self.wallet,
            "vmno": self.vmno,
            "deposit": self.deposit,
            "hashlock": self.hashlock.hex(),
            "timelock_expiry": self.timelock_expiry,
        }


@dataclass(frozen=True)
class ChannelClose:
    channel: str
    paid: int
    refunded: int
    final_seq: int
    kind = "channel_close"

    def to_fields(self) -> dict:
        return {
            "channel": self.channel,
            "paid": self.paid,
            "refunded": self.refunded,
            "final_seq": self.final_seq,
        }


@dataclass(frozen=True)
class Redeem:
    vmno: str
    hmno: str
    lots: tuple[str, ...]
    fiat: float
    kind = "redeem"

    def to_fields(self) -> dict:
        return {
            "vmno": self.vmno,
            "hmno": self.hmno,
            "lots": list(self.lots),
            "fiat": self.fiat,
        }


TxPayload = Issue | AgreementRegistration | AttachCheck | ChannelOpen | ChannelClose | Redeem

_PAYLOAD_KINDS = {
    cls.kind: cls
    for cls in (Issue, AgreementRegistration, AttachCheck, ChannelOpen, ChannelClose, Redeem)
}

# Token amounts are non-negative integers for every payload kind that has one.
_AMOUNT_FIELDS = {
    "issue": ("amount",),
    "channel_open": ("deposit",),
    "channel_close": ("paid", "refunded"),
}


def payload_canonical(payload: TxPayload) -> list:
    return [payload.kind, payload.to_fields()]


def payload_from_fields(kind: str, fields: dict) -> TxPayload:
    cls = _PAYLOAD_KINDS.get(kind)
    if cls is None:
        raise ValueError(f"unknown payload kind {kind!r}")
    fields = dict(fields)
    if kind == "agreement":
        fields["accepts"] = tuple(fields["accepts"])
    elif kind == "channel_open":
        fields["hashlock"] = bytes.fromhex(fields["hashlock"])
    elif kind == "redeem":
        fields["lots"] = tuple(fields["lots"])
    return cls(**fields)


# --- transactions and blocks ------------------------------------------------


@dataclass(frozen=True)
class Transaction:
    tx_id: bytes
    timestamp: int
    signer: str
    payload: TxPayload
    signature: bytes

    def to_record(self) -> dict:
        return {
            "tx_id": self.tx_id.hex(),
            "timestamp": self.timestamp,
            "signer": self.signer,
            "payload": {"kind": self.payload.kind, **self.payload.to_fields()},
            "signature": self.signature.hex(),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Transaction":
        pl = dict(rec["payload"])
        kind = pl.pop("kind")
        return cls(
            tx_id=bytes.fromhex(rec["tx_id"]),
            timestamp=int(rec["timestamp"]),
            signer=rec["signer"],
            payload=payload_from_fields(kind, pl),
            signature=bytes.fromhex(rec["signature"]),
        )


def tx_digest(timestamp: int, signer: str, payload: TxPayload) -> bytes:
    return codec.digest([timestamp, signer, payload_canonical(payload)])


def make_transaction(timestamp: int, signer: str, payload: TxPayload, backend: Signer) -> Transaction:
    """Build a signed transaction; tx_id commits to (timestamp, signer, payload)."""
    tx_id = tx_digest(timestamp, signer, payload)
    return Transaction(tx_id, timestamp, signer, payload, backend.sign(signer, tx_id))


def _genesis_root(roster: tuple[str, ...], keys: dict[str, bytes]) -> bytes:
    return codec.digest(["genesis", list(roster), {a: k.hex() for a, k in sorted(keys.items())}])


def block_digest(height: int, prev_hash: bytes, tx_root: bytes, validator: str, sealed_at: int) -> bytes:
    return codec.digest([height, prev_hash, tx_root, validator, sealed_at])


@dataclass(frozen=True)
class Block:
    height: int
    prev_hash: bytes
    tx_root: bytes
    validator: str
    sealed_at: int
    block_hash: bytes
    txs: tuple[Transaction, ...] = ()
    # Genesis only: the consortium roster and actor key registry the chain
    # anchors to.  Covered by tx_root so the registry is tamper-evident.
    roster: tuple[str, ...] = ()
    keys: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        rec = {
            "height": self.height,
            "prev_hash": self.prev_hash.hex(),
            "tx_root": self.tx_root.hex(),
            "validator": self.validator,
            "sealed_at": self.sealed_at,
            "block_hash": self.block_hash.hex(),
            "txs": [tx.to_record() for tx in self.txs],
        }
        if self.height == 0:
            rec["roster"] = list(self.roster)
            rec["keys"] = {a: k.hex() for a, k in sorted(self.keys.items())}
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "Block":
        return cls(
            height=int(rec["height"]),
            prev_hash=bytes.fromhex(rec["prev_hash"]),
            tx_root=bytes.fromhex(rec["tx_root"]),
            validator=rec["validator"],
            sealed_at=int(rec["sealed_at"]),
            block_hash=bytes.fromhex(rec["block_hash"]),
            txs=tuple(Transaction.from_record(t) for t in rec["txs"]),
            roster=tuple(rec.get("roster", ())),
            keys={a: bytes.fromhex(k) for a, k in rec.get("keys", {}).items()},
        )


@dataclass
class ValidityReport:
    valid: bool
    first_invalid_height: Optional[int] = None
    reason: str = ""


@dataclass
class QueryFilter:
    kind: Optional[str] = None
    signer: Optional[str] = None
    wallet: Optional[str] = None
    channel: Optional[str] = None


PayloadValidator = Callable[[TxPayload], Optional[str]]


def _default_amount_check(payload: TxPayload) -> Optional[str]:
    for name in _AMOUNT_FIELDS.get(payload.kind, ()):
        value = getattr(payload, name)
        if not isinstance(value, int) or isinstance(value, bool) or value < 0:
            return f"{name} must be a non-negative integer, got {value!r}"
    return None


class Ledger:
    """Single-writer chain: submit -> seal; verify and query are read-only.

    The genesis block is sealed at construction and anchors the roster and
    the per-actor signing keys.
    """

    def __init__(self, roster: list[str], keys: dict[str, bytes], genesis_time: int = 0):
        if not roster:
            raise ValueError("roster must not be empty")
        self.roster: tuple[str, ...] = tuple(roster)
        self.signer_backend = codec.KeyedMacSigner(keys)
        self.chain: list[Block] = []
        self.pending: list[Transaction] = []
        self.tx_index: dict[bytes, tuple[int, int]] = {}
        self.channel_scopes: dict[str, frozenset[str]] = {}
        self._known_ids: set[bytes] = set()
        self._validators: dict[str, PayloadValidator] = {}
        self._keys = dict(keys)
        self._seal_genesis(genesis_time)

    # -- construction helpers

    def _seal_genesis(self, now: int) -> None:
        tx_root = _genesis_root(self.roster, self._keys)
        validator = self.roster[0]
        block_hash = block_digest(0, ZERO_DIGEST, tx_root, validator, now)
        self.chain.append(
            Block(0, ZERO_DIGEST, tx_root, validator, now, block_hash,
                  roster=self.roster, keys=dict(self._keys))
        )

    # -- write path

    def register_validator(self, kind: str, fn: PayloadValidator) -> None:
        """Domain modules attach their payload checks here."""
        self._validators[kind] = fn

    def submit(self, tx: Transaction) -> bytes:
        if not self.signer_backend.knows(tx.signer):
            raise UnknownSigner(tx.signer)
        expected = tx_digest(tx.timestamp, tx.signer, tx.payload)
        if expected != tx.tx_id or not self.signer_backend.verify(tx.signer, tx.tx_id, tx.signature):
            raise BadSignature(tx.tx_id.hex())
        if tx.tx_id in self._known_ids:
            raise DuplicateTx(tx.tx_id.hex())
        reason = _default_amount_check(tx.payload)
        if reason is None:
            extra = self._validators.get(tx.payload.kind)
            if extra is not None:
                reason = extra(tx.payload)
        if reason is not None:
            raise PayloadRejected(reason)
        self.pending.append(tx)
        self._known_ids.add(tx.tx_id)
        return tx.tx_id

    def seal_block(self, now: int) -> Block:
        if not self.pending:
            raise EmptyPending("no pending transactions")
        height = len(self.chain)
        prev_hash = self.chain[-1].block_hash
        txs = tuple(self.pending)
        tx_root = codec.merkle_root([tx.tx_id for tx in txs])
        validator = self.roster[height % len(self.roster)]
        block_hash = block_digest(height, prev_hash, tx_root, validator, now)
        block = Block(height, prev_hash, tx_root, validator, now, block_hash, txs=txs)
        self.chain.append(block)
        for pos, tx in enumerate(txs):
            self.tx_index[tx.tx_id] = (height, pos)
        self.pending = []
        return block

    def grant_channel_scope(self, channel: str, readers: set[str]) -> None:
        self.channel_scopes[channel] = frozenset(readers)

    # -- read path

    def verify_chain(self) -> ValidityReport:
        return verify_blocks(self.chain)

    def knows_tx(self, tx_id: bytes) -> bool:
        return tx_id in self._known_ids

    def get_tx(self, tx_id: bytes) -> Optional[Transaction]:
        loc = self.tx_index.get(tx_id)
        if loc is not None:
            height, pos = loc
            return self.chain[height].txs[pos]
        for tx in self.pending:
            if tx.tx_id == tx_id:
                return tx
        return None

    def all_txs(self) -> Iterator[Transaction]:
        """Sealed transactions in chain order."""
        for block in self.chain:
            yield from block.txs

    def _visible(self, tx: Transaction, reader: str) -> bool:
        payload = tx.payload
        if isinstance(payload, (ChannelOpen, ChannelClose)):
            scope = self.channel_scopes.get(payload.channel, frozenset())
            return reader in scope
        if isinstance(payload, Issue):
            return reader == payload.issuer
        return True

    def query(self, reader: str, flt: QueryFilter) -> list[Transaction]:
        if reader not in self.roster:
            raise UnknownReader(reader)
        out = []
        for tx in self.all_txs():
            if not self._visible(tx, reader):
                continue
            if flt.kind is not None and tx.payload.kind != flt.kind:
                continue
            if flt.signer is not None and tx.signer != flt.signer:
                continue
            if flt.wallet is not None and getattr(tx.payload, "wallet", None) != flt.wallet \
                    and getattr(tx.payload, "roamer_wallet", None) != flt.wallet:
                continue
            if flt.channel is not None and getattr(tx.payload, "channel", None) != flt.channel:
                continue
            out.append(tx)
        return out

    # -- persistence

    def save_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for block in self.chain:
                fh.write(json.dumps(block.to_record(), separators=(",", ":")) + "\n")


def load_blocks_jsonl(path) -> list[Block]:
    """Parse a persisted chain; raises LedgerParseError with the bad line."""
    blocks = []
    with open(path, "rb") as fh:
        raw = fh.read()
    lines = raw.split(b"\n")
    if lines and lines[-1] == b"":
        lines.pop()
    for i, line in enumerate(lines):
        try:
            rec = json.loads(line.decode("utf-8"))
            blocks.append(Block.from_record(rec))
        except Exception as exc:
            raise LedgerParseError(i, str(exc)) from None
    return blocks


def verify_blocks(chain: list[Block]) -> ValidityReport:
    """Recompute every digest and link; report the first failing height.

    An empty chain is vacuously valid.  The check stops at the first
    failure so callers learn the earliest tampered block.
    """
    if not chain:
        return ValidityReport(True)
    roster = chain[0].roster
    keys = chain[0].keys
    backend = codec.KeyedMacSigner(keys)
    seen: set[bytes] = set()
    prev_hash = ZERO_DIGEST
    for i, block in enumerate(chain):
        if block.height != i:
            return ValidityReport(False, i, "height out of sequence")
        if block.prev_hash != prev_hash:
            return ValidityReport(False, i, "broken prev_hash link")
        if not roster:
            return ValidityReport(False, 0, "genesis carries no roster")
        if block.validator != roster[i % len(roster)]:
            return ValidityReport(False, i, "validator out of round-robin order")
        if i == 0:
            if block.txs:
                return ValidityReport(False, 0, "genesis must not carry transactions")
            expected_root = _genesis_root(roster, keys)
        else:
            for tx in block.txs:
                if tx_digest(tx.timestamp, tx.signer, tx.payload) != tx.tx_id:
                    return ValidityReport(False, i, f"tx_id mismatch for {tx.tx_id.hex()[:12]}")
                if not backend.verify(tx.signer, tx.tx_id, tx.signature):
                    return ValidityReport(False, i, f"bad signature on {tx.tx_id.hex()[:12]}")
                if _default_amount_check(tx.payload) is not None:
                    return ValidityReport(False, i, "negative amount in sealed payload")
                if tx.tx_id in seen:
                    return ValidityReport(False, i, "duplicate tx_id")
                seen.add(tx.tx_id)
            expected_root = codec.merkle_root([tx.tx_id for tx in block.txs])
        if block.tx_root != expected_root:
            return ValidityReport(False, i, "tx_root mismatch")
        if block_digest(block.height, block.prev_hash, block.tx_root, block.validator,
                        block.sealed_at) != block.block_hash:
            return ValidityReport(False, i, "block_hash mismatch")
        prev_hash = block.block_hash
    return ValidityReport(True)
