"""Issuance, custody and provenance tracking of per-MNO tokens.

Every lot carries its full lineage from the on-chain issuance event, so the
bank state is reconstructible by replaying the ledger (``rebuild_from_ledger``).
One token pays for one 100KB traffic block under the default charging model.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

from .codec import Signer
from .errors import (
    ForeignWallet,
    InsufficientBalance,
    NonPositiveAmount,
    NotIssuer,
    UnknownLot,
    UnknownWallet,
)
from .ledger import ChannelClose, ChannelOpen, Issue, Ledger, Redeem, make_transaction

ALL_ISSUERS = "*"

TOKEN_BLOCK_BYTES = 100_000  # billing granularity: one token per started 100KB


def tokens_for_bytes(nbytes: int) -> int:
    """Tokens needed to cover nbytes at the 100KB granularity, rounding up."""
    return -(-nbytes // TOKEN_BLOCK_BYTES)


@dataclass(frozen=True)
class Mno:
    id: str
    may_issue: bool = True


class LineageEntry(NamedTuple):
    holder: str
    tx_id: bytes


@dataclass
class Wallet:
    wallet_id: str
    owner: Optional[str]
    home_mno: str
    lot_ids: list[str] = field(default_factory=list)


@dataclass
class TokenLot:
    lot_id: str
    issuer: str
    amount: int
    lineage: list[LineageEntry]
    burned: bool = False
    burn_tx: Optional[bytes] = None

    @property
    def holder(self) -> str:
        return self.lineage[-1].holder


def treasury_wallet_id(mno: str) -> str:
    return f"mno:{mno}"


class TokenBank:
    """Single-writer custody of wallets and lots, mirrored on-chain.

    Wallet owners are deliberately kept off-chain (privacy): the only
    linkage the ledger records is the issuer identity.
    """

    def __init__(self, ledger: Ledger, signer: Signer, mnos: dict[str, Mno]):
        self.ledger = ledger
        self.signer = signer
        self.mnos = dict(mnos)
        self.wallets: dict[str, Wallet] = {}
        self.lots: dict[str, TokenLot] = {}
        self.issued_by: dict[str, int] = {}
        self.burned_by: dict[str, int] = {}
        # Channel escrow: wallet -> channel -> locked token count (home issuer).
        self.locks: dict[str, dict[str, int]] = {}
        self._lot_seq = 0
        self._wallet_seq = 0

    # -- wallet management

    def create_wallet(self, owner: Optional[str], home_mno: str, wallet_id: Optional[str] = None) -> str:
        if wallet_id is None:
            wallet_id = f"w-{self._wallet_seq:07d}"
            self._wallet_seq += 1
        if wallet_id not in self.wallets:
            self.wallets[wallet_id] = Wallet(wallet_id, owner, home_mno)
        return wallet_id

    def wallet(self, wallet_id: str) -> Wallet:
        w = self.wallets.get(wallet_id)
        if w is None:
            raise UnknownWallet(wallet_id)
        return w

    def treasury(self, mno: str) -> str:
        """MNO-owned wallet receiving channel settlements; created lazily."""
        return self.create_wallet(mno, mno, treasury_wallet_id(mno))

    def _next_lot_id(self) -> str:
        lot_id = f"lot-{self._lot_seq:08d}"
        self._lot_seq += 1
        return lot_id

    # -- operations

    def issue(self, hmno: str, wallet_id: str, amount: int, now: int) -> bytes:
        mno = self.mnos.get(hmno)
        if mno is None or not mno.may_issue:
            raise NotIssuer(hmno)
        w = self.wallet(wallet_id)
        if w.home_mno != hmno:
            raise ForeignWallet(f"{wallet_id} belongs to {w.home_mno}, not {hmno}")
        if amount <= 0:
            raise NonPositiveAmount(str(amount))
        tx = make_transaction(now, hmno, Issue(hmno, wallet_id, amount), self.signer)
        tx_id = self.ledger.submit(tx)
        self._apply_issue(hmno, wallet_id, amount, tx_id)
        return tx_id

    def _apply_issue(self, hmno: str, wallet_id: str, amount: int, tx_id: bytes) -> None:
        lot = TokenLot(self._next_lot_id(), hmno, amount, [LineageEntry(wallet_id, tx_id)])
        self.lots[lot.lot_id] = lot
        self.wallets[wallet_id].lot_ids.append(lot.lot_id)
        self.issued_by[hmno] = self.issued_by.get(hmno, 0) + amount

    def create_identities(self, hmno: str, roamer: str, n: int, amounts: list[int], now: int) -> list[str]:
        """Fund n unlinkable wallets for one roamer (privacy via identities)."""
        if n < 1 or len(amounts) != n:
            raise NonPositiveAmount(f"need n>=1 wallets and {n} amounts")
        wallet_ids = [self.create_wallet(roamer, hmno) for _ in range(n)]
        for wid, amount in zip(wallet_ids, amounts):
            self.issue(hmno, wid, amount, now)
        return wallet_ids

    def _select_lots(self, wallet: Wallet, issuer: str) -> list[TokenLot]:
        lots = [self.lots[lid] for lid in wallet.lot_ids if self.lots[lid].issuer == issuer]
        # Largest first, lot_id breaks ties, so replay picks identically.
        lots.sort(key=lambda l: (-l.amount, l.lot_id))
        return lots

    def transfer(self, frm: str, to: str, issuer: str, amount: int, cause_tx: bytes) -> list[str]:
        src = self.wallet(frm)
        dst = self.wallet(to)
        if amount <= 0:
            raise NonPositiveAmount(str(amount))
        if self.spendable(frm, issuer) < amount:
            raise InsufficientBalance(
                f"{frm} has {self.spendable(frm, issuer)} spendable < {amount} of {issuer}"
            )
        moved: list[str] = []
        remaining = amount
        for lot in self._select_lots(src, issuer):
            if remaining == 0:
                break
            if lot.amount <= remaining:
                src.lot_ids.remove(lot.lot_id)
                dst.lot_ids.append(lot.lot_id)
                lot.lineage.append(LineageEntry(to, cause_tx))
                moved.append(lot.lot_id)
                remaining -= lot.amount
            else:
                # Split: child carries the parent lineage plus the move event.
                child = TokenLot(
                    self._next_lot_id(), issuer, remaining,
                    list(lot.lineage) + [LineageEntry(to, cause_tx)],
                )
                lot.amount -= remaining
                self.lots[child.lot_id] = child
                dst.lot_ids.append(child.lot_id)
                moved.append(child.lot_id)
                remaining = 0
        return moved

    def balance(self, wallet_id: str, issuer: str = ALL_ISSUERS) -> int:
        """Gross holdings, escrowed tokens included."""
        w = self.wallet(wallet_id)
        return sum(
            self.lots[lid].amount
            for lid in w.lot_ids
            if issuer == ALL_ISSUERS or self.lots[lid].issuer == issuer
        )

    def locked_amount(self, wallet_id: str) -> int:
        return sum(self.locks.get(wallet_id, {}).values())

    def spendable(self, wallet_id: str, issuer: str = ALL_ISSUERS) -> int:
        """Balance minus channel escrow (locks are in the home issuer)."""
        w = self.wallet(wallet_id)
        gross = self.balance(wallet_id, issuer)
        if issuer in (ALL_ISSUERS, w.home_mno):
            return gross - self.locked_amount(wallet_id)
        return gross

    def lock(self, wallet_id: str, channel: str, amount: int) -> None:
        """Escrow home-issuer tokens for a payment channel."""
        w = self.wallet(wallet_id)
        if self.spendable(wallet_id, w.home_mno) < amount:
            raise InsufficientBalance(
                f"{wallet_id} has {self.spendable(wallet_id, w.home_mno)} spendable < {amount}"
            )
        self.locks.setdefault(wallet_id, {})[channel] = amount

    def release_lock(self, wallet_id: str, channel: str) -> int:
        return self.locks.get(wallet_id, {}).pop(channel, 0)

    def trace(self, lot_id: str) -> list[LineageEntry]:
        lot = self.lots.get(lot_id)
        if lot is None:
            raise UnknownLot(lot_id)
        return list(lot.lineage)

    def lot(self, lot_id: str) -> TokenLot:
        lot = self.lots.get(lot_id)
        if lot is None:
            raise UnknownLot(lot_id)
        return lot

    def lots_of(self, wallet_id: str, issuer: Optional[str] = None) -> list[TokenLot]:
        w = self.wallet(wallet_id)
        return [
            self.lots[lid] for lid in w.lot_ids
            if issuer is None or self.lots[lid].issuer == issuer
        ]

    def burn(self, lot_ids: list[str], cause_tx: bytes) -> None:
        """Remove redeemed lots from circulation; supply stays accounted."""
        for lid in lot_ids:
            lot = self.lot(lid)
            holder = self.wallets[lot.holder]
            holder.lot_ids.remove(lid)
            lot.burned = True
            lot.burn_tx = cause_tx
            self.burned_by[lot.issuer] = self.burned_by.get(lot.issuer, 0) + lot.amount

    # -- audit surfaces

    def circulating_by_issuer(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for lot in self.lots.values():
            if not lot.burned:
                out[lot.issuer] = out.get(lot.issuer, 0) + lot.amount
        return out

    def supply_closure_ok(self) -> bool:
        """issued == circulating + burned, per issuer."""
        circulating = self.circulating_by_issuer()
        issuers = set(self.issued_by) | set(circulating) | set(self.burned_by)
        return all(
            self.issued_by.get(m, 0) == circulating.get(m, 0) + self.burned_by.get(m, 0)
            for m in issuers
        )

    def snapshot(self) -> dict:
        """Replay-comparable projection of the bank state.

        Wallet owners are excluded: they never touch the ledger, so a
        rebuilt bank cannot know them.
        """
        return {
            "lots": {
                lid: {
                    "issuer": lot.issuer,
                    "amount": lot.amount,
                    "burned": lot.burned,
                    "lineage": [(h, t.hex()) for h, t in lot.lineage],
                }
                for lid, lot in sorted(self.lots.items())
            },
            "wallets": {
                wid: {"home": w.home_mno, "lots": sorted(w.lot_ids)}
                for wid, w in sorted(self.wallets.items())
            },
            "locks": {
                wid: dict(sorted(chans.items()))
                for wid, chans in sorted(self.locks.items()) if chans
            },
            "issued": dict(sorted(self.issued_by.items())),
            "burned": dict(sorted(self.burned_by.items())),
        }

    @classmethod
    def rebuild_from_ledger(cls, ledger: Ledger, mnos: dict[str, Mno]) -> "TokenBank":
        """Reconstruct bank state by replaying sealed transactions in order."""
        bank = cls(ledger, ledger.signer_backend, mnos)
        open_channels: dict[str, ChannelOpen] = {}
        for tx in ledger.all_txs():
            p = tx.payload
            if isinstance(p, Issue):
                bank.create_wallet(None, p.issuer, p.wallet)
                bank._apply_issue(p.issuer, p.wallet, p.amount, tx.tx_id)
            elif isinstance(p, ChannelOpen):
                open_channels[p.channel] = p
                bank.lock(p.wallet, p.channel, p.deposit)
            elif isinstance(p, ChannelClose):
                opened = open_channels[p.channel]
                issuer = bank.wallet(opened.wallet).home_mno
                bank.release_lock(opened.wallet, p.channel)
                if p.paid:
                    bank.transfer(opened.wallet, bank.treasury(opened.vmno), issuer, p.paid, tx.tx_id)
            elif isinstance(p, Redeem):
                bank.burn(list(p.lots), tx.tx_id)
        return bank
