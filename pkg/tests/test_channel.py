"""Payment channels: metering, proof validation, close and sweep semantics."""

import dataclasses

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dice import codec
from dice.channel import BalanceProof, ChannelManager, proof_digest
from dice.errors import (
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
from dice.ledger import Ledger
from dice.tokenbank import Mno, TokenBank

MNOS = {"H": Mno("H"), "V": Mno("V")}
ACTORS = ["H", "V", "alice", "mallory"]
KEYS = {a: codec.derive_key(3, a) for a in ACTORS}

KB100 = 100_000
DAY = 86_400


def fresh(tokens=25):
    ledger = Ledger(["H", "V"], KEYS)
    bank = TokenBank(ledger, ledger.signer_backend, MNOS)
    mgr = ChannelManager(ledger, bank, ledger.signer_backend, preimage_seed=5)
    wallet = bank.create_wallet("alice", "H")
    if tokens:
        bank.issue("H", wallet, tokens, now=0)
    return ledger, bank, mgr, wallet


def onchain_count(ledger):
    return len(ledger.pending) + sum(len(b.txs) for b in ledger.chain)


def test_open_locks_deposit_with_one_onchain_tx():
    ledger, bank, mgr, wallet = fresh(25)
    before = onchain_count(ledger)
    ch_id = mgr.open_channel(wallet, "V", 25, now=100)
    assert onchain_count(ledger) - before == 1
    assert bank.spendable(wallet, "H") == 0
    assert bank.locked_amount(wallet) == 25
    ch = mgr.channel(ch_id)
    assert ch.deposit == 25 and ch.cumulative_paid == 0 and ch.last_seq == 0
    assert ch.timelock_expiry == 100 + mgr.timelock_window


def test_open_zero_deposit():
    _, _, mgr, wallet = fresh(25)
    with pytest.raises(ZeroDeposit):
        mgr.open_channel(wallet, "V", 0, now=0)


def test_open_insufficient_balance():
    _, _, mgr, wallet = fresh(25)
    with pytest.raises(InsufficientBalance):
        mgr.open_channel(wallet, "V", 30, now=0)


def test_full_visit_pays_25_proofs_all_offchain():
    # 2,500,000 bytes / 100,000 bytes per block = 25 proofs exactly.
    ledger, _, mgr, wallet = fresh(25)
    ch = mgr.open_channel(wallet, "V", 25, now=0)
    before = onchain_count(ledger)
    proofs = mgr.pay_for_traffic(ch, 2_500_000, now=10)
    assert len(proofs) == 2_500_000 // KB100 == 25
    assert proofs[-1].cumulative == 25
    assert proofs[0].preimage is not None and proofs[1].preimage is None
    assert onchain_count(ledger) == before  # nothing touched the ledger
    assert mgr.channel(ch).meter.exhausted is False


def test_sub_block_traffic_emits_no_proof():
    _, _, mgr, wallet = fresh(25)
    ch = mgr.open_channel(wallet, "V", 25, now=0)
    assert mgr.pay_for_traffic(ch, 50_000, now=10) == []
    assert mgr.channel(ch).meter.bytes_total == 50_000


def test_partial_block_rounds_up_at_close():
    # 150KB -> 1 full block proven, close charges ceil(150,000/100,000) = 2.
    _, bank, mgr, wallet = fresh(25)
    ch = mgr.open_channel(wallet, "V", 25, now=0)
    proofs = mgr.pay_for_traffic(ch, 150_000, now=10)
    assert len(proofs) == 1
    for p in proofs:
        mgr.receive_proof("V", p)
    mgr.close_channel(ch, now=20)
    chan = mgr.channel(ch)
    assert chan.paid_at_close == -(-150_000 // KB100) == 2
    assert chan.refunded_at_close == 23
    assert bank.balance(bank.treasury("V"), "H") == 2


def test_exact_floor_accounting_when_rounding_disabled():
    ledger = Ledger(["H", "V"], KEYS)
    bank = TokenBank(ledger, ledger.signer_backend, MNOS)
    mgr = ChannelManager(ledger, bank, ledger.signer_backend,
                         round_up_final_block=False, preimage_seed=5)
    wallet = bank.create_wallet("alice", "H")
    bank.issue("H", wallet, 25, now=0)
    ch = mgr.open_channel(wallet, "V", 25, now=0)
    for p in mgr.pay_for_traffic(ch, 150_000, now=10):
        mgr.receive_proof("V", p)
    mgr.close_channel(ch, now=20)
    assert mgr.channel(ch).paid_at_close == 1


def test_deposit_exhaustion_truncates_service():
    _, _, mgr, wallet = fresh(10)
    ch = mgr.open_channel(wallet, "V", 10, now=0)
    proofs = mgr.pay_for_traffic(ch, 1_500_000, now=10)
    meter = mgr.channel(ch).meter
    assert len(proofs) == 10  # capped at the deposit
    assert meter.exhausted
    assert meter.bytes_total == 1_000_000
    assert meter.unserviced_bytes == 500_000
    # further traffic is all unserviced
    assert mgr.pay_for_traffic(ch, 100_000, now=20) == []
    assert meter.unserviced_bytes == 600_000


def test_pay_requires_open_unexpired_channel():
    _, _, mgr, wallet = fresh(25)
    ch = mgr.open_channel(wallet, "V", 25, now=0)
    with pytest.raises(Expired):
        mgr.pay_for_traffic(ch, KB100, now=mgr.timelock_window)
    mgr.close_channel(ch, now=10)
    with pytest.raises(ChannelNotOpen):
        mgr.pay_for_traffic(ch, KB100, now=20)
    with pytest.raises(UnknownChannel):
        mgr.pay_for_traffic("ch-none", KB100, now=20)


# --- proof validation -------------------------------------------------------------


def emitted(mgr, ch, blocks):
    return mgr.pay_for_traffic(ch, blocks * KB100, now=10)


def test_in_order_proofs_accept():
    _, _, mgr, wallet = fresh(25)
    ch = mgr.open_channel(wallet, "V", 25, now=0)
    for p in emitted(mgr, ch, 3):
        mgr.receive_proof("V", p)
    latest = mgr.latest_accepted(ch)
    assert latest.seq == 3 and latest.cumulative == 3


def test_replayed_proof_is_stale():
    _, _, mgr, wallet = fresh(25)
    ch = mgr.open_channel(wallet, "V", 25, now=0)
    proofs = emitted(mgr, ch, 3)
    for p in proofs:
        mgr.receive_proof("V", p)
    with pytest.raises(StaleProof):
        mgr.receive_proof("V", proofs[1])


def test_gapped_proof_rejected():
    _, _, mgr, wallet = fresh(25)
    ch = mgr.open_channel(wallet, "V", 25, now=0)
    proofs = emitted(mgr, ch, 3)
    mgr.receive_proof("V", proofs[0])
    with pytest.raises(GapSeq):
        mgr.receive_proof("V", proofs[2])


def signed_proof(mgr, ch_id, seq, cumulative, preimage=None, signer="alice"):
    sig = mgr.signer.sign(signer, proof_digest(ch_id, seq, cumulative))
    return BalanceProof(ch_id, seq, cumulative, preimage, sig)


def test_over_deposit_proof_rejected():
    _, _, mgr, wallet = fresh(25)
    ch = mgr.open_channel(wallet, "V", 25, now=0)
    for p in emitted(mgr, ch, 25):
        mgr.receive_proof("V", p)
    overdraft = signed_proof(mgr, ch, 26, 26)
    with pytest.raises(Overdraft):
        mgr.receive_proof("V", overdraft)


def test_bad_signature_rejected():
    _, _, mgr, wallet = fresh(25)
    ch = mgr.open_channel(wallet, "V", 25, now=0)
    p = emitted(mgr, ch, 1)[0]
    forged = dataclasses.replace(p, signature=bytes(32))
    with pytest.raises(BadSignature):
        mgr.receive_proof("V", forged)
    mallory = signed_proof(mgr, ch, 1, 1, preimage=b"\x00" * 32, signer="mallory")
    with pytest.raises(BadSignature):
        mgr.receive_proof("V", mallory)


def test_bad_preimage_rejected():
    _, _, mgr, wallet = fresh(25)
    ch = mgr.open_channel(wallet, "V", 25, now=0)
    wrong = signed_proof(mgr, ch, 1, 1, preimage=b"\x00" * 32)
    with pytest.raises(BadPreimage):
        mgr.receive_proof("V", wrong)
    missing = signed_proof(mgr, ch, 1, 1, preimage=None)
    with pytest.raises(BadPreimage):
        mgr.receive_proof("V", missing)


def test_non_increasing_cumulative_rejected():
    _, _, mgr, wallet = fresh(25)
    ch = mgr.open_channel(wallet, "V", 25, now=0)
    for p in emitted(mgr, ch, 2):
        mgr.receive_proof("V", p)
    flat = signed_proof(mgr, ch, 3, 2)
    with pytest.raises(StaleProof):
        mgr.receive_proof("V", flat)


# --- close ------------------------------------------------------------------------


def test_close_conservation_full_spend():
    _, bank, mgr, wallet = fresh(25)
    ch = mgr.open_channel(wallet, "V", 25, now=0)
    for p in mgr.pay_for_traffic(ch, 2_500_000, now=10):
        mgr.receive_proof("V", p)
    mgr.close_channel(ch, now=20)
    chan = mgr.channel(ch)
    assert chan.paid_at_close == 25 and chan.refunded_at_close == 0
    assert chan.paid_at_close + chan.refunded_at_close == chan.deposit
    assert bank.balance(bank.treasury("V"), "H") == 25
    assert bank.spendable(wallet, "H") == 0


def test_silent_close_refunds_everything():
    _, bank, mgr, wallet = fresh(25)
    ch = mgr.open_channel(wallet, "V", 25, now=0)
    mgr.close_channel(ch, now=20)
    chan = mgr.channel(ch)
    assert chan.paid_at_close == 0 and chan.refunded_at_close == 25
    assert bank.spendable(wallet, "H") == 25


def test_double_close():
    _, _, mgr, wallet = fresh(25)
    ch = mgr.open_channel(wallet, "V", 25, now=0)
    mgr.close_channel(ch, now=20)
    with pytest.raises(AlreadyClosed):
        mgr.close_channel(ch, now=30)


def test_exactly_two_onchain_txs_per_channel():
    ledger, _, mgr, wallet = fresh(25)
    base = onchain_count(ledger)
    ch = mgr.open_channel(wallet, "V", 25, now=0)
    for p in mgr.pay_for_traffic(ch, 1_200_000, now=10):
        mgr.receive_proof("V", p)
    mgr.pay_for_traffic(ch, 700_000, now=20)
    mgr.close_channel(ch, now=30)
    assert onchain_count(ledger) - base == 2


def test_unidirectional_payments_never_reach_roamer_before_close():
    _, bank, mgr, wallet = fresh(25)
    ch = mgr.open_channel(wallet, "V", 25, now=0)
    for p in mgr.pay_for_traffic(ch, 1_000_000, now=10):
        mgr.receive_proof("V", p)
        assert bank.spendable(wallet, "H") == 0
        assert bank.balance(wallet, "H") == 25  # still escrowed, not moved
    mgr.close_channel(ch, now=20)
    assert bank.balance(wallet, "H") == 15


# --- timeout sweep -----------------------------------------------------------------


def test_sweep_closes_idle_channel_with_latest_proof():
    _, bank, mgr, wallet = fresh(25)
    ch = mgr.open_channel(wallet, "V", 25, now=0)
    for p in mgr.pay_for_traffic(ch, 700_000, now=1000):
        mgr.receive_proof("V", p)
    # idle for 25h
    closed = mgr.timeout_sweep(now=1000 + 25 * 3600)
    assert closed == [ch]
    assert mgr.channel(ch).paid_at_close == 7
    assert bank.balance(bank.treasury("V"), "H") == 7


def test_sweep_leaves_recently_active_channel():
    _, _, mgr, wallet = fresh(25)
    ch = mgr.open_channel(wallet, "V", 25, now=0)
    for p in mgr.pay_for_traffic(ch, 700_000, now=1000):
        mgr.receive_proof("V", p)
    assert mgr.timeout_sweep(now=1000 + 23 * 3600) == []
    assert mgr.channel(ch).status == "open"


def test_sweep_refunds_expired_unrevealed_channel():
    _, bank, mgr, wallet = fresh(25)
    ch = mgr.open_channel(wallet, "V", 25, now=0)
    mgr.pay_for_traffic(ch, 50_000, now=10)  # some traffic, no proof, no preimage
    closed = mgr.timeout_sweep(now=mgr.timelock_window + 1)
    assert closed == [ch]
    chan = mgr.channel(ch)
    assert chan.paid_at_close == 0 and chan.refunded_at_close == 25
    assert bank.spendable(wallet, "H") == 25


def test_sweep_window_boundary():
    _, _, mgr, wallet = fresh(25)
    ch = mgr.open_channel(wallet, "V", 25, now=0)
    for p in mgr.pay_for_traffic(ch, 100_000, now=0):
        mgr.receive_proof("V", p)
    assert mgr.timeout_sweep(now=DAY - 1) == []
    assert mgr.timeout_sweep(now=DAY) == [ch]  # >= window closes


# --- property: monotonicity over randomized streams ----------------------------------


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 30), st.integers(0, 30)), max_size=40))
def test_accepted_pairs_strictly_increase(stream):
    """Whatever (seq, cumulative) garbage arrives, the accepted sequence is
    strictly increasing in both coordinates and never exceeds the deposit."""
    _, _, mgr, wallet = fresh(25)
    ch = mgr.open_channel(wallet, "V", 25, now=0)
    preimage = mgr._preimages[ch]
    accepted = []
    for seq, cumulative in stream:
        proof = signed_proof(mgr, ch, seq, cumulative,
                             preimage=preimage if seq == 1 else None)
        try:
            mgr.receive_proof("V", proof)
            accepted.append((seq, cumulative))
        except (StaleProof, GapSeq, Overdraft, BadPreimage, BadSignature):
            pass
    for (s1, c1), (s2, c2) in zip(accepted, accepted[1:]):
        assert s2 == s1 + 1 and c2 > c1
    assert all(c <= 25 for _, c in accepted)
    assert all(s >= 1 for s, _ in accepted)
