"""Ledger determinism, atomicity, and persistence."""

from __future__ import annotations

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from keywitness.ledger import Ledger, LedgerTransaction, UnknownSender

from conftest import make_ledger


def test_submit_then_mine_includes_transaction():
    ledger = make_ledger()
    receipt = ledger.call("alice", "request", value=100, domain="d", whitelist=[], fee=100)
    assert receipt.status == "pending"
    block = ledger.mine()
    assert block.height == 0 and block.parent is None
    assert receipt.ok and receipt.height == 0
    assert ledger.balance(Ledger.CONTRACT_ACCOUNT) == 100


def test_unknown_sender_rejected_at_submission():
    ledger = make_ledger()
    with pytest.raises(UnknownSender):
        ledger.call("nobody", "request", value=1, domain="d", whitelist=[], fee=1)


def test_overdraft_aborts_atomically():
    ledger = make_ledger(accounts={"alice": 10, "notary": 0})
    supply = ledger.total_supply()
    receipt = ledger.call("alice", "request", value=100, domain="d", whitelist=[], fee=100)
    ledger.mine()
    assert receipt.status == "aborted"
    assert "insufficient" in receipt.error
    assert ledger.balance("alice") == 10  # value returned
    assert ledger.total_supply() == supply
    assert ledger.read_state().pending_requests() == {}


def test_contract_abort_refunds_value():
    ledger = make_ledger()
    # Fee mismatch: value != fee aborts inside the contract.
    receipt = ledger.call("alice", "request", value=30, domain="d", whitelist=[], fee=100)
    ledger.mine()
    assert receipt.status == "aborted"
    assert ledger.balance("alice") == 10_000
    assert ledger.balance(Ledger.CONTRACT_ACCOUNT) == 0


def test_same_block_transactions_execute_in_submission_order():
    ledger = make_ledger()
    r1 = ledger.call("alice", "request", value=10, domain="a", whitelist=[], fee=10)
    r2 = ledger.call("alice", "request", value=10, domain="b", whitelist=[], fee=10)
    ledger.mine()
    assert (r1.result, r2.result) == (0, 1)  # ids allocated in order


def test_empty_mine_advances_height_only():
    ledger = make_ledger()
    before = ledger.read_state().to_bytes()
    block = ledger.mine()
    assert block.transactions == ()
    after = ledger.read_state()
    assert after.height == 0
    # Only the height moved.
    import json

    a, b = json.loads(before), json.loads(after.to_bytes())
    a.pop("height"), b.pop("height")
    assert a == b


def test_read_state_is_a_stable_snapshot():
    ledger = make_ledger()
    snap = ledger.read_state()
    assert snap.height == -1  # genesis state, nothing mined
    ledger.call("alice", "request", value=10, domain="a", whitelist=[], fee=10)
    # Pending transactions are invisible until mined.
    assert ledger.read_state().pending_requests() == {}
    ledger.mine()
    assert snap.pending_requests() == {}  # old snapshot unchanged
    assert len(ledger.read_state().pending_requests()) == 1


def test_block_heights_consecutive_from_zero():
    ledger = make_ledger()
    for expected in range(5):
        assert ledger.mine().height == expected
    assert [b.parent for b in ledger.blocks] == [None, 0, 1, 2, 3]


def test_timeout_counting_in_blocks():
    # A timeout of N blocks elapses after exactly N calls to mine().
    ledger = make_ledger(sla_timeout_blocks=3)
    ledger.call("alice", "request", value=10, domain="d", whitelist=[], fee=10)
    ledger.mine()
    ledger.call("notary", "accept", value=50, request_id=0)
    ledger.mine()
    q = ledger.call("alice", "sla_query", service_id=0, vid_from=0, vid_to=0)
    ledger.mine()
    asked_at = q.height
    for _ in range(3):  # heights asked_at+1 .. asked_at+3: still within the timeout
        early = ledger.call("alice", "sla_claim", query_id=q.result)
        ledger.mine()
        assert early.status == "aborted"
    late = ledger.call("alice", "sla_claim", query_id=q.result)
    ledger.mine()
    assert late.ok
    assert ledger.height == asked_at + 4


def _random_session(rng: random.Random, ledger: Ledger) -> None:
    actors = ["alice", "mallory", "notary"]
    for _ in range(rng.randrange(5, 40)):
        action = rng.randrange(6)
        if action == 0:
            fee = rng.randrange(0, 30)
            ledger.call(
                rng.choice(actors),
                "request",
                value=fee if rng.random() < 0.8 else rng.randrange(0, 30),
                domain=rng.choice(["a", "b", "c"]),
                whitelist=[],
                fee=fee,
            )
        elif action == 1:
            ledger.call(rng.choice(actors), "accept", value=50, request_id=rng.randrange(0, 5))
        elif action == 2:
            ledger.call(rng.choice(actors), "timeout", request_id=rng.randrange(0, 5))
        elif action == 3:
            ledger.call(
                "notary",
                "state",
                service_id=rng.randrange(0, 3),
                vid=rng.randrange(0, 10),
                status=rng.choice(["ok", "connect", "time"]),
            )
        elif action == 4:
            ledger.call(
                rng.choice(actors),
                "sla_query",
                service_id=rng.randrange(0, 3),
                vid_from=0,
                vid_to=rng.randrange(0, 4),
            )
        else:
            ledger.call(rng.choice(actors), "sla_claim", query_id=rng.randrange(0, 4))
        if rng.random() < 0.5:
            ledger.mine()
    ledger.mine()


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(min_value=0, max_value=2**32 - 1))
def test_replay_reproduces_identical_state(seed, tmp_path_factory):
    path = tmp_path_factory.mktemp("ledger") / f"log-{seed}.jsonl"
    ledger = make_ledger(log_path=path)
    _random_session(random.Random(seed), ledger)
    original = ledger.read_state().to_bytes()

    replayed = Ledger.open(path, attach=False)
    assert replayed.read_state().to_bytes() == original


def test_supply_conservation_over_random_session():
    ledger = make_ledger()
    supply = ledger.total_supply()
    _random_session(random.Random(7), ledger)
    assert ledger.total_supply() == supply


def test_transaction_json_round_trip():
    tx = LedgerTransaction("alice", "request", {"domain": "d", "fee": 3}, 3)
    assert LedgerTransaction.from_json(tx.to_json()) == tx
