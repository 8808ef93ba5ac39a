"""Contract state machine: lifecycle, publication rules, SLA boundaries, money."""

from __future__ import annotations

import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.stateful import RuleBasedStateMachine, initialize, invariant, rule

from keywitness.ledger import Ledger

from conftest import make_ledger

KEY_A = "a6" * 32
KEY_B = "80" * 32
KEY_C = "de" * 32


def _setup_service(ledger, whitelist=(KEY_B, KEY_C), fee=100):
    req = ledger.call("alice", "request", value=fee, domain="example.test", whitelist=list(whitelist), fee=fee)
    ledger.mine()
    acc = ledger.call("notary", "accept", value=50, request_id=req.result)
    ledger.mine()
    assert acc.ok
    return acc.result


# -- service lifecycle -------------------------------------------------------------


def test_request_escrows_fee():
    ledger = make_ledger()
    receipt = ledger.call("alice", "request", value=100, domain="d", whitelist=[KEY_B, KEY_C], fee=100)
    ledger.mine()
    assert receipt.ok
    assert ledger.balance(Ledger.CONTRACT_ACCOUNT) == 100
    assert ledger.balance("alice") == 9_900
    stored = ledger.read_state().pending_requests()[str(receipt.result)]
    assert stored["whitelist"] == sorted([KEY_B, KEY_C])


def test_request_with_zero_fee_aborts():
    ledger = make_ledger()
    receipt = ledger.call("alice", "request", value=0, domain="d", whitelist=[], fee=0)
    ledger.mine()
    assert receipt.status == "aborted"


def test_duplicate_requests_are_independent():
    ledger = make_ledger()
    r1 = ledger.call("alice", "request", value=10, domain="d", whitelist=[], fee=10)
    r2 = ledger.call("alice", "request", value=10, domain="d", whitelist=[], fee=10)
    ledger.mine()
    assert r1.ok and r2.ok and r1.result != r2.result
    assert len(ledger.read_state().pending_requests()) == 2


def test_accept_requires_owner_and_deposit():
    ledger = make_ledger()
    req = ledger.call("alice", "request", value=10, domain="d", whitelist=[], fee=10)
    ledger.mine()
    bad_sender = ledger.call("alice", "accept", value=50, request_id=req.result)
    bad_value = ledger.call("notary", "accept", value=49, request_id=req.result)
    ledger.mine()
    assert bad_sender.status == "aborted" and bad_value.status == "aborted"
    good = ledger.call("notary", "accept", value=50, request_id=req.result)
    ledger.mine()
    assert good.ok
    assert ledger.read_state().service(good.result)["active"]


def test_accept_twice_aborts():
    ledger = make_ledger()
    req = ledger.call("alice", "request", value=10, domain="d", whitelist=[], fee=10)
    ledger.mine()
    first = ledger.call("notary", "accept", value=50, request_id=req.result)
    ledger.mine()
    second = ledger.call("notary", "accept", value=50, request_id=req.result)
    ledger.mine()
    assert first.ok and second.status == "aborted"


def test_timeout_refunds_requester_only():
    ledger = make_ledger()
    req = ledger.call("alice", "request", value=100, domain="d", whitelist=[], fee=100)
    ledger.mine()
    stranger = ledger.call("mallory", "timeout", request_id=req.result)
    ledger.mine()
    assert stranger.status == "aborted"
    refund = ledger.call("alice", "timeout", request_id=req.result)
    ledger.mine()
    assert refund.ok
    assert ledger.balance("alice") == 10_000
    assert ledger.balance(Ledger.CONTRACT_ACCOUNT) == 0


def test_timeout_after_accept_aborts():
    ledger = make_ledger()
    req = ledger.call("alice", "request", value=10, domain="d", whitelist=[], fee=10)
    ledger.mine()
    ledger.call("notary", "accept", value=50, request_id=req.result)
    ledger.mine()
    late = ledger.call("alice", "timeout", request_id=req.result)
    ledger.mine()
    assert late.status == "aborted"


# -- state publication ---------------------------------------------------------------


def test_state_updates_follow_vid_and_status_rules():
    ledger = make_ledger()
    sid = _setup_service(ledger)

    def publish(vid, status):
        r = ledger.call("notary", "state", service_id=sid, vid=vid, status=status)
        ledger.mine()
        return r

    publish(0, "ok")
    assert ledger.read_state().timeline(sid) == [(0, "ok")]
    # Same status at a later vid: silently ignored, not an abort.
    ignored = publish(15, "ok")
    assert ignored.ok and ignored.result is False
    assert ledger.read_state().timeline(sid) == [(0, "ok")]
    publish(31, f"new_key:{KEY_A}")
    publish(32, "ok")
    assert ledger.read_state().timeline(sid) == [
        (0, "ok"),
        (31, f"new_key:{KEY_A}"),
        (32, "ok"),
    ]
    # Stale vid is ignored even with a different status.
    stale = publish(31, "connect")
    assert stale.ok and stale.result is False
    assert len(ledger.read_state().timeline(sid)) == 3


def test_state_from_non_owner_aborts():
    ledger = make_ledger()
    sid = _setup_service(ledger)
    bad = ledger.call("alice", "state", service_id=sid, vid=0, status="ok")
    ledger.mine()
    assert bad.status == "aborted"


def test_new_key_statuses_differ_by_payload():
    ledger = make_ledger()
    sid = _setup_service(ledger)
    ledger.call("notary", "state", service_id=sid, vid=0, status=f"new_key:{KEY_A}")
    ledger.mine()
    other = ledger.call("notary", "state", service_id=sid, vid=1, status=f"new_key:{KEY_B}")
    ledger.mine()
    assert other.result is True  # different key hash is a different status
    assert len(ledger.read_state().timeline(sid)) == 2


# -- SLA ops ------------------------------------------------------------------------


def test_sla_query_only_requester():
    ledger = make_ledger()
    sid = _setup_service(ledger)
    bad = ledger.call("mallory", "sla_query", service_id=sid, vid_from=7, vid_to=7)
    ledger.mine()
    assert bad.status == "aborted"
    q1 = ledger.call("alice", "sla_query", service_id=sid, vid_from=7, vid_to=7)
    q2 = ledger.call("alice", "sla_query", service_id=sid, vid_from=0, vid_to=3)
    ledger.mine()
    assert q1.ok and q2.ok and q1.result != q2.result
    queries = ledger.read_state().queries()
    assert queries[str(q1.result)]["open"] and queries[str(q2.result)]["open"]


def test_response_content_is_not_validated():
    ledger = make_ledger()
    sid = _setup_service(ledger)
    q = ledger.call("alice", "sla_query", service_id=sid, vid_from=0, vid_to=0)
    ledger.mine()
    garbage = ledger.call("notary", "sla_response", query_id=q.result, payload="deadbeef")
    ledger.mine()
    assert garbage.ok  # the contract stores anything; judging content is off-chain
    assert ledger.read_state().responses(q.result)[0]["payload"] == "deadbeef"


def _world_with_query(sla_timeout_blocks=3):
    ledger = make_ledger(sla_timeout_blocks=sla_timeout_blocks)
    sid = _setup_service(ledger)
    q = ledger.call("alice", "sla_query", service_id=sid, vid_from=0, vid_to=0)
    ledger.mine()
    assert q.ok
    return ledger, sid, q.result, q.height


@pytest.mark.parametrize("offset,closes", [(-2, True), (-1, True), (0, True), (1, False), (2, False)])
def test_response_timeliness_boundary(offset, closes):
    tout = 3
    ledger, sid, qid, asked_at = _world_with_query(tout)
    ledger.mine_until(asked_at + tout + offset - 1)
    receipt = ledger.call("notary", "sla_response", query_id=qid, payload="00")
    ledger.mine()
    assert receipt.ok and receipt.height == asked_at + tout + offset
    assert ledger.read_state().queries()[str(qid)]["open"] != closes


@pytest.mark.parametrize("offset,succeeds", [(-2, False), (-1, False), (0, False), (1, True), (2, True)])
def test_claim_timing_boundary(offset, succeeds):
    tout = 3
    ledger, sid, qid, asked_at = _world_with_query(tout)
    ledger.mine_until(asked_at + tout + offset - 1)
    receipt = ledger.call("alice", "sla_claim", query_id=qid)
    ledger.mine()
    assert receipt.height == asked_at + tout + offset
    assert receipt.ok == succeeds
    if succeeds:
        assert not ledger.read_state().service(sid)["active"]


def test_claim_after_timely_response_aborts():
    ledger, sid, qid, asked_at = _world_with_query()
    ledger.call("notary", "sla_response", query_id=qid, payload="00")
    ledger.mine()
    ledger.mine_until(asked_at + 10)
    claim = ledger.call("alice", "sla_claim", query_id=qid)
    ledger.mine()
    assert claim.status == "aborted"
    assert ledger.read_state().service(sid)["active"]


def test_exhaustive_sla_interleavings():
    """All 25 (response offset, claim offset) pairs around the deadline.

    Offsets are relative to asked_at + timeout.  When both land on the
    same height the response is submitted first.  Conservation must
    hold in every interleaving.
    """
    tout = 3
    for dr, dc in itertools.product((-2, -1, 0, 1, 2), repeat=2):
        ledger, sid, qid, asked_at = _world_with_query(tout)
        supply = ledger.total_supply()
        events = sorted([("response", dr), ("claim", dc)], key=lambda e: (e[1], e[0] != "response"))
        outcomes = {}
        for kind, offset in events:
            target = asked_at + tout + offset
            ledger.mine_until(target - 1)
            if kind == "response":
                outcomes["response"] = ledger.call("notary", "sla_response", query_id=qid, payload="00")
            else:
                outcomes["claim"] = ledger.call("alice", "sla_claim", query_id=qid)
            if not (dr == dc and kind == "response"):
                ledger.mine()
        if dr == dc:
            ledger.mine()

        response_first = dr <= dc  # ties: response submitted first
        if response_first:
            expect_response_ok = True
            expect_claim_ok = dc >= 1 and not dr <= 0  # a timely response closed it
        else:
            expect_claim_ok = dc >= 1
            expect_response_ok = not expect_claim_ok  # a successful claim closed it
        assert outcomes["response"].ok == expect_response_ok, (dr, dc)
        assert outcomes["claim"].ok == expect_claim_ok, (dr, dc)
        assert ledger.total_supply() == supply, (dr, dc)
        snap = ledger.read_state()
        if expect_claim_ok:
            assert not snap.service(sid)["active"]
            assert ledger.balance("alice") == 10_000 - 100 + 100 + 50
        else:
            assert snap.service(sid)["active"]


def test_honest_notary_keeps_deposit_small_model():
    """Bounded model check: with every query answered within the timeout,
    no schedule of requester claims can move the deposit."""
    tout = 2
    horizon = 7
    # Enumerate every subset of claim heights over a short horizon, with
    # two queries asked at fixed points and answered immediately.
    for claim_mask in range(2**horizon):
        ledger = make_ledger(sla_timeout_blocks=tout)
        sid = _setup_service(ledger)
        baseline_alice = ledger.balance("alice")
        queries = []
        for h in range(horizon):
            if h == 1 or h == 3:
                q = ledger.call("alice", "sla_query", service_id=sid, vid_from=0, vid_to=0)
                queries.append(q)
            for q in list(queries):
                if q.result is not None and not ledger.read_state().responses(q.result):
                    if q.height is not None:  # answered the block after it lands
                        ledger.call("notary", "sla_response", query_id=q.result, payload="00")
            if claim_mask >> h & 1:
                for q in queries:
                    if q.result is not None:
                        ledger.call("alice", "sla_claim", query_id=q.result)
            ledger.mine()
        assert ledger.balance("alice") <= baseline_alice, claim_mask
        assert ledger.read_state().service(sid)["active"], claim_mask


def test_unanswered_query_is_always_claimable():
    for extra in range(1, 5):
        ledger, sid, qid, asked_at = _world_with_query(3)
        ledger.mine_until(asked_at + 3 + extra - 1)
        claim = ledger.call("alice", "sla_claim", query_id=qid)
        ledger.mine()
        assert claim.ok


# -- money conservation over full lifecycles ---------------------------------------------


def test_lifecycle_money_flows_balance_request_timeout():
    ledger = make_ledger()
    supply = ledger.total_supply()
    req = ledger.call("alice", "request", value=100, domain="d", whitelist=[], fee=100)
    ledger.mine()
    ledger.call("alice", "timeout", request_id=req.result)
    ledger.mine()
    assert ledger.balance(Ledger.CONTRACT_ACCOUNT) == 0
    assert ledger.balance("alice") == 10_000
    assert ledger.total_supply() == supply


def test_lifecycle_money_flows_balance_claim():
    ledger, sid, qid, asked_at = _world_with_query(3)
    supply = ledger.total_supply()
    ledger.mine_until(asked_at + 4)
    ledger.call("alice", "sla_claim", query_id=qid)
    ledger.mine()
    assert ledger.balance(Ledger.CONTRACT_ACCOUNT) == 0
    assert ledger.balance("alice") == 10_000 + 50  # fee back plus the deposit
    assert ledger.balance("notary") == 10_000 - 50
    assert ledger.total_supply() == supply


def test_lifecycle_money_flows_balance_expiry():
    ledger = make_ledger(price_per_block=10)
    sid = _setup_service(ledger, fee=100)  # duration 10 blocks
    supply = ledger.total_supply()
    early = ledger.call("notary", "expire", service_id=sid)
    ledger.mine()
    assert early.status == "aborted"
    created = ledger.read_state().service(sid)["created_at"]
    ledger.mine_until(created + 10 - 1)
    done = ledger.call("notary", "expire", service_id=sid)
    ledger.mine()
    assert done.ok
    assert ledger.balance("notary") == 10_000 + 100  # earned fee, deposit back
    assert ledger.balance("alice") == 10_000 - 100
    assert ledger.balance(Ledger.CONTRACT_ACCOUNT) == 0
    assert ledger.total_supply() == supply
    assert not ledger.read_state().service(sid)["active"]


# -- authorization matrix ----------------------------------------------------------------


OPS = ("request", "accept", "timeout", "state", "sla_query", "sla_response", "sla_claim")
ROLES = ("notary", "alice", "mallory")  # owner, requester, stranger
ALLOWED = {
    "request": {"notary", "alice", "mallory"},  # anyone may order a service
    "accept": {"notary"},
    "timeout": {"alice"},
    "state": {"notary"},
    "sla_query": {"alice"},
    "sla_response": {"notary"},
    "sla_claim": {"alice"},
}


def _fresh_world_for(op):
    """A world where `op` is enabled for its legitimate sender."""
    ledger = make_ledger(sla_timeout_blocks=2)
    sid = _setup_service(ledger)
    pending = ledger.call("alice", "request", value=10, domain="p", whitelist=[], fee=10)
    ledger.mine()
    qid = None
    if op in ("sla_response", "sla_claim"):
        q = ledger.call("alice", "sla_query", service_id=sid, vid_from=0, vid_to=0)
        ledger.mine()
        qid = q.result
        if op == "sla_claim":
            ledger.mine_until(q.height + 3)
    args = {
        "request": dict(value=10, domain="x", whitelist=[], fee=10),
        "accept": dict(value=50, request_id=pending.result),
        "timeout": dict(request_id=pending.result),
        "state": dict(service_id=sid, vid=0, status="ok"),
        "sla_query": dict(service_id=sid, vid_from=0, vid_to=0),
        "sla_response": dict(query_id=qid, payload="00"),
        "sla_claim": dict(query_id=qid),
    }[op]
    return ledger, args


def test_authorization_matrix_exhaustive():
    for op in OPS:
        for role in ROLES:
            ledger, args = _fresh_world_for(op)
            before = ledger.read_state().to_bytes()
            balances_before = {a: ledger.balance(a) for a in (*ROLES, Ledger.CONTRACT_ACCOUNT)}
            receipt = ledger.call(role, op, **args)
            ledger.mine()
            if role in ALLOWED[op]:
                assert receipt.ok, (op, role, receipt.error)
            else:
                assert receipt.status == "aborted", (op, role)
                after = ledger.read_state()
                # State unchanged apart from the block height.
                import json

                a, b = json.loads(before), json.loads(after.to_bytes())
                a.pop("height"), b.pop("height")
                assert a == b, (op, role)
                assert balances_before == {
                    a_: ledger.balance(a_) for a_ in (*ROLES, Ledger.CONTRACT_ACCOUNT)
                }, (op, role)


# -- properties ---------------------------------------------------------------------------


@settings(max_examples=100, deadline=None)
@given(
    updates=st.lists(
        st.tuples(st.integers(min_value=0, max_value=40), st.sampled_from(["ok", "connect", "time", f"new_key:{KEY_A}"])),
        max_size=30,
    )
)
def test_timeline_always_monotone_with_distinct_consecutive_statuses(updates):
    ledger = make_ledger()
    sid = _setup_service(ledger)
    for vid, status in updates:
        ledger.call("notary", "state", service_id=sid, vid=vid, status=status)
    ledger.mine()
    timeline = ledger.read_state().timeline(sid)
    vids = [v for v, _ in timeline]
    assert vids == sorted(set(vids))
    for (_, a), (_, b) in zip(timeline, timeline[1:]):
        assert a != b


class ContractMachine(RuleBasedStateMachine):
    """Randomized op streams with invariant checks after every step."""

    def __init__(self):
        super().__init__()
        self.ledger = make_ledger(sla_timeout_blocks=2)
        self.supply = self.ledger.total_supply()
        self.request_ids: list[int] = []
        self.service_ids: list[int] = []
        self.query_ids: list[int] = []

    @initialize()
    def start(self):
        self.ledger.mine()

    @rule(fee=st.integers(min_value=1, max_value=40), sender=st.sampled_from(ROLES))
    def do_request(self, fee, sender):
        r = self.ledger.call(sender, "request", value=fee, domain="d", whitelist=[], fee=fee)
        self.ledger.mine()
        if r.ok:
            self.request_ids.append(r.result)

    @rule(sender=st.sampled_from(ROLES))
    def do_accept(self, sender):
        if not self.request_ids:
            return
        r = self.ledger.call(sender, "accept", value=50, request_id=self.request_ids[0])
        self.ledger.mine()
        if r.ok:
            self.request_ids.pop(0)
            self.service_ids.append(r.result)

    @rule(vid=st.integers(min_value=0, max_value=20), status=st.sampled_from(["ok", "connect", f"new_key:{KEY_B}"]))
    def do_state(self, vid, status):
        if not self.service_ids:
            return
        self.ledger.call("notary", "state", service_id=self.service_ids[0], vid=vid, status=status)
        self.ledger.mine()

    @rule(sender=st.sampled_from(ROLES))
    def do_query(self, sender):
        if not self.service_ids:
            return
        r = self.ledger.call(sender, "sla_query", service_id=self.service_ids[0], vid_from=0, vid_to=1)
        self.ledger.mine()
        if r.ok:
            self.query_ids.append(r.result)

    @rule(sender=st.sampled_from(ROLES), respond=st.booleans())
    def do_respond_or_claim(self, sender, respond):
        if not self.query_ids:
            return
        qid = self.query_ids[0]
        if respond:
            self.ledger.call(sender, "sla_response", query_id=qid, payload="00")
        else:
            self.ledger.call(sender, "sla_claim", query_id=qid)
        self.ledger.mine()

    @rule()
    def do_mine(self):
        self.ledger.mine()

    @invariant()
    def conservation(self):
        assert self.ledger.total_supply() == self.supply

    @invariant()
    def no_negative_balances(self):
        snap = self.ledger.read_state()
        assert all(v >= 0 for v in snap.accounts.values())

    @invariant()
    def timelines_monotone(self):
        snap = self.ledger.read_state()
        for sid in self.service_ids:
            timeline = snap.timeline(sid)
            vids = [v for v, _ in timeline]
            assert vids == sorted(set(vids))


TestContractMachine = ContractMachine.TestCase
TestContractMachine.settings = settings(max_examples=25, stateful_step_count=30, deadline=None)
