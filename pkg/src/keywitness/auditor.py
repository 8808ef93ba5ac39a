"""Requester-side audit client.

Reconstructs the published timeline from ledger state, fetches evidence
over the notary's HTTP interface (or directly from a store in-process),
re-verifies every signature, re-derives what the status at each vid
should have been, and compares against the timeline.  When the direct
interface is censored or down, escalation moves the same query onto the
ledger where an unanswered deadline forfeits the notary's deposit.

Because publication is delta-encoded, the status in force at vid v is
the one from the latest published change with vid' <= v.
"""

from __future__ import annotations

import base64
import json
import re
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

import requests

from . import records
from .contract import Status
from .ledger import Ledger, Snapshot
from .probe import OUTCOME_CONNECT_FAILURE, OUTCOME_SIGNED, verify_evidence
from .records import StoredValidation
from .timesource import MissingChain, TimestampedValidation, verify_timestamped
from .wire import CertificateChain

VERDICT_CONSISTENT = "consistent"
VERDICT_CONTRADICTION = "evidence_contradicts_state"
VERDICT_MISSING = "evidence_missing"
VERDICT_SLA_BREACH = "sla_breach"


class Unreachable(Exception):
    """The direct interface cannot be used; callers may escalate on-ledger."""


@dataclass(frozen=True)
class Timeline:
    """Published (vid, status) changes for one service, in force order."""

    entries: tuple[tuple[int, Status], ...]

    def __post_init__(self) -> None:
        vids = [v for v, _ in self.entries]
        if vids != sorted(set(vids)):
            raise ValueError("timeline vids must be strictly increasing")
        for (_, a), (_, b) in zip(self.entries, self.entries[1:]):
            if a == b:
                raise ValueError("timeline must not repeat a status")

    def implied_at(self, vid: int) -> Optional[Status]:
        """Status in force at vid: latest published change at or before it."""
        current: Optional[Status] = None
        for v, status in self.entries:
            if v > vid:
                break
            current = status
        return current

    def render_human(self) -> str:
        return " ".join(f"{v}:{s.human()}" for v, s in self.entries)

    def render_json(self) -> str:
        return json.dumps(
            [{"vid": v, "status": s.encode()} for v, s in self.entries], separators=(",", ":")
        )

    @classmethod
    def parse_human(cls, text: str) -> "Timeline":
        entries = []
        for token in _split_timeline_tokens(text):
            vid_str, _, status_str = token.partition(":")
            entries.append((int(vid_str), Status.parse_human(status_str)))
        return cls(tuple(entries))

    @classmethod
    def parse_json(cls, text: str) -> "Timeline":
        data = json.loads(text)
        return cls(tuple((int(e["vid"]), Status.decode(e["status"])) for e in data))


_TOKEN_RE = re.compile(r"\d+:(?:OK|Err\([^)]*\))")


def _split_timeline_tokens(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


def read_timeline(snapshot: Snapshot, service_id: int) -> Timeline:
    return Timeline(
        tuple((vid, Status.decode(s)) for vid, s in snapshot.timeline(service_id))
    )


def render_timeline(snapshot: Snapshot, service_id: int, fmt: str = "human") -> str:
    timeline = read_timeline(snapshot, service_id)
    if fmt == "human":
        return timeline.render_human()
    if fmt == "json":
        return timeline.render_json()
    raise ValueError(f"unknown timeline format {fmt!r}")


@dataclass(frozen=True)
class AuditVerdict:
    kind: str
    service_id: int
    contradiction_vid: Optional[int] = None
    missing_vids: tuple[int, ...] = ()
    query_id: Optional[int] = None
    detail: str = ""
    # For a contradiction: the re-verifiable record bytes (hex) proving it.
    evidence_records: tuple[str, ...] = ()

    @property
    def consistent(self) -> bool:
        return self.kind == VERDICT_CONSISTENT

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {"verdict": self.kind, "service_id": self.service_id}
        if self.contradiction_vid is not None:
            out["contradiction_vid"] = self.contradiction_vid
        if self.missing_vids:
            out["missing_vids"] = list(self.missing_vids)
        if self.query_id is not None:
            out["query_id"] = self.query_id
        if self.detail:
            out["detail"] = self.detail
        if self.evidence_records:
            out["evidence_records"] = list(self.evidence_records)
        return out


@dataclass
class FetchResult:
    """Evidence for a vid range: decoded records plus the chains to verify them."""

    records: dict[int, StoredValidation] = field(default_factory=dict)
    chains: dict[bytes, CertificateChain] = field(default_factory=dict)
    missing: list[int] = field(default_factory=list)
    raw: dict[int, bytes] = field(default_factory=dict)


class EvidenceSource:
    def fetch(self, service_id: int, vid_from: int, vid_to: int) -> FetchResult:
        raise NotImplementedError


class HttpEvidenceSource(EvidenceSource):
    def __init__(self, base_url: str, timeout: float = 10.0) -> None:
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout

    def fetch(self, service_id: int, vid_from: int, vid_to: int) -> FetchResult:
        url = f"{self.base_url}/services/{service_id}/validations"
        try:
            resp = requests.get(
                url, params={"from": vid_from, "to": vid_to}, timeout=self.timeout
            )
        except requests.RequestException as exc:
            raise Unreachable(f"direct interface unreachable: {exc}") from exc
        if resp.status_code >= 500:
            raise Unreachable(f"direct interface failing: HTTP {resp.status_code}")
        if resp.status_code == 404:
            # Unknown service counts as everything missing.
            return FetchResult(missing=list(range(vid_from, vid_to + 1)))
        payload = resp.json()
        out = FetchResult(missing=[int(v) for v in payload.get("missing", [])])
        for key, certs_b64 in payload.get("chains", {}).items():
            chain = CertificateChain(tuple(base64.b64decode(c) for c in certs_b64))
            out.chains[chain.chain_hash] = chain
        for item in payload.get("results", []):
            blob = base64.b64decode(item["record"])
            sv, inline = records.decode_stored(blob)
            out.chains.update(inline)
            out.records[sv.vid] = sv
            out.raw[sv.vid] = blob
        return out


class LocalEvidenceSource(EvidenceSource):
    """Audit straight off a store; used in-process and by one-host CLIs."""

    def __init__(self, store: Any) -> None:
        self.store = store

    def fetch(self, service_id: int, vid_from: int, vid_to: int) -> FetchResult:
        out = FetchResult()
        for vid in range(vid_from, vid_to + 1):
            blob = self.store.evidence.get_encoded(service_id, vid)
            if blob is None:
                out.missing.append(vid)
                continue
            sv, _ = records.decode_stored(blob)
            out.records[vid] = sv
            out.raw[vid] = blob
            for ref in sv.chain_refs():
                chain = self.store.chains.get(ref)
                if chain is not None:
                    out.chains[ref] = chain
        return out


def _verify_record(sv: StoredValidation, chains: dict[bytes, CertificateChain]) -> tuple[bool, str]:
    """Cryptographic check of one record against its chains."""
    evidence = sv.evidence
    if isinstance(evidence, TimestampedValidation):
        try:
            ok = verify_timestamped(evidence, chains.get)
        except MissingChain as exc:
            return False, f"chain unresolvable: {exc}"
        return ok, "" if ok else "timestamped bundle does not verify"
    if evidence.outcome != OUTCOME_SIGNED:
        return True, ""  # failure evidence carries no signature to check
    chain = chains.get(evidence.chain_ref)
    if chain is None:
        return False, "chain unresolvable"
    ok = verify_evidence(evidence, chain)
    return ok, "" if ok else "signature does not verify"


def _candidate_statuses(
    sv: StoredValidation, whitelist: set[str], baseline: Optional[str]
) -> set[str]:
    """Status kinds this evidence can legitimately support.

    Signed evidence pins the key dimension exactly; the clock dimension
    (Time) cannot be re-derived without the notary's clock, so a Time
    claim is accepted whenever the key checks out.
    """
    main = sv.main_result
    if main.outcome == OUTCOME_CONNECT_FAILURE:
        return {Status.connect_error().encode()}
    if main.outcome != OUTCOME_SIGNED:
        return {Status.other_error().encode(), Status.time_error().encode()}
    effective = set(whitelist) or ({baseline} if baseline else set())
    observed = main.observed_key_hash.hex()
    if effective and observed not in effective:
        return {Status.new_key(observed).encode()}
    return {Status.ok().encode(), Status.time_error().encode()}


def audit_range(
    ledger: Ledger,
    source: EvidenceSource,
    service_id: int,
    vid_from: int,
    vid_to: int,
) -> AuditVerdict:
    """Verify stored evidence against the published timeline over a vid range.

    A verified record whose implied status cannot be supported is a
    contradiction (provable misbehavior); unverifiable or absent
    records are reported as missing evidence.  Contradictions outrank
    missing vids in the verdict since they carry publishable proof.
    """
    snapshot = ledger.read_state()
    svc = snapshot.service(service_id)
    if svc is None:
        raise ValueError(f"unknown service {service_id}")
    timeline = read_timeline(snapshot, service_id)
    whitelist = set(svc.get("whitelist") or [])

    fetched = source.fetch(service_id, vid_from, vid_to)

    baseline: Optional[str] = None
    if not whitelist:
        # Whitelist-empty services measure continuity against the first
        # signed observation; fetch vid 0 onward if the range skips it.
        base_fetch = fetched if vid_from == 0 else source.fetch(service_id, 0, vid_to)
        for vid in sorted(base_fetch.records):
            main = base_fetch.records[vid].main_result
            if main.outcome == OUTCOME_SIGNED:
                baseline = main.observed_key_hash.hex()
                break

    for vid in sorted(fetched.records):
        sv = fetched.records[vid]
        record_hex = fetched.raw.get(vid, b"").hex()
        if sv.service_id != service_id or sv.vid != vid:
            return AuditVerdict(
                VERDICT_CONTRADICTION,
                service_id,
                contradiction_vid=vid,
                detail="record is bound to a different service or vid",
                evidence_records=(record_hex,),
            )
        ok, why = _verify_record(sv, fetched.chains)
        if not ok:
            return AuditVerdict(
                VERDICT_CONTRADICTION,
                service_id,
                contradiction_vid=vid,
                detail=f"evidence fails verification: {why}",
                evidence_records=(record_hex,),
            )
        implied = timeline.implied_at(vid)
        candidates = _candidate_statuses(sv, whitelist, baseline)
        if implied is None or implied.encode() not in candidates:
            implied_str = implied.encode() if implied else "(nothing published)"
            return AuditVerdict(
                VERDICT_CONTRADICTION,
                service_id,
                contradiction_vid=vid,
                detail=(
                    f"published state {implied_str} is incompatible with evidence "
                    f"supporting {sorted(candidates)}"
                ),
                evidence_records=(record_hex,),
            )

    if fetched.missing:
        return AuditVerdict(
            VERDICT_MISSING,
            service_id,
            missing_vids=tuple(sorted(fetched.missing)),
            detail="notary did not produce evidence for these vids",
        )
    return AuditVerdict(VERDICT_CONSISTENT, service_id)


def decode_response_payload(payload: bytes) -> FetchResult:
    """Decode an on-ledger response into the same shape a fetch returns."""
    out = FetchResult()
    for blob in records.unframe_records(payload):
        sv, inline = records.decode_stored(blob)
        out.chains.update(inline)
        out.records[sv.vid] = sv
        out.raw[sv.vid] = blob
    return out


class _LedgerResponseSource(EvidenceSource):
    def __init__(self, fetched: FetchResult) -> None:
        self._fetched = fetched

    def fetch(self, service_id: int, vid_from: int, vid_to: int) -> FetchResult:
        out = FetchResult(chains=dict(self._fetched.chains))
        for vid in range(vid_from, vid_to + 1):
            if vid in self._fetched.records:
                out.records[vid] = self._fetched.records[vid]
                out.raw[vid] = self._fetched.raw[vid]
            else:
                out.missing.append(vid)
        return out


def escalate(
    ledger: Ledger,
    requester: str,
    service_id: int,
    vid: int,
    *,
    pump: Optional[Callable[[], None]] = None,
    max_blocks: int = 1000,
) -> AuditVerdict:
    """Move an unanswered query on-ledger and drive it to a verdict.

    pump advances the world one block (defaults to mining an empty
    block); in live deployments that is simply waiting.  If a timely
    response appears it is verified off-chain like any fetched
    evidence; once the deadline passes with no response the claim is
    submitted and the deposit moves.
    """
    pump = pump or (lambda: ledger.mine() and None)
    snapshot = ledger.read_state()
    svc = snapshot.service(service_id)
    if svc is None:
        raise ValueError(f"unknown service {service_id}")
    timeout_blocks = svc["sla_timeout_blocks"]

    query_receipt = ledger.call(
        requester, "sla_query", service_id=service_id, vid_from=vid, vid_to=vid
    )
    pump()
    if not query_receipt.ok:
        raise RuntimeError(f"sla_query aborted: {query_receipt.error}")
    query_id = query_receipt.result

    for _ in range(max_blocks):
        snapshot = ledger.read_state()
        responses = snapshot.responses(query_id)
        asked_at = snapshot.queries()[str(query_id)]["asked_at"]
        if responses:
            last = responses[-1]
            if last["height"] - asked_at <= timeout_blocks:
                fetched = decode_response_payload(bytes.fromhex(last["payload"]))
                verdict = audit_range(
                    ledger, _LedgerResponseSource(fetched), service_id, vid, vid
                )
                if verdict.consistent:
                    return AuditVerdict(
                        VERDICT_CONSISTENT,
                        service_id,
                        query_id=query_id,
                        detail="on-ledger response verified",
                    )
                return AuditVerdict(
                    verdict.kind,
                    service_id,
                    contradiction_vid=verdict.contradiction_vid,
                    missing_vids=verdict.missing_vids,
                    query_id=query_id,
                    detail=f"on-ledger response is defective: {verdict.detail}",
                    evidence_records=verdict.evidence_records or (last["payload"],),
                )
        if snapshot.height - asked_at > timeout_blocks:
            claim = ledger.call(requester, "sla_claim", query_id=query_id)
            pump()
            if claim.ok:
                return AuditVerdict(
                    VERDICT_SLA_BREACH,
                    service_id,
                    query_id=query_id,
                    detail="query unanswered past the SLA deadline; deposit claimed",
                )
            # A response landed in the same block as the claim; loop to process it.
            continue
        pump()
    raise RuntimeError("escalation did not settle within the block budget")
