"""The notary daemon: schedule validations, classify outcomes, publish deltas.

A daemon watches one ledger-hosted contract.  Each tick it accepts
pending requests, runs validations for services whose interval has
elapsed, answers open on-ledger queries from its evidence store, and
optionally mines a block.  Only state *changes* are submitted to the
ledger; evidence for every validation is stored regardless of outcome,
so the audit trail has no gaps even when nothing was published.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from typing import Any, Callable, Optional

from . import records
from .clock import Clock, RealClock
from .config import NotaryConfig
from .contract import Status
from .ledger import Ledger, Receipt
from .probe import (
    OUTCOME_CONNECT_FAILURE,
    OUTCOME_PROTOCOL_FAILURE,
    OUTCOME_SIGNED,
    ProbeCapture,
    ProbeConfig,
    ValidationResult,
    probe_once,
)
from .records import StoredValidation
from .store import NotaryStore
from .timesource import (
    MainProbeFailure,
    TimeSource,
    TimeSourceFailure,
    TimestampedCapture,
    TimestampedValidation,
    TlsTimeSource,
    timestamped_probe,
)
from .wire import RANDOM_LEN


def classify(
    service: dict[str, Any],
    evidence: records.Evidence,
    *,
    skew_tolerance_s: float,
    baseline_key: Optional[str] = None,
) -> Status:
    """Map one validation's evidence onto the published status vocabulary.

    service is the contract-side agreement record (whitelist and
    time_source are read from it).  For whitelist-empty services the
    caller supplies the baseline key hash established by the first
    signed observation.  A non-whitelisted key outranks a clock
    problem: key identity is the security signal.
    """
    if isinstance(evidence, TimestampedValidation):
        main = evidence.main
        reference_window = evidence.bounds
    else:
        main = evidence
        reference_window = None

    if main.outcome == OUTCOME_CONNECT_FAILURE:
        return Status.connect_error()
    if main.outcome != OUTCOME_SIGNED:
        return Status.other_error()

    whitelist = set(service.get("whitelist") or [])
    if not whitelist and baseline_key:
        whitelist = {baseline_key}
    observed = main.observed_key_hash.hex()
    if whitelist and observed not in whitelist:
        return Status.new_key(observed)

    wall = main.notary_wall_clock
    if reference_window is not None:
        t1, t2 = reference_window
        if not (t1 - skew_tolerance_s <= wall <= t2 + skew_tolerance_s):
            return Status.time_error()
    else:
        assert main.server_random_field is not None
        if abs(main.server_random_field.gmt_unix_time - wall) > skew_tolerance_s:
            return Status.time_error()
    return Status.ok()


@dataclass
class ServiceRuntime:
    """Scheduler-side bookkeeping for one accepted service."""

    service_id: int
    next_vid: int = 0
    last_published: Optional[Status] = None
    last_start: Optional[float] = None
    baseline_key: Optional[str] = None


@dataclass
class CycleOutcome:
    stored: StoredValidation
    status: Status
    published: Optional[Receipt] = None


TimeSourceFactory = Callable[[str, int], TimeSource]


class NotaryDaemon:
    def __init__(
        self,
        ledger: Ledger,
        store: NotaryStore,
        config: NotaryConfig,
        *,
        clock: Optional[Clock] = None,
        prober: Callable[..., ProbeCapture] = probe_once,
        time_source_factory: Optional[TimeSourceFactory] = None,
        resolve_port: Optional[Callable[[str], tuple[str, int]]] = None,
        auto_mine: bool = True,
    ) -> None:
        self.ledger = ledger
        self.store = store
        self.config = config
        self.clock = clock or RealClock()
        self.prober = prober
        self.auto_mine = auto_mine
        self._resolve = resolve_port or (lambda domain: (domain, config.default_port))
        self._time_source_factory = time_source_factory or (
            lambda domain, port: TlsTimeSource(
                domain, port, prober=self.prober, config=self._probe_config(), clock=self.clock
            )
        )
        self.runtime: dict[int, ServiceRuntime] = {}
        self._running = False
        self._recover()

    def _probe_config(self) -> ProbeConfig:
        return ProbeConfig(connect_attempts=self.config.probe_attempts)

    # -- recovery ----------------------------------------------------------

    def _recover(self) -> None:
        """Rebuild vid counters and published statuses after a restart."""
        snapshot = self.ledger.read_state()
        for sid_str, svc in snapshot.services().items():
            sid = int(sid_str)
            rt = ServiceRuntime(sid, next_vid=self.store.evidence.next_vid(sid))
            if svc["state"] is not None:
                rt.last_published = Status.decode(svc["state"]["status"])
            if not svc.get("whitelist"):
                for vid in self.store.evidence.vids(sid):
                    sv = self.store.evidence.get(sid, vid)
                    if sv and sv.main_result.outcome == OUTCOME_SIGNED:
                        rt.baseline_key = sv.main_result.observed_key_hash.hex()
                        break
            self.runtime[sid] = rt

    # -- request intake -------------------------------------------------------

    def process_requests(self) -> list[Receipt]:
        """Accept every pending request, escrowing the SLA deposit for each."""
        if not self.config.auto_accept:
            return []
        snapshot = self.ledger.read_state()
        receipts = []
        for request_id in sorted(int(k) for k in snapshot.pending_requests()):
            receipts.append(
                self.ledger.call(
                    self.config.owner_account,
                    "accept",
                    value=self.config.sla_deposit,
                    request_id=request_id,
                )
            )
        return receipts

    def _sync_services(self) -> None:
        snapshot = self.ledger.read_state()
        for sid_str, svc in snapshot.services().items():
            sid = int(sid_str)
            if sid not in self.runtime and svc["active"]:
                self.runtime[sid] = ServiceRuntime(sid, next_vid=self.store.evidence.next_vid(sid))

    # -- validation ----------------------------------------------------------

    def _probe_service(self, svc: dict[str, Any], client_random: bytes) -> tuple[records.Evidence, dict]:
        host, port = self._resolve(svc["domain"])
        deadline = self.config.probe_deadline_s
        if svc.get("time_source"):
            ts_host, ts_port = self._resolve(svc["time_source"])
            cap: TimestampedCapture = timestamped_probe(
                host,
                port,
                self._time_source_factory(ts_host, ts_port),
                deadline,
                prober=self.prober,
                config=self._probe_config(),
                clock=self.clock,
            )
            return cap.bundle, cap.chains
        capture = self.prober(
            host,
            port,
            client_random=client_random,
            deadline=deadline,
            config=self._probe_config(),
            clock=self.clock,
        )
        chains = {capture.chain.chain_hash: capture.chain} if capture.chain else {}
        return capture.result, chains

    def run_validation_cycle(self, service_id: int) -> CycleOutcome:
        """Probe once, store the evidence under the next vid, publish on change."""
        snapshot = self.ledger.read_state()
        svc = snapshot.service(service_id)
        if svc is None or not svc["active"]:
            raise ValueError(f"service {service_id} is not active")
        rt = self.runtime.setdefault(
            service_id, ServiceRuntime(service_id, next_vid=self.store.evidence.next_vid(service_id))
        )
        vid = rt.next_vid
        rt.last_start = self.clock.now()

        time_error = False
        try:
            evidence, chains = self._probe_service(svc, os.urandom(RANDOM_LEN))
        except TimeSourceFailure as exc:
            evidence = exc.result or _failure_result(svc["domain"], self.clock.now(), str(exc))
            chains = {}
            time_error = True
        except MainProbeFailure as exc:
            evidence = exc.result
            chains = {}

        main = evidence.main if isinstance(evidence, records.TimestampedValidation) else evidence
        evidence = _set_vid(evidence, vid)

        if time_error:
            status = Status.time_error()
        else:
            status = classify(
                svc,
                evidence,
                skew_tolerance_s=self.config.skew_tolerance_s,
                baseline_key=rt.baseline_key,
            )
        if (
            not svc.get("whitelist")
            and rt.baseline_key is None
            and main.outcome == OUTCOME_SIGNED
        ):
            rt.baseline_key = main.observed_key_hash.hex()

        stored = StoredValidation(service_id, vid, evidence)
        self.store.add(stored, chains)
        rt.next_vid = vid + 1

        published = None
        if rt.last_published != status:
            published = self._publish(service_id, vid, status)
            rt.last_published = status
        return CycleOutcome(stored, status, published)

    def _publish(self, service_id: int, vid: int, status: Status) -> Receipt:
        attempts = 3
        last: Optional[Receipt] = None
        for _ in range(attempts):
            try:
                last = self.ledger.call(
                    self.config.owner_account,
                    "state",
                    service_id=service_id,
                    vid=vid,
                    status=status.encode(),
                )
                return last
            except Exception:
                continue
        assert last is not None
        return last

    def due_services(self) -> list[int]:
        now = self.clock.now()
        due = []
        snapshot = self.ledger.read_state()
        for sid_str, svc in snapshot.services().items():
            sid = int(sid_str)
            if not svc["active"]:
                continue
            rt = self.runtime.get(sid)
            interval = float(svc.get("validation_interval_s") or self.config.validation_interval_s)
            if rt is None or rt.last_start is None or now - rt.last_start >= interval:
                due.append(sid)
        return due

    # -- on-ledger queries ------------------------------------------------------

    def answer_queries(self) -> list[Receipt]:
        """Answer every open query with framed evidence records, chains inlined."""
        snapshot = self.ledger.read_state()
        receipts = []
        for qid_str, q in snapshot.queries().items():
            qid = int(qid_str)
            if not q["open"] or snapshot.responses(qid):
                continue
            payload = self.build_response_payload(q["service_id"], q["vid_from"], q["vid_to"])
            receipts.append(
                self.ledger.call(
                    self.config.owner_account,
                    "sla_response",
                    query_id=qid,
                    payload=payload.hex(),
                )
            )
        return receipts

    def build_response_payload(self, service_id: int, vid_from: int, vid_to: int) -> bytes:
        blobs = []
        for vid in range(vid_from, vid_to + 1):
            sv = self.store.evidence.get(service_id, vid)
            if sv is None:
                continue
            blobs.append(records.encode_stored(sv, inline_chains=self.store.chains.get))
        return records.frame_records(blobs)

    # -- main loop ---------------------------------------------------------------

    def tick(self) -> None:
        self.process_requests()
        if self.auto_mine:
            self.ledger.mine()  # include acceptances before validating
        self._sync_services()
        for sid in self.due_services():
            try:
                self.run_validation_cycle(sid)
            except ValueError:
                continue
        self.answer_queries()
        if self.auto_mine:
            self.ledger.mine()

    def run(self, *, ticks: Optional[int] = None) -> None:
        self._running = True
        done = 0
        while self._running and (ticks is None or done < ticks):
            self.tick()
            done += 1
            if ticks is None or done < ticks:
                self.clock.sleep(self.config.poll_interval_s)

    def stop(self) -> None:
        self._running = False


def _failure_result(domain: str, wall: float, diagnostic: str):
    from .probe import OUTCOME_PROTOCOL_FAILURE, ValidationResult

    return ValidationResult(
        domain=domain,
        outcome=OUTCOME_PROTOCOL_FAILURE,
        client_random=bytes(RANDOM_LEN),
        notary_wall_clock=wall,
        diagnostic=diagnostic,
    )


def _set_vid(evidence: records.Evidence, vid: int) -> records.Evidence:
    from dataclasses import replace

    from .timesource import TimestampedValidation

    if isinstance(evidence, TimestampedValidation):
        return replace(evidence, main=evidence.main.with_vid(vid))
    return evidence.with_vid(vid)
