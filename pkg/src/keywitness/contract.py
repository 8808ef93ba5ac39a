"""The notary contract: service lifecycle, state publication, and SLA enforcement.

Every method runs inside a mined block and sees only block heights as
time.  Methods follow a strict validate-then-mutate discipline: all
asserts come first, so an abort leaves state untouched and the hosting
ledger can refund the attached value without rollback machinery.

Money flow per service: the requester escrows the fee at request time,
the notary escrows its SLA deposit at accept time.  A timed-out request
refunds the fee.  A successful claim (unanswered on-ledger query past
the timeout) forfeits both deposit and fee to the requester.  Normal
expiry pays both to the notary.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Any, Protocol


class ContractAbort(Exception):
    """Raised by contract methods on any precondition failure; the transaction is void."""


class CallContext(Protocol):
    """Execution environment the hosting ledger provides to each call."""

    sender: str
    value: int
    height: int

    def transfer(self, to: str, amount: int) -> None: ...


STATUS_OK = "ok"
STATUS_NEW_KEY = "new_key"
STATUS_TIME = "time"
STATUS_CONNECT = "connect"
STATUS_OTHER = "other"

_ERROR_NAMES = {
    STATUS_NEW_KEY: "NewKey",
    STATUS_TIME: "Time",
    STATUS_CONNECT: "Connect",
    STATUS_OTHER: "Other",
}
_HUMAN_RE = re.compile(r"^(OK|Err\((NewKey) ([0-9a-f]+)\)|Err\((Time|Connect|Other)\))$")


@dataclass(frozen=True)
class Status:
    """A published validation status; compares by kind AND payload."""

    kind: str
    key_hash: str = ""  # hex digest, only meaningful for new_key

    def __post_init__(self) -> None:
        if self.kind not in (STATUS_OK, STATUS_NEW_KEY, STATUS_TIME, STATUS_CONNECT, STATUS_OTHER):
            raise ValueError(f"unknown status kind {self.kind!r}")
        if self.kind == STATUS_NEW_KEY and not self.key_hash:
            raise ValueError("new_key status requires the observed key hash")
        if self.kind != STATUS_NEW_KEY and self.key_hash:
            raise ValueError(f"{self.kind} status carries no key hash")

    def encode(self) -> str:
        if self.kind == STATUS_NEW_KEY:
            return f"{self.kind}:{self.key_hash}"
        return self.kind

    @classmethod
    def decode(cls, s: str) -> "Status":
        kind, _, payload = s.partition(":")
        return cls(kind, payload)

    def human(self) -> str:
        if self.kind == STATUS_OK:
            return "OK"
        if self.kind == STATUS_NEW_KEY:
            return f"Err(NewKey {self.key_hash})"
        return f"Err({_ERROR_NAMES[self.kind]})"

    @classmethod
    def parse_human(cls, s: str) -> "Status":
        m = _HUMAN_RE.match(s.strip())
        if not m:
            raise ValueError(f"unparseable status {s!r}")
        if m.group(1) == "OK":
            return cls(STATUS_OK)
        if m.group(2) == "NewKey":
            return cls(STATUS_NEW_KEY, m.group(3))
        return cls({"Time": STATUS_TIME, "Connect": STATUS_CONNECT, "Other": STATUS_OTHER}[m.group(4)])

    @classmethod
    def ok(cls) -> "Status":
        return cls(STATUS_OK)

    @classmethod
    def new_key(cls, key_hash: bytes | str) -> "Status":
        h = key_hash.hex() if isinstance(key_hash, bytes) else key_hash
        return cls(STATUS_NEW_KEY, h)

    @classmethod
    def time_error(cls) -> "Status":
        return cls(STATUS_TIME)

    @classmethod
    def connect_error(cls) -> "Status":
        return cls(STATUS_CONNECT)

    @classmethod
    def other_error(cls) -> "Status":
        return cls(STATUS_OTHER)


@dataclass(frozen=True)
class ContractParams:
    """Notary-chosen terms shared by every service this contract hosts."""

    owner: str
    sla_deposit: int
    sla_timeout_blocks: int
    price_per_block: int = 1
    default_interval_s: float = 3600.0

    def to_json(self) -> dict[str, Any]:
        return {
            "owner": self.owner,
            "sla_deposit": self.sla_deposit,
            "sla_timeout_blocks": self.sla_timeout_blocks,
            "price_per_block": self.price_per_block,
            "default_interval_s": self.default_interval_s,
        }

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "ContractParams":
        return cls(
            owner=obj["owner"],
            sla_deposit=int(obj["sla_deposit"]),
            sla_timeout_blocks=int(obj["sla_timeout_blocks"]),
            price_per_block=int(obj.get("price_per_block", 1)),
            default_interval_s=float(obj.get("default_interval_s", 3600.0)),
        )


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ContractAbort(message)


class NotaryContract:
    """State machine executed by the ledger.  All state is plain JSON-able data.

    ABI (method name -> canonically JSON-encoded args):
      request(domain: str, whitelist: [hex...], fee: int, time_source: str|"")
      accept(request_id: int)
      timeout(request_id: int)
      state(service_id: int, vid: int, status: str)       status per Status.encode()
      sla_query(service_id: int, vid_from: int, vid_to: int)
      sla_response(query_id: int, payload: hex str)
      sla_claim(query_id: int)
      expire(service_id: int)
    """

    def __init__(self, params: ContractParams) -> None:
        self.params = params
        self.requests: dict[int, dict[str, Any]] = {}
        self.services: dict[int, dict[str, Any]] = {}
        self.queries: dict[int, dict[str, Any]] = {}
        self.responses: dict[int, list[dict[str, Any]]] = {}
        self._next_request_id = 0
        self._next_service_id = 0
        self._next_query_id = 0

    @classmethod
    def from_params(cls, obj: dict[str, Any]) -> "NotaryContract":
        return cls(ContractParams.from_json(obj))

    # -- dispatch ------------------------------------------------------------

    _METHODS = (
        "request",
        "accept",
        "timeout",
        "state",
        "sla_query",
        "sla_response",
        "sla_claim",
        "expire",
    )

    def dispatch(self, ctx: CallContext, method: str, args: dict[str, Any]) -> Any:
        _require(method in self._METHODS, f"unknown method {method!r}")
        handler = getattr(self, f"op_{method}")
        try:
            return handler(ctx, **args)
        except TypeError as exc:
            raise ContractAbort(f"bad arguments for {method}: {exc}") from None

    def _require_no_value(self, ctx: CallContext) -> None:
        _require(ctx.value == 0, "method accepts no attached value")

    # -- service lifecycle -----------------------------------------------------

    def op_request(
        self,
        ctx: CallContext,
        domain: str,
        whitelist: list[str],
        fee: int,
        time_source: str = "",
    ) -> int:
        _require(bool(domain), "domain must not be empty")
        _require(fee > 0, "fee must be positive")
        _require(ctx.value == fee, "attached value must equal the fee")
        normalized = sorted({h.lower() for h in whitelist})
        _require(all(_is_hex_digest(h) for h in normalized), "whitelist entries must be hex digests")
        request_id = self._next_request_id
        self._next_request_id += 1
        self.requests[request_id] = {
            "requester": ctx.sender,
            "domain": domain,
            "whitelist": normalized,
            "fee": fee,
            "time_source": time_source,
        }
        return request_id

    def op_accept(self, ctx: CallContext, request_id: int) -> int:
        _require(ctx.sender == self.params.owner, "only the owner accepts requests")
        req = self.requests.get(request_id)
        _require(req is not None, f"no pending request {request_id}")
        _require(ctx.value == self.params.sla_deposit, "attached value must equal the SLA deposit")
        assert req is not None
        service_id = self._next_service_id
        self._next_service_id += 1
        duration = max(1, req["fee"] // max(1, self.params.price_per_block))
        self.services[service_id] = {
            **req,
            "active": True,
            "state": None,  # becomes {"vid": int, "status": str} on first publication
            "timeline": [],
            "sla_deposit": self.params.sla_deposit,
            "sla_timeout_blocks": self.params.sla_timeout_blocks,
            "validation_interval_s": self.params.default_interval_s,
            "created_at": ctx.height,
            "duration_blocks": duration,
        }
        del self.requests[request_id]
        return service_id

    def op_timeout(self, ctx: CallContext, request_id: int) -> None:
        req = self.requests.get(request_id)
        _require(req is not None, f"no pending request {request_id}")
        assert req is not None
        _require(ctx.sender == req["requester"], "only the requester may time out its request")
        self._require_no_value(ctx)
        ctx.transfer(req["requester"], req["fee"])
        del self.requests[request_id]

    # -- validation state --------------------------------------------------------

    def op_state(self, ctx: CallContext, service_id: int, vid: int, status: str) -> bool:
        _require(ctx.sender == self.params.owner, "only the owner publishes states")
        svc = self.services.get(service_id)
        _require(svc is not None and svc["active"], f"no active service {service_id}")
        self._require_no_value(ctx)
        assert svc is not None
        Status.decode(status)  # reject malformed encodings
        current = svc["state"]
        # Replace only on a strictly newer vid with a different status;
        # anything else is silently ignored, not aborted.
        if current is None or (vid > current["vid"] and status != current["status"]):
            svc["state"] = {"vid": vid, "status": status}
            svc["timeline"].append([vid, status])
            return True
        return False

    # -- SLA ---------------------------------------------------------------------

    def op_sla_query(self, ctx: CallContext, service_id: int, vid_from: int, vid_to: int) -> int:
        svc = self.services.get(service_id)
        _require(svc is not None and svc["active"], f"no active service {service_id}")
        assert svc is not None
        _require(ctx.sender == svc["requester"], "only the service requester may query")
        self._require_no_value(ctx)
        _require(0 <= vid_from <= vid_to, "bad vid range")
        query_id = self._next_query_id
        self._next_query_id += 1
        self.queries[query_id] = {
            "service_id": service_id,
            "vid_from": vid_from,
            "vid_to": vid_to,
            "asked_at": ctx.height,
            "open": True,
        }
        return query_id

    def op_sla_response(self, ctx: CallContext, query_id: int, payload: str) -> None:
        _require(ctx.sender == self.params.owner, "only the owner responds to queries")
        q = self.queries.get(query_id)
        _require(q is not None and q["open"], f"no open query {query_id}")
        assert q is not None
        _require(q["service_id"] in self.services, "query references an unknown service")
        self._require_no_value(ctx)
        _require(_is_hex(payload), "payload must be hex encoded")
        # The response is recorded unconditionally and publicly; only a
        # timely one closes the query (late responders stay claimable).
        self.responses.setdefault(query_id, []).append({"height": ctx.height, "payload": payload})
        if ctx.height - q["asked_at"] <= self.services[q["service_id"]]["sla_timeout_blocks"]:
            q["open"] = False

    def op_sla_claim(self, ctx: CallContext, query_id: int) -> None:
        q = self.queries.get(query_id)
        _require(q is not None and q["open"], f"no open query {query_id}")
        assert q is not None
        svc = self.services.get(q["service_id"])
        _require(svc is not None and svc["active"], "service already terminated")
        assert svc is not None
        _require(ctx.sender == svc["requester"], "only the service requester may claim")
        self._require_no_value(ctx)
        _require(
            ctx.height - q["asked_at"] > svc["sla_timeout_blocks"],
            "SLA timeout has not elapsed",
        )
        # Breach: the notary forfeits its deposit and the escrowed fee.
        ctx.transfer(svc["requester"], svc["sla_deposit"] + svc["fee"])
        q["open"] = False
        svc["active"] = False

    def op_expire(self, ctx: CallContext, service_id: int) -> None:
        _require(ctx.sender == self.params.owner, "only the owner expires services")
        svc = self.services.get(service_id)
        _require(svc is not None and svc["active"], f"no active service {service_id}")
        assert svc is not None
        self._require_no_value(ctx)
        _require(
            ctx.height >= svc["created_at"] + svc["duration_blocks"],
            "service duration has not elapsed",
        )
        ctx.transfer(self.params.owner, svc["sla_deposit"] + svc["fee"])
        svc["active"] = False

    # -- snapshots -----------------------------------------------------------------

    def snapshot_data(self) -> dict[str, Any]:
        """Deep plain-data copy of the whole state, for ledger snapshots."""
        return {
            "params": self.params.to_json(),
            "requests": {str(k): dict(v) for k, v in sorted(self.requests.items())},
            "services": {
                str(k): {**v, "timeline": [list(e) for e in v["timeline"]],
                         "state": dict(v["state"]) if v["state"] else None}
                for k, v in sorted(self.services.items())
            },
            "queries": {str(k): dict(v) for k, v in sorted(self.queries.items())},
            "responses": {
                str(k): [dict(r) for r in v] for k, v in sorted(self.responses.items())
            },
            "counters": {
                "request": self._next_request_id,
                "service": self._next_service_id,
                "query": self._next_query_id,
            },
        }


def _is_hex(s: str) -> bool:
    if not isinstance(s, str) or len(s) % 2:
        return False
    try:
        bytes.fromhex(s)
        return True
    except ValueError:
        return False


def _is_hex_digest(s: str) -> bool:
    return isinstance(s, str) and len(s) == 64 and _is_hex(s)
