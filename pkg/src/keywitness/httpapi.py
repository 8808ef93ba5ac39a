"""Read-only HTTP interface serving validation evidence to auditors.

Endpoints (all GET, all JSON):

  /health                                  liveness + service count
  /services                                id, domain, active flag, latest state
  /services/{id}/state                     latest published state
  /services/{id}/validations/{vid}         single record
  /services/{id}/validations?from=A&to=B   range of records

Records travel as base64 of the canonical binary encoding (see the
records module) with chains deduplicated into a side table keyed by
chain hash, so a range response carries each distinct chain once.
Evidence is public by design; there is no authentication.
"""

from __future__ import annotations

import base64
import json
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Optional
from urllib.parse import parse_qs, urlparse

from .ledger import Ledger
from .store import NotaryStore

_SINGLE = re.compile(r"^/services/(\d+)/validations/(\d+)$")
_RANGE = re.compile(r"^/services/(\d+)/validations$")
_STATE = re.compile(r"^/services/(\d+)/state$")


class AuditApi:
    """Request-independent view logic, reused by tests without sockets."""

    def __init__(self, store: NotaryStore, ledger: Ledger, *, censor_vids: Optional[set[tuple[int, int]]] = None) -> None:
        self.store = store
        self.ledger = ledger
        # (service_id, vid) pairs this instance refuses to serve; exists so
        # misbehavior drills can exercise the auditor's censorship handling.
        self.censor_vids = censor_vids or set()

    def health(self) -> dict[str, Any]:
        snapshot = self.ledger.read_state()
        return {"status": "ok", "services": len(snapshot.services()), "height": snapshot.height}

    def services(self) -> dict[str, Any]:
        snapshot = self.ledger.read_state()
        out = []
        for sid_str, svc in sorted(snapshot.services().items(), key=lambda kv: int(kv[0])):
            out.append(
                {
                    "id": int(sid_str),
                    "domain": svc["domain"],
                    "active": svc["active"],
                    "state": svc["state"],
                }
            )
        return {"services": out}

    def state(self, service_id: int) -> Optional[dict[str, Any]]:
        svc = self.ledger.read_state().service(service_id)
        if svc is None:
            return None
        return {"id": service_id, "state": svc["state"], "timeline": svc["timeline"]}

    def validations(self, service_id: int, vid_from: int, vid_to: int) -> Optional[dict[str, Any]]:
        if self.ledger.read_state().service(service_id) is None:
            return None
        results = []
        missing = []
        chains: dict[str, list[str]] = {}
        for vid in range(vid_from, vid_to + 1):
            blob = self.store.evidence.get_encoded(service_id, vid)
            if blob is None or (service_id, vid) in self.censor_vids:
                missing.append(vid)
                continue
            sv = self.store.evidence.get(service_id, vid)
            assert sv is not None
            for ref in sv.chain_refs():
                key = ref.hex()
                if key not in chains:
                    chain = self.store.chains.get(ref)
                    if chain is not None:
                        chains[key] = [base64.b64encode(c).decode() for c in chain.certificates]
            results.append({"vid": vid, "record": base64.b64encode(blob).decode()})
        return {
            "service_id": service_id,
            "from": vid_from,
            "to": vid_to,
            "results": results,
            "missing": missing,
            "chains": chains,
        }


class _Handler(BaseHTTPRequestHandler):
    api: AuditApi  # assigned by the server factory

    def log_message(self, fmt: str, *args: Any) -> None:  # quiet by default
        pass

    def _send(self, code: int, payload: dict[str, Any]) -> None:
        body = json.dumps(payload, sort_keys=True).encode()
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self) -> None:  # noqa: N802 (http.server API)
        url = urlparse(self.path)
        path = url.path.rstrip("/") or "/"
        try:
            if path == "/health":
                self._send(200, self.api.health())
                return
            if path == "/services":
                self._send(200, self.api.services())
                return
            m = _STATE.match(path)
            if m:
                result = self.api.state(int(m.group(1)))
                if result is None:
                    self._send(404, {"error": "unknown service"})
                else:
                    self._send(200, result)
                return
            m = _SINGLE.match(path)
            if m:
                service_id, vid = int(m.group(1)), int(m.group(2))
                result = self.api.validations(service_id, vid, vid)
                if result is None:
                    self._send(404, {"error": "unknown service"})
                elif result["missing"]:
                    self._send(404, {"error": "missing vid", "missing": result["missing"]})
                else:
                    self._send(200, result)
                return
            m = _RANGE.match(path)
            if m:
                query = parse_qs(url.query)
                try:
                    vid_from = int(query.get("from", ["0"])[0])
                    vid_to = int(query.get("to", [str(vid_from)])[0])
                except ValueError:
                    self._send(400, {"error": "from/to must be integers"})
                    return
                if vid_to < vid_from:
                    self._send(400, {"error": "empty range"})
                    return
                result = self.api.validations(int(m.group(1)), vid_from, vid_to)
                if result is None:
                    self._send(404, {"error": "unknown service"})
                else:
                    self._send(200, result)
                return
            self._send(404, {"error": "no such endpoint"})
        except BrokenPipeError:
            pass
        except Exception as exc:  # keep the server alive; report the fault
            self._send(500, {"error": f"{type(exc).__name__}: {exc}"})


class AuditHttpServer:
    """Threaded HTTP server wrapper with a test-friendly lifecycle."""

    def __init__(self, api: AuditApi, host: str = "127.0.0.1", port: int = 0) -> None:
        handler = type("BoundHandler", (_Handler,), {"api": api})
        self._server = ThreadingHTTPServer((host, port), handler)
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[0], self._server.server_address[1]

    @property
    def base_url(self) -> str:
        host, port = self.address
        return f"http://{host}:{port}"

    def start(self) -> "AuditHttpServer":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread:
            self._thread.join(timeout=5)
