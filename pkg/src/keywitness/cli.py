"""Single command-line entry point for every role.

Subcommands: notary run, request, timeline, audit, escalate, scan,
ledger init/mine/inspect, testbed spawn.  Every subcommand is
scriptable: --out structured emits stable JSON on stdout, exit codes
are frozen (see EXIT_*), and nothing prompts.

The --ledger argument names a block-log state file; mutating
subcommands submit their transactions and immediately mine one block,
so the file always holds the complete world state.  Cooperative
single-host use is assumed (one writer at a time).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Optional

from . import auditor as auditor_mod
from . import probe as probe_mod
from .config import NotaryConfig
from .contract import ContractParams, NotaryContract
from .httpapi import AuditApi, AuditHttpServer
from .ledger import Ledger
from .notary import NotaryDaemon
from .store import NotaryStore

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_CONTRADICTION = 20
EXIT_MISSING = 21
EXIT_SLA_BREACH = 22
EXIT_UNREACHABLE = 23

VERDICT_EXIT_CODES = {
    auditor_mod.VERDICT_CONSISTENT: EXIT_OK,
    auditor_mod.VERDICT_CONTRADICTION: EXIT_CONTRADICTION,
    auditor_mod.VERDICT_MISSING: EXIT_MISSING,
    auditor_mod.VERDICT_SLA_BREACH: EXIT_SLA_BREACH,
}

SKEW_BUCKETS = ("0-1", "2-5", "6-60", "61-300", ">300")


def bucket_for_delta(delta_s: float) -> str:
    d = round(abs(delta_s))
    if d <= 1:
        return "0-1"
    if d <= 5:
        return "2-5"
    if d <= 60:
        return "6-60"
    if d <= 300:
        return "61-300"
    return ">300"


def _emit(args: argparse.Namespace, structured: dict[str, Any], human: str) -> None:
    if args.out == "structured":
        print(json.dumps(structured, sort_keys=True))
    else:
        print(human)


def _load_ledger(args: argparse.Namespace) -> Ledger:
    path = Path(args.ledger)
    if str(args.ledger).startswith(("http://", "https://")):
        raise SystemExit("remote ledger endpoints are not supported; pass a block-log path")
    if not path.exists():
        raise SystemExit(f"no ledger state file at {path}; run `keywitness ledger init` first")
    return Ledger.open(path)


def _host_port(spec: str, default_port: int) -> tuple[str, int]:
    host, _, port = spec.partition(":")
    return host, int(port) if port else default_port


# -- subcommands ----------------------------------------------------------------


def cmd_ledger_init(args: argparse.Namespace) -> int:
    accounts: dict[str, int] = {}
    for part in args.accounts.split(","):
        name, _, balance = part.partition("=")
        if not name or not balance:
            raise SystemExit("accounts must look like name=balance,name=balance")
        accounts[name.strip()] = int(balance)
    params = ContractParams(
        owner=args.owner,
        sla_deposit=args.sla_deposit,
        sla_timeout_blocks=args.sla_tout,
        price_per_block=args.price,
        default_interval_s=args.interval,
    )
    path = Path(args.ledger)
    if path.exists():
        raise SystemExit(f"{path} already exists")
    Ledger(NotaryContract(params), accounts, log_path=path)
    _emit(args, {"ledger": str(path), "accounts": accounts}, f"initialized ledger at {path}")
    return EXIT_OK


def cmd_ledger_mine(args: argparse.Namespace) -> int:
    ledger = _load_ledger(args)
    for _ in range(args.count):
        block = ledger.mine()
    _emit(args, {"height": ledger.height}, f"mined to height {ledger.height}")
    return EXIT_OK


def cmd_ledger_inspect(args: argparse.Namespace) -> int:
    ledger = _load_ledger(args)
    snapshot = ledger.read_state()
    if args.service is not None:
        svc = snapshot.service(args.service)
        if svc is None:
            print(f"unknown service {args.service}", file=sys.stderr)
            return EXIT_ERROR
        _emit(args, {"service": svc}, json.dumps(svc, indent=2, sort_keys=True))
        return EXIT_OK
    state = json.loads(snapshot.to_bytes())
    _emit(args, state, json.dumps(state, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_request(args: argparse.Namespace) -> int:
    ledger = _load_ledger(args)
    whitelist = [h.strip().lower() for h in args.whitelist.split(",") if h.strip()] if args.whitelist else []
    receipt = ledger.call(
        args.sender,
        "request",
        value=args.fee,
        domain=args.domain,
        whitelist=whitelist,
        fee=args.fee,
        time_source=args.time_source or "",
    )
    ledger.mine()
    if not receipt.ok:
        print(f"request aborted: {receipt.error}", file=sys.stderr)
        return EXIT_ERROR
    _emit(
        args,
        {"request_id": receipt.result, "height": receipt.height},
        f"request {receipt.result} pending at height {receipt.height}",
    )
    return EXIT_OK


def cmd_timeline(args: argparse.Namespace) -> int:
    ledger = _load_ledger(args)
    snapshot = ledger.read_state()
    if snapshot.service(args.service) is None:
        print(f"unknown service {args.service}", file=sys.stderr)
        return EXIT_ERROR
    timeline = auditor_mod.read_timeline(snapshot, args.service)
    _emit(
        args,
        {"service_id": args.service, "timeline": json.loads(timeline.render_json())},
        timeline.render_human(),
    )
    return EXIT_OK


def _evidence_source(args: argparse.Namespace) -> auditor_mod.EvidenceSource:
    if args.api:
        return auditor_mod.HttpEvidenceSource(args.api)
    if args.store:
        return auditor_mod.LocalEvidenceSource(NotaryStore(Path(args.store)))
    raise SystemExit("pass --api URL or --store DIR to reach the notary's evidence")


def cmd_audit(args: argparse.Namespace) -> int:
    ledger = _load_ledger(args)
    snapshot = ledger.read_state()
    svc = snapshot.service(args.service)
    if svc is None:
        print(f"unknown service {args.service}", file=sys.stderr)
        return EXIT_ERROR
    source = _evidence_source(args)
    vid_to = args.to if args.to is not None else max(
        (v for v, _ in snapshot.timeline(args.service)), default=0
    )
    try:
        verdict = auditor_mod.audit_range(ledger, source, args.service, args.vid_from, vid_to)
    except auditor_mod.Unreachable as exc:
        _emit(
            args,
            {"verdict": "unreachable", "detail": str(exc)},
            f"unreachable: {exc} (escalate on-ledger)",
        )
        return EXIT_UNREACHABLE
    _emit(args, verdict.to_json(), _verdict_human(verdict))
    return VERDICT_EXIT_CODES[verdict.kind]


def cmd_escalate(args: argparse.Namespace) -> int:
    ledger = _load_ledger(args)
    try:
        verdict = auditor_mod.escalate(
            ledger,
            args.sender,
            args.service,
            args.vid,
            max_blocks=args.max_blocks,
        )
    except (ValueError, RuntimeError) as exc:
        print(f"escalation failed: {exc}", file=sys.stderr)
        return EXIT_ERROR
    _emit(args, verdict.to_json(), _verdict_human(verdict))
    return VERDICT_EXIT_CODES[verdict.kind]


def _verdict_human(verdict: auditor_mod.AuditVerdict) -> str:
    if verdict.kind == auditor_mod.VERDICT_CONSISTENT:
        return f"service {verdict.service_id}: consistent"
    if verdict.kind == auditor_mod.VERDICT_CONTRADICTION:
        return (
            f"service {verdict.service_id}: evidence contradicts published state "
            f"at vid {verdict.contradiction_vid} ({verdict.detail})"
        )
    if verdict.kind == auditor_mod.VERDICT_MISSING:
        vids = ",".join(str(v) for v in verdict.missing_vids)
        return f"service {verdict.service_id}: evidence missing for vids {vids}"
    return f"service {verdict.service_id}: SLA breach via query {verdict.query_id}"


def cmd_notary_run(args: argparse.Namespace) -> int:
    config = NotaryConfig.load(Path(args.config)) if args.config else NotaryConfig()
    if args.ledger:
        config.ledger_path = args.ledger
    ledger = Ledger.open(Path(config.ledger_path))
    store = NotaryStore(Path(config.store_dir) if config.store_dir else None)
    daemon = NotaryDaemon(ledger, store, config)
    server: Optional[AuditHttpServer] = None
    if not args.no_http:
        server = AuditHttpServer(
            AuditApi(store, ledger), config.listen_host, config.listen_port
        ).start()
        if args.out == "structured":
            print(json.dumps({"listening": server.base_url}, sort_keys=True), flush=True)
        else:
            print(f"audit interface on {server.base_url}", flush=True)
    try:
        daemon.run(ticks=args.ticks)
    except KeyboardInterrupt:
        pass
    finally:
        if server:
            server.stop()
    summary = {
        "height": ledger.height,
        "services": {
            sid: {"next_vid": rt.next_vid, "published": rt.last_published.encode() if rt.last_published else None}
            for sid, rt in sorted(daemon.runtime.items())
        },
    }
    _emit(args, summary, f"stopped at height {ledger.height}")
    return EXIT_OK


def cmd_scan(args: argparse.Namespace) -> int:
    targets = []
    for line in Path(args.input).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            targets.append(_host_port(line, 443))

    def one(target: tuple[str, int]) -> dict[str, Any]:
        host, port = target
        started = time.time()
        capture = probe_mod.probe_once(host, port, deadline=args.timeout)
        vr = capture.result
        entry: dict[str, Any] = {
            "host": host,
            "port": port,
            "reachable": vr.outcome != probe_mod.OUTCOME_CONNECT_FAILURE,
            "signed_dhe": vr.outcome == probe_mod.OUTCOME_SIGNED,
            "elapsed_s": round(time.time() - started, 3),
        }
        if vr.server_random_field is not None:
            delta = abs(vr.server_random_field.gmt_unix_time - vr.notary_wall_clock)
            entry["delta_s"] = round(delta, 3)
            entry["bucket"] = bucket_for_delta(delta)
        if vr.diagnostic:
            entry["diagnostic"] = vr.diagnostic
        return entry

    with ThreadPoolExecutor(max_workers=max(1, args.concurrency)) as pool:
        results = list(pool.map(one, targets))

    buckets = {name: 0 for name in SKEW_BUCKETS}
    for entry in results:
        if "bucket" in entry:
            buckets[entry["bucket"]] += 1
    timed = sum(buckets.values()) or 1
    report = {
        "targets": len(results),
        "reachable": sum(1 for e in results if e["reachable"]),
        "signed_dhe": sum(1 for e in results if e["signed_dhe"]),
        "buckets": buckets,
        "bucket_percent": {k: round(100.0 * v / timed, 2) for k, v in buckets.items()},
        "results": results,
    }
    if args.out == "structured":
        print(json.dumps(report, sort_keys=True))
    else:
        print(f"scanned {report['targets']} targets: {report['reachable']} reachable, "
              f"{report['signed_dhe']} with signed DHE")
        print("delta (s)    " + "  ".join(f"{b:>7}" for b in SKEW_BUCKETS))
        print("servers      " + "  ".join(f"{buckets[b]:>7}" for b in SKEW_BUCKETS))
        print("percent      " + "  ".join(f"{report['bucket_percent'][b]:>6.2f}%" for b in SKEW_BUCKETS))
    return EXIT_OK


def cmd_testbed_spawn(args: argparse.Namespace) -> int:
    from .testbed import ServerProfile, Testbed

    spec = json.loads(Path(args.profiles).read_text(encoding="utf-8"))
    bed = Testbed()
    endpoints = []
    for entry in spec["servers"]:
        key = bed.provision_key(entry.get("key_id", entry["name"]))
        profile = ServerProfile(
            key=key,
            clock_skew_s=float(entry.get("skew_s", 0.0)),
            record_layout=entry.get("record_layout", "coalesced"),
        )
        server = bed.spawn(entry["name"], profile)
        endpoints.append(
            {
                "name": entry["name"],
                "host": server.host,
                "port": server.port,
                "key_hash": key.key_hash_hex,
                "skew_s": profile.clock_skew_s,
            }
        )
    print(json.dumps({"servers": endpoints}, sort_keys=True), flush=True)
    try:
        deadline = time.time() + args.duration if args.duration else None
        while deadline is None or time.time() < deadline:
            time.sleep(0.2)
    except KeyboardInterrupt:
        pass
    finally:
        bed.close()
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="keywitness")
    parser.add_argument("--out", choices=("human", "structured"), default="human")
    sub = parser.add_subparsers(dest="command", required=True)

    notary = sub.add_parser("notary", help="notary daemon operations")
    notary_sub = notary.add_subparsers(dest="notary_command", required=True)
    run = notary_sub.add_parser("run", help="accept requests, validate, publish, serve audits")
    run.add_argument("--config", help="JSON config file")
    run.add_argument("--ledger", help="override the config's ledger state file")
    run.add_argument("--ticks", type=int, default=None, help="stop after N ticks (default: run forever)")
    run.add_argument("--no-http", action="store_true", help="do not serve the audit API")
    run.set_defaults(func=cmd_notary_run)

    request = sub.add_parser("request", help="order a validation service")
    request.add_argument("--ledger", required=True)
    request.add_argument("--sender", required=True)
    request.add_argument("--domain", required=True)
    request.add_argument("--fee", type=int, required=True)
    request.add_argument("--whitelist", default="", help="comma-separated key hashes (hex)")
    request.add_argument("--time-source", default="", help="reference time source host[:port]")
    request.set_defaults(func=cmd_request)

    timeline = sub.add_parser("timeline", help="print a service's published timeline")
    timeline.add_argument("--ledger", required=True)
    timeline.add_argument("--service", type=int, required=True)
    timeline.set_defaults(func=cmd_timeline)

    audit = sub.add_parser("audit", help="verify evidence against the published timeline")
    audit.add_argument("--ledger", required=True)
    audit.add_argument("--service", type=int, required=True)
    audit.add_argument("--from", dest="vid_from", type=int, default=0)
    audit.add_argument("--to", dest="to", type=int, default=None)
    audit.add_argument("--api", help="notary audit API base URL")
    audit.add_argument("--store", help="audit a local store directory instead of the API")
    audit.set_defaults(func=cmd_audit)

    escalate = sub.add_parser("escalate", help="query on-ledger and claim the deposit if unanswered")
    escalate.add_argument("--ledger", required=True)
    escalate.add_argument("--sender", required=True)
    escalate.add_argument("--service", type=int, required=True)
    escalate.add_argument("--vid", type=int, required=True)
    escalate.add_argument("--max-blocks", type=int, default=1000)
    escalate.set_defaults(func=cmd_escalate)

    scan = sub.add_parser("scan", help="survey TLS targets and bucket their clock skew")
    scan.add_argument("--input", required=True, help="file with one host[:port] per line")
    scan.add_argument("--concurrency", type=int, default=8)
    scan.add_argument("--timeout", type=float, default=5.0)
    scan.set_defaults(func=cmd_scan)

    ledger = sub.add_parser("ledger", help="ledger state file operations")
    ledger_sub = ledger.add_subparsers(dest="ledger_command", required=True)
    init = ledger_sub.add_parser("init", help="create a genesis state file")
    init.add_argument("--ledger", required=True)
    init.add_argument("--accounts", required=True, help="name=balance,name=balance")
    init.add_argument("--owner", required=True)
    init.add_argument("--sla-deposit", type=int, default=50)
    init.add_argument("--sla-tout", type=int, default=5)
    init.add_argument("--price", type=int, default=1)
    init.add_argument("--interval", type=float, default=3600.0)
    init.set_defaults(func=cmd_ledger_init)
    mine = ledger_sub.add_parser("mine", help="mine empty blocks to advance contract time")
    mine.add_argument("--ledger", required=True)
    mine.add_argument("--count", type=int, default=1)
    mine.set_defaults(func=cmd_ledger_mine)
    inspect = ledger_sub.add_parser("inspect", help="dump world state as JSON")
    inspect.add_argument("--ledger", required=True)
    inspect.add_argument("--service", type=int, default=None)
    inspect.set_defaults(func=cmd_ledger_inspect)

    testbed = sub.add_parser("testbed", help="local test server fleet")
    testbed_sub = testbed.add_subparsers(dest="testbed_command", required=True)
    spawn = testbed_sub.add_parser("spawn", help="spawn servers from a profile file")
    spawn.add_argument("--profiles", required=True, help="JSON profile file")
    spawn.add_argument("--duration", type=float, default=None, help="seconds to stay up")
    spawn.set_defaults(func=cmd_testbed_spawn)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SystemExit:
        raise
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
