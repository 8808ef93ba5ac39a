"""Testbed self-consistency: it must be a valid oracle for the wire and probe layers."""

from __future__ import annotations

import os
import threading
import time
from dataclasses import replace

from keywitness import wire
from keywitness.clock import VirtualClock
from keywitness.probe import OUTCOME_CONNECT_FAILURE, OUTCOME_SIGNED, evaluate_flight, probe_once
from keywitness.testbed import DirectProber, HandshakeResponder, ServerProfile, Testbed


def test_every_emitted_transcript_verifies_under_active_key(keypool):
    responder = HandshakeResponder(ServerProfile(key=keypool["k1"]))
    for layout in ("coalesced", "per_message", "split:100"):
        responder.profile = replace(responder.profile, record_layout=layout)
        random = os.urandom(32)
        hello = wire.encode_client_hello(random, [0x009E])
        flight = responder.respond(hello)
        capture = evaluate_flight("t", random, flight, time.time())
        assert capture.result.outcome == OUTCOME_SIGNED
        assert capture.result.observed_key_hash.hex() == keypool["k1"].key_hash_hex


def test_clock_skew_lands_in_expected_bucket(keypool):
    from keywitness.cli import bucket_for_delta

    expectations = {0: "0-1", 3: "2-5", 30: "6-60", 120: "61-300", 400: ">300"}
    for skew, bucket in expectations.items():
        responder = HandshakeResponder(ServerProfile(key=keypool["k1"], clock_skew_s=skew))
        random = os.urandom(32)
        flight = responder.respond(wire.encode_client_hello(random, [0x009E]))
        capture = evaluate_flight("t", random, flight, time.time())
        delta = abs(capture.result.server_random_field.gmt_unix_time - capture.result.notary_wall_clock)
        assert bucket_for_delta(delta) == bucket, skew


def test_virtual_clock_drives_timestamps(keypool):
    clock = VirtualClock(1_600_000_000.0)
    responder = HandshakeResponder(ServerProfile(key=keypool["k1"], clock_skew_s=7), clock)
    flight = responder.respond(wire.encode_client_hello(os.urandom(32), [0x009E]))
    parsed = wire.decode_server_flight(flight)
    assert parsed.server_random.gmt_unix_time == 1_600_000_007


def test_outage_window_refuses_connections(keypool):
    clock = VirtualClock(100.0)
    with Testbed(clock) as bed:
        bed.add_key(keypool["k1"])
        srv = bed.spawn("s", ServerProfile(key=keypool["k1"], outage_windows=((50.0, 150.0),)))
        from keywitness.probe import ProbeConfig

        cfg = ProbeConfig(connect_attempts=1)
        out = probe_once(srv.host, srv.port, deadline=1.0, config=cfg)
        assert out.result.outcome == OUTCOME_CONNECT_FAILURE
        clock.advance(100.0)  # outage over
        ok = probe_once(srv.host, srv.port, deadline=2.0, config=cfg)
        assert ok.result.outcome == OUTCOME_SIGNED


def test_scripted_key_change_by_epoch(keypool):
    responder = HandshakeResponder(ServerProfile(key=keypool["k1"]))
    responder.profile = replace(responder.profile, key_schedule=((2, keypool["k2"]), (3, keypool["k1"])))
    seen = []
    for _ in range(4):
        random = os.urandom(32)
        flight = responder.respond(wire.encode_client_hello(random, [0x009E]))
        capture = evaluate_flight("t", random, flight, time.time())
        seen.append(capture.result.observed_key_hash.hex())
    k1, k2 = keypool["k1"].key_hash_hex, keypool["k2"].key_hash_hex
    assert seen == [k1, k1, k2, k1]


def test_whitelisted_alternate_key_change(keypool):
    # Swapping between two whitelisted keys never leaves the whitelist.
    responder = HandshakeResponder(ServerProfile(key=keypool["k1"], key_schedule=((1, keypool["k2"]),)))
    whitelist = {keypool["k1"].key_hash_hex, keypool["k2"].key_hash_hex}
    for _ in range(3):
        random = os.urandom(32)
        capture = evaluate_flight(
            "t", random, responder.respond(wire.encode_client_hello(random, [0x009E])), time.time()
        )
        assert capture.result.observed_key_hash.hex() in whitelist


def test_mid_handshake_swap_never_mixes_transcripts(keypool):
    """Concurrent key swaps: every flight verifies under exactly one key."""
    responder = HandshakeResponder(ServerProfile(key=keypool["k1"]))
    stop = threading.Event()

    def swapper():
        keys = [keypool["k1"], keypool["k2"]]
        i = 0
        while not stop.is_set():
            responder.profile = replace(responder.profile, key=keys[i % 2])
            i += 1

    thread = threading.Thread(target=swapper, daemon=True)
    thread.start()
    try:
        known = {keypool["k1"].key_hash_hex, keypool["k2"].key_hash_hex}
        for _ in range(50):
            random = os.urandom(32)
            flight = responder.respond(wire.encode_client_hello(random, [0x009E]))
            capture = evaluate_flight("t", random, flight, time.time())
            # Signed outcome means chain and signer agreed; a mixed
            # transcript would fail signature verification.
            assert capture.result.outcome == OUTCOME_SIGNED
            assert capture.result.observed_key_hash.hex() in known
    finally:
        stop.set()
        thread.join(timeout=2)


def test_direct_prober_matches_socket_prober(keypool):
    clock = VirtualClock(1_700_000_000.0)
    prober = DirectProber(clock)
    prober.register("x.test", ServerProfile(key=keypool["k1"], clock_skew_s=42))
    capture = prober("x.test", client_random=os.urandom(32))
    assert capture.result.outcome == OUTCOME_SIGNED
    assert capture.result.server_random_field.gmt_unix_time == 1_700_000_042
    from keywitness.probe import verify_evidence

    assert verify_evidence(capture.result, capture.chain)


def test_direct_prober_down_and_unknown_domains(keypool):
    prober = DirectProber()
    prober.register("up.test", ServerProfile(key=keypool["k1"]))
    prober.set_down("up.test")
    assert prober("up.test").result.outcome == OUTCOME_CONNECT_FAILURE
    assert prober("never.test").result.outcome == OUTCOME_CONNECT_FAILURE
    prober.set_down("up.test", False)
    assert prober("up.test").result.outcome == OUTCOME_SIGNED


def test_multi_day_schedule_on_virtual_clock_is_fast(keypool):
    # A year of hourly validations finishes in wall-clock seconds.
    clock = VirtualClock(0.0)
    prober = DirectProber(clock)
    prober.register("y.test", ServerProfile(key=keypool["k1"]))
    started = time.time()
    count = 0
    for _ in range(8760):
        capture = prober("y.test", client_random=os.urandom(32))
        count += capture.result.outcome == OUTCOME_SIGNED
        clock.advance(3600.0)
    assert count == 8760
    assert clock.now() == 8760 * 3600.0
    assert time.time() - started < 60
