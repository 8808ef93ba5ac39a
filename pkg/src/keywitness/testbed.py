"""Controllable local TLS 1.2 servers for deterministic end-to-end runs.

Each server performs only the probe-visible half of a DHE handshake,
through ServerHelloDone, signing the exchanged parameters with its
currently active key and stamping the server random from a shared
(possibly virtual) clock plus a configurable skew.  Profiles script
outages, key substitutions per handshake epoch, and deliberate protocol
defects so failure paths can be forced on demand.

Servers record every byte each client sends, so tests can assert the
prober really stops after one ClientHello.
"""

from __future__ import annotations

import datetime
import os
import socket
import threading
from dataclasses import dataclass, replace
from typing import Optional

from cryptography import x509
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import padding, rsa
from cryptography.x509.oid import NameOID

from . import wire
from .clock import Clock, RealClock
from .probe import ProbeCapture, ProbeConfig, evaluate_flight
from .wire import CertificateChain, RandomField, ServerKeyExchangeMsg

SIG_RSA_SHA256 = 0x0401

# 2048-bit MODP group (RFC 3526 group 14); a fixed, well-known prime is
# fine because the exchange is never completed.
_DH_PRIME = int(
    "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74"
    "020BBEA63B139B22514A08798E3404DDEF9519B3CD3A431B302B0A6DF25F1437"
    "4FE1356D6D51C245E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED"
    "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3DC2007CB8A163BF05"
    "98DA48361C55D39A69163FA8FD24CF5F83655D23DCA3AD961C62F356208552BB"
    "9ED529077096966D670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B"
    "E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9DE2BCBF695581718"
    "3995497CEA956AE515D2261898FA051015728E5A8AACAA68FFFFFFFFFFFFFFFF",
    16,
)
_DH_PRIME_BYTES = _DH_PRIME.to_bytes(256, "big")
_DH_GENERATOR = b"\x02"


@dataclass(frozen=True)
class KeyPair:
    key_id: str
    private_key: rsa.RSAPrivateKey
    chain: CertificateChain

    @property
    def key_hash_hex(self) -> str:
        from .probe import key_hash

        return key_hash(self.chain.leaf).hex()


def generate_keypair(key_id: str, *, chain_padding: int = 0, key_size: int = 2048) -> KeyPair:
    """Fresh RSA key with a self-signed certificate naming the key id.

    chain_padding grows the certificate with a filler extension, which
    lets storage tests dial in realistic chain sizes.
    """
    private_key = rsa.generate_private_key(public_exponent=65537, key_size=key_size)
    name = x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, key_id)])
    not_before = datetime.datetime(2020, 1, 1, tzinfo=datetime.timezone.utc)
    builder = (
        x509.CertificateBuilder()
        .subject_name(name)
        .issuer_name(name)
        .public_key(private_key.public_key())
        .serial_number(x509.random_serial_number())
        .not_valid_before(not_before)
        .not_valid_after(not_before + datetime.timedelta(days=365 * 30))
    )
    if chain_padding > 0:
        builder = builder.add_extension(
            x509.UnrecognizedExtension(
                x509.ObjectIdentifier("1.3.6.1.4.1.55555.1"), os.urandom(chain_padding)
            ),
            critical=False,
        )
    cert = builder.sign(private_key, hashes.SHA256())
    der = cert.public_bytes(serialization.Encoding.DER)
    return KeyPair(key_id, private_key, CertificateChain((der,)))


@dataclass(frozen=True)
class ServerProfile:
    """Behavior script for one testbed server."""

    key: KeyPair
    clock_skew_s: float = 0.0
    # Virtual-time windows during which connections are shed immediately.
    outage_windows: tuple[tuple[float, float], ...] = ()
    # (from_epoch, key) entries; the active key for handshake n is the
    # entry with the largest from_epoch <= n.  Epochs count handshakes.
    key_schedule: tuple[tuple[int, KeyPair], ...] = ()
    record_layout: str = "coalesced"
    # Deliberate defects for negative tests.
    sign_with: Optional[KeyPair] = None  # sign with a key the chain does not match
    omit_server_key_exchange: bool = False
    truncate_flight_at: Optional[int] = None

    def active_key(self, epoch: int) -> KeyPair:
        current = self.key
        for from_epoch, key in sorted(self.key_schedule, key=lambda e: e[0]):
            if from_epoch <= epoch:
                current = key
        return current

    def in_outage(self, now: float) -> bool:
        return any(start <= now < end for start, end in self.outage_windows)


class HandshakeResponder:
    """Server-side half-handshake logic, independent of any transport."""

    def __init__(self, profile: ServerProfile, clock: Optional[Clock] = None) -> None:
        self.profile = profile
        self.clock = clock or RealClock()
        self._epoch = 0
        self._lock = threading.Lock()
        # One DH share per responder: the exchange never completes, so a
        # fresh share per handshake buys nothing but modexp time.
        exponent = int.from_bytes(os.urandom(32), "big") | 1
        ys = pow(2, exponent, _DH_PRIME).to_bytes(256, "big")
        self._dh_params = wire.encode_dh_params(_DH_PRIME_BYTES, _DH_GENERATOR, ys)

    def next_epoch(self) -> int:
        with self._lock:
            epoch = self._epoch
            self._epoch += 1
            return epoch

    @property
    def epoch(self) -> int:
        with self._lock:
            return self._epoch

    def respond(self, client_hello: bytes) -> bytes:
        """Produce the full first flight for one ClientHello."""
        profile = self.profile  # snapshot: a mid-handshake swap must not mix keys
        epoch = self.next_epoch()
        key = profile.active_key(epoch)
        hello = wire.decode_client_hello(client_hello)

        suite = next((s for s in hello.cipher_suites if s in wire.DHE_RSA_SUITES), None)
        if suite is None:
            raise wire.UnexpectedMessageType("no mutually supported DHE_RSA suite offered")

        now = self.clock.now() + profile.clock_skew_s
        server_random = RandomField(int(now) & 0xFFFFFFFF, os.urandom(28))
        dh_params = self._dh_params

        signer = (profile.sign_with or key).private_key
        signed = wire.assemble_signed_params(hello.random, server_random.encode(), dh_params)
        signature = signer.sign(signed, padding.PKCS1v15(), hashes.SHA256())

        if profile.omit_server_key_exchange:
            messages = [
                _server_hello(server_random, suite),
                _certificate(key.chain),
                wire.pack_handshake(wire.HS_SERVER_HELLO_DONE, b""),
            ]
            flight = wire.pack_records(messages, profile.record_layout)
        else:
            flight = wire.encode_server_flight(
                server_random,
                key.chain,
                ServerKeyExchangeMsg(dh_params, SIG_RSA_SHA256, signature),
                suite,
                layout=profile.record_layout,
            )
        if profile.truncate_flight_at is not None:
            flight = flight[: profile.truncate_flight_at]
        return flight


def _server_hello(server_random: RandomField, suite: int) -> bytes:
    import struct

    body = (
        struct.pack(">H", wire.TLS_1_2)
        + server_random.encode()
        + b"\x00"  # empty session id
        + struct.pack(">H", suite)
        + b"\x00"
    )
    return wire.pack_handshake(wire.HS_SERVER_HELLO, body)


def _certificate(chain: CertificateChain) -> bytes:
    certs = b"".join(len(c).to_bytes(3, "big") + c for c in chain.certificates)
    return wire.pack_handshake(wire.HS_CERTIFICATE, len(certs).to_bytes(3, "big") + certs)


@dataclass
class ConnectionLog:
    """Bytes received from one client connection, for transcript assertions."""

    received: bytes = b""
    flight_sent: bool = False


class TestServer:
    """One listening half-handshake server driven by a profile."""

    __test__ = False  # not a pytest class

    def __init__(self, profile: ServerProfile, clock: Optional[Clock] = None, host: str = "127.0.0.1") -> None:
        self.responder = HandshakeResponder(profile, clock)
        self.clock = self.responder.clock
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, 0))
        self._sock.listen(32)
        self._sock.settimeout(0.1)
        self.host, self.port = self._sock.getsockname()
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._serve, daemon=True)
        self._lock = threading.Lock()
        self.connections: list[ConnectionLog] = []
        self._thread.start()

    @property
    def profile(self) -> ServerProfile:
        return self.responder.profile

    def set_profile(self, profile: ServerProfile) -> None:
        self.responder.profile = profile

    def script_key_change(self, at_epoch: int, key: KeyPair) -> None:
        """Serve (and sign) with a different key from the given handshake epoch on."""
        profile = self.responder.profile
        self.responder.profile = replace(
            profile, key_schedule=profile.key_schedule + ((at_epoch, key),)
        )

    def set_outage(self, windows: tuple[tuple[float, float], ...]) -> None:
        self.responder.profile = replace(self.responder.profile, outage_windows=windows)

    def _serve(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            threading.Thread(target=self._handle, args=(conn,), daemon=True).start()

    def _handle(self, conn: socket.socket) -> None:
        log = ConnectionLog()
        with self._lock:
            self.connections.append(log)
        try:
            if self.profile.in_outage(self.clock.now()):
                conn.close()
                return
            conn.settimeout(5.0)
            buf = bytearray()
            while True:
                try:
                    chunk = conn.recv(65536)
                except (socket.timeout, OSError):
                    return
                if not chunk:
                    return
                buf += chunk
                log.received = bytes(buf)
                try:
                    flight = self.responder.respond(bytes(buf))
                except wire.Truncated:
                    continue
                except wire.WireError:
                    return
                conn.sendall(flight)
                log.flight_sent = True
                if self.profile.truncate_flight_at is not None:
                    return  # simulate the connection dying mid-flight
                break
            # Drain until the client closes; anything received here is
            # post-ServerHelloDone traffic and lands in the transcript.
            conn.settimeout(5.0)
            while True:
                try:
                    chunk = conn.recv(65536)
                except (socket.timeout, ConnectionResetError, OSError):
                    return
                if not chunk:
                    return
                log.received += chunk
        finally:
            try:
                conn.close()
            except OSError:
                pass

    def close(self) -> None:
        self._stop.set()
        try:
            self._sock.close()
        except OSError:
            pass
        self._thread.join(timeout=2)


class Testbed:
    """A fleet of test servers sharing one clock and a key registry."""

    __test__ = False  # not a pytest class

    def __init__(self, clock: Optional[Clock] = None) -> None:
        self.clock = clock or RealClock()
        self.keys: dict[str, KeyPair] = {}
        self.servers: dict[str, TestServer] = {}

    def provision_key(self, key_id: str, *, chain_padding: int = 0) -> KeyPair:
        if key_id not in self.keys:
            self.keys[key_id] = generate_keypair(key_id, chain_padding=chain_padding)
        return self.keys[key_id]

    def add_key(self, key: KeyPair) -> KeyPair:
        self.keys[key.key_id] = key
        return key

    def spawn(self, name: str, profile: ServerProfile) -> TestServer:
        server = TestServer(profile, self.clock)
        self.servers[name] = server
        return server

    def endpoint(self, name: str) -> tuple[str, int]:
        server = self.servers[name]
        return server.host, server.port

    def close(self) -> None:
        for server in self.servers.values():
            server.close()
        self.servers.clear()

    def __enter__(self) -> "Testbed":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()


class DirectProber:
    """In-process prober: full wire and crypto path with no sockets.

    Useful where hundreds of scenario runs would otherwise churn TCP
    connections; the bytes produced and verified are identical to the
    socket path.
    """

    def __init__(self, clock: Optional[Clock] = None) -> None:
        self.clock = clock or RealClock()
        self.responders: dict[str, HandshakeResponder] = {}
        self.down: set[str] = set()

    def register(self, domain: str, profile: ServerProfile) -> HandshakeResponder:
        responder = HandshakeResponder(profile, self.clock)
        self.responders[domain] = responder
        return responder

    def set_down(self, domain: str, down: bool = True) -> None:
        if down:
            self.down.add(domain)
        else:
            self.down.discard(domain)

    def __call__(
        self,
        domain: str,
        port: int = 443,
        client_random: Optional[bytes] = None,
        deadline: float = 5.0,
        *,
        config: ProbeConfig = ProbeConfig(),
        clock: Optional[Clock] = None,
        wall_clock: Optional[float] = None,
    ) -> ProbeCapture:
        from .probe import OUTCOME_CONNECT_FAILURE, ValidationResult

        raw_random = client_random if client_random is not None else os.urandom(32)
        wall = self.clock.now() if wall_clock is None else wall_clock
        responder = self.responders.get(domain)
        if responder is None or domain in self.down or responder.profile.in_outage(self.clock.now()):
            return ProbeCapture(
                ValidationResult(
                    domain=domain,
                    outcome=OUTCOME_CONNECT_FAILURE,
                    client_random=raw_random,
                    notary_wall_clock=wall,
                    diagnostic="unreachable",
                )
            )
        hello = wire.encode_client_hello(raw_random, config.cipher_suites, server_name=domain)
        try:
            flight = responder.respond(hello)
        except wire.WireError:
            return ProbeCapture(
                ValidationResult(
                    domain=domain,
                    outcome=OUTCOME_CONNECT_FAILURE,
                    client_random=raw_random,
                    notary_wall_clock=wall,
                    diagnostic="handshake refused",
                )
            )
        return evaluate_flight(domain, raw_random, flight, wall)
