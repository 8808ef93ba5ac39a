"""Half-handshake prober: gather signed key-usage evidence from a TLS server.

One probe sends a single ClientHello, reads the server's first flight,
aborts the connection right after ServerHelloDone (nothing past it is
ever sent), verifies the server signature over the exchanged randoms
and DH parameters, and returns the evidence bundle.  Failures are never
raised; they are encoded in the result's outcome so the scheduler can
map them onto published states.
"""

from __future__ import annotations

import functools
import hashlib
import os
import socket
import struct
from dataclasses import dataclass, replace
from typing import Callable, Optional, Union

from cryptography import x509
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import dsa, ec, padding, rsa

from . import wire
from .clock import Clock, RealClock
from .wire import CertificateChain, RandomField, Truncated, WireError

OUTCOME_SIGNED = "signed"
OUTCOME_CONNECT_FAILURE = "connect_failure"
OUTCOME_PROTOCOL_FAILURE = "protocol_failure"

_HASHES = {4: hashes.SHA256, 5: hashes.SHA384, 6: hashes.SHA512}
_SIG_RSA, _SIG_DSA, _SIG_ECDSA = 1, 2, 3


class UnsupportedSignatureScheme(Exception):
    """Signature scheme outside the supported registry; surfaces as an Other state."""


@dataclass(frozen=True)
class ValidationResult:
    """Evidence from one probe. Immutable once built; the chain travels separately by hash."""

    domain: str
    outcome: str
    client_random: bytes
    notary_wall_clock: float
    vid: int = 0
    server_random_field: Optional[RandomField] = None
    dh_params: bytes = b""
    sig_scheme: int = 0
    signature: bytes = b""
    chain_ref: bytes = b""
    observed_key_hash: bytes = b""
    diagnostic: str = ""

    def with_vid(self, vid: int) -> "ValidationResult":
        return replace(self, vid=vid)


@dataclass(frozen=True)
class ProbeCapture:
    """A probe result plus the certificate chain it references, ready for storage."""

    result: ValidationResult
    chain: Optional[CertificateChain] = None


@dataclass(frozen=True)
class ProbeConfig:
    cipher_suites: tuple[int, ...] = wire.DEFAULT_CIPHER_SUITES
    connect_attempts: int = 3
    backoff_initial_s: float = 0.05
    send_sni: bool = True
    # Each probe resolves the target afresh unless an address is pinned here,
    # so repeated validations can take different network paths.
    pinned_address: Optional[str] = None


Prober = Callable[..., ProbeCapture]


@functools.lru_cache(maxsize=512)
def _leaf_public_key(leaf_der: bytes):
    # Certificates repeat across validations; parsing them once matters
    # at virtual-clock scale (thousands of cycles per test second).
    return x509.load_der_x509_certificate(leaf_der).public_key()


@functools.lru_cache(maxsize=512)
def key_hash(leaf_der: bytes) -> bytes:
    """SHA-256 over the leaf's DER subject-public-key structure.

    Hashing the key structure rather than the certificate means a
    renewal that keeps the key does not register as a key change.
    """
    spki = _leaf_public_key(leaf_der).public_bytes(
        serialization.Encoding.DER,
        serialization.PublicFormat.SubjectPublicKeyInfo,
    )
    return hashlib.sha256(spki).digest()


def verify_signature(leaf_der: bytes, sig_scheme: int, signature: bytes, signed: bytes) -> bool:
    """Check a TLS 1.2 signed-parameters signature under the leaf certificate key."""
    hash_id, sig_id = sig_scheme >> 8, sig_scheme & 0xFF
    hash_cls = _HASHES.get(hash_id)
    if hash_cls is None or sig_id not in (_SIG_RSA, _SIG_DSA, _SIG_ECDSA):
        raise UnsupportedSignatureScheme(f"scheme 0x{sig_scheme:04x}")
    try:
        public_key = _leaf_public_key(leaf_der)
    except Exception:
        return False
    try:
        if sig_id == _SIG_RSA:
            if not isinstance(public_key, rsa.RSAPublicKey):
                return False
            public_key.verify(signature, signed, padding.PKCS1v15(), hash_cls())
        elif sig_id == _SIG_DSA:
            if not isinstance(public_key, dsa.DSAPublicKey):
                return False
            public_key.verify(signature, signed, hash_cls())
        else:
            if not isinstance(public_key, ec.EllipticCurvePublicKey):
                return False
            public_key.verify(signature, signed, ec.ECDSA(hash_cls()))
        return True
    except InvalidSignature:
        return False


def verify_evidence(vr: ValidationResult, chain: CertificateChain) -> bool:
    """True iff the signature verifies over the reassembled signed parameters.

    The chain must be the one the evidence references; a content-addressing
    mismatch means the evidence cannot be checked and counts as failure.
    """
    if vr.outcome != OUTCOME_SIGNED or vr.server_random_field is None:
        return False
    if chain.chain_hash != vr.chain_ref:
        return False
    signed = wire.assemble_signed_params(
        vr.client_random, vr.server_random_field.encode(), vr.dh_params
    )
    return verify_signature(chain.leaf, vr.sig_scheme, vr.signature, signed)


def extract_server_timestamp(vr: ValidationResult) -> int:
    """Big-endian first four bytes of the server random, whatever they hold.

    No plausibility judgement happens here; skew classification is the
    scheduler's job.
    """
    if vr.server_random_field is None:
        raise ValueError("no server random captured")
    return vr.server_random_field.gmt_unix_time


def evaluate_flight(
    domain: str,
    client_random: bytes,
    flight: bytes,
    wall_clock: float,
) -> ProbeCapture:
    """Turn raw first-flight bytes into verified evidence (transport-independent)."""
    try:
        parsed = wire.decode_server_flight(flight)
    except WireError as exc:
        return ProbeCapture(
            ValidationResult(
                domain=domain,
                outcome=OUTCOME_PROTOCOL_FAILURE,
                client_random=client_random,
                notary_wall_clock=wall_clock,
                diagnostic=f"{type(exc).__name__}: {exc}",
            )
        )

    ske = parsed.key_exchange
    signed = wire.assemble_signed_params(
        client_random, parsed.server_random.encode(), ske.dh_params
    )
    try:
        ok = verify_signature(parsed.chain.leaf, ske.sig_scheme, ske.signature, signed)
        observed = key_hash(parsed.chain.leaf)
    except UnsupportedSignatureScheme as exc:
        return ProbeCapture(
            ValidationResult(
                domain=domain,
                outcome=OUTCOME_PROTOCOL_FAILURE,
                client_random=client_random,
                notary_wall_clock=wall_clock,
                server_random_field=parsed.server_random,
                dh_params=ske.dh_params,
                sig_scheme=ske.sig_scheme,
                signature=ske.signature,
                chain_ref=parsed.chain.chain_hash,
                diagnostic=f"UnsupportedSignatureScheme: {exc}",
            ),
            parsed.chain,
        )
    except Exception as exc:  # undecodable certificate and friends
        return ProbeCapture(
            ValidationResult(
                domain=domain,
                outcome=OUTCOME_PROTOCOL_FAILURE,
                client_random=client_random,
                notary_wall_clock=wall_clock,
                diagnostic=f"certificate error: {exc}",
            ),
            parsed.chain,
        )

    if not ok:
        return ProbeCapture(
            ValidationResult(
                domain=domain,
                outcome=OUTCOME_PROTOCOL_FAILURE,
                client_random=client_random,
                notary_wall_clock=wall_clock,
                server_random_field=parsed.server_random,
                dh_params=ske.dh_params,
                sig_scheme=ske.sig_scheme,
                signature=ske.signature,
                chain_ref=parsed.chain.chain_hash,
                observed_key_hash=observed,
                diagnostic="signature verification failed",
            ),
            parsed.chain,
        )

    return ProbeCapture(
        ValidationResult(
            domain=domain,
            outcome=OUTCOME_SIGNED,
            client_random=client_random,
            notary_wall_clock=wall_clock,
            server_random_field=parsed.server_random,
            dh_params=ske.dh_params,
            sig_scheme=ske.sig_scheme,
            signature=ske.signature,
            chain_ref=parsed.chain.chain_hash,
            observed_key_hash=observed,
        ),
        parsed.chain,
    )


def _abortive_close(sock: socket.socket) -> None:
    # SO_LINGER with a zero timeout makes close() emit a reset where the
    # platform supports it, freeing the server's half-open handshake state.
    try:
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_LINGER, struct.pack("ii", 1, 0))
    except OSError:
        pass
    try:
        sock.close()
    except OSError:
        pass


def _exchange_once(
    host: str,
    port: int,
    hello: bytes,
    deadline_at: float,
    clock: Clock,
) -> bytes:
    remaining = deadline_at - clock.now()
    if remaining <= 0:
        raise socket.timeout("deadline exhausted")
    sock = socket.create_connection((host, port), timeout=remaining)
    try:
        sock.sendall(hello)
        buf = bytearray()
        while True:
            remaining = deadline_at - clock.now()
            if remaining <= 0:
                raise socket.timeout("deadline exhausted mid-flight")
            sock.settimeout(remaining)
            chunk = sock.recv(65536)
            if not chunk:
                if buf:
                    return bytes(buf)  # let the parser report the truncation
                raise ConnectionResetError("server closed before sending anything")
            buf += chunk
            try:
                wire.decode_server_flight(bytes(buf))
            except Truncated:
                continue
            except WireError:
                return bytes(buf)  # complete enough to fail parsing decisively
            return bytes(buf)
    finally:
        _abortive_close(sock)


def probe_once(
    domain: str,
    port: int = 443,
    client_random: Union[bytes, RandomField, None] = None,
    deadline: float = 5.0,
    *,
    config: ProbeConfig = ProbeConfig(),
    clock: Optional[Clock] = None,
    wall_clock: Optional[float] = None,
) -> ProbeCapture:
    """Run one half-handshake against domain:port.

    client_random defaults to a fresh random 32 bytes; callers running
    the timestamping protocol pass the digest they need carried.
    Connection-level failures are retried with doubling backoff inside
    the deadline; parse and verification failures are not retried.
    """
    clock = clock or RealClock()
    if client_random is None:
        raw_random = os.urandom(wire.RANDOM_LEN)
    elif isinstance(client_random, RandomField):
        raw_random = client_random.encode()
    else:
        raw_random = bytes(client_random)
        if len(raw_random) != wire.RANDOM_LEN:
            raise ValueError(f"client_random must be {wire.RANDOM_LEN} bytes")

    start = clock.now() if wall_clock is None else wall_clock
    deadline_at = clock.now() + deadline
    hello = wire.encode_client_hello(
        raw_random,
        config.cipher_suites,
        server_name=domain if config.send_sni else None,
    )
    host = config.pinned_address or domain

    attempts = max(1, config.connect_attempts)
    backoff = config.backoff_initial_s
    last_error = "unreachable"
    for attempt in range(attempts):
        try:
            flight = _exchange_once(host, port, hello, deadline_at, clock)
            return evaluate_flight(domain, raw_random, flight, start)
        except (OSError, socket.timeout) as exc:
            last_error = f"{type(exc).__name__}: {exc}"
            if clock.now() >= deadline_at or attempt == attempts - 1:
                break
            clock.sleep(min(backoff, max(0.0, deadline_at - clock.now())))
            backoff *= 2

    return ProbeCapture(
        ValidationResult(
            domain=domain,
            outcome=OUTCOME_CONNECT_FAILURE,
            client_random=raw_random,
            notary_wall_clock=start,
            diagnostic=last_error,
        )
    )
