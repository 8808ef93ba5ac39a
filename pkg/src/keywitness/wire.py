"""TLS 1.2 record and handshake codec for the monitoring half-handshake.

Covers exactly the messages the prober touches: ClientHello out,
ServerHello / Certificate / ServerKeyExchange / ServerHelloDone in,
plus the 32-byte Random field and the signed-parameters blob the
server signs.  Fields the prober never interprets (DH values,
signatures, certificates) stay opaque bytes; lengths are always
checked before slicing, so malformed input raises a structured
error instead of crashing.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence, Union

RECORD_CHANGE_CIPHER_SPEC = 20
RECORD_ALERT = 21
RECORD_HANDSHAKE = 22
RECORD_APPLICATION_DATA = 23

TLS_1_0 = 0x0301
TLS_1_1 = 0x0302
TLS_1_2 = 0x0303

HS_HELLO_REQUEST = 0
HS_CLIENT_HELLO = 1
HS_SERVER_HELLO = 2
HS_CERTIFICATE = 11
HS_SERVER_KEY_EXCHANGE = 12
HS_SERVER_HELLO_DONE = 14

EXT_SERVER_NAME = 0
EXT_SIGNATURE_ALGORITHMS = 13

# Records larger than the protocol maximum (plus a little legacy slack)
# are treated as malformed rather than buffered indefinitely.
MAX_RECORD_PAYLOAD = 2**14 + 2048

RANDOM_LEN = 32

# Cipher suites whose key exchange yields a signed ServerKeyExchange.
# Only these may be offered: an unsigned exchange produces no evidence.
DHE_RSA_SUITES = frozenset(
    {
        0x0033,  # TLS_DHE_RSA_WITH_AES_128_CBC_SHA
        0x0039,  # TLS_DHE_RSA_WITH_AES_256_CBC_SHA
        0x0067,  # TLS_DHE_RSA_WITH_AES_128_CBC_SHA256
        0x006B,  # TLS_DHE_RSA_WITH_AES_256_CBC_SHA256
        0x009E,  # TLS_DHE_RSA_WITH_AES_128_GCM_SHA256
        0x009F,  # TLS_DHE_RSA_WITH_AES_256_GCM_SHA384
    }
)
DHE_DSS_SUITES = frozenset(
    {
        0x0032,  # TLS_DHE_DSS_WITH_AES_128_CBC_SHA
        0x0038,  # TLS_DHE_DSS_WITH_AES_256_CBC_SHA
        0x0040,  # TLS_DHE_DSS_WITH_AES_128_CBC_SHA256
        0x006A,  # TLS_DHE_DSS_WITH_AES_256_CBC_SHA256
        0x00A2,  # TLS_DHE_DSS_WITH_AES_128_GCM_SHA256
        0x00A3,  # TLS_DHE_DSS_WITH_AES_256_GCM_SHA384
    }
)
OFFERABLE_SUITES = DHE_RSA_SUITES | DHE_DSS_SUITES

DEFAULT_CIPHER_SUITES: tuple[int, ...] = (
    0x009E,
    0x009F,
    0x0067,
    0x006B,
    0x0033,
    0x0039,
    0x00A2,
    0x0040,
    0x0032,
)

# SignatureAndHashAlgorithm pairs offered in the ClientHello:
# (sha256|sha384|sha512) x rsa, sha256 x dsa, sha256 x ecdsa.
DEFAULT_SIGNATURE_ALGORITHMS: tuple[int, ...] = (
    0x0401,
    0x0501,
    0x0601,
    0x0402,
    0x0403,
)


class WireError(Exception):
    """Base for all structured decode failures."""


class Truncated(WireError):
    """Input ends before a declared length is satisfied."""


class MalformedLength(WireError):
    """A declared length contradicts its container or the protocol limits."""


class UnexpectedMessageType(WireError):
    """The peer sent something outside the expected half-handshake flow."""


@dataclass(frozen=True)
class RandomField:
    """The 32-byte hello random: a 4-byte GMT unix timestamp then 28 opaque bytes."""

    gmt_unix_time: int
    random_bytes: bytes

    def __post_init__(self) -> None:
        if not 0 <= self.gmt_unix_time < 2**32:
            raise MalformedLength("gmt_unix_time outside uint32 range")
        if len(self.random_bytes) != 28:
            raise MalformedLength("random_bytes must be exactly 28 bytes")

    def encode(self) -> bytes:
        return struct.pack(">I", self.gmt_unix_time) + self.random_bytes

    @classmethod
    def decode(cls, data: bytes) -> "RandomField":
        if len(data) != RANDOM_LEN:
            raise MalformedLength(f"random field must be {RANDOM_LEN} bytes, got {len(data)}")
        return cls(struct.unpack(">I", data[:4])[0], data[4:])


@dataclass(frozen=True)
class SignedParams:
    """Exactly what the server signs: both hello randoms then the DH parameter blob."""

    client_random: bytes
    server_random: bytes
    dh_params: bytes

    def encode(self) -> bytes:
        return assemble_signed_params(self.client_random, self.server_random, self.dh_params)


@dataclass(frozen=True)
class ServerKeyExchangeMsg:
    dh_params: bytes
    sig_scheme: int
    signature: bytes

    def __post_init__(self) -> None:
        if not self.dh_params:
            raise MalformedLength("empty ServerDHParams")
        if not self.signature:
            raise MalformedLength("empty signature")


@dataclass(frozen=True)
class CertificateChain:
    """Leaf-first DER certificates, content-addressed by a SHA-256 over the concatenation."""

    certificates: tuple[bytes, ...]
    chain_hash: bytes = field(init=False)

    def __post_init__(self) -> None:
        if not self.certificates:
            raise MalformedLength("certificate chain must not be empty")
        object.__setattr__(self, "certificates", tuple(bytes(c) for c in self.certificates))
        object.__setattr__(self, "chain_hash", compute_chain_hash(self.certificates))

    @property
    def leaf(self) -> bytes:
        return self.certificates[0]

    def total_der_bytes(self) -> int:
        return sum(len(c) for c in self.certificates)


def compute_chain_hash(certificates: Sequence[bytes]) -> bytes:
    h = hashlib.sha256()
    for der in certificates:
        h.update(der)
    return h.digest()


class ServerFlight(NamedTuple):
    server_random: RandomField
    chain: CertificateChain
    key_exchange: ServerKeyExchangeMsg
    cipher_suite: int


class _Reader:
    """Bounds-checked cursor over a byte string."""

    __slots__ = ("buf", "pos")

    def __init__(self, buf: bytes, pos: int = 0) -> None:
        self.buf = buf
        self.pos = pos

    def remaining(self) -> int:
        return len(self.buf) - self.pos

    def take(self, n: int) -> bytes:
        if n < 0:
            raise MalformedLength("negative length")
        if self.remaining() < n:
            raise Truncated(f"need {n} bytes, have {self.remaining()}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack(">H", self.take(2))[0]

    def u24(self) -> int:
        b = self.take(3)
        return (b[0] << 16) | (b[1] << 8) | b[2]

    def vector(self, len_bytes: int) -> bytes:
        if len_bytes == 1:
            n = self.u8()
        elif len_bytes == 2:
            n = self.u16()
        elif len_bytes == 3:
            n = self.u24()
        else:
            raise ValueError("unsupported length prefix width")
        return self.take(n)


def _u16(v: int) -> bytes:
    return struct.pack(">H", v)


def _u24(v: int) -> bytes:
    return struct.pack(">I", v)[1:]


def _vec(data: bytes, len_bytes: int) -> bytes:
    limit = 1 << (8 * len_bytes)
    if len(data) >= limit:
        raise MalformedLength("vector too long for its length prefix")
    return len(data).to_bytes(len_bytes, "big") + data


def _coerce_random(random: Union[bytes, RandomField]) -> bytes:
    if isinstance(random, RandomField):
        return random.encode()
    raw = bytes(random)
    if len(raw) != RANDOM_LEN:
        raise MalformedLength(f"random must be exactly {RANDOM_LEN} bytes, got {len(raw)}")
    return raw


def assemble_signed_params(
    client_random: Union[bytes, RandomField],
    server_random: Union[bytes, RandomField],
    dh_params: bytes,
) -> bytes:
    """Byte string the server signature covers: client ++ server random ++ DH blob, no framing."""
    return _coerce_random(client_random) + _coerce_random(server_random) + bytes(dh_params)


def encode_dh_params(p: bytes, g: bytes, ys: bytes) -> bytes:
    """ServerDHParams: three opaque values, each with a 2-byte length prefix."""
    return _vec(bytes(p), 2) + _vec(bytes(g), 2) + _vec(bytes(ys), 2)


def _read_dh_params(r: _Reader) -> bytes:
    start = r.pos
    for _ in range(3):  # dh_p, dh_g, dh_Ys
        r.vector(2)
    return r.buf[start : r.pos]


def pack_record(content_type: int, payload: bytes, version: int = TLS_1_2) -> bytes:
    if len(payload) > MAX_RECORD_PAYLOAD:
        raise MalformedLength("record payload exceeds maximum")
    return struct.pack(">BHH", content_type, version, len(payload)) + payload


def pack_handshake(msg_type: int, body: bytes) -> bytes:
    if len(body) >= 1 << 24:
        raise MalformedLength("handshake body too long")
    return bytes([msg_type]) + _u24(len(body)) + body


def pack_records(
    handshake_messages: Sequence[bytes],
    layout: str = "coalesced",
) -> bytes:
    """Frame handshake messages into records.

    layout:
      "coalesced"   - all messages in one record
      "per_message" - one record per message
      "split:N"     - coalesce, then split the stream into N-byte records
    """
    stream = b"".join(handshake_messages)
    if layout == "coalesced":
        return pack_record(RECORD_HANDSHAKE, stream)
    if layout == "per_message":
        return b"".join(pack_record(RECORD_HANDSHAKE, m) for m in handshake_messages)
    if layout.startswith("split:"):
        n = int(layout.split(":", 1)[1])
        if n <= 0:
            raise ValueError("split size must be positive")
        return b"".join(
            pack_record(RECORD_HANDSHAKE, stream[i : i + n]) for i in range(0, len(stream), n)
        )
    raise ValueError(f"unknown record layout {layout!r}")


def encode_client_hello(
    random: Union[bytes, RandomField],
    cipher_suites: Sequence[int],
    *,
    server_name: str | None = None,
    signature_algorithms: Sequence[int] = DEFAULT_SIGNATURE_ALGORITHMS,
) -> bytes:
    """Build one TLS record carrying a ClientHello with the caller's exact random.

    The random is placed verbatim; it is the carrier for externally
    meaningful values (timestamp-token digests), so it is never
    generated or touched here.
    """
    raw_random = _coerce_random(random)
    suites = tuple(int(s) for s in cipher_suites)
    if not suites:
        raise MalformedLength("cipher suite list must not be empty")
    for s in suites:
        if s not in OFFERABLE_SUITES:
            raise UnexpectedMessageType(
                f"suite 0x{s:04x} is not a DHE_RSA/DHE_DSS variant; it would yield no signed exchange"
            )

    body = struct.pack(">H", TLS_1_2)
    body += raw_random
    body += _vec(b"", 1)  # empty session id
    body += _vec(b"".join(_u16(s) for s in suites), 2)
    body += _vec(b"\x00", 1)  # null compression only

    extensions = b""
    if server_name:
        host = server_name.encode("idna") if any(ord(c) > 127 for c in server_name) else server_name.encode("ascii")
        entry = b"\x00" + _vec(host, 2)  # name_type host_name(0)
        extensions += _u16(EXT_SERVER_NAME) + _vec(_vec(entry, 2), 2)
    if signature_algorithms:
        algs = b"".join(_u16(a) for a in signature_algorithms)
        extensions += _u16(EXT_SIGNATURE_ALGORITHMS) + _vec(_vec(algs, 2), 2)
    if extensions:
        body += _vec(extensions, 2)

    return pack_record(RECORD_HANDSHAKE, pack_handshake(HS_CLIENT_HELLO, body))


@dataclass(frozen=True)
class ClientHelloView:
    """Decoded ClientHello fields the server side of a half-handshake needs."""

    random: bytes
    cipher_suites: tuple[int, ...]
    server_name: str | None
    signature_algorithms: tuple[int, ...]

    @property
    def random_field(self) -> RandomField:
        return RandomField.decode(self.random)


def decode_client_hello(data: bytes) -> ClientHelloView:
    """Parse a single record (or raw stream) containing one ClientHello."""
    stream, _ = _handshake_stream(data)
    r = _Reader(stream)
    msg_type = r.u8()
    if msg_type != HS_CLIENT_HELLO:
        raise UnexpectedMessageType(f"expected ClientHello, got handshake type {msg_type}")
    body = _Reader(r.vector(3))
    version = body.u16()
    if version != TLS_1_2:
        raise UnexpectedMessageType(f"unsupported client version 0x{version:04x}")
    random = body.take(RANDOM_LEN)
    body.vector(1)  # session id
    suites_raw = body.vector(2)
    if len(suites_raw) % 2 != 0 or not suites_raw:
        raise MalformedLength("cipher suite vector length must be a positive multiple of 2")
    suites = tuple(
        struct.unpack(">H", suites_raw[i : i + 2])[0] for i in range(0, len(suites_raw), 2)
    )
    body.vector(1)  # compression methods

    server_name: str | None = None
    sig_algs: tuple[int, ...] = ()
    if body.remaining():
        exts = _Reader(body.vector(2))
        while exts.remaining():
            ext_type = exts.u16()
            ext_data = _Reader(exts.vector(2))
            if ext_type == EXT_SERVER_NAME:
                names = _Reader(ext_data.vector(2))
                while names.remaining():
                    name_type = names.u8()
                    name = names.vector(2)
                    if name_type == 0 and server_name is None:
                        server_name = name.decode("ascii", errors="replace")
            elif ext_type == EXT_SIGNATURE_ALGORITHMS:
                algs = _Reader(ext_data.vector(2))
                collected = []
                while algs.remaining():
                    collected.append(algs.u16())
                sig_algs = tuple(collected)
    if body.remaining():
        raise MalformedLength("trailing bytes inside ClientHello body")
    return ClientHelloView(random, suites, server_name, sig_algs)


_ALERT_DESCRIPTIONS = {
    0: "close_notify",
    10: "unexpected_message",
    40: "handshake_failure",
    42: "bad_certificate",
    46: "certificate_unknown",
    47: "illegal_parameter",
    70: "protocol_version",
    71: "insufficient_security",
    80: "internal_error",
    112: "unrecognized_name",
}


def _handshake_stream(data: bytes) -> tuple[bytes, int]:
    """Strip record framing, coalescing handshake fragments into one stream.

    Accepts raw handshake bytes (no record layer) as well, so test
    vectors can be handed in directly.  Returns (stream, consumed).
    """
    if not data:
        raise Truncated("empty input")
    first = data[0]
    if first not in (
        RECORD_CHANGE_CIPHER_SPEC,
        RECORD_ALERT,
        RECORD_HANDSHAKE,
        RECORD_APPLICATION_DATA,
    ):
        return data, len(data)

    stream = bytearray()
    r = _Reader(data)
    while r.remaining():
        content_type = r.u8()
        version = r.u16()
        if version not in (TLS_1_0, TLS_1_1, TLS_1_2):
            raise UnexpectedMessageType(f"unsupported record version 0x{version:04x}")
        length = r.u16()
        if length > MAX_RECORD_PAYLOAD:
            raise MalformedLength(f"record length {length} exceeds maximum")
        payload = r.take(length)
        if content_type == RECORD_ALERT:
            desc = _ALERT_DESCRIPTIONS.get(payload[1], str(payload[1])) if len(payload) >= 2 else "?"
            raise UnexpectedMessageType(f"server sent alert: {desc}")
        if content_type != RECORD_HANDSHAKE:
            raise UnexpectedMessageType(f"unexpected record content type {content_type}")
        stream += payload
    return bytes(stream), r.pos


def decode_server_flight(data: bytes) -> ServerFlight:
    """Parse the server's first flight through ServerHelloDone.

    Handshake messages may be split or coalesced across records
    arbitrarily.  Raises Truncated while the flight is incomplete
    (callers reading from a socket treat that as "need more bytes"),
    MalformedLength for inconsistent lengths, UnexpectedMessageType
    for anything outside the expected ServerHello / Certificate /
    ServerKeyExchange / ServerHelloDone sequence, including a chosen
    key exchange that produces no signed parameters.
    """
    stream, _ = _handshake_stream(data)
    r = _Reader(stream)

    server_random: RandomField | None = None
    cipher_suite: int | None = None
    chain: CertificateChain | None = None
    ske: ServerKeyExchangeMsg | None = None
    saw_hello = False

    while True:
        if not r.remaining():
            raise Truncated("flight ends before ServerHelloDone")
        msg_type = r.u8()
        body_raw = r.vector(3)
        body = _Reader(body_raw)

        if msg_type == HS_SERVER_HELLO:
            if saw_hello:
                raise UnexpectedMessageType("duplicate ServerHello")
            saw_hello = True
            version = body.u16()
            if version != TLS_1_2:
                raise UnexpectedMessageType(
                    f"server negotiated version 0x{version:04x}; only TLS 1.2 carries the evidence semantics"
                )
            server_random = RandomField.decode(body.take(RANDOM_LEN))
            body.vector(1)  # session id
            cipher_suite = body.u16()
            body.u8()  # compression method
            # extensions, if present, are not interpreted
        elif msg_type == HS_CERTIFICATE:
            if not saw_hello:
                raise UnexpectedMessageType("Certificate before ServerHello")
            if chain is not None:
                raise UnexpectedMessageType("duplicate Certificate message")
            certs_raw = _Reader(body.vector(3))
            certs = []
            while certs_raw.remaining():
                certs.append(certs_raw.vector(3))
            if not certs:
                raise MalformedLength("empty certificate list")
            chain = CertificateChain(tuple(certs))
        elif msg_type == HS_SERVER_KEY_EXCHANGE:
            if not saw_hello:
                raise UnexpectedMessageType("ServerKeyExchange before ServerHello")
            if ske is not None:
                raise UnexpectedMessageType("duplicate ServerKeyExchange message")
            dh_params = _read_dh_params(body)
            sig_scheme = body.u16()
            signature = body.vector(2)
            if body.remaining():
                raise MalformedLength("trailing bytes inside ServerKeyExchange")
            ske = ServerKeyExchangeMsg(dh_params, sig_scheme, signature)
        elif msg_type == HS_SERVER_HELLO_DONE:
            if body.remaining():
                raise MalformedLength("ServerHelloDone must be empty")
            break
        elif msg_type == HS_HELLO_REQUEST:
            continue  # legal no-op, ignored
        else:
            raise UnexpectedMessageType(f"unexpected handshake type {msg_type} in server flight")

    if server_random is None or cipher_suite is None:
        raise UnexpectedMessageType("flight completed without a ServerHello")
    if chain is None:
        raise UnexpectedMessageType("flight completed without a Certificate")
    if ske is None:
        raise UnexpectedMessageType(
            "no ServerKeyExchange before ServerHelloDone; server chose an unsigned key exchange"
        )
    return ServerFlight(server_random, chain, ske, cipher_suite)


def encode_server_flight(
    server_random: Union[bytes, RandomField],
    chain: CertificateChain,
    key_exchange: ServerKeyExchangeMsg,
    cipher_suite: int,
    *,
    layout: str = "coalesced",
) -> bytes:
    """Server side of the half-handshake: the four-message first flight."""
    raw_random = _coerce_random(server_random)
    hello = struct.pack(">H", TLS_1_2) + raw_random + _vec(b"", 1) + _u16(cipher_suite) + b"\x00"
    cert_list = b"".join(_vec(der, 3) for der in chain.certificates)
    cert_body = _vec(cert_list, 3)
    ske_body = (
        bytes(key_exchange.dh_params)
        + _u16(key_exchange.sig_scheme)
        + _vec(key_exchange.signature, 2)
    )
    messages = [
        pack_handshake(HS_SERVER_HELLO, hello),
        pack_handshake(HS_CERTIFICATE, cert_body),
        pack_handshake(HS_SERVER_KEY_EXCHANGE, ske_body),
        pack_handshake(HS_SERVER_HELLO_DONE, b""),
    ]
    return pack_records(messages, layout)
