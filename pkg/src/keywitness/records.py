"""Canonical binary encoding of stored validation records.

One tag-length-value format serves the evidence store, the audit HTTP
responses, and on-ledger SLA response payloads, so a single decoder and
verifier covers every path evidence can travel.

Framing: each field is  tag(u16 BE) ++ length(u32 BE) ++ value.  Byte
fields are raw (certificates are the bulk of a record, and they must
not be inflated by text encodings).  Unknown tags are skipped on
decode.  Field registry:

  0x01 service_id   u64        0x08 sig_scheme        u16
  0x02 vid          u64        0x09 signature         bytes
  0x03 domain       utf-8      0x0a chain_ref         32 bytes
  0x04 outcome      u8         0x0b observed_key_hash 32 bytes
  0x05 client_random 32 bytes  0x0c wall_clock_ms     u64
  0x06 server_random 32 bytes  0x0d diagnostic        utf-8
  0x07 dh_params    bytes      0x0e nonce_r           32 bytes
  0x0f token_before  nested record (evidence fields only)
  0x10 token_after   nested record
  0x11 inline_chain  u24-length-prefixed DER certificates, leaf first

A record is "timestamped" iff it carries tags 0x0e-0x10.  Nested token
records reuse the same registry; their client_random doubles as the
token payload.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Union

from .probe import (
    OUTCOME_CONNECT_FAILURE,
    OUTCOME_PROTOCOL_FAILURE,
    OUTCOME_SIGNED,
    ValidationResult,
)
from .timesource import TimestampedValidation, TimestampToken
from .wire import CertificateChain, MalformedLength, RandomField, Truncated

T_SERVICE_ID = 0x01
T_VID = 0x02
T_DOMAIN = 0x03
T_OUTCOME = 0x04
T_CLIENT_RANDOM = 0x05
T_SERVER_RANDOM = 0x06
T_DH_PARAMS = 0x07
T_SIG_SCHEME = 0x08
T_SIGNATURE = 0x09
T_CHAIN_REF = 0x0A
T_OBSERVED_KEY_HASH = 0x0B
T_WALL_CLOCK_MS = 0x0C
T_DIAGNOSTIC = 0x0D
T_NONCE_R = 0x0E
T_TOKEN_BEFORE = 0x0F
T_TOKEN_AFTER = 0x10
T_INLINE_CHAIN = 0x11

_TLV_HEADER = struct.Struct(">HI")

_OUTCOME_CODES = {OUTCOME_SIGNED: 0, OUTCOME_CONNECT_FAILURE: 1, OUTCOME_PROTOCOL_FAILURE: 2}
_OUTCOME_NAMES = {v: k for k, v in _OUTCOME_CODES.items()}

Evidence = Union[ValidationResult, TimestampedValidation]

ChainLookup = Callable[[bytes], Optional[CertificateChain]]


@dataclass(frozen=True)
class StoredValidation:
    """One validation as kept by the notary: evidence plus its service binding."""

    service_id: int
    vid: int
    evidence: Evidence

    @property
    def is_timestamped(self) -> bool:
        return isinstance(self.evidence, TimestampedValidation)

    @property
    def main_result(self) -> ValidationResult:
        if isinstance(self.evidence, TimestampedValidation):
            return self.evidence.main
        return self.evidence

    def chain_refs(self) -> tuple[bytes, ...]:
        """Distinct chain hashes this record references, in first-use order."""
        refs: list[bytes] = []
        if isinstance(self.evidence, TimestampedValidation):
            parts = (
                self.evidence.token_before.evidence,
                self.evidence.main,
                self.evidence.token_after.evidence,
            )
        else:
            parts = (self.evidence,)
        for vr in parts:
            if vr.chain_ref and vr.chain_ref not in refs:
                refs.append(vr.chain_ref)
        return tuple(refs)


def _tlv(tag: int, value: bytes) -> bytes:
    return _TLV_HEADER.pack(tag, len(value)) + value


def _tlv_u64(tag: int, value: int) -> bytes:
    return _tlv(tag, struct.pack(">Q", value))


def iter_tlv(blob: bytes) -> Iterator[tuple[int, bytes]]:
    pos = 0
    size = len(blob)
    while pos < size:
        if pos + _TLV_HEADER.size > size:
            raise Truncated("truncated TLV header")
        tag, length = _TLV_HEADER.unpack_from(blob, pos)
        pos += _TLV_HEADER.size
        if pos + length > size:
            raise Truncated("truncated TLV value")
        yield tag, blob[pos : pos + length]
        pos += length


def encode_chain(chain: CertificateChain) -> bytes:
    out = bytearray()
    for der in chain.certificates:
        out += len(der).to_bytes(3, "big") + der
    return bytes(out)


def decode_chain(blob: bytes) -> CertificateChain:
    certs = []
    pos = 0
    while pos < len(blob):
        if pos + 3 > len(blob):
            raise Truncated("truncated certificate length")
        n = int.from_bytes(blob[pos : pos + 3], "big")
        pos += 3
        if pos + n > len(blob):
            raise Truncated("truncated certificate body")
        certs.append(blob[pos : pos + n])
        pos += n
    if not certs:
        raise MalformedLength("empty chain encoding")
    return CertificateChain(tuple(certs))


def _encode_result_fields(vr: ValidationResult, inline: Optional[CertificateChain]) -> bytes:
    out = bytearray()
    out += _tlv(T_DOMAIN, vr.domain.encode("utf-8"))
    out += _tlv(T_OUTCOME, bytes([_OUTCOME_CODES[vr.outcome]]))
    out += _tlv(T_CLIENT_RANDOM, vr.client_random)
    if vr.server_random_field is not None:
        out += _tlv(T_SERVER_RANDOM, vr.server_random_field.encode())
    if vr.dh_params:
        out += _tlv(T_DH_PARAMS, vr.dh_params)
    if vr.sig_scheme:
        out += _tlv(T_SIG_SCHEME, struct.pack(">H", vr.sig_scheme))
    if vr.signature:
        out += _tlv(T_SIGNATURE, vr.signature)
    if vr.chain_ref:
        out += _tlv(T_CHAIN_REF, vr.chain_ref)
    if vr.observed_key_hash:
        out += _tlv(T_OBSERVED_KEY_HASH, vr.observed_key_hash)
    out += _tlv_u64(T_WALL_CLOCK_MS, int(vr.notary_wall_clock * 1000))
    if vr.diagnostic:
        out += _tlv(T_DIAGNOSTIC, vr.diagnostic.encode("utf-8"))
    if inline is not None:
        out += _tlv(T_INLINE_CHAIN, encode_chain(inline))
    return bytes(out)


def _decode_result_fields(
    blob: bytes, domain_default: str = "", vid: int = 0
) -> tuple[ValidationResult, Optional[CertificateChain]]:
    fields: dict[int, bytes] = {}
    inline: Optional[CertificateChain] = None
    for tag, value in iter_tlv(blob):
        if tag == T_INLINE_CHAIN:
            inline = decode_chain(value)
        else:
            fields[tag] = value

    if T_OUTCOME not in fields or T_CLIENT_RANDOM not in fields:
        raise MalformedLength("record missing mandatory fields")
    outcome = _OUTCOME_NAMES.get(fields[T_OUTCOME][0])
    if outcome is None:
        raise MalformedLength(f"unknown outcome code {fields[T_OUTCOME][0]}")
    server_random = (
        RandomField.decode(fields[T_SERVER_RANDOM]) if T_SERVER_RANDOM in fields else None
    )
    wall_ms = struct.unpack(">Q", fields[T_WALL_CLOCK_MS])[0] if T_WALL_CLOCK_MS in fields else 0
    vr = ValidationResult(
        domain=fields.get(T_DOMAIN, domain_default.encode()).decode("utf-8"),
        outcome=outcome,
        client_random=fields[T_CLIENT_RANDOM],
        notary_wall_clock=wall_ms / 1000.0,
        vid=vid,
        server_random_field=server_random,
        dh_params=fields.get(T_DH_PARAMS, b""),
        sig_scheme=struct.unpack(">H", fields[T_SIG_SCHEME])[0] if T_SIG_SCHEME in fields else 0,
        signature=fields.get(T_SIGNATURE, b""),
        chain_ref=fields.get(T_CHAIN_REF, b""),
        observed_key_hash=fields.get(T_OBSERVED_KEY_HASH, b""),
        diagnostic=fields.get(T_DIAGNOSTIC, b"").decode("utf-8"),
    )
    return vr, inline


def _token_from_result(vr: ValidationResult) -> TimestampToken:
    assert vr.server_random_field is not None
    return TimestampToken(vr.client_random, vr.server_random_field.gmt_unix_time, vr)


def encode_stored(
    sv: StoredValidation,
    *,
    inline_chains: Optional[ChainLookup] = None,
) -> bytes:
    """Serialize a record; pass a chain lookup to embed referenced chains."""

    def resolve(ref: bytes) -> Optional[CertificateChain]:
        if inline_chains is None or not ref:
            return None
        return inline_chains(ref)

    out = bytearray()
    out += _tlv_u64(T_SERVICE_ID, sv.service_id)
    out += _tlv_u64(T_VID, sv.vid)
    if isinstance(sv.evidence, TimestampedValidation):
        tv = sv.evidence
        out += _tlv(T_NONCE_R, tv.r)
        out += _tlv(
            T_TOKEN_BEFORE,
            _encode_result_fields(tv.token_before.evidence, resolve(tv.token_before.evidence.chain_ref)),
        )
        out += _encode_result_fields(tv.main, resolve(tv.main.chain_ref))
        out += _tlv(
            T_TOKEN_AFTER,
            _encode_result_fields(tv.token_after.evidence, resolve(tv.token_after.evidence.chain_ref)),
        )
    else:
        out += _encode_result_fields(sv.evidence, resolve(sv.evidence.chain_ref))
    return bytes(out)


def decode_stored(blob: bytes) -> tuple[StoredValidation, dict[bytes, CertificateChain]]:
    """Parse a record; returns it plus any chains that were inlined."""
    service_id = 0
    vid = 0
    nonce: Optional[bytes] = None
    token_before_blob: Optional[bytes] = None
    token_after_blob: Optional[bytes] = None
    main_fields = bytearray()

    for tag, value in iter_tlv(blob):
        if tag == T_SERVICE_ID:
            service_id = struct.unpack(">Q", value)[0]
        elif tag == T_VID:
            vid = struct.unpack(">Q", value)[0]
        elif tag == T_NONCE_R:
            nonce = value
        elif tag == T_TOKEN_BEFORE:
            token_before_blob = value
        elif tag == T_TOKEN_AFTER:
            token_after_blob = value
        else:
            main_fields += _TLV_HEADER.pack(tag, len(value)) + value

    chains: dict[bytes, CertificateChain] = {}

    def note(chain: Optional[CertificateChain]) -> None:
        if chain is not None:
            chains[chain.chain_hash] = chain

    main_vr, main_chain = _decode_result_fields(bytes(main_fields), vid=vid)
    note(main_chain)

    evidence: Evidence
    if nonce is not None and token_before_blob is not None and token_after_blob is not None:
        before_vr, before_chain = _decode_result_fields(token_before_blob)
        after_vr, after_chain = _decode_result_fields(token_after_blob)
        note(before_chain)
        note(after_chain)
        evidence = TimestampedValidation(
            nonce,
            _token_from_result(before_vr),
            main_vr,
            _token_from_result(after_vr),
        )
    else:
        evidence = main_vr

    return StoredValidation(service_id, vid, evidence), chains


def frame_records(blobs: list[bytes]) -> bytes:
    """Length-prefix a sequence of records (on-ledger payloads, range responses)."""
    out = bytearray()
    for blob in blobs:
        out += struct.pack(">I", len(blob)) + blob
    return bytes(out)


def unframe_records(data: bytes) -> list[bytes]:
    out = []
    pos = 0
    while pos < len(data):
        if pos + 4 > len(data):
            raise Truncated("truncated record frame")
        n = struct.unpack_from(">I", data, pos)[0]
        pos += 4
        if pos + n > len(data):
            raise Truncated("truncated framed record")
        out.append(data[pos : pos + n])
        pos += n
    return out
