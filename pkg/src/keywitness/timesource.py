"""Bracket a handshake between two signed timestamps from a reference server.

Any TLS server the prober can monitor doubles as a time source: the
notary submits 32 bytes through the ClientHello random and gets them
back signed next to the source's own timestamp.  Chaining digests
(nonce -> first token -> monitored handshake -> second token) pins the
monitored server's signature between the two source timestamps, so the
evidence stays time-bounded even when the monitored server's clock is
garbage.

Other token services (document timestamping authorities, signed time
sync responses) fit the same TimeSource interface; only the TLS-backed
source is implemented here.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from typing import Callable, Optional, Protocol

from .clock import Clock, RealClock
from .probe import (
    OUTCOME_SIGNED,
    ProbeCapture,
    ProbeConfig,
    ValidationResult,
    extract_server_timestamp,
    probe_once,
    verify_evidence,
)
from .wire import RANDOM_LEN, CertificateChain


def digest(data: bytes) -> bytes:
    """The 32-byte hash used for every link of the evidence chain."""
    return hashlib.sha256(data).digest()


class TimeSourceFailure(Exception):
    """A token probe failed; upstream this becomes a Time state."""

    def __init__(self, message: str, result: Optional[ValidationResult] = None) -> None:
        super().__init__(message)
        self.result = result


class MainProbeFailure(Exception):
    """The monitored-server probe failed; carries the failed result for storage."""

    def __init__(self, result: ValidationResult) -> None:
        super().__init__(f"main probe failed: {result.outcome} ({result.diagnostic})")
        self.result = result


class MissingChain(Exception):
    """A referenced certificate chain could not be resolved."""


@dataclass(frozen=True)
class TimestampToken:
    """A 32-byte payload signed by the time source next to its clock reading."""

    payload: bytes
    source_time: int
    evidence: ValidationResult

    def canonical_bytes(self) -> bytes:
        """Fixed-order serialization hashed into the next chain link.

        payload ++ server random ++ DH params ++ signature ++ chain ref;
        one fixed encoding keeps the signed transcript unambiguous.
        """
        assert self.evidence.server_random_field is not None
        return (
            self.payload
            + self.evidence.server_random_field.encode()
            + self.evidence.dh_params
            + self.evidence.signature
            + self.evidence.chain_ref
        )


def evidence_digest(vr: ValidationResult) -> bytes:
    """Digest of a signed result, used as the payload of the closing token."""
    assert vr.server_random_field is not None
    return digest(
        vr.client_random
        + vr.server_random_field.encode()
        + vr.dh_params
        + vr.signature
        + vr.chain_ref
    )


@dataclass(frozen=True)
class TimestampedValidation:
    """Main evidence plus the two tokens that bound when it was produced."""

    r: bytes
    token_before: TimestampToken
    main: ValidationResult
    token_after: TimestampToken

    @property
    def bounds(self) -> tuple[int, int]:
        return (self.token_before.source_time, self.token_after.source_time)

    @property
    def width(self) -> int:
        t1, t2 = self.bounds
        return t2 - t1


class TimeSource(Protocol):
    """Anything that returns a caller-chosen 32-byte payload timestamped and signed."""

    def timestamp(self, payload: bytes, deadline: float) -> tuple[TimestampToken, CertificateChain]: ...


class TlsTimeSource:
    """Time source backed by probing an ordinary TLS server."""

    def __init__(
        self,
        domain: str,
        port: int = 443,
        *,
        prober: Callable[..., ProbeCapture] = probe_once,
        config: ProbeConfig = ProbeConfig(),
        clock: Optional[Clock] = None,
    ) -> None:
        self.domain = domain
        self.port = port
        self._prober = prober
        self._config = config
        self._clock = clock or RealClock()

    def timestamp(self, payload: bytes, deadline: float) -> tuple[TimestampToken, CertificateChain]:
        if len(payload) != RANDOM_LEN:
            raise ValueError(f"payload must be {RANDOM_LEN} bytes")
        capture = self._prober(
            self.domain,
            self.port,
            client_random=payload,
            deadline=deadline,
            config=self._config,
            clock=self._clock,
        )
        vr = capture.result
        if vr.outcome != OUTCOME_SIGNED or capture.chain is None:
            raise TimeSourceFailure(
                f"time source {self.domain}:{self.port} did not sign: "
                f"{vr.outcome} ({vr.diagnostic})",
                vr,
            )
        return TimestampToken(payload, extract_server_timestamp(vr), vr), capture.chain


@dataclass(frozen=True)
class TimestampedCapture:
    bundle: TimestampedValidation
    chains: dict[bytes, CertificateChain]


def timestamped_probe(
    domain: str,
    port: int,
    time_source: TimeSource,
    deadline: float,
    *,
    prober: Callable[..., ProbeCapture] = probe_once,
    config: ProbeConfig = ProbeConfig(),
    clock: Optional[Clock] = None,
    nonce: Optional[bytes] = None,
) -> TimestampedCapture:
    """Run the three-exchange protocol and return the chained bundle.

    The exchanges are strictly sequential; each step's input is a hash
    of the previous step's output, which is what makes the time bounds
    non-repudiable.  Raises TimeSourceFailure or MainProbeFailure; the
    caller maps those to published states.
    """
    clock = clock or RealClock()
    r = nonce if nonce is not None else os.urandom(RANDOM_LEN)
    if len(r) != RANDOM_LEN:
        raise ValueError(f"nonce must be {RANDOM_LEN} bytes")

    token_before, chain_before = time_source.timestamp(r, deadline)

    h1 = digest(token_before.canonical_bytes())
    capture = prober(
        domain,
        port,
        client_random=h1,
        deadline=deadline,
        config=config,
        clock=clock,
    )
    main = capture.result
    if main.outcome != OUTCOME_SIGNED or capture.chain is None:
        raise MainProbeFailure(main)

    h2 = evidence_digest(main)
    token_after, chain_after = time_source.timestamp(h2, deadline)

    bundle = TimestampedValidation(r, token_before, main, token_after)
    chains = {
        chain_before.chain_hash: chain_before,
        capture.chain.chain_hash: capture.chain,
        chain_after.chain_hash: chain_after,
    }
    return TimestampedCapture(bundle, chains)


def verify_timestamped(
    tv: TimestampedValidation,
    chain_lookup: Callable[[bytes], Optional[CertificateChain]],
) -> bool:
    """Check all three signatures and every link of the hash chain.

    Raises MissingChain when a referenced chain cannot be resolved;
    all other defects simply yield False.
    """
    parts = (tv.token_before.evidence, tv.main, tv.token_after.evidence)
    chains = []
    for vr in parts:
        if vr.outcome != OUTCOME_SIGNED or vr.server_random_field is None:
            return False
        chain = chain_lookup(vr.chain_ref)
        if chain is None:
            raise MissingChain(vr.chain_ref.hex())
        chains.append(chain)

    for vr, chain in zip(parts, chains):
        if not verify_evidence(vr, chain):
            return False

    if tv.token_before.payload != tv.r:
        return False
    if tv.token_before.evidence.client_random != tv.token_before.payload:
        return False
    if tv.main.client_random != digest(tv.token_before.canonical_bytes()):
        return False
    if tv.token_after.payload != evidence_digest(tv.main):
        return False
    if tv.token_after.evidence.client_random != tv.token_after.payload:
        return False
    if tv.token_before.source_time != extract_server_timestamp(tv.token_before.evidence):
        return False
    if tv.token_after.source_time != extract_server_timestamp(tv.token_after.evidence):
        return False
    t1, t2 = tv.bounds
    return t1 <= t2
