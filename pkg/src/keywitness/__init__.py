"""Accountable TLS key-validation notary.

A notary persistently probes a domain's TLS 1.2 half-handshake for
signed, time-bounded proof that a public key is in use, publishes
validation-state changes to a block-ordered ledger, and answers audit
queries; a contract state machine escrows fees and an SLA deposit so
misbehavior is provable and punishable; an auditor re-verifies the
whole trail.
"""

from .auditor import AuditVerdict, Timeline, audit_range, escalate, render_timeline
from .clock import RealClock, VirtualClock
from .config import NotaryConfig
from .contract import ContractParams, NotaryContract, Status
from .ledger import Block, Ledger, LedgerTransaction
from .notary import NotaryDaemon, classify
from .probe import ProbeCapture, ValidationResult, probe_once, verify_evidence
from .records import StoredValidation
from .store import NotaryStore
from .timesource import TimestampedValidation, TlsTimeSource, timestamped_probe, verify_timestamped
from .wire import CertificateChain, RandomField, decode_server_flight, encode_client_hello

__version__ = "0.1.0"

__all__ = [
    "AuditVerdict",
    "Block",
    "CertificateChain",
    "ContractParams",
    "Ledger",
    "LedgerTransaction",
    "NotaryConfig",
    "NotaryContract",
    "NotaryDaemon",
    "NotaryStore",
    "ProbeCapture",
    "RandomField",
    "RealClock",
    "Status",
    "StoredValidation",
    "Timeline",
    "TimestampedValidation",
    "TlsTimeSource",
    "ValidationResult",
    "VirtualClock",
    "audit_range",
    "classify",
    "decode_server_flight",
    "encode_client_hello",
    "escalate",
    "probe_once",
    "render_timeline",
    "timestamped_probe",
    "verify_evidence",
    "verify_timestamped",
]
