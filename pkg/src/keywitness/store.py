"""Notary-side persistence: per-service evidence logs plus a shared chain store.

Certificate chains dominate evidence size and rarely change, so they
are kept once in a content-addressed store and records carry only the
32-byte reference.  Both files are append-only binary logs with a magic
and version header; reopening rebuilds the in-memory indexes by a
single scan.  A store created without a root directory lives in memory,
which keeps high-volume property tests off the disk.

Evidence log file:   magic "KWEV" ++ u16 version, then
                     repeated  u32 length ++ record bytes.
Chain store file:    magic "KWCS" ++ u16 version, then
                     repeated  u32 length ++ (32-byte hash ++ chain bytes)
                     with chain bytes per records.encode_chain.
"""

from __future__ import annotations

import io
import struct
import threading
from pathlib import Path
from typing import BinaryIO, Iterator, Optional

from . import records
from .records import StoredValidation
from .wire import CertificateChain

EVIDENCE_MAGIC = b"KWEV"
CHAIN_MAGIC = b"KWCS"
STORE_VERSION = 1

_HEADER = struct.Struct(">4sH")
_FRAME = struct.Struct(">I")


class StoreError(Exception):
    pass


def _open_log(path: Optional[Path], magic: bytes) -> BinaryIO:
    if path is None:
        fh: BinaryIO = io.BytesIO()
        fh.write(_HEADER.pack(magic, STORE_VERSION))
        return fh
    path.parent.mkdir(parents=True, exist_ok=True)
    exists = path.exists() and path.stat().st_size > 0
    fh = open(path, "r+b" if exists else "w+b")
    if exists:
        got_magic, version = _HEADER.unpack(fh.read(_HEADER.size))
        if got_magic != magic:
            fh.close()
            raise StoreError(f"{path}: bad magic {got_magic!r}")
        if version != STORE_VERSION:
            fh.close()
            raise StoreError(f"{path}: unsupported store version {version}")
    else:
        fh.write(_HEADER.pack(magic, STORE_VERSION))
        fh.flush()
    return fh


def _iter_frames(fh: BinaryIO) -> Iterator[tuple[int, bytes]]:
    fh.seek(_HEADER.size)
    while True:
        offset = fh.tell()
        head = fh.read(_FRAME.size)
        if not head:
            return
        if len(head) < _FRAME.size:
            raise StoreError("truncated frame header")
        (length,) = _FRAME.unpack(head)
        body = fh.read(length)
        if len(body) < length:
            raise StoreError("truncated frame body")
        yield offset, body


def _append_frame(fh: BinaryIO, body: bytes) -> int:
    fh.seek(0, io.SEEK_END)
    fh.write(_FRAME.pack(len(body)))
    fh.write(body)
    fh.flush()
    return _FRAME.size + len(body)


class ChainStore:
    """Content-addressed certificate chains with reference counts.

    Re-putting a known chain costs no bytes on disk; only the in-memory
    reference count moves.
    """

    def __init__(self, path: Optional[Path] = None) -> None:
        self._fh = _open_log(path, CHAIN_MAGIC)
        self._lock = threading.Lock()
        self._chains: dict[bytes, CertificateChain] = {}
        self._record_bytes: dict[bytes, int] = {}
        self._refcounts: dict[bytes, int] = {}
        for _, body in _iter_frames(self._fh):
            chain = records.decode_chain(body[32:])
            self._chains[chain.chain_hash] = chain
            self._record_bytes[chain.chain_hash] = _FRAME.size + len(body)
            self._refcounts.setdefault(chain.chain_hash, 0)

    def put(self, chain: CertificateChain) -> bytes:
        with self._lock:
            ref = chain.chain_hash
            if ref not in self._chains:
                body = ref + records.encode_chain(chain)
                self._record_bytes[ref] = _append_frame(self._fh, body)
                self._chains[ref] = chain
            self._refcounts[ref] = self._refcounts.get(ref, 0) + 1
            return ref

    def get(self, chain_hash: bytes) -> Optional[CertificateChain]:
        with self._lock:
            return self._chains.get(chain_hash)

    def __contains__(self, chain_hash: bytes) -> bool:
        with self._lock:
            return chain_hash in self._chains

    def __len__(self) -> int:
        with self._lock:
            return len(self._chains)

    def refcount(self, chain_hash: bytes) -> int:
        with self._lock:
            return self._refcounts.get(chain_hash, 0)

    def record_bytes(self, chain_hash: bytes) -> int:
        with self._lock:
            return self._record_bytes.get(chain_hash, 0)

    def total_bytes(self) -> int:
        with self._lock:
            return _HEADER.size + sum(self._record_bytes.values())


class EvidenceStore:
    """Append-only per-service logs of encoded validation records."""

    def __init__(self, root: Optional[Path] = None) -> None:
        self._root = Path(root) if root else None
        self._lock = threading.Lock()
        self._logs: dict[int, BinaryIO] = {}
        self._index: dict[int, dict[int, bytes]] = {}  # service -> vid -> record
        self._log_bytes: dict[int, int] = {}
        if self._root:
            self._root.mkdir(parents=True, exist_ok=True)
            for path in sorted(self._root.glob("service-*.evlog")):
                service_id = int(path.stem.split("-", 1)[1])
                self._open_service(service_id)

    def _service_path(self, service_id: int) -> Optional[Path]:
        return self._root / f"service-{service_id}.evlog" if self._root else None

    def _open_service(self, service_id: int) -> BinaryIO:
        fh = _open_log(self._service_path(service_id), EVIDENCE_MAGIC)
        index: dict[int, bytes] = {}
        total = _HEADER.size
        for _, body in _iter_frames(fh):
            sv, _ = records.decode_stored(body)
            index[sv.vid] = body
            total += _FRAME.size + len(body)
        self._logs[service_id] = fh
        self._index[service_id] = index
        self._log_bytes[service_id] = total
        return fh

    def append(self, sv: StoredValidation) -> bytes:
        """Store one record (chains are never inlined on disk); returns the encoding."""
        blob = records.encode_stored(sv)
        with self._lock:
            fh = self._logs.get(sv.service_id)
            if fh is None:
                fh = self._open_service(sv.service_id)
            if sv.vid in self._index[sv.service_id]:
                raise StoreError(f"vid {sv.vid} already stored for service {sv.service_id}")
            self._log_bytes[sv.service_id] += _append_frame(fh, blob)
            self._index[sv.service_id][sv.vid] = blob
        return blob

    def get(self, service_id: int, vid: int) -> Optional[StoredValidation]:
        blob = self.get_encoded(service_id, vid)
        if blob is None:
            return None
        sv, _ = records.decode_stored(blob)
        return sv

    def get_encoded(self, service_id: int, vid: int) -> Optional[bytes]:
        with self._lock:
            return self._index.get(service_id, {}).get(vid)

    def vids(self, service_id: int) -> list[int]:
        with self._lock:
            return sorted(self._index.get(service_id, {}))

    def next_vid(self, service_id: int) -> int:
        v = self.vids(service_id)
        return v[-1] + 1 if v else 0

    def service_ids(self) -> list[int]:
        with self._lock:
            return sorted(self._index)

    def log_bytes(self, service_id: int) -> int:
        with self._lock:
            return self._log_bytes.get(service_id, 0)


class NotaryStore:
    """Facade pairing the evidence logs with the shared chain store."""

    def __init__(self, root: Optional[Path] = None) -> None:
        root_path = Path(root) if root else None
        self.evidence = EvidenceStore(root_path)
        self.chains = ChainStore(root_path / "chains.kwcs" if root_path else None)
        # Rebuild reference counts lost across restarts.
        for service_id in self.evidence.service_ids():
            for vid in self.evidence.vids(service_id):
                sv = self.evidence.get(service_id, vid)
                if sv:
                    for ref in sv.chain_refs():
                        self.chains._refcounts[ref] = self.chains._refcounts.get(ref, 0) + 1

    def add(self, sv: StoredValidation, chains: dict[bytes, CertificateChain]) -> None:
        for chain in chains.values():
            self.chains.put(chain)
        for ref in sv.chain_refs():
            if ref not in self.chains:
                raise StoreError(f"record references unknown chain {ref.hex()}")
        self.evidence.append(sv)

    def storage_report(self, service_id: int) -> tuple[int, int]:
        """(bytes if every record carried its chains inline, actual bytes used)."""
        vids = self.evidence.vids(service_id)
        if not vids:
            raise StoreError(f"service {service_id} has no stored validations")
        naive = 0
        chain_refs: set[bytes] = set()
        for vid in vids:
            sv = self.evidence.get(service_id, vid)
            assert sv is not None
            naive += _FRAME.size + len(records.encode_stored(sv, inline_chains=self.chains.get))
            chain_refs.update(sv.chain_refs())
        dedup = self.evidence.log_bytes(service_id)
        dedup += sum(self.chains.record_bytes(ref) for ref in chain_refs)
        return naive, dedup
