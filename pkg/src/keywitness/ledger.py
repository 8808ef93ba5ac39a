"""Deterministic block-ordered ledger with accounts and one hosted contract.

Blocks are the contract's only clock: timeouts are counted in block
heights, never wall time.  Execution happens solely inside mine(), in
submission order, so contract state is a pure function of the genesis
record and the transaction sequence.  An optional append-only block log
(line-delimited JSON, self-describing header) lets a restart replay to
a byte-identical state.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Optional, Protocol

from .contract import CallContext, ContractAbort, NotaryContract

LOG_FORMAT = "keywitness-blocklog"
LOG_VERSION = 1


class UnknownSender(Exception):
    pass


def canonical_json_bytes(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


@dataclass(frozen=True)
class LedgerTransaction:
    sender: str
    method: str
    args: dict[str, Any]
    value: int = 0

    def to_json(self) -> dict[str, Any]:
        return {"sender": self.sender, "method": self.method, "args": self.args, "value": self.value}

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "LedgerTransaction":
        return cls(obj["sender"], obj["method"], dict(obj["args"]), int(obj["value"]))


@dataclass(frozen=True)
class Block:
    height: int
    parent: Optional[int]
    transactions: tuple[LedgerTransaction, ...]


@dataclass
class Receipt:
    """Handle for observing a submitted transaction's inclusion and result."""

    tx: LedgerTransaction
    status: str = "pending"  # pending | ok | aborted
    height: Optional[int] = None
    result: Any = None
    error: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"


class ContractHost(Protocol):
    """What the ledger needs from a hosted contract."""

    def dispatch(self, ctx: CallContext, method: str, args: dict[str, Any]) -> Any: ...

    def snapshot_data(self) -> dict[str, Any]: ...


class Snapshot:
    """Immutable world state as of one height; safe to hand across threads."""

    def __init__(self, height: int, accounts: dict[str, int], contract_data: dict[str, Any]) -> None:
        self.height = height
        self.accounts = accounts
        self.contract_data = contract_data

    def to_bytes(self) -> bytes:
        return canonical_json_bytes(
            {"height": self.height, "accounts": self.accounts, "contract": self.contract_data}
        )

    def balance(self, account: str) -> int:
        return self.accounts.get(account, 0)

    # Convenience accessors over the hosted notary contract's state.
    def pending_requests(self) -> dict[str, Any]:
        return self.contract_data["requests"]

    def services(self) -> dict[str, Any]:
        return self.contract_data["services"]

    def service(self, service_id: int) -> Optional[dict[str, Any]]:
        return self.contract_data["services"].get(str(service_id))

    def queries(self) -> dict[str, Any]:
        return self.contract_data["queries"]

    def responses(self, query_id: int) -> list[Any]:
        return self.contract_data["responses"].get(str(query_id), [])

    def timeline(self, service_id: int) -> list[tuple[int, str]]:
        svc = self.service(service_id)
        if svc is None:
            return []
        return [(int(v), s) for v, s in svc["timeline"]]


class _ExecutionContext:
    """Per-transaction view handed to the contract; satisfies CallContext."""

    def __init__(self, ledger: "Ledger", sender: str, value: int, height: int) -> None:
        self._ledger = ledger
        self.sender = sender
        self.value = value
        self.height = height

    def transfer(self, to: str, amount: int) -> None:
        self._ledger._transfer_from_contract(to, amount)


class Ledger:
    """Single-chain simulator: no forks, no consensus, explicit mining."""

    CONTRACT_ACCOUNT = "__contract__"

    def __init__(
        self,
        contract: ContractHost,
        accounts: dict[str, int],
        *,
        log_path: Optional[Path] = None,
    ) -> None:
        if self.CONTRACT_ACCOUNT in accounts:
            raise ValueError("the contract account is created implicitly")
        self.contract = contract
        self._accounts: dict[str, int] = {self.CONTRACT_ACCOUNT: 0, **accounts}
        self._pending: list[tuple[LedgerTransaction, Receipt]] = []
        self._blocks: list[Block] = []
        self._lock = threading.RLock()
        self._log_path = Path(log_path) if log_path else None
        if self._log_path and not self._log_path.exists():
            record = {
                "format": LOG_FORMAT,
                "version": LOG_VERSION,
                "type": "genesis",
                "accounts": dict(accounts),
                "contract": contract.snapshot_data().get("params", {}),
            }
            self._log_path.parent.mkdir(parents=True, exist_ok=True)
            with self._log_path.open("w", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    # -- clock -------------------------------------------------------------

    @property
    def height(self) -> int:
        """Height of the latest mined block; -1 while the chain is empty."""
        with self._lock:
            return len(self._blocks) - 1

    @property
    def blocks(self) -> tuple[Block, ...]:
        with self._lock:
            return tuple(self._blocks)

    # -- balances ----------------------------------------------------------

    def balance(self, account: str) -> int:
        with self._lock:
            return self._accounts.get(account, 0)

    def total_supply(self) -> int:
        with self._lock:
            return sum(self._accounts.values())

    def _transfer_from_contract(self, to: str, amount: int) -> None:
        if amount < 0:
            raise ContractAbort("negative transfer")
        if self._accounts[self.CONTRACT_ACCOUNT] < amount:
            raise ContractAbort("contract balance exhausted")
        self._accounts[self.CONTRACT_ACCOUNT] -= amount
        self._accounts[to] = self._accounts.get(to, 0) + amount

    # -- transactions ------------------------------------------------------

    def submit(self, tx: LedgerTransaction) -> Receipt:
        """Queue a transaction for the next block."""
        with self._lock:
            if tx.sender not in self._accounts:
                raise UnknownSender(tx.sender)
            receipt = Receipt(tx)
            self._pending.append((tx, receipt))
            return receipt

    def call(self, sender: str, method: str, value: int = 0, **args: Any) -> Receipt:
        return self.submit(LedgerTransaction(sender, method, args, value))

    def _execute(self, tx: LedgerTransaction, receipt: Receipt, height: int) -> None:
        receipt.height = height
        sender_balance = self._accounts.get(tx.sender)
        if sender_balance is None:
            receipt.status = "aborted"
            receipt.error = "unknown sender"
            return
        if tx.value < 0 or sender_balance < tx.value:
            receipt.status = "aborted"
            receipt.error = "insufficient funds"
            return
        self._accounts[tx.sender] -= tx.value
        self._accounts[self.CONTRACT_ACCOUNT] += tx.value
        ctx = _ExecutionContext(self, tx.sender, tx.value, height)
        try:
            receipt.result = self.contract.dispatch(ctx, tx.method, tx.args)
            receipt.status = "ok"
        except ContractAbort as exc:
            # Contract methods validate before mutating, so refunding the
            # attached value restores the pre-transaction state exactly.
            self._accounts[self.CONTRACT_ACCOUNT] -= tx.value
            self._accounts[tx.sender] += tx.value
            receipt.status = "aborted"
            receipt.error = str(exc)

    def mine(self) -> Block:
        """Drain the queue into a new block and execute it; empty blocks advance time."""
        with self._lock:
            height = len(self._blocks)
            parent = height - 1 if height else None
            drained = self._pending
            self._pending = []
            for tx, receipt in drained:
                self._execute(tx, receipt, height)
            block = Block(height, parent, tuple(tx for tx, _ in drained))
            self._blocks.append(block)
            if self._log_path:
                line = json.dumps(
                    {
                        "type": "block",
                        "height": block.height,
                        "parent": block.parent,
                        "txs": [tx.to_json() for tx in block.transactions],
                    },
                    sort_keys=True,
                )
                with self._log_path.open("a", encoding="utf-8") as fh:
                    fh.write(line + "\n")
            return block

    def mine_until(self, height: int) -> None:
        while self.height < height:
            self.mine()

    # -- reads ---------------------------------------------------------------

    def read_state(self) -> Snapshot:
        """Snapshot as of the latest mined block; queued transactions are invisible."""
        with self._lock:
            return Snapshot(
                self.height,
                dict(self._accounts),
                self.contract.snapshot_data(),
            )

    # -- persistence ---------------------------------------------------------

    @classmethod
    def replay(
        cls,
        lines: Iterable[str],
        *,
        log_path: Optional[Path] = None,
    ) -> "Ledger":
        """Rebuild a ledger by re-executing a block log from its genesis record."""
        it = iter(lines)
        try:
            header = json.loads(next(it))
        except StopIteration:
            raise ValueError("empty block log") from None
        if header.get("format") != LOG_FORMAT or header.get("type") != "genesis":
            raise ValueError("not a block log: bad genesis record")
        if header.get("version") != LOG_VERSION:
            raise ValueError(f"unsupported block log version {header.get('version')}")
        contract = NotaryContract.from_params(header["contract"])
        # Replay with logging detached so re-executed blocks are not re-appended.
        ledger = cls(contract, dict(header["accounts"]), log_path=None)
        for line in it:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            if record.get("type") != "block":
                raise ValueError(f"unexpected record type {record.get('type')!r}")
            if record["height"] != ledger.height + 1:
                raise ValueError("non-consecutive block heights in log")
            for tx_obj in record["txs"]:
                ledger.submit(LedgerTransaction.from_json(tx_obj))
            ledger.mine()
        if log_path is not None:
            ledger._log_path = Path(log_path)
        return ledger

    @classmethod
    def open(cls, path: Path, *, attach: bool = True) -> "Ledger":
        """Load a block-log file; attach=True keeps appending new blocks to it."""
        path = Path(path)
        with path.open("r", encoding="utf-8") as fh:
            lines = fh.readlines()
        return cls.replay(lines, log_path=path if attach else None)
