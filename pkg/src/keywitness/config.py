"""Daemon configuration: a dataclass mirrored by a flat JSON config file."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional


@dataclass
class NotaryConfig:
    ledger_path: str = "ledger.jsonl"
    owner_account: str = "notary"
    store_dir: Optional[str] = "notary-store"
    price_per_block: int = 1
    sla_deposit: int = 50
    sla_timeout_blocks: int = 5
    validation_interval_s: float = 3600.0
    skew_tolerance_s: float = 10.0
    probe_deadline_s: float = 5.0
    probe_attempts: int = 3
    listen_host: str = "127.0.0.1"
    listen_port: int = 8799
    poll_interval_s: float = 1.0
    default_port: int = 443
    auto_accept: bool = True

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "NotaryConfig":
        known = {f: obj[f] for f in cls.__dataclass_fields__ if f in obj}
        return cls(**known)

    @classmethod
    def load(cls, path: Path) -> "NotaryConfig":
        with Path(path).open("r", encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))

    def save(self, path: Path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")
