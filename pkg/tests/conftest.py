"""Shared fixtures: RSA keys are expensive, so a session-scoped pool is reused."""

from __future__ import annotations

import pytest

from keywitness.clock import VirtualClock
from keywitness.config import NotaryConfig
from keywitness.contract import ContractParams, NotaryContract
from keywitness.ledger import Ledger
from keywitness.store import NotaryStore
from keywitness.testbed import KeyPair, generate_keypair


@pytest.fixture(scope="session")
def keypool() -> dict[str, KeyPair]:
    return {name: generate_keypair(name) for name in ("k1", "k2", "k3", "k4", "k5", "k6")}


def make_params(**overrides) -> ContractParams:
    base = dict(
        owner="notary",
        sla_deposit=50,
        sla_timeout_blocks=5,
        price_per_block=1,
        default_interval_s=60.0,
    )
    base.update(overrides)
    return ContractParams(**base)


def make_ledger(accounts=None, log_path=None, **params_overrides) -> Ledger:
    accounts = accounts or {"notary": 10_000, "alice": 10_000, "mallory": 10_000}
    return Ledger(NotaryContract(make_params(**params_overrides)), accounts, log_path=log_path)


def make_config(**overrides) -> NotaryConfig:
    base = dict(
        owner_account="notary",
        sla_deposit=50,
        sla_timeout_blocks=5,
        validation_interval_s=60.0,
        skew_tolerance_s=10.0,
        probe_deadline_s=5.0,
        store_dir=None,
        poll_interval_s=1.0,
    )
    base.update(overrides)
    return NotaryConfig(**base)


@pytest.fixture()
def vclock() -> VirtualClock:
    return VirtualClock(1_700_000_000.0)


@pytest.fixture()
def memstore() -> NotaryStore:
    return NotaryStore(None)
