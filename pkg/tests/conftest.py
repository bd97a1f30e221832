"""Shared fixtures for the CoinPrune test suite."""

from pathlib import Path

import pytest

from scripts.coinprune.chain import hash256, make_genesis
from scripts.coinprune.config import DEFAULT_SCENARIO_DIR

from chainbuilder import grow_chain

FIXTURES = Path(__file__).parent / 'fixtures'


@pytest.fixture
def genesis():
    return make_genesis()


@pytest.fixture(scope='session')
def chain_40():
    return grow_chain(40, seed=3)


@pytest.fixture
def sample_utxo(chain_40):
    return chain_40[1][-1]


@pytest.fixture
def fake_id():
    return hash256(b'some snapshot')


@pytest.fixture
def wire_hex():
    def load(name: str) -> bytes:
        return bytes.fromhex((FIXTURES / 'wire' / f"{name}.hex").read_text().strip())
    return load


@pytest.fixture(scope='session')
def honest_scenario():
    from scripts.coinprune.scenario import load_scenario
    return load_scenario(DEFAULT_SCENARIO_DIR / 'honest.json')


@pytest.fixture(scope='session')
def honest_metrics(honest_scenario):
    from scripts.coinprune.simnet import run
    return run(honest_scenario)
