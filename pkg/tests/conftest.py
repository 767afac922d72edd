import logging
import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from alphamine.data import synth_market
from alphamine.engine import Miner, SearchConfig
from alphamine.evaluation import Evaluator
from alphamine.formula import parse

PLANT_TEXT = "div(vwap,close)"
PLANT_STRENGTH = 0.1
PLANT_SEED = 7


@pytest.fixture(scope="session")
def planted_ds():
    return synth_market(500, 30, planted=(parse(PLANT_TEXT), PLANT_STRENGTH), seed=PLANT_SEED)


@pytest.fixture(scope="session")
def planted_ev(planted_ds):
    return Evaluator(planted_ds, horizon=1)


@pytest.fixture(scope="session")
def mined(planted_ds, planted_ev):
    """A full default-config mining job on the planted market, with its wall time."""
    logging.getLogger("alphamine").setLevel(logging.WARNING)
    t0 = time.perf_counter()
    with Miner(SearchConfig(), planted_ds, planted_ev) as m:
        lib = m.run()
    return m, lib, time.perf_counter() - t0


@pytest.fixture(scope="session")
def small_ds():
    return synth_market(200, 20, planted=(parse(PLANT_TEXT), 0.15), seed=3)
