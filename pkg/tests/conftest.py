import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Tuple

import backoff
import numpy as np
import pytest
from func_timeout import FunctionTimedOut, func_set_timeout
from sqlalchemy import create_engine, inspect
from sqlalchemy.exc import DatabaseError, OperationalError

from legnav.config import RunConfig
from legnav.physics import QuadrupedModel
from legnav.store import RunStore
from legnav.terrain import TerrainWorld

log = logging.getLogger(__name__)


@dataclass
class StartInfo:
    """
    Dataclass to hold some info about a run store backend
    """

    url: str
    db_type: str

    @classmethod
    def get_sqlite_instance(cls) -> "StartInfo":
        """
        Returns a StartInfo instance for in-memory sqlite
        """
        return cls(url="sqlite:///:memory:", db_type="sqlite")

    @classmethod
    def from_url(cls, url: str) -> "StartInfo":
        return cls(url=url, db_type=url.split(":", 1)[0].split("+", 1)[0])


@backoff.on_exception(
    backoff.constant,
    (DatabaseError, OperationalError, ConnectionAbortedError, FunctionTimedOut),
    max_tries=20,
    jitter=None,
    interval=0.5,
    logger=log,
    backoff_log_level=logging.DEBUG,
)
@func_set_timeout(3)
def _wait_for_sql_stability(url: str) -> None:
    """
    Continually tries to connect to the given database until it answers.

    Wrapped with func_set_timeout because inspect() can hang on a server that
    is still starting up.
    """
    engine = create_engine(url)
    try:
        inspect(engine).get_table_names()
    finally:
        engine.dispose()


@lru_cache(maxsize=None)
def _get_store_start_infos(extra_urls: Tuple[str, ...] = ()) -> List[StartInfo]:
    """
    Used to parameterize run store testing.

    Always tests against in-memory sqlite; every --store-url given on the
    command line is added once it accepts connections.
    """
    start_infos = [StartInfo.get_sqlite_instance()]
    for url in extra_urls:
        _wait_for_sql_stability(url)
        start_infos.append(StartInfo.from_url(url))
    return start_infos


@pytest.fixture(scope="function")
def run_store(request):
    """
    Fixture to get a RunStore instance for testing.

    After testing, cleans the database.
    """
    store = None
    try:
        store = RunStore(request.param)
        yield store
    finally:
        if store:
            # Ensure that each test ends with a clean db.
            store.clear()
            store.close()


@pytest.fixture(scope="function")
def tiny_config() -> RunConfig:
    """
    A config small enough to train and evaluate in a fraction of a second.
    """
    return RunConfig.from_dict(
        {
            "run": {
                "task_mode": "final_position",
                "num_robots": 4,
                "seed": 0,
                "checkpoint_every": 1,
            },
            "terrain": {
                "families": ["flat"],
                "num_levels": 2,
                "tile_length": 2.0,
                "tile_width": 2.0,
                "resolution": 0.1,
                "border": 1.0,
                "target_radius": [0.5, 1.0],
                "protocol_tile_length": 4.0,
                "protocol_tile_width": 2.0,
                "protocol_spawn_x": 0.5,
            },
            "env": {
                "terrain_grid": 3,
                "episode_length_s": 0.5,
                "reward_window_s": 0.25,
            },
            "ppo": {
                "actor_hidden": [16, 16],
                "critic_hidden": [16, 16],
                "horizon": 4,
                "total_iterations": 2,
            },
            "eval": {
                "episodes_per_level": 2,
                "protocol_duration_s": 0.5,
                "position_target_distance": 2.0,
                "energy_distance": 0.5,
                "energy_time_limit_s": 0.4,
                "drive_target_distance": 1.0,
            },
        }
    ).resolve()


@pytest.fixture(scope="function")
def model(tiny_config) -> QuadrupedModel:
    return QuadrupedModel.from_config(tiny_config.physics)


@pytest.fixture(scope="function")
def world(tiny_config) -> TerrainWorld:
    return TerrainWorld.build(tiny_config.terrain, tiny_config.seed)


@pytest.fixture(scope="function")
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def pytest_generate_tests(metafunc):
    extra_urls = tuple(metafunc.config.getoption("--store-url") or ())
    start_infos = _get_store_start_infos(extra_urls)

    if "run_store" in metafunc.fixturenames:
        metafunc.parametrize(
            "run_store",
            [s.url for s in start_infos],
            ids=[s.db_type for s in start_infos],
            indirect=True,
        )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return

    skip_slow = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def pytest_addoption(parser):
    """
    Used to add options to pytest via the command line.
    """
    parser.addoption(
        "--store-url",
        action="append",
        default=[],
        help="extra SQLAlchemy url to run the run store tests against",
    )
    parser.addoption("--run-slow", action="store_true", default=False)
