import json

import numpy as np
import pytest
from hypothesis import strategies as st

from jsonsynth.datasets import load_adult, movies, subsample
from jsonsynth.training import Artifacts

KEYS = st.sampled_from(["a", "b", "c", "id", "name", "tags", "meta", "x"])
PRIMITIVES = st.one_of(
    st.none(),
    st.booleans(),
    st.integers(-1000, 1000),
    st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False),
    st.sampled_from(["red", "green", "blue", "", "é", "x y"]),
)
JSON_VALUES = st.recursive(
    PRIMITIVES,
    lambda children: st.one_of(
        st.lists(children, max_size=4),
        st.dictionaries(KEYS, children, max_size=4),
    ),
    max_leaves=12,
)
RECORDS = st.dictionaries(KEYS, JSON_VALUES, max_size=5)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True)


@pytest.fixture(scope="session")
def movie_records():
    return movies()


@pytest.fixture(scope="session")
def movie_artifacts(movie_records):
    return Artifacts.derive(movie_records)


@pytest.fixture(scope="session")
def adult_small():
    return subsample(load_adult("train"), 1000, seed=0)


@pytest.fixture(scope="session")
def adult_small_artifacts(adult_small):
    return Artifacts.derive(adult_small)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
