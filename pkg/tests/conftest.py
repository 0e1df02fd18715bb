import os

import numpy as np
import pytest

from dotenv import load_dotenv

from ttcme.reactions import (
    ParameterAxis,
    PropensityFactor,
    PropensitySpec,
    Reaction,
    ReactionSystem,
    Species,
)
from ttcme.settings import get_settings


# Load environment variables at the start of testing
load_dotenv()


@pytest.fixture(scope="session")
def test_env():
    return {
        "TTCME_RUN_SLOW": os.getenv("TTCME_RUN_SLOW"),
        "TTCME_OUTPUT_DIR": os.getenv("TTCME_OUTPUT_DIR", "out"),
    }


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def clean_settings(monkeypatch):
    """Settings re-read from a clean environment for the duration of a test."""
    for name in ("TTCME_OUTPUT_DIR", "TTCME_DENSE_CAP", "TTCME_ORACLE_CAP", "TTCME_LOG_LEVEL"):
        monkeypatch.delenv(name, raising=False)
    get_settings.cache_clear()
    yield monkeypatch
    get_settings.cache_clear()


def creation(name, species, rate=1.0, factors=()):
    return Reaction(
        name=name,
        stoichiometry={species: 1},
        propensity=PropensitySpec(rate=rate, factors=list(factors)),
    )


def destruction(name, species, c):
    return Reaction(
        name=name,
        stoichiometry={species: -1},
        propensity=PropensitySpec(
            factors=[PropensityFactor(kind="linear", dims=[species], params={"c": c})]
        ),
    )


def cascade_system(d: int, bits: int) -> ReactionSystem:
    """Cascade with constant creation of S1 and x/(5+x) creation of later species."""
    names = [f"S{i + 1}" for i in range(d)]
    reactions = [creation("create_S1", "S1", rate=0.7)]
    for prev, name in zip(names, names[1:]):
        factor = PropensityFactor(kind="michaelis", dims=[prev], params={"a": 1.0, "b": 5.0})
        reactions.append(creation(f"create_{name}", name, factors=[factor]))
    reactions += [destruction(f"destroy_{name}", name, 0.07) for name in names]
    return ReactionSystem(
        name=f"cascade{d}",
        species=[Species(name=n, bits=bits) for n in names],
        reactions=reactions,
    )


def toggle_system(bits: int = 5, parameter_values=None) -> ReactionSystem:
    """Toggle switch; with ``parameter_values`` the inducer enters as a parameter."""
    hill = PropensityFactor(kind="hill", dims=["x2"], params={"alpha": 156.25, "beta": 2.5})
    if parameter_values is None:
        repression = PropensityFactor(kind="repression", dims=["x1"], params={"a": 15.6, "b": 1.0})
        parameter = None
    else:
        repression = PropensityFactor(
            kind="inducible_repression",
            dims=["x1", "y"],
            params={"alpha": 15.6, "K": 2.9618e-5, "eta": 2.0015},
        )
        parameter = ParameterAxis(name="y", values=tuple(parameter_values))
    return ReactionSystem(
        name="toggle",
        species=[Species(name="x1", bits=bits), Species(name="x2", bits=bits)],
        reactions=[
            creation("create_x1", "x1", factors=[hill]),
            destruction("destroy_x1", "x1", 1.0),
            creation("create_x2", "x2", factors=[repression]),
            destruction("destroy_x2", "x2", 1.0),
        ],
        parameter=parameter,
    )


def birth_death_system(bits: int = 6, rate: float = 0.7, c: float = 0.07) -> ReactionSystem:
    return ReactionSystem(
        name="birth_death",
        species=[Species(name="X", bits=bits)],
        reactions=[creation("create", "X", rate=rate), destruction("destroy", "X", c)],
    )


@pytest.fixture
def cascade3():
    return cascade_system(3, 3)


@pytest.fixture
def toggle_small():
    return toggle_system(bits=5)


@pytest.fixture
def birth_death():
    return birth_death_system()


@pytest.fixture
def make_cascade():
    return cascade_system


@pytest.fixture
def make_toggle():
    return toggle_system


@pytest.fixture
def make_birth_death():
    return birth_death_system
