import numpy as np
import pytest

from dnr_lab import config as cf
from dnr_lab import pipeline as pl


def tiny_config(**data) -> cf.ExperimentConfig:
    """A world small enough for unit tests (about a second to build)."""
    raw = {
        "data": {"users": 60, "items": 80, "latent_dim": 4, "events_per_user": 30,
                 "min_interactions": 5, "n": 20, "k": 6, "history": 10, **data},
        "retriever": {"dim": 8, "epochs": 5},
        "dnr": {"epochs": 3, "lambda_e": 1, "batch_size": 16, "mmd_points": 64, "gen_hidden": 16},
    }
    return cf.from_dict(raw)


@pytest.fixture(scope="session")
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_world(tiny_cfg):
    return pl.build_world(tiny_cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
