from pathlib import Path

import pytest

from relmatch.backends import FunctionBackend
from relmatch.catalogs import esg_catalog
from relmatch.model import load_table
from relmatch.synthetic import generate_taxonomy, load_truth

FIXTURES = Path(__file__).parent / "fixtures"
CHARGER = FIXTURES / "charger"
GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture
def catalog():
    return esg_catalog()


@pytest.fixture
def charger_source():
    return load_table(CHARGER / "source.csv", "sources")


@pytest.fixture
def charger_targets():
    return load_table(CHARGER / "target.csv", "targets")


@pytest.fixture
def charger_truth():
    return load_truth(CHARGER / "truth.json")


@pytest.fixture(scope="session")
def corpus42():
    return generate_taxonomy(42)


def verdict_text(decisions):
    """Well-formed backend reply for {candidate_id: bool}."""
    lines = ["reasoning goes here", "VERDICTS:"]
    lines += [f"{cid}: {'YES' if yes else 'NO'}" for cid, yes in decisions.items()]
    return "\n".join(lines)


def scripted_backend(confirm):
    """Backend confirming the ids for which ``confirm(request, position, cid)`` is true."""

    def reply(request):
        return verdict_text(
            {cid: bool(confirm(request, i, cid)) for i, cid in enumerate(request.candidate_ids)}
        )

    return FunctionBackend(reply)
