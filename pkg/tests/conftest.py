import time
from pathlib import Path

import numpy as np
import pytest

from decodesweep.backend import FixedTableBackend, train_ngram_backend
from decodesweep.corpus import Tokenizer, split_documents

DATA = Path(__file__).parent / "data"

_ACCEPTANCE: dict[str, str] = {}
SESSION_START = time.monotonic()


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(label): exit criterion reported in the acceptance summary")


def pytest_collection_modifyitems(items):
    # the wall-time criterion has to observe every other test
    def last(item):
        marker = item.get_closest_marker("acceptance")
        return bool(marker and marker.kwargs.get("last"))

    items.sort(key=last)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    label = marker.args[0]
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _ACCEPTANCE[label] = "PASS" if report.outcome == "passed" else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[0][2:])):
        terminalreporter.write_line(f"[{_ACCEPTANCE[label]}] {label}")


@pytest.fixture(scope="session")
def toy():
    """Two-token toy: P(A)=0.6; P(A|A)=P(B|A)=0.5; P(A|B)=0.9."""
    return FixedTableBackend("toy", ["A", "B"], {(): [0.6, 0.4], (0,): [0.5, 0.5], (1,): [0.9, 0.1]})


@pytest.fixture(scope="session")
def natural_docs():
    tok = Tokenizer()
    train = [tok.tokenize(d) for d in split_documents((DATA / "train.txt").read_text(encoding="utf-8"))]
    heldout = [tok.tokenize(d) for d in split_documents((DATA / "heldout.txt").read_text(encoding="utf-8"))]
    return train, heldout


@pytest.fixture(scope="session")
def small_ngram(natural_docs):
    train, _ = natural_docs
    return train_ngram_backend(train[:300], order=2, smoothing=0.05, name="small2")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
