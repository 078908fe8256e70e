import random

import pytest

from porch.dataset import load_dataset, sample_cycle
from porch.ledger import Chain, create_block


@pytest.fixture(scope="session")
def dataset():
    return load_dataset()


@pytest.fixture(scope="session")
def build_chain(dataset):
    def build(n_blocks, seed=0, mode=None):
        chain = Chain.new() if mode is None else Chain.new(mode)
        for cycle in range(1, n_blocks + 1):
            sets = sample_cycle(dataset, cycle, seed)
            payload = [sets[k] for k in sorted(sets)]
            chain = chain.append(create_block(chain.tip, payload, cycle * 15000, chain.hash_mode))
        return chain

    return build


@pytest.fixture
def rng():
    return random.Random(1234)


# --- acceptance summary: one PASS/FAIL line per criterion ---------------------

_criteria: dict[int, dict] = {}


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    number, title = marker
    entry = _criteria.setdefault(number, {"title": title, "ok": True, "ran": False})
    if report.when == "call" or report.outcome != "passed":
        entry["ran"] = True
        entry["ok"] = entry["ok"] and report.outcome == "passed"


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = tuple(marker.args)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        status = "PASS" if entry["ok"] and entry["ran"] else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {status}  {entry['title']}")
