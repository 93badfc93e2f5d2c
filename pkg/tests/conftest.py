import numpy as np
import pytest

from ubfilter.models import clark_cameron_model, gbm_model, nlm_model, simulate_dataset


def pytest_addoption(parser):
    parser.addoption("--extended", action="store_true", default=False, help="run hours-long rate reproduction checks")


def pytest_configure(config):
    config.addinivalue_line("markers", "extended: hours-long checks, enabled with --extended")
    config.addinivalue_line("markers", "slow: takes more than a few seconds")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--extended"):
        return
    skip = pytest.mark.skip(reason="needs --extended")
    for item in items:
        if "extended" in item.keywords:
            item.add_marker(skip)


_CRITERIA = []


@pytest.fixture
def criterion():
    """Record and print one pass/fail line per acceptance criterion."""

    def report(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} | {detail}"
        _CRITERIA.append(line)
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def gbm():
    return gbm_model()


@pytest.fixture(scope="session")
def cc():
    return clark_cameron_model()


@pytest.fixture(scope="session")
def nlm():
    return nlm_model()


@pytest.fixture(scope="session")
def gbm_data(gbm):
    return simulate_dataset(gbm, 10, data_level=10, rng=np.random.default_rng(2024))


@pytest.fixture(scope="session")
def cc_data(cc):
    return simulate_dataset(cc, 10, data_level=10, rng=np.random.default_rng(7))


@pytest.fixture(scope="session")
def nlm_data(nlm):
    return simulate_dataset(nlm, 10, data_level=10, rng=np.random.default_rng(11))
