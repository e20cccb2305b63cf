import numpy as np
import pytest

from hpcfnet.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def project():
    """Random fixed linear functional of a tensor, so upstream grads are non-trivial."""

    def _project(out: Tensor, seed: int = 99) -> Tensor:
        r = np.random.default_rng(seed).normal(size=out.shape)
        return (out * Tensor(r.astype(out.dtype))).sum()

    return _project


_VERDICTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_VERDICTS] = {}


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    report = yield
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when == "teardown" or (report.when == "setup" and report.passed):
        return report
    number, title = mark.args
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    status = "PASS" if report.passed else "FAIL"
    item.config.stash[_VERDICTS][number] = f"{status} [{number}] {title}" + (f": {detail}" if detail else "")
    return report


def pytest_terminal_summary(terminalreporter, config):
    verdicts = config.stash[_VERDICTS]
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for number in sorted(verdicts):
            terminalreporter.write_line(verdicts[number])
