import pytest

from tests import acceptance_registry as registry


def pytest_terminal_summary(terminalreporter):
    if not registry.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(registry.RESULTS, key=lambda k: (int(k.split(".")[0]), k)):
        ok, detail = registry.RESULTS[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {key}: {detail}")


@pytest.fixture
def rng():
    import numpy as np

    return np.random.default_rng(12345)
