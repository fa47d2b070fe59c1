import numpy as np
import pytest

# one (criterion, passed, detail) entry per acceptance check, echoed after the run
ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def record(capsys):
    def _record(criterion, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'} criterion {criterion}: {detail}"
        ACCEPTANCE.append((str(criterion), passed, line))
        with capsys.disabled():
            print("\n" + line)
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, _, line in sorted(ACCEPTANCE, key=lambda e: (len(e[0]), e[0])):
            terminalreporter.write_line(line)
