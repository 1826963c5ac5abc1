import pytest

from instances import t4_spec, t4_task


@pytest.fixture
def t4():
    return t4_task()


@pytest.fixture
def t4_point():
    return t4_spec((1.0, 0.0))


@pytest.fixture
def t4_mixed():
    return t4_spec((0.6, 0.4))


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance verdicts as one PASS/FAIL line per criterion."""
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "VERDICTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
