import pytest
from factories import tiny_config

from modula import training as tr

_ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    """Remember one acceptance verdict; printed at the end of the session and immediately."""
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}"
    _ACCEPTANCE[number] = line
    print(line)


@pytest.fixture
def criterion():
    return record_criterion


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[number])


@pytest.fixture(scope="session")
def tiny():
    cfg = tiny_config()
    data = tr.build_data(cfg)
    base = tr.load_base(cfg, data)
    return cfg, data, base


@pytest.fixture(scope="session")
def tiny_run(tiny):
    cfg, data, base = tiny
    return tr.run_paradigm(cfg, base=base, data=data)
