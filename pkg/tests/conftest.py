import pytest

_RESULTS: dict[int, list[str]] = {}


class CriterionLog:
    def __init__(self, number: int):
        self.number = number

    def check(self, name: str, passed: bool, detail: str) -> bool:
        line = f"criterion {self.number:2d} {'PASS' if passed else 'FAIL'}  {name}: {detail}"
        _RESULTS.setdefault(self.number, []).append(line)
        print(line)
        return passed


@pytest.fixture
def criterion():
    return CriterionLog


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        for line in _RESULTS[n]:
            terminalreporter.write_line(line)
