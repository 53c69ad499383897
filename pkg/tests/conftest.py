import pytest

_CRITERIA: list[str] = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion.

    Usage: ``with criterion(3, "kd fixed point") as note: ...``; ``note(str)``
    appends a measured value to the line.
    """

    class _Check:
        def __init__(self, number, title):
            self.number, self.title, self.details = number, title, []

        def __call__(self, detail):
            self.details.append(str(detail))

        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            status = "PASS" if exc_type is None else "FAIL"
            extra = f" ({'; '.join(self.details)})" if self.details else ""
            line = f"criterion {self.number:>2} {status}: {self.title}{extra}"
            _CRITERIA.append(line)
            print(line, flush=True)
            return False

    return _Check


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
