import contextlib
import time

import pytest

ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Context manager recording one acceptance line: PASS/FAIL plus wall time."""
    results = request.config.stash.setdefault(ACCEPTANCE, {})

    @contextlib.contextmanager
    def record(number: int, title: str):
        start = time.perf_counter()
        try:
            yield
        except BaseException as exc:
            results[number] = ("FAIL", title, time.perf_counter() - start, f"{type(exc).__name__}: {exc}".splitlines()[0])
            raise
        results[number] = ("PASS", title, time.perf_counter() - start, "")

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        status, title, seconds, detail = results[number]
        line = f"[{status}] criterion {number:2d}: {title} ({seconds:.2f}s)"
        terminalreporter.write_line(line + (f" -- {detail}" if detail else ""))
