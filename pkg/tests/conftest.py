import contextlib
import time

import pytest

_RESULTS = pytest.StashKey[dict]()


class Recorder:
    def __init__(self):
        self.detail = ""


@pytest.fixture
def criterion(request):
    """``with criterion(n, title) as rec:`` records PASS/FAIL (with ``rec.detail``) for the summary."""
    results = request.config.stash.setdefault(_RESULTS, {})

    @contextlib.contextmanager
    def record(n, title):
        rec = Recorder()
        t0 = time.perf_counter()
        try:
            yield rec
        except BaseException as exc:
            results[n] = ("FAIL", title, rec.detail or str(exc).splitlines()[0][:160], time.perf_counter() - t0)
            raise
        results[n] = ("PASS", title, rec.detail, time.perf_counter() - t0)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        status, title, detail, secs = results[n]
        terminalreporter.write_line(f"criterion {n:>2} {status}  {title} ({secs:.1f}s) {detail}")
