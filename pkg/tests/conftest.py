import pytest

RESULTS = pytest.StashKey[dict]()


@pytest.fixture
def record(request):
    """Record the outcome of an acceptance criterion for the end-of-run summary."""
    results = request.config.stash.setdefault(RESULTS, {})

    def _record(n, title, ok, detail):
        results[n] = (title, ok, detail)
        print(f"[{'PASS' if ok else 'FAIL'}] {n}. {title}: {detail}")
        return ok

    return _record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(RESULTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        title, ok, detail = results[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n}. {title}: {detail}")
