import contextlib

# criterion number -> (title, passed, detail)
ACCEPTANCE: dict = {}


@contextlib.contextmanager
def criterion(n: int, title: str):
    """Record a pass/fail line for an acceptance criterion; failures still propagate."""
    detail = []
    try:
        yield detail
    except BaseException as e:
        ACCEPTANCE[n] = (title, False, f"{type(e).__name__}: {str(e).splitlines()[0] if str(e) else ''}")
        raise
    ACCEPTANCE[n] = (title, True, "; ".join(str(d) for d in detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {title}" + (f" -- {detail}" if detail else ""))
