"""Collects acceptance outcomes and prints them as one block at session end."""

_results: dict[int, tuple[bool, str]] = {}


def record(n: int, ok: bool, detail: str) -> None:
    _results[n] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        ok, detail = _results[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_runtest_makereport(item, call):
    # a criterion that crashed before recording still gets its FAIL line
    name = item.name
    if call.when == "call" and call.excinfo is not None and name.startswith("test_c") and "_" in name:
        try:
            n = int(name[6:].split("_", 1)[0])
        except ValueError:
            return
        _results.setdefault(n, (False, f"{call.excinfo.typename}: {call.excinfo.value}"))
