import numpy as np
import pytest

from scoredistill import ndgrad as nd


@pytest.fixture
def f64():
    with nd.precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA: dict[int, list[tuple[bool, str]]] = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records one check towards acceptance line ``n``."""
    def record(n: int, ok: bool, detail: str = "") -> bool:
        _CRITERIA.setdefault(n, []).append((bool(ok), detail))
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
        return bool(ok)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        parts = _CRITERIA[n]
        bad = [d for ok, d in parts if not ok]
        status = "PASS" if not bad else "FAIL"
        line = f"criterion {n}: {status} ({len(parts) - len(bad)}/{len(parts)} checks)"
        if bad:
            line += f"; first failing: {bad[0]}"
        terminalreporter.write_line(line)
