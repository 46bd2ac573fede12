import pytest

from flowforge import trainer as tr
from flowforge import worldsim as ws


class _Pretrained:
    """Default-config pretrains, built once per session and keyed by (seed, defect rate)."""

    def __init__(self):
        self.cache = {}

    def __call__(self, seed, rate=0.5):
        key = (seed, rate)
        if key not in self.cache:
            cfg = tr.PretrainConfig(seed=seed, defects=ws.DefectConfig(rate=rate))
            self.cache[key] = tr.pretrain(cfg)[0]
        return self.cache[key]


@pytest.fixture(scope="session")
def pretrained():
    return _Pretrained()


_ACCEPTANCE = []


@pytest.fixture(scope="session")
def verdict():
    """Record one pass/fail line per acceptance criterion; echoed in the terminal summary."""

    def note(criterion, ok, detail):
        line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} - {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return ok

    return note


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
