import numpy as np
import pytest
import torch

torch.set_num_threads(1)

_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def criterion(request):
    """``criterion(n, title, ok, detail)`` prints and records one pass/fail line, then asserts ``ok``."""

    def record(n, title, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2}: {title}" + (f" | {detail}" if detail else "")
        print(line)
        request.config.stash.setdefault(_ACCEPTANCE, {})[n] = line
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
