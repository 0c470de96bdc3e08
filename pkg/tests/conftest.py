import itertools

import numpy as np
import pytest

from merl_maze.env import worked_example_context, generate_dataset


@pytest.fixture(scope="session")
def small_dataset():
    return generate_dataset(3, n=5, k=5, n_train_val=20, n_test=10)


@pytest.fixture(scope="session")
def desk_dataset():
    return generate_dataset(0)


@pytest.fixture
def example_ctx():
    return worked_example_context()


def all_sequences(length):
    return [tuple(s) for s in itertools.product(range(4), repeat=length)]


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def central_diff(f, x, eps=1e-6):
    x = np.asarray(x, float)
    out = np.zeros((np.size(f(x)), x.size))
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = eps
        out[:, i] = (np.atleast_1d(f(x + e)) - np.atleast_1d(f(x - e))) / (2 * eps)
    return out


VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        VERDICTS.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
