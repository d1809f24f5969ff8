import itertools
import math
import os
from pathlib import Path

import numpy as np
import pytest

REPO = Path(__file__).resolve().parents[1]


def brute_force_shapley(products, bias, mode="anchored"):
    """Average marginal contribution over every ordering (independent of the library)."""
    p = list(products)
    n = len(p)
    alpha = [0.0] * n
    for order in itertools.permutations(range(n)):
        total = 0.0
        prev = max(bias if mode == "anchored" else 0.0, 0.0)
        for size, k in enumerate(order, start=1):
            total += p[k]
            b = bias if mode == "anchored" else bias * size / n
            cur = max(total + b, 0.0)
            alpha[k] += cur - prev
            prev = cur
    count = math.factorial(n)
    return np.array(alpha) / count


def mnist_dir():
    for candidate in (os.environ.get("MNIST_DIR"), REPO / "data" / "mnist", "/root/data/mnist"):
        if candidate and (Path(candidate) / "t10k-labels-idx1-ubyte").exists():
            return Path(candidate)
        if candidate and (Path(candidate) / "t10k-labels-idx1-ubyte.gz").exists():
            return Path(candidate)
    return None


@pytest.fixture(scope="session")
def mnist_path():
    path = mnist_dir()
    if path is None:
        pytest.skip("MNIST IDX files not found; set MNIST_DIR (see scripts/fetch_mnist.sh)")
    return path


ACCEPTANCE_LINES = []


def record_acceptance(number: int, passed: bool, detail: str) -> str:
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
