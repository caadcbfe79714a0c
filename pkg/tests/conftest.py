import numpy as np
import pytest

from lrds.data import BlobSpec, circle_centers, gen_blobs
from lrds.losses import Batch


def fd_gradient(f, theta, h=1e-5, points=3):
    """Central finite differences of a scalar function (3- or 5-point stencil)."""
    g = np.zeros_like(theta)
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = h
        if points == 5:
            g[j] = (8 * (f(theta + e) - f(theta - e)) - (f(theta + 2 * e) - f(theta - 2 * e))) / (12 * h)
        else:
            g[j] = (f(theta + e) - f(theta - e)) / (2 * h)
    return g


def max_rel_error(a, b, floor=1e-6):
    """max_j |a_j - b_j| / max(|a_j|, |b_j|, floor)."""
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def random_batch(rng, n, d, c):
    return Batch(rng.normal(size=(n, d)), rng.integers(c, size=n))


@pytest.fixture
def blobs3():
    return gen_blobs(BlobSpec(3, 30, circle_centers(3, 3.0), 0.8, 0.0, 11))


# acceptance criteria results, printed at the end of the run
ACCEPTANCE = []


def record_criterion(number, ok, detail, extra=()):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE.append((number, "\n".join([line, *extra])))
    print(line, *extra, sep="\n")
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
