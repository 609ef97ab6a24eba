import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def conv_oracle(x, w, b, pad_left, pad_right, stride=1):
    """Nested-loop depthwise cross-correlation."""
    T, C = x.shape
    k = w.shape[0]
    t_out = (T + pad_left + pad_right - k) // stride + 1
    out = np.zeros((t_out, C), dtype=x.dtype)
    for t in range(t_out):
        for c in range(C):
            acc = x.dtype.type(0.0)
            for j in range(k):
                src = t * stride + j - pad_left
                if 0 <= src < T:
                    acc += x[src, c] * w[j, c]
            out[t, c] = acc + (b[c] if b is not None else 0.0)
    return out


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_lines(request):
    """Collector for the one-line verdicts printed after the run."""
    return request.config.stash.setdefault(ACCEPTANCE_KEY, [])


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
