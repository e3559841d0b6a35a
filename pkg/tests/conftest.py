import numpy as np
import pytest

from quantdg import data, nn


def central_fd(f, x, h=1e-5):
    """Central finite-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def level_oracle(w, s, q_n, q_p):
    """Brute-force nearest level in [-q_n, q_p]; equal distances go to the larger |k|."""
    best_k, best_d = None, None
    for k in range(-q_n, q_p + 1):
        d = abs(w - k * s)
        if best_d is None or d < best_d or (d == best_d and abs(k) > abs(best_k)):
            best_k, best_d = k, d
    return best_k


@pytest.fixture(scope="session")
def bench():
    return data.default_benchmark(seed=0)


@pytest.fixture
def small_model():
    return nn.init_model(nn.MlpSpec(input_dim=3, hidden_dims=(4,), num_classes=3, seed=7))


# acceptance criteria report lines, printed once at the end of the session
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
