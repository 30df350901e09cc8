import numpy as np
import pytest

from udavt import tensor as tn
from udavt.tensor import Tensor


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


def grad_and_fd(f, x: np.ndarray, step: float = 1e-5):
    """Analytic gradient of scalar ``f`` at ``x`` and the central-difference estimate."""
    t = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    f(t).backward()
    return t.grad, tn.finite_difference_grad(f, x, step)


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def record_criterion(label: str, ok: bool, detail: str) -> bool:
    ACCEPTANCE_LINES.append(f"{label}: {'PASS' if ok else 'FAIL'} | {detail}")
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
