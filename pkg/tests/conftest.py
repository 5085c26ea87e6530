import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def layer_grad_error(layer, x, rng):
    """Worst finite-difference error of a layer under the loss ``sum(R * layer(x))``."""
    from cascadeface.tensor import finite_diff_check

    for p in layer.parameters():
        p.astype(np.float64)
    out = layer.forward(x)
    upstream = rng.normal(size=out.shape)
    dx = layer.backward(upstream)
    params = layer.parameters()

    def loss():
        return float(np.sum(upstream * layer.forward(x)))

    return finite_diff_check(loss, [x] + [p.value for p in params], [dx] + [p.grad for p in params])


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion, then return ``ok``."""
    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} | {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
