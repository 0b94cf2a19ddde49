import numpy as np
import pytest

from ratlab import kernels
from ratlab.autograd import Tape, Tensor
import ratlab.autograd as ag


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar f at x (x is modified in place and restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def check_grads(build, inputs, h=1e-5, rtol=1e-4, floor=1e-6):
    """``build(*tensors)`` returns a tensor; loss = sum(out * w) for a fixed random w.

    Returns the max relative error over coordinates with |grad| > floor.
    """
    rng = np.random.default_rng(123)
    params = [Tensor(x, requires_grad=True) for x in inputs]
    with Tape() as tape:
        out = build(*params)
    w = rng.normal(size=out.shape)

    def f():
        return float(np.sum(build(*[Tensor(p.data) for p in params]).data * w))

    with Tape() as tape:
        loss = ag.sum_(ag.mul(build(*params), Tensor(w)))
    grads = tape.backward(loss, params)
    worst = 0.0
    for p in params:
        num = numeric_grad(f, p.data, h)
        ana = grads[p]
        mask = np.abs(ana) > floor
        if mask.any():
            rel = np.abs(ana[mask] - num[mask]) / np.maximum(np.abs(num[mask]), np.abs(ana[mask]))
            worst = max(worst, float(rel.max()))
        # coordinates below the floor must at least agree in absolute terms
        assert np.allclose(ana[~mask], num[~mask], atol=1e-6)
    assert worst < rtol, worst
    return worst


@pytest.fixture(params=["python", "cython"])
def backend(request):
    prev = kernels.BACKEND
    try:
        kernels.use(request.param)
    except ImportError:
        pytest.skip("compiled kernel not built")
    yield request.param
    kernels.use(prev)


ACCEPTANCE_LINES: list[str] = []


def report_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
