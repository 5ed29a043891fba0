import numpy as np
import pytest

from actmad import tensor as T


def numeric_grad(f, arr: np.ndarray, idx, eps: float = 1e-5) -> float:
    """Central difference of scalar ``f()`` w.r.t. ``arr[idx]`` (mutated in place, then restored)."""
    orig = arr[idx]
    arr[idx] = orig + eps
    up = f()
    arr[idx] = orig - eps
    down = f()
    arr[idx] = orig
    return (up - down) / (2 * eps)


def rel_err(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_grads(loss_fn, tensors, n_coords: int = 20, seed: int = 0, eps: float = 1e-5):
    """Compare analytic gradients of ``loss_fn()`` against central differences.

    Returns the worst relative error over ``n_coords`` random coordinates per tensor.
    """
    rng = np.random.default_rng(seed)
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [t.grad.copy() for t in tensors]
    worst = 0.0
    with T.no_grad():
        for t, g in zip(tensors, analytic):
            flat = t.data.reshape(-1)
            for i in rng.choice(flat.size, size=min(n_coords, flat.size), replace=False):
                num = numeric_grad(lambda: loss_fn().item(), flat, i, eps)
                worst = max(worst, rel_err(g.reshape(-1)[i], num))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting -----------------------------------------------------------
_CRITERIA: dict[int, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and rep.passed:
        return
    number, title = marker.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    status = "PASS" if rep.passed else "FAIL"
    _CRITERIA[number] = f"criterion {number:>2} {status}  {title}" + (f"  [{detail}]" if detail else "")


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
