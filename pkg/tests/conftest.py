import numpy as np
import pytest

from pst import tensor as T


def central_diff(f, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. ``arr``, perturbed in place."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        fp = f()
        arr[i] = old - h
        fm = f()
        arr[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max |a-b| / max(|a|, |b|, floor), taken globally."""
    scale = max(np.abs(a).max(), np.abs(b).max(), floor)
    return float(np.abs(a - b).max() / scale)


def tape_grad(build, inputs):
    """Run ``build(*inputs)`` under a tape and return the gradients of the inputs."""
    with T.Tape() as tape:
        loss = build(*inputs)
    g = T.backward(tape, loss)
    return [g[t] if t in g else np.zeros(t.shape) for t in inputs]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance verdicts ---------------------------------------------------------------

_VERDICTS = pytest.StashKey[dict]()
N_CRITERIA = 10


@pytest.fixture
def verdict(request):
    """``verdict(n, ok, detail)`` records criterion ``n`` and fails the test if not ok."""
    store = request.config.stash.setdefault(_VERDICTS, {})

    def record(n: int, ok: bool, detail: str) -> None:
        prev = store.get(n, (True, []))
        store[n] = (prev[0] and bool(ok), prev[1] + [detail])
        assert ok, f"criterion {n}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter, config):
    store = config.stash.get(_VERDICTS, None)
    if store is None:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        if n not in store:
            terminalreporter.write_line(f"criterion {n:2d}: NOT RUN  (deselected, or errored before its verdict)")
            continue
        ok, details = store[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {'; '.join(details)}")
