import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from modnas import autodiff as ad

settings.register_profile("modnas", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("modnas")


def numeric_grad(f, arr: np.ndarray, eps: float = 1e-3, idx=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``arr`` (mutated in place and restored)."""
    g = np.zeros_like(arr, dtype=np.float64)
    flat, gflat = arr.reshape(-1), g.reshape(-1)
    for i in (range(flat.size) if idx is None else idx):
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest deviation relative to the gradient's scale."""
    scale = max(float(np.max(np.abs(numeric))), float(np.max(np.abs(analytic))), 1e-8)
    return float(np.max(np.abs(analytic - numeric))) / scale


def check_gradients(build, arrays, eps=1e-3, seed=0):
    """Compare backward() with central differences for every input array.

    ``build(*tensors)`` returns a tensor; a fixed random target turns it into
    a scalar MSE loss.  Returns the worst relative error.
    """
    tensors = [ad.Tensor(a, requires_grad=True) for a in arrays]
    out = build(*tensors)
    target = ad.Tensor(np.random.default_rng(seed).standard_normal(out.shape))

    def loss_value():
        with ad.no_grad():
            return ad.mse_loss(build(*tensors), target).item()

    loss = ad.mse_loss(out, target)
    ad.backward(loss)
    worst = 0.0
    for t in tensors:
        num = numeric_grad(loss_value, t.data, eps)
        worst = max(worst, rel_err(t.grad, num))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# acceptance verdicts, echoed once more at the end of the run

ACCEPTANCE: dict[int, str] = {}


def record_verdict(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[n] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
