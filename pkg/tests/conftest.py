import numpy as np
import pytest

from vitlite import tensor as T


def project(out: T.Tensor, seed: int = 99) -> T.Tensor:
    """Reduce to a scalar with fixed random weights so no gradient is trivially uniform."""
    w = np.random.default_rng(seed).standard_normal(out.shape).astype(out.dtype)
    return T.sum(T.mul(out, w))


def grad_check(fn, arrays, dtype, h=1e-6):
    """Largest relative error between tape gradients in ``dtype`` and float64 central differences.

    ``fn`` maps a list of tensors to an output tensor.  The numeric route
    always evaluates the function in float64.
    """
    tracked = [T.Tensor(a.astype(dtype), requires_grad=True) for a in arrays]
    T.backward(project(fn(tracked)))
    worst = 0.0
    ref = [a.astype(np.float64) for a in arrays]
    for i, t in enumerate(tracked):
        def f():
            return project(fn([T.Tensor(r) for r in ref])).item()

        num = T.numeric_grad(f, ref[i], h)
        worst = max(worst, T.grad_rel_error(t.grad, num))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def tiny_config(**overrides) -> dict:
    """A config dict for a model and dataset small enough to train in a second."""
    base = {
        "seed": 0,
        "model": {"image_size": 16, "patch_size": 4, "depth": 2, "dim": 16, "heads": 2},
        "dataset": {"image_size": 16, "train_size": 32, "test_size": 16, "seed": 1},
        "train": {"epochs": 1, "batch_size": 16, "warmup_epochs": 0},
        "probe": {"epochs": 1, "batch_size": 16, "warmup_epochs": 0, "pool": "gap"},
        "analysis": {"num_examples": 8, "batch_size": 8},
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            base[key] = {**base[key], **value}
        else:
            base[key] = value
    return base


CRITERIA: dict[int, str] = {}


def record(number: int, passed: bool, detail: str) -> None:
    """Note an acceptance outcome for the end-of-run summary, then fail if it did not pass."""
    CRITERIA[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    assert passed, detail


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
