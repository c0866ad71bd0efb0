import numpy as np
import pytest

from eoflow.flow import build_model


def random_model(dim, seed=0, n_blocks=2, width=16, scale=0.3):
    """Flow with randomised coupling outputs so it is far from the identity."""
    model = build_model(dim, n_blocks=n_blocks, mlp_width=width, seed=seed)
    rng = np.random.default_rng(seed + 1000)
    for key, value in model.params.items():
        if key.startswith("coupling"):
            model.params[key] = value + scale * rng.standard_normal(value.shape)
    return model


def central_jacobian(fn, x, h=1e-5):
    """Dense Jacobian ``d fn / d x`` by central differences; ``fn`` maps (D,) -> (M,)."""
    x = np.asarray(x, float)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((np.asarray(fn(x + e)) - np.asarray(fn(x - e))) / (2 * h))
    return np.stack(cols, axis=-1)


def central_gradient(fn, x, h=1e-5):
    x = np.asarray(x, float)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = h
        g[idx] = (fn(x + e) - fn(x - e)) / (2 * h)
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES = []


def report(criterion, ok, detail):
    line = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
