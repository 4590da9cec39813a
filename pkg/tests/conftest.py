import numpy as np
import pytest

from trunclab.core import LossSpec, NeuronConfig, init_params


def rel(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def make_problem(seed=0, n=4, n_in=2, n_out=2, T=5, B=3, n_adaptive=0, alpha=0.0, beta=0.0,
                 activation="tanh", kind="mse", last=False):
    """Random small network and batch."""
    rng = np.random.default_rng(seed)
    cfg = NeuronConfig(n_hidden=n, n_in=n_in, n_out=n_out, n_adaptive=n_adaptive, alpha=alpha,
                       beta=beta if n_adaptive else 0.0, activation=activation)
    params = init_params(cfg, rng)
    X = rng.standard_normal((B, T, n_in))
    M = 1 if last else T
    if kind == "mse":
        Y = rng.standard_normal((B, M, n_out))
    else:
        Y = rng.integers(0, n_out, size=(B, M))
    spec = LossSpec.last(kind) if last else LossSpec.full(T, kind)
    return cfg, params, X, Y, spec


@pytest.fixture
def problem():
    return make_problem()


@pytest.fixture
def criterion(request):
    """Record one acceptance line: criterion(number, ok, detail)."""
    lines = request.config.__dict__.setdefault("_acceptance_lines", {})

    def record(number, ok, detail):
        lines[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(lines[number])
        return ok
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.__dict__.get("_acceptance_lines")
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
