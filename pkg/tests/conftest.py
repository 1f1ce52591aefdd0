import json

import numpy as np
import pytest

from dualscope import validate_model

M1 = dict(A=[[-1.0, 1.0], [1.0, -1.0]], H=[[1.0], [-1.0]])
M2 = dict(A=[[-1.0, 0.0, 1.0], [0.0, -1.0, 1.0], [0.5, 0.5, -1.0]], H=[[1.0], [1.0], [0.0]])
M3 = dict(A=np.zeros((3, 3)).tolist(), H=[[1.0], [1.0], [2.0]])
M4 = dict(A=np.zeros((3, 3)).tolist(), H=[[0.0], [1.0], [2.0]])

NAMED = {"M1": M1, "M2": M2, "M3": M3, "M4": M4}


def named_model(name):
    raw = NAMED[name]
    return validate_model(raw["A"], raw["H"])


def random_generator(rng, d, density=0.7):
    """Random valid generator: exponential rates on a random sparsity pattern."""
    A = rng.exponential(1.0, size=(d, d)) * (rng.random((d, d)) < density)
    np.fill_diagonal(A, 0.0)
    np.fill_diagonal(A, -A.sum(axis=1))
    return A


def random_model(rng, d, m, distinct=None):
    """Random model. ``distinct=True`` forces well separated H rows,
    ``False`` forces a collision, ``None`` lets integer levels collide freely."""
    A = random_generator(rng, d)
    if distinct is True:
        levels = rng.permutation(np.arange(-3, 4))[:d] if m == 1 else None
        if m == 1:
            H = levels[:, None].astype(float)
        else:
            H = rng.integers(-2, 3, size=(d, m)).astype(float)
            while len({tuple(r) for r in H}) < d:
                H = rng.integers(-2, 3, size=(d, m)).astype(float)
    else:
        H = rng.integers(-1, 2, size=(d, m)).astype(float)
        if distinct is False and d > 1:
            i, j = rng.choice(d, size=2, replace=False)
            H[j] = H[i]
    return validate_model(A, H)


@pytest.fixture
def m1():
    return named_model("M1")


@pytest.fixture
def m2():
    return named_model("M2")


@pytest.fixture
def m3():
    return named_model("M3")


@pytest.fixture
def m4():
    return named_model("M4")


@pytest.fixture
def model_files(tmp_path):
    paths = {}
    for name, raw in NAMED.items():
        p = tmp_path / f"{name.lower()}.json"
        d, m = np.shape(raw["H"])
        p.write_text(json.dumps({"d": d, "m": m, **raw}))
        paths[name] = p
    return paths


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per acceptance criterion for the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
