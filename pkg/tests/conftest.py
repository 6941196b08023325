import numpy as np
import pytest

from dsthcn.skeleton import SkeletonDefinition, chain_skeleton, from_edges

ACCEPTANCE = []


def record(criterion, ok, detail=""):
    ACCEPTANCE.append((criterion, bool(ok), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {criterion}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_tree(rng, v):
    parent = [0] + [int(rng.integers(j)) for j in range(1, v)]
    pose = rng.normal(size=(v, 3))
    return SkeletonDefinition(f"rand{v}", tuple(parent), int(rng.integers(v)), pose)


@pytest.fixture
def star5():
    pose = np.array([[0, 0, 0], [1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0]], float)
    return from_edges("star5", 5, [(0, 1), (0, 2), (0, 3), (0, 4)], 0, pose)


@pytest.fixture
def chain5():
    return chain_skeleton(5)


def module_grad_check(module, forward, backward, inputs, rng, tolerance=1e-4):
    """Finite-difference check of a module's input and parameter gradients.

    ``forward()`` reads ``inputs`` (a name -> array dict) and returns an array;
    ``backward(r)`` returns the input gradients as a dict for upstream ``r``.
    """
    from dsthcn.numcore import grad_check

    r = rng.normal(size=forward().shape)
    module.zero_grad()
    analytic = dict(backward(r))
    arrays = dict(inputs)
    for name, p in module.named_parameters():
        arrays[name] = p.value
        analytic[name] = p.grad.copy()
    return grad_check(lambda: float((forward() * r).sum()), arrays, analytic, tolerance=tolerance)


def random_dataset(r):
    """Random SKL-representable dataset; may hold zero samples."""
    from dsthcn.data import Dataset, SkeletonSample

    k = int(r.integers(1, 6))
    n = int(r.integers(0, 6))
    v = int(r.integers(1, 6))
    skel = ["custom", "ntu25", "ucla20"][int(r.integers(3))]
    samples = [
        SkeletonSample(int(r.integers(k)),
                       r.normal(size=(int(r.integers(1, 4)), int(r.integers(1, 5)), v)).astype(np.float32))
        for _ in range(n)
    ]
    return Dataset(skel, k, samples)
