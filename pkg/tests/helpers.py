"""Shared test utilities."""

import numpy as np

from jointattn import tensor as tn
from jointattn.gradcheck import check_gradients


def param(values) -> tn.Tensor:
    return tn.Tensor(np.array(values, dtype=np.float64), requires_grad=True)


def assert_gradients(loss_fn, params: dict, tolerance: float = 1e-4, n_coords: int = 20, seed: int = 0):
    report = check_gradients(loss_fn, params, tolerance, n_coords, seed=seed)
    assert report.passed, "\n".join(report.lines())
    return report


def reduce(y: tn.Tensor, rng) -> tn.Tensor:
    """Random linear functional of ``y`` so every output entry gets a distinct weight."""
    w = tn.Tensor(rng.uniform(-1, 1, y.shape))
    return tn.sum_axis(tn.mul(y, w))


ACCEPTANCE: dict = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    """Store one acceptance line; conftest prints them in the terminal summary."""
    line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE[criterion] = line
    print(line)
