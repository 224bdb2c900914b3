"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad, reset_tape


@dataclass(frozen=True)
class Worst:
    error: float
    input_index: int
    element: int
    analytic: float
    numeric: float


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    max_elements: int | None = None,
    seed: int = 0,
) -> float:
    return grad_check_worst(fn, inputs, eps, max_elements, seed).error


def grad_check_worst(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    max_elements: int | None = None,
    seed: int = 0,
) -> Worst:
    """Largest relative error between tape gradients and central differences.

    ``fn`` maps ``inputs`` to a scalar. Inputs should be float64. The error of
    one element is ``|a - n| / max(1e-8, |a| + |n|)``. When ``max_elements`` is
    set, each input is probed at that many randomly chosen positions instead
    of every position.
    """
    reset_tape()
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = fn(*inputs)
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    rng = np.random.default_rng(seed)
    worst = Worst(0.0, -1, -1, 0.0, 0.0)
    with no_grad():
        for k, (t, a) in enumerate(zip(inputs, analytic)):
            flat = t.data.reshape(-1)
            if max_elements is None or max_elements >= flat.size:
                probe = range(flat.size)
            else:
                probe = rng.choice(flat.size, size=max_elements, replace=False)
            ga = a.reshape(-1)
            for i in probe:
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(fn(*inputs).data)
                flat[i] = orig - eps
                fm = float(fn(*inputs).data)
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                err = abs(ga[i] - num) / max(1e-8, abs(ga[i]) + abs(num))
                if err > worst.error or not np.isfinite(err):
                    worst = Worst(float(err), k, int(i), float(ga[i]), float(num))
    return worst
