"""Central finite-difference verification of analytic gradients.

Every differentiable operation and the full model are checked against
this machinery: perturb each parameter element by ±eps, evaluate the loss
twice, and compare the quotient to the gradient the tape produced.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .tensor import GradTape, Tensor


def finite_difference_grad(f: Callable[[], float], t: Tensor, eps: float = 1e-6) -> np.ndarray:
    """d f / d t by central differences, one element at a time.

    ``f`` must re-evaluate the quantity of interest from ``t.data`` on every
    call (mutations of ``t.data`` are visible to it).
    """
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = f()
        flat[i] = orig - eps
        f_minus = f()
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Per-element relative error with an absolute floor, reduced by max."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Iterable[tuple[str, Tensor]],
    eps: float = 1e-6,
    floor: float = 1e-8,
) -> dict[str, float]:
    """Compare tape gradients of ``loss_fn()`` against finite differences.

    Returns the max relative error per parameter name. ``loss_fn`` must be
    deterministic (seeded dropout, fixed inputs) so that repeated calls see
    the same function of the parameters.
    """
    params = list(params)
    for _, p in params:
        p.zero_grad()
    with GradTape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = {name: p.grad.copy() for name, p in params}

    def scalar_loss() -> float:
        return float(loss_fn().data)

    errors = {}
    for name, p in params:
        numeric = finite_difference_grad(scalar_loss, p, eps=eps)
        errors[name] = max_relative_error(analytic[name], numeric, floor=floor)
    return errors
