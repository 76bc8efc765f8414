"""Central finite-difference gradient checks."""

import numpy as np

from . import tensor as T


def numerical_grad(fn, x, step=1e-5):
    """d fn() / d x by central differences, perturbing ``x.data`` in place."""
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    with T.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = fn().item()
            flat[i] = orig - step
            lo = fn().item()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * step)
    return grad


def relative_error(analytic, numeric, floor=1e-8):
    diff = np.linalg.norm(analytic - numeric)
    return diff / max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)


def check_gradients(fn, inputs, step=1e-5):
    """Relative error between backprop and finite differences for each named input.

    ``inputs`` maps names to leaf tensors with ``requires_grad=True``; ``fn``
    rebuilds the scalar output from their current values.
    """
    for x in inputs.values():
        x.grad = None
    out = fn()
    T.backward(out)
    errors = {}
    for name, x in inputs.items():
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
        errors[name] = relative_error(analytic, numerical_grad(fn, x, step))
    return errors
