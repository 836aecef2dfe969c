"""Central finite-difference checks for the autograd engine.

The numerical side always evaluates the function in float64 so that a
float32 analytic gradient is compared against a reference whose own error
is far below the tolerance.
"""
from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor


def numerical_grad(fn, inputs, wrt, step):
    """d fn / d inputs[wrt] by central differences in float64."""
    base = [np.array(x, dtype=np.float64) for x in inputs]
    grad = np.zeros_like(base[wrt])
    with ag.default_dtype(np.float64), ag.no_grad():
        flat = base[wrt].reshape(-1)
        g = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            plus = float(fn(*[Tensor(x) for x in base]).data.sum())
            flat[i] = orig - step
            minus = float(fn(*[Tensor(x) for x in base]).data.sum())
            flat[i] = orig
            g[i] = (plus - minus) / (2 * step)
    return grad


def analytic_grads(fn, inputs, dtype):
    with ag.default_dtype(dtype):
        tensors = [Tensor(x, requires_grad=True) for x in inputs]
        out = fn(*tensors)
        if out.size != 1:
            out = out.sum()
        out.backward()
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]


def relative_error(analytic, numeric):
    num = np.linalg.norm(np.asarray(analytic, dtype=np.float64) - numeric)
    den = max(np.linalg.norm(numeric), np.linalg.norm(analytic), 1e-12)
    return float(num / den)


def gradcheck(fn, inputs, dtype=np.float32, step=None, wrt=None):
    """Largest relative gradient error over the chosen inputs.

    ``fn`` maps tensors to a tensor; non-scalar outputs are summed.  Default
    steps: 1e-3 for float32 runs, 1e-5 for float64 runs.
    """
    if step is None:
        step = 1e-3 if dtype == np.float32 else 1e-5
    wrt = range(len(inputs)) if wrt is None else wrt
    grads = analytic_grads(fn, inputs, dtype)
    return max(relative_error(grads[i], numerical_grad(fn, inputs, i, step)) for i in wrt)
