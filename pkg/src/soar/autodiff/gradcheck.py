"""Central-difference verification of analytic gradients."""
import numpy as np

from .tensor import Tensor

SCALE_FLOOR = 1e-6


def numeric_grad(fn, tensor, eps=1e-5, coords=None):
    """Central differences of scalar ``fn()`` w.r.t. selected flat coordinates."""
    flat = tensor.data.reshape(-1)
    if coords is None:
        coords = range(flat.size)
    out = {}
    for k in coords:
        orig = flat[k]
        flat[k] = orig + eps
        fp = float(fn().data)
        flat[k] = orig - eps
        fm = float(fn().data)
        flat[k] = orig
        out[k] = (fp - fm) / (2 * eps)
    return out


def grad_check(fn, inputs, eps=1e-5, max_coords=None, rng=None, report=False):
    """Compare backprop gradients of scalar ``fn()`` against central differences.

    The error for each input tensor is ``max|analytic - numeric|`` divided by
    the max-norm of the full gradient over all inputs (floored at 1e-6).  A
    tensor whose true gradient vanishes (a key bias under softmax, say) is
    thus judged against the gradient's overall scale rather than its own
    rounding noise.  Returns the worst error across inputs, or
    ``(worst, per_input)`` when ``report`` is set.

    ``max_coords`` limits the number of probed coordinates per tensor (chosen
    with ``rng``), which keeps checks over whole models affordable.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    for t in inputs:
        if t.data.dtype != np.float64:
            raise TypeError("grad_check needs float64 tensors")
        t.grad = None
    root = fn()
    root.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    rng = rng if rng is not None else np.random.default_rng(0)
    diffs, scale = [], SCALE_FLOOR
    for t, a in zip(inputs, analytic):
        n = t.data.size
        if max_coords is not None and n > max_coords:
            coords = np.sort(rng.choice(n, size=max_coords, replace=False))
        else:
            coords = np.arange(n)
        num = numeric_grad(fn, t, eps=eps, coords=coords)
        a_sel = a.reshape(-1)[coords]
        n_sel = np.array([num[k] for k in coords])
        scale = max(scale, np.abs(a_sel).max(initial=0.0), np.abs(n_sel).max(initial=0.0))
        diffs.append(np.abs(a_sel - n_sel).max(initial=0.0))
    errors = [float(d / scale) for d in diffs]
    worst = max(errors, default=0.0)
    return (worst, errors) if report else worst
