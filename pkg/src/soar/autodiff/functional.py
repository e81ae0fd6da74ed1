"""Composite differentiable ops with hand-written adjoints."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, _make, as_tensor, mul, sqrt, square, sum_, add, matmul

LN_EPS = 1e-5
BN_EPS = 1e-5
BN_MOMENTUM = 0.9
COS_EPS = 1e-8


def softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        x._accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _make(y, (x,), backward, "softmax")


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def backward(g):
        x._accumulate(g - p * g.sum(axis=axis, keepdims=True))

    return _make(y, (x,), backward, "log_softmax")


def _normalize_backward(g_hat, xhat, inv_std, axis):
    m1 = g_hat.mean(axis=axis, keepdims=True)
    m2 = (g_hat * xhat).mean(axis=axis, keepdims=True)
    return inv_std * (g_hat - m1 - xhat * m2)


def layer_norm(x, gain, bias, eps=LN_EPS):
    """Standardize over the last axis, then apply a per-feature affine map."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        if gain.requires_grad:
            gain._accumulate((g * xhat).sum(axis=lead))
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=lead))
        if x.requires_grad:
            x._accumulate(_normalize_backward(g * gain.data, xhat, inv_std, -1))

    return _make(xhat * gain.data + bias.data, (x, gain, bias), backward, "layer_norm")


class BatchNormState:
    """Running statistics for one batch-norm layer (not learned)."""

    def __init__(self, n_features, dtype=np.float64):
        self.running_mean = np.zeros(n_features, dtype=dtype)
        self.running_var = np.ones(n_features, dtype=dtype)


def batch_norm(x, gain, bias, state, training, eps=BN_EPS, momentum=BN_MOMENTUM):
    """Per-feature normalization over every leading axis (tokens act as pixels).

    In training mode batch statistics are used and ``state`` is updated as
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    lead = tuple(range(x.ndim - 1))
    if training:
        mu = x.data.mean(axis=lead, keepdims=True)
        var = x.data.var(axis=lead, keepdims=True)
        m = x.data.size // x.shape[-1]
        unbiased = var.reshape(-1) * (m / (m - 1) if m > 1 else 1.0)
        state.running_mean = momentum * state.running_mean + (1 - momentum) * mu.reshape(-1)
        state.running_var = momentum * state.running_var + (1 - momentum) * unbiased
    else:
        mu = state.running_mean.astype(x.data.dtype)
        var = state.running_var.astype(x.data.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std

    def backward(g):
        if gain.requires_grad:
            gain._accumulate((g * xhat).sum(axis=lead))
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=lead))
        if x.requires_grad:
            g_hat = g * gain.data
            if training:
                x._accumulate(_normalize_backward(g_hat, xhat, inv_std, lead))
            else:
                x._accumulate(g_hat * inv_std)

    return _make(xhat * gain.data + bias.data, (x, gain, bias), backward, "batch_norm")


def _same_pad(k):
    before = (k - 1) // 2
    return before, k - 1 - before


def conv2d(x, kernels, stride=1):
    """Cross-correlation of channels-last images ``(N, H, W, Cin)`` with
    kernels ``(kh, kw, Cin, Cout)``; "same" zero padding, then stride."""
    x, kernels = as_tensor(x), as_tensor(kernels)
    n, h, w, cin = x.shape
    kh, kw, kcin, cout = kernels.shape
    if kcin != cin:
        raise ValueError(f"kernel expects {kcin} input channels, got {cin}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    ph, pw = _same_pad(kh), _same_pad(kw)
    xp = np.pad(x.data, ((0, 0), ph, pw, (0, 0)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    cols = win.reshape(n * ho * wo, cin * kh * kw)
    wmat = kernels.data.transpose(2, 0, 1, 3).reshape(cin * kh * kw, cout)
    out = (cols @ wmat).reshape(n, ho, wo, cout)

    def backward(g):
        g2 = g.reshape(-1, cout)
        if kernels.requires_grad:
            dw = (cols.T @ g2).reshape(cin, kh, kw, cout).transpose(1, 2, 0, 3)
            kernels._accumulate(dw)
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(n, ho, wo, cin, kh, kw)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[..., i, j]
            x._accumulate(dxp[:, ph[0]:ph[0] + h, pw[0]:pw[0] + w, :])

    return _make(out, (x, kernels), backward, "conv2d")


def hardswish(x):
    x = as_tensor(x)
    d = x.data
    out = d * np.clip(d + 3.0, 0.0, 6.0) / 6.0

    def backward(g):
        slope = np.where(d <= -3.0, 0.0, np.where(d >= 3.0, 1.0, (2.0 * d + 3.0) / 6.0))
        x._accumulate(g * slope)

    return _make(out, (x,), backward, "hardswish")


def drop_path(x, rate, training, rng=None):
    """Zero whole samples (axis 0) of a residual branch with probability ``rate``."""
    if not training or rate <= 0.0:
        return as_tensor(x)
    if rng is None:
        raise ValueError("drop_path in training mode needs an rng")
    x = as_tensor(x)
    keep = (rng.random(x.shape[0]) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return mul(x, keep.reshape((-1,) + (1,) * (x.ndim - 1)))


def linear(x, weight, bias=None):
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def cosine_similarity(u, v, axis=-1):
    """u.v / (|u| |v| + 1e-8) along ``axis``."""
    u, v = as_tensor(u), as_tensor(v)
    dot = np.sum(u.data * v.data, axis=axis, keepdims=True)
    nu = np.sqrt(np.sum(u.data * u.data, axis=axis, keepdims=True))
    nv = np.sqrt(np.sum(v.data * v.data, axis=axis, keepdims=True))
    den = np.maximum(nu * nv, COS_EPS)
    # unit vectors; a zero vector gets the zero subgradient of its norm
    hu = np.divide(u.data, nu, out=np.zeros_like(u.data), where=nu > 0)
    hv = np.divide(v.data, nv, out=np.zeros_like(v.data), where=nv > 0)

    def backward(g):
        g = np.expand_dims(g, axis) / den
        r = np.where(nu * nv > COS_EPS, dot / den, 0.0)   # clamped denominator is constant
        u._accumulate(g * (v.data - r * nv * hu))
        v._accumulate(g * (u.data - r * nu * hv))

    return _make(np.squeeze(dot / den, axis=axis), (u, v), backward, "cosine")


def flatten_tokens(x):
    """(N, H, W, C) -> (N, H*W, C), row-major token order."""
    n, h, w, c = x.shape
    return x.reshape(n, h * w, c)


__all__ = [
    "softmax", "log_softmax", "layer_norm", "batch_norm", "BatchNormState", "conv2d",
    "hardswish", "drop_path", "linear", "cosine_similarity", "flatten_tokens", "Tensor",
]
