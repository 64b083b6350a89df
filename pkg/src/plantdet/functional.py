"""Fused neural-network kernels with hand-written backward passes.

Each function takes and returns :class:`~plantdet.tensor.Tensor` objects and
records exactly one tape node, which keeps the graph short for the conv and
attention heavy parts of the detector.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError
from .tensor import Tensor, _sigmoid_np, as_tensor, make_result

GELU_C = math.sqrt(2.0 / math.pi)
BN_MOMENTUM = 0.03
BN_EPS = 1e-3


def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _check_window(op: str, shape, kh: int, kw: int, stride: int, pad: int) -> None:
    if stride < 1:
        raise DimensionError(f"{op}: stride must be >= 1, got {stride}")
    h, w = shape[-2:]
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise DimensionError(
            f"{op}: kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x[B,Cin,H,W]`` with ``weight[Cout,Cin,kh,kw]``."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    b, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, weight {weight.shape}")
    _check_window("conv2d", x.shape, kh, kw, stride, padding)
    ho, wo = _out_size(h, kh, stride, padding), _out_size(w, kw, stride, padding)

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    wd = weight.data
    if kh == 1 and kw == 1:
        cols = xp[:, :, ::stride, ::stride][:, :, :ho, :wo]
        out = np.einsum("bchw,oc->bohw", cols, wd[:, :, 0, 0], optimize=True)
    else:
        cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        cols = cols[:, :, :ho, :wo]
        out = np.tensordot(cols, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)
    out = np.ascontiguousarray(out)
    hp, wp = xp.shape[2:]

    def grad_fn(g):
        gw = gx = gb = None
        if weight.requires_grad:
            if kh == 1 and kw == 1:
                gw = np.einsum("bohw,bchw->oc", g, cols, optimize=True).reshape(wd.shape)
            else:
                gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        if x.requires_grad:
            gxp = np.zeros((b, cin, hp, wp), dtype=g.dtype)
            # gcols[c, i, j, b, ho, wo]
            gcols = np.tensordot(wd, g, axes=([0], [1]))
            he, we = stride * (ho - 1) + 1, stride * (wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + he:stride, j:j + we:stride] += gcols[:, i, j].transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result("conv2d", out, parents, grad_fn)


def maxpool2d(x: Tensor, kernel: int, stride: int | None = None, padding: int = 0) -> Tensor:
    """Window max; the gradient goes to the first maximal element in row-major order."""
    stride = kernel if stride is None else stride
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects a 4-D input, got {x.shape}")
    _check_window("maxpool2d", x.shape, kernel, kernel, stride, padding)
    b, c, h, w = x.shape
    ho, wo = _out_size(h, kernel, stride, padding), _out_size(w, kernel, stride, padding)
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                    constant_values=-np.inf)
    hp, wp = xp.shape[2:]
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :ho, :wo].reshape(b, c, ho, wo, kernel * kernel)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        rows = np.arange(ho).reshape(1, 1, ho, 1) * stride + arg // kernel
        cols = np.arange(wo).reshape(1, 1, 1, wo) * stride + arg % kernel
        plane = (np.arange(b).reshape(b, 1, 1, 1) * c + np.arange(c).reshape(1, c, 1, 1))
        flat = (plane * hp + rows) * wp + cols
        gxp = np.bincount(flat.ravel(), weights=g.ravel(), minlength=b * c * hp * wp)
        gxp = gxp.reshape(b, c, hp, wp).astype(g.dtype, copy=False)
        return (gxp[:, :, padding:padding + h, padding:padding + w],)

    return make_result("maxpool2d", np.ascontiguousarray(out), (x,), grad_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (biased variance), then apply the affine map."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} != ({d},)")
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data
    lead = tuple(range(x.ndim - 1))

    def grad_fn(g):
        dxhat = g * gd
        gx = inv / d * (d * dxhat - dxhat.sum(-1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_result("layer_norm", out, (x, gamma, beta), grad_fn)


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                 running_var: np.ndarray, training: bool, momentum: float = BN_MOMENTUM,
                 eps: float = BN_EPS) -> Tensor:
    """Per-channel batch normalization of ``x[B,C,H,W]``.

    In training mode the batch statistics normalize the input and the running
    buffers are updated in place (unbiased variance, PyTorch convention).
    """
    if x.ndim != 4:
        raise DimensionError(f"batch_norm2d expects a 4-D input, got {x.shape}")
    b, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm2d affine shapes {gamma.shape}/{beta.shape} != ({c},)")
    gd = gamma.data.reshape(1, c, 1, 1)
    xd = x.data
    if not training:
        inv = (1.0 / np.sqrt(running_var + eps)).astype(xd.dtype).reshape(1, c, 1, 1)
        xhat = (xd - running_mean.astype(xd.dtype).reshape(1, c, 1, 1)) * inv
        out = xhat * gd + beta.data.reshape(1, c, 1, 1)

        def eval_grad(g):
            return g * gd * inv, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return make_result("batch_norm2d", out, (x, gamma, beta), eval_grad)

    n = b * h * w
    if n < 2:
        raise ContractError("batch_norm2d in train mode needs B*H*W >= 2 (degenerate batch)")
    mu = xd.mean(axis=(0, 2, 3), keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gd + beta.data.reshape(1, c, 1, 1)
    running_mean *= 1.0 - momentum
    running_mean += momentum * mu.reshape(c)
    running_var *= 1.0 - momentum
    running_var += momentum * var.reshape(c) * (n / (n - 1))

    def train_grad(g):
        dxhat = g * gd
        gx = inv / n * (n * dxhat - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return make_result("batch_norm2d", out, (x, gamma, beta), train_grad)


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    xd = x.data
    s = _sigmoid_np(xd)
    return make_result("silu", xd * s, (x,), lambda g: (g * s * (1.0 + xd * (1.0 - s)),))


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    xd = x.data
    inner = GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def grad_fn(g):
        dinner = GELU_C * (1.0 + 3.0 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return make_result("gelu", out, (x,), grad_fn)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "silu":
        return silu(x)
    if kind == "gelu":
        return gelu(x)
    if kind == "sigmoid":
        return x.sigmoid()
    raise ContractError(f"unknown activation {kind!r}")


def softmax_lastdim(x: Tensor) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)
    return make_result("softmax", out, (x,),
                       lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x[..., in] @ weight[in, out] (+ bias[out])``."""
    y = x @ weight
    return y if bias is None else y + bias


def mse(a: Tensor, b) -> Tensor:
    d = a - as_tensor(b)
    return (d * d).mean()
