"""Layer kernels with explicit backward passes.

The batched kernels work on channels-last arrays ``(B, H, W, C)`` because that
layout turns im2col into contiguous slice copies. The unbatched wrappers at the
bottom take and return channels-first ``(C, H, W)`` tensors.

All kernels preserve the dtype of their inputs, so the same code runs in
float32 for training and float64 for gradient checks.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided


class ShapeError(ValueError):
    pass


# --------------------------------------------------------------------------
# convolution

def _conv_out(size: int, k: int, stride: int, padding: int, dim: str) -> int:
    span = size + 2 * padding - k
    if span < 0:
        raise ShapeError(f"kernel {k} exceeds padded input {dim} {size + 2 * padding}")
    if span % stride:
        raise ShapeError(f"stride {stride} does not tile padded input {dim} {size + 2 * padding} with kernel {k}")
    return span // stride + 1


def conv_matrix(w: np.ndarray) -> np.ndarray:
    """(O, C, k, k) -> (k*k*C, O), rows ordered (ki, kj, c) to match im2col."""
    o, c, k, _ = w.shape
    return w.transpose(2, 3, 1, 0).reshape(k * k * c, o)


def conv_forward(x, w, b, stride=1, padding=0):
    """Batched convolution. Returns the output and a cache for backward."""
    if x.ndim != 4:
        raise ShapeError(f"conv input must be (B, H, W, C), got ndim {x.ndim}")
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv weights must be (C_out, C_in, k, k), got {w.shape}")
    bsz, h, wd, c = x.shape
    o, c_in, k, _ = w.shape
    if c_in != c:
        raise ShapeError(f"conv weights expect C_in={c_in} but input has channels={c}")
    if b.shape != (o,):
        raise ShapeError(f"conv bias must have shape ({o},), got {b.shape}")
    ho = _conv_out(h, k, stride, padding, "height")
    wo = _conv_out(wd, k, stride, padding, "width")
    xp = np.zeros((bsz, h + 2 * padding, wd + 2 * padding, c), dtype=x.dtype)
    xp[:, padding:padding + h, padding:padding + wd, :] = x
    # With xp contiguous, the (kj, c) block of kernel row ki is k*c consecutive
    # values of one padded row, so each kernel row is a single strided view.
    cols = np.empty((bsz, ho, wo, k, k * c), dtype=x.dtype)
    sb, sh, sw, sc = xp.strides
    for i in range(k):
        cols[:, :, :, i, :] = as_strided(xp[:, i:], shape=(bsz, ho, wo, k * c),
                                         strides=(sb, stride * sh, stride * sw, sc))
    cols = cols.reshape(bsz * ho * wo, k * k * c)
    out = cols @ conv_matrix(w)
    out += b
    return out.reshape(bsz, ho, wo, o), (cols, x.shape, w, stride, padding)


def conv_backward(grad, cache, need_input_grad=True):
    """Gradients w.r.t. input (or None), weights and bias."""
    cols, xshape, w, stride, padding = cache
    bsz, h, wd, c = xshape
    o, _, k, _ = w.shape
    g2 = grad.reshape(-1, o)
    gw = (cols.T @ g2).reshape(k, k, c, o).transpose(3, 2, 0, 1)
    gb = g2.sum(axis=0)
    if not need_input_grad:
        return None, np.ascontiguousarray(gw), gb
    _, ho, wo, _ = grad.shape
    wrows = conv_matrix(w).reshape(k, k * c, o)
    gxp = np.zeros((bsz, h + 2 * padding, wd + 2 * padding, c), dtype=grad.dtype)
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(k):
        grow = (g2 @ wrows[i].T).reshape(bsz, ho, wo, k, c)
        for j in range(k):
            gxp[:, i:i + hs:stride, j:j + ws:stride, :] += grow[:, :, :, j, :]
    gx = gxp[:, padding:padding + h, padding:padding + wd, :] if padding else gxp
    return np.ascontiguousarray(gx), np.ascontiguousarray(gw), gb


# --------------------------------------------------------------------------
# 2x2 max pooling

def _windows(x):
    bsz, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even height and width, got {h}x{w}")
    r = x.reshape(bsz, h // 2, 2, w // 2, 2, c)
    # row-major order inside each window
    return r[:, :, 0, :, 0, :], r[:, :, 0, :, 1, :], r[:, :, 1, :, 0, :], r[:, :, 1, :, 1, :]


def maxpool_forward(x):
    a, b, c, d = _windows(x)
    out = np.maximum(np.maximum(a, b), np.maximum(c, d))
    return out, (x, out)


def maxpool_backward(grad, cache):
    """Route each upstream value to the first maximal element of its window."""
    x, out = cache
    a, b, c, d = _windows(x)
    ma = a == out
    mb = (b == out) & ~ma
    taken = ma | mb
    mc = (c == out) & ~taken
    md = ~(taken | mc)
    bsz, h, w, ch = x.shape
    gx = np.empty((bsz, h // 2, 2, w // 2, 2, ch), dtype=grad.dtype)
    gx[:, :, 0, :, 0, :] = grad * ma
    gx[:, :, 0, :, 1, :] = grad * mb
    gx[:, :, 1, :, 0, :] = grad * mc
    gx[:, :, 1, :, 1, :] = grad * md
    return gx.reshape(x.shape)


# --------------------------------------------------------------------------
# elementwise and dense

def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(grad, mask):
    return grad * mask


def dense_forward(x, w, b):
    if x.ndim != 2:
        raise ShapeError(f"dense input must be (B, F), got ndim {x.ndim}")
    if w.ndim != 2 or w.shape[1] != x.shape[1]:
        raise ShapeError(f"dense weights {w.shape} do not accept input features F={x.shape[1]}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"dense bias must have shape ({w.shape[0]},), got {b.shape}")
    return x @ w.T + b, (x, w)


def dense_backward(grad, cache):
    x, w = cache
    return grad @ w, grad.T @ x, grad.sum(axis=0)


# --------------------------------------------------------------------------
# loss

def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def batch_cross_entropy(logits, labels):
    """Mean loss over the batch, posteriors, and gradient of the mean loss.

    ``logits`` is ``(B, K)`` and ``labels`` integer class indices ``(B,)``.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite logits")
    z = logits - logits.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logsum
    post = np.exp(logp)
    rows = np.arange(len(labels))
    loss = float(-logp[rows, labels].mean())
    grad = post.copy()
    grad[rows, labels] -= 1
    grad /= len(labels)
    return loss, post, grad


def softmax_cross_entropy(logits, label):
    """Loss, posteriors and logit gradient for one length-K logit vector."""
    logits = np.asarray(logits)
    if logits.ndim != 1:
        raise ShapeError(f"expected a logit vector, got shape {logits.shape}")
    loss, post, grad = batch_cross_entropy(logits[None], np.array([label]))
    return loss, post[0], grad[0]


# --------------------------------------------------------------------------
# unbatched channels-first wrappers

def _to_batch(x):
    if x.ndim != 3:
        raise ShapeError(f"expected a (C, H, W) tensor, got shape {x.shape}")
    return x.transpose(1, 2, 0)[None]


def _from_batch(x):
    return np.ascontiguousarray(x[0].transpose(2, 0, 1))


def conv2d(input, weights, bias, stride=1, padding=0):
    """(C_in, H, W) * (C_out, C_in, k, k) -> (C_out, H', W')."""
    out, _ = conv_forward(_to_batch(np.asarray(input)), np.asarray(weights), np.asarray(bias), stride, padding)
    return _from_batch(out)


def conv2d_backward(input, weights, upstream, stride=1, padding=0):
    input, weights, upstream = map(np.asarray, (input, weights, upstream))
    bias = np.zeros(weights.shape[0], dtype=weights.dtype)
    _, cache = conv_forward(_to_batch(input), weights, bias, stride, padding)
    gx, gw, gb = conv_backward(_to_batch(upstream), cache)
    return _from_batch(gx), gw, gb


def maxpool2x2(input):
    out, _ = maxpool_forward(_to_batch(np.asarray(input)))
    return _from_batch(out)


def maxpool2x2_backward(input, upstream):
    _, cache = maxpool_forward(_to_batch(np.asarray(input)))
    return _from_batch(maxpool_backward(_to_batch(np.asarray(upstream)), cache))


def relu(input):
    return np.maximum(np.asarray(input), 0)


def relu_grad(input, upstream):
    return np.asarray(upstream) * (np.asarray(input) > 0)


def dense(input, weights, bias):
    input = np.asarray(input)
    if input.ndim != 1:
        raise ShapeError(f"dense input must be flat, got shape {input.shape}")
    out, _ = dense_forward(input[None], np.asarray(weights), np.asarray(bias))
    return out[0]


def dense_grad(input, weights, upstream):
    input, weights, upstream = map(np.asarray, (input, weights, upstream))
    gx, gw, gb = dense_backward(upstream[None], (input[None], weights))
    return gx[0], gw, gb
