"""Pure-numpy reference kernels.

Same signatures as the compiled ``_kernels`` extension. Used when the
extension is unavailable or when ``DROPGEN_LAB_PURE=1`` is set.
"""

import numpy as np


def conv1d_forward(x, w, b):
    """'Same'-padded 1-D cross-correlation.

    x: (B, C, L), w: (O, C, K) with K odd, b: (O,). Returns (B, O, L).
    """
    B, C, L = x.shape
    O, _, K = w.shape
    pad = K // 2
    if pad:
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    else:
        xp = x
    y = np.empty((B, O, L))
    y[...] = b[None, :, None]
    for k in range(K):
        y += np.matmul(w[:, :, k], xp[:, :, k:k + L])
    return y


def conv1d_backward(gy, x, w):
    """Gradients of :func:`conv1d_forward` w.r.t. input, kernel and bias."""
    B, C, L = x.shape
    O, _, K = w.shape
    pad = K // 2
    if pad:
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    else:
        xp = x
    gw = np.empty_like(w)
    gxp = np.zeros((B, C, L + 2 * pad))
    for k in range(K):
        gw[:, :, k] = np.tensordot(gy, xp[:, :, k:k + L], axes=([0, 2], [0, 2]))
        gxp[:, :, k:k + L] += np.matmul(w[:, :, k].T, gy)
    gb = gy.sum(axis=(0, 2))
    return gxp[:, :, pad:pad + L], gw, gb


def softmax_xent(logits, labels):
    """Mean softmax cross-entropy over batch and positions.

    Returns (loss, grad) where grad is d(loss)/d(logits).
    """
    B, K, L = logits.shape
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    n = B * L
    picked = np.take_along_axis(logp, labels[:, None, :], axis=1)
    loss = -picked.sum() / n
    grad = np.exp(logp)
    np.put_along_axis(grad, labels[:, None, :],
                      np.take_along_axis(grad, labels[:, None, :], axis=1) - 1.0, axis=1)
    grad /= n
    return float(loss), grad
