"""Forward/backward pairs for the layers of the segmentation network.

Activations are channels-last, ``(N, H, W, C)``, so every convolution is a
single tall GEMM. Kernels keep the usual shapes: ``(Cout, Cin, 3, 3)`` for
convolutions, ``(Cin, Cout, 2, 2)`` for the transposed convolution.

Each ``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
takes ``(dout, cache)``. Functions are dtype-generic: training runs in
float32, gradient checks in float64.
"""

import numpy as np

from segnl import kernels


class ShapeError(ValueError):
    pass


# -- convolution ------------------------------------------------------------

def conv2d_forward(x, w, b):
    """3x3 cross-correlation with zero same-padding.

    x: (N, H, W, Cin); w: (Cout, Cin, 3, 3); b: (Cout,) -> (N, H, W, Cout)
    """
    if x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d expects NHWC input and (Cout, Cin, 3, 3) kernel, got {x.shape}, {w.shape}")
    n, h, wd, cin = x.shape
    if w.shape[1] != cin or b.shape != (w.shape[0],):
        raise ShapeError(f"kernel {w.shape} / bias {b.shape} do not match {cin} input channels")
    cols = kernels.im2col3x3(np.ascontiguousarray(x))
    # (Cout, ky, kx, Cin) matches the tap-major column order of im2col
    wmat = w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)
    out = cols @ wmat.T
    out += b
    return out.reshape(n, h, wd, w.shape[0]), (cols, wmat, w.shape, x.shape)


def conv2d_backward(dout, cache):
    cols, wmat, wshape, xshape = cache
    cout, cin = wshape[:2]
    dout = np.ascontiguousarray(dout)
    dmat = dout.reshape(-1, cout)
    db = dmat.sum(axis=0)
    dw = (cols.T @ dmat).T.reshape(cout, 3, 3, cin).transpose(0, 3, 1, 2)
    if cout <= cin:
        # dx is a same-padded conv of dout with the spatially flipped kernel;
        # cheaper than scattering a (NHW, 9*Cin) column matrix
        wflip = wmat.reshape(cout, 3, 3, cin)[:, ::-1, ::-1, :].transpose(1, 2, 0, 3).reshape(9 * cout, cin)
        dx = (kernels.im2col3x3(dout) @ wflip).reshape(xshape)
    else:
        dx = kernels.col2im3x3(dmat @ wmat, xshape[0], xshape[1], xshape[2])
    return dx, np.ascontiguousarray(dw), db


def conv1x1_forward(x, w, b):
    """Pointwise convolution. x: (N, H, W, Cin); w: (Cout, Cin, 1, 1)."""
    cin = x.shape[-1]
    if w.shape[1:] != (cin, 1, 1):
        raise ShapeError(f"1x1 kernel {w.shape} does not match {cin} input channels")
    xm = x.reshape(-1, cin)
    wm = w[:, :, 0, 0]
    out = xm @ wm.T + b
    return out.reshape(*x.shape[:3], w.shape[0]), (xm, w, x.shape)


def conv1x1_backward(dout, cache):
    xm, w, xshape = cache
    dmat = dout.reshape(-1, w.shape[0])
    db = dmat.sum(axis=0)
    dw = (dmat.T @ xm)[:, :, None, None]
    dx = (dmat @ w[:, :, 0, 0]).reshape(xshape)
    return dx, dw, db


def transposed_conv2_forward(x, w, b):
    """2x2 stride-2 transposed convolution, the adjoint of a stride-2 2x2 conv.

    x: (N, H, W, Cin); w: (Cin, Cout, 2, 2) -> (N, 2H, 2W, Cout) with
    ``out[n, 2i+a, 2j+b, co] = sum_ci x[n, i, j, ci] * w[ci, co, a, b] + bias[co]``.
    """
    if x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (2, 2) or w.shape[0] != x.shape[-1]:
        raise ShapeError(f"transposed conv expects (Cin, Cout, 2, 2) kernel for {x.shape}, got {w.shape}")
    n, h, wd, cin = x.shape
    cout = w.shape[1]
    xm = x.reshape(-1, cin)
    wmat = w.transpose(0, 2, 3, 1).reshape(cin, 4 * cout)
    y = xm @ wmat
    out = y.reshape(n, h, wd, 2, 2, cout).transpose(0, 1, 3, 2, 4, 5).reshape(n, 2 * h, 2 * wd, cout)
    out += b
    return out, (xm, wmat, w.shape, x.shape)


def transposed_conv2_backward(dout, cache):
    xm, wmat, wshape, xshape = cache
    n, h, wd, cin = xshape
    cout = wshape[1]
    db = dout.reshape(-1, cout).sum(axis=0)
    dy = dout.reshape(n, h, 2, wd, 2, cout).transpose(0, 1, 3, 2, 4, 5).reshape(n * h * wd, 4 * cout)
    dw = (xm.T @ dy).reshape(cin, 2, 2, cout).transpose(0, 3, 1, 2)
    dx = (dy @ wmat.T).reshape(xshape)
    return dx, np.ascontiguousarray(dw), db


# -- pooling ------------------------------------------------------------------

def maxpool2_forward(x):
    """2x2 max pool, stride 2. The backward pass routes to the first maximum in scan order."""
    if x.ndim != 4 or x.shape[1] % 2 or x.shape[2] % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {x.shape}")
    return kernels.maxpool2_forward(np.ascontiguousarray(x))


def maxpool2_backward(dout, arg):
    return kernels.maxpool2_backward(np.ascontiguousarray(dout), arg)


# -- pointwise ----------------------------------------------------------------

def leaky_relu_forward(x, alpha=0.01):
    pos = x > 0
    return np.where(pos, x, x * x.dtype.type(alpha)), (pos, alpha)


def leaky_relu_backward(dout, cache):
    # slope at exactly 0 is alpha
    pos, alpha = cache
    return np.where(pos, dout, dout * dout.dtype.type(alpha))


def dropout_forward(x, p, train, rng=None):
    """Inverted dropout; identity in eval mode or when p == 0."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0:
        return x, None
    keep = rng.random(x.shape, dtype=np.float32) >= p
    mask = keep.astype(x.dtype)
    mask *= x.dtype.type(1.0 / (1.0 - p))
    return x * mask, mask


def dropout_backward(dout, mask):
    if mask is None:
        return dout
    return dout * mask


# -- batch normalisation ----------------------------------------------------

def batchnorm_forward(x, gamma, beta, state, train, momentum=0.1, eps=1e-5):
    """Per-channel batch norm over all of (N, H, W).

    ``state`` holds ``running_mean`` / ``running_var`` arrays, updated in place
    in train mode as ``(1 - momentum) * running + momentum * batch``.
    """
    c = x.shape[-1]
    x2 = x.reshape(-1, c)
    if train:
        if x2.shape[0] < 2:
            raise ShapeError("batch norm needs at least two values per channel in train mode")
        mu = x2.mean(axis=0)
        xc = x2 - mu
        var = np.einsum("ij,ij->j", xc, xc) / x2.shape[0]
        for key, val in (("running_mean", mu), ("running_var", var)):
            state[key] *= 1 - momentum
            state[key] += momentum * val.astype(state[key].dtype)
    else:
        mu = state["running_mean"].astype(x.dtype)
        var = state["running_var"].astype(x.dtype)
        xc = x2 - mu
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc * inv_std
    out = xhat * gamma + beta
    return out.reshape(x.shape), (xhat, inv_std, gamma, train)


def batchnorm_backward(dout, cache):
    xhat, inv_std, gamma, train = cache
    d2 = dout.reshape(xhat.shape)
    dbeta = d2.sum(axis=0)
    dgamma = np.einsum("ij,ij->j", d2, xhat)
    if not train:
        return (d2 * (gamma * inv_std)).reshape(dout.shape), dgamma, dbeta
    m = xhat.shape[0]
    # dx = gamma*inv_std * (d - mean(d) - xhat*mean(d*xhat))
    dx = d2 - dbeta / m
    dx -= xhat * (dgamma / m)
    dx *= gamma * inv_std
    return dx.reshape(dout.shape), dgamma, dbeta


# -- loss and regularisation ------------------------------------------------

def softmax(logits, axis=1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def weighted_softmax_crossentropy(logits, target, weights=(0.01, 1.0, 1.0)):
    """Mean over pixels of ``w[t] * -log softmax(logits)[t]``.

    logits: (N, K, H, W); target: (N, H, W) integer class ids.
    Returns ``(loss, dlogits)`` with ``dlogits = w[t] * (softmax - onehot) / (N*H*W)``.
    """
    n, k, h, w = logits.shape
    target = np.asarray(target)
    if target.shape != (n, h, w):
        raise ShapeError(f"target shape {target.shape} does not match logits {logits.shape}")
    if target.min() < 0 or target.max() >= k:
        raise ValueError(f"target classes must lie in [0, {k - 1}]")
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    wt = np.asarray(weights, dtype=logits.dtype)[target]
    t_idx = target[:, None].astype(np.intp)
    logp_t = np.take_along_axis(logp, t_idx, axis=1)[:, 0]
    npix = n * h * w
    loss = float(-(wt.astype(np.float64) * logp_t).sum() / npix)
    grad = np.exp(logp)
    np.put_along_axis(grad, t_idx, np.take_along_axis(grad, t_idx, axis=1) - 1, axis=1)
    grad *= (wt / npix)[:, None]
    return loss, grad.astype(logits.dtype, copy=False)


def l2_penalty(weights, lam=1e-5):
    """``(lam / 2) * sum(w**2)`` over the given kernels; returns ``(penalty, grads)``."""
    total = sum(float(np.sum(np.square(w, dtype=np.float64))) for w in weights)
    return 0.5 * lam * total, [w * w.dtype.type(lam) for w in weights]


def he_init(shape, fan_in, rng, dtype=np.float32):
    """Gaussian weights with mean 0 and variance ``2 / fan_in``."""
    if fan_in <= 0:
        raise ValueError("fan_in must be positive")
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
