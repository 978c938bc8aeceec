"""Forward operators with explicit reverse-mode rules.

Layout conventions: activations are (batch, channels, height, width);
convolution kernels are (kh, kw, C_in, C_out). Convolutions are
cross-correlations with stride 1 and padding ``k // 2``.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special

from .tensor import ShapeError, Tensor

_SQRT_2PI = math.sqrt(2.0 * math.pi)


def _check4(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what} expects a (N, C, H, W) tensor, got shape {x.shape}")


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Padded cross-correlation plus broadcast bias.

    Lowered to one GEMM over im2col columns (N*H*W, kh*kw*C_in) x
    (kh*kw*C_in, C_out); the columns are kept for the weight gradient.
    """
    _check4(x, "conv2d")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be (kh, kw, C_in, C_out), got {weight.shape}")
    kh, kw, cin, cout = weight.shape
    if kh != kw or kh not in (1, 3):
        raise ShapeError(f"conv2d supports 1x1 and 3x3 kernels, got {kh}x{kw}")
    if x.shape[1] != cin:
        raise ShapeError(f"conv2d input shape {x.shape} does not match weight shape {weight.shape} (C_in={cin})")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match C_out={cout}")

    if kh == 1:
        return _conv1x1(x, weight, bias)
    n, _, h, w = x.shape
    pad = kh // 2
    xh = x.data.transpose(0, 2, 3, 1)
    wd = weight.data
    wmat = wd.reshape(kh * kw * cin, cout)
    if pad:
        xh = np.pad(xh, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
        # (n, h, w, c, kh, kw) window view -> (n*h*w, kh*kw*c) columns in weight order
        win = np.lib.stride_tricks.sliding_window_view(xh, (kh, kw), axis=(1, 2))
        cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * h * w, kh * kw * cin)
    else:
        cols = np.ascontiguousarray(xh).reshape(n * h * w, cin)
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    result = np.ascontiguousarray(out.reshape(n, h, w, cout).transpose(0, 3, 1, 2))

    def grad_fn(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * h * w, cout)
        gw = (cols.T @ g2).reshape(wd.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = g2 @ wmat.T
            if pad:
                gcols = gcols.reshape(n, h, w, kh, kw, cin)
                gpad = np.zeros((n, h + 2 * pad, w + 2 * pad, cin), dtype=gcols.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gpad[:, i : i + h, j : j + w, :] += gcols[:, :, :, i, j, :]
                gx = gpad[:, pad:-pad, pad:-pad, :]
            else:
                gx = gcols.reshape(n, h, w, cin)
            gx = np.ascontiguousarray(gx.transpose(0, 3, 1, 2))
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(result, parents, grad_fn)


def _conv1x1(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    """Batched (C_out, C_in) x (C_in, H*W) products directly in NCHW, no transposes."""
    n, cin, h, w = x.shape
    wt = weight.data[0, 0].T  # (C_out, C_in)
    xf = x.data.reshape(n, cin, h * w)
    out = np.matmul(wt, xf)
    if bias is not None:
        out += bias.data[:, None]

    def grad_fn(g):
        gf = g.reshape(n, -1, h * w)
        gw = None
        if weight.requires_grad:
            # sum_n x_n g_n^T as one GEMM over the concatenated (n, HW) axis
            gw = np.matmul(xf.transpose(1, 0, 2).reshape(cin, -1), gf.transpose(0, 2, 1).reshape(-1, gf.shape[1]))
            gw = gw.reshape(weight.shape)
        gx = np.matmul(wt.T, gf).reshape(x.shape) if x.requires_grad else None
        gb = gf.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
        return (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out.reshape(n, -1, h, w), parents, grad_fn)


# --------------------------------------------------------------------------
# normalization and pooling
# --------------------------------------------------------------------------


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    *,
    training: bool,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics normalize ``x`` and the running
    buffers are updated in place. In eval mode the op is the affine map
    ``(x - mu) / sqrt(var + eps) * gamma + beta``.
    """
    _check4(x, "batch_norm")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,) or running_mean.shape != (c,) or running_var.shape != (c,):
        raise ShapeError(f"batch_norm has {gamma.shape[0]} channels but input shape is {x.shape}")
    if eps < 0 or (training and eps <= 0):
        raise ValueError(f"batch_norm eps must be positive, got {eps}")

    gd, bd = gamma.data.reshape(1, c, 1, 1), beta.data.reshape(1, c, 1, 1)
    if not training:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
        out = xhat * gd + bd

        def grad_fn_eval(g):
            return (
                g * (gd * inv.reshape(1, c, 1, 1)),
                (g * xhat).sum(axis=(0, 2, 3)),
                g.sum(axis=(0, 2, 3)),
            )

        return Tensor._make(out, (x, gamma, beta), grad_fn_eval)

    m = x.shape[0] * x.shape[2] * x.shape[3]
    mean = x.data.mean(axis=(0, 2, 3))
    centered = x.data - mean.reshape(1, c, 1, 1)
    var = (centered * centered).mean(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv.reshape(1, c, 1, 1)
    out = xhat * gd + bd

    unbiased = var * (m / (m - 1)) if m > 1 else var
    running_mean *= 1.0 - momentum
    running_mean += momentum * mean
    running_var *= 1.0 - momentum
    running_var += momentum * unbiased

    def grad_fn_train(g):
        gxhat = g * gd
        s1 = gxhat.mean(axis=(0, 2, 3), keepdims=True)
        s2 = (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
        gx = (gxhat - s1 - xhat * s2) * inv.reshape(1, c, 1, 1)
        return (gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

    return Tensor._make(out, (x, gamma, beta), grad_fn_train)


def global_avg_pool(x: Tensor) -> Tensor:
    _check4(x, "global_avg_pool")
    return x.mean(axis=(2, 3))


def spatial_linear(x: Tensor, w: Tensor) -> Tensor:
    """Collapse the spatial axis with a learned (H*W, 1) weighting: (N,C,H,W) -> (N,C)."""
    _check4(x, "spatial_linear")
    n, c, h, wd = x.shape
    if w.shape != (h * wd, 1):
        raise ShapeError(f"spatial_linear weight {w.shape} expects H*W={w.shape[0]}, input is {h}x{wd}")
    flat = x.data.reshape(n * c, h * wd)
    out = (flat @ w.data).reshape(n, c)

    def grad_fn(g):
        g2 = g.reshape(n * c, 1)
        return ((g2 @ w.data.T).reshape(x.shape), flat.T @ g2)

    return Tensor._make(out, (x, w), grad_fn)


def dense(v: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if v.ndim != 2 or weight.ndim != 2 or v.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense input {v.shape} does not match weight {weight.shape}")
    out = v @ weight
    return out if bias is None else out + bias


# --------------------------------------------------------------------------
# pointwise nonlinearities
# --------------------------------------------------------------------------


def softmax(v: Tensor, axis: int = -1) -> Tensor:
    if v.shape[axis] < 1:
        raise ShapeError("softmax of an empty vector")
    z = v.data - v.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor._make(s, (v,), grad_fn)


def topk_mask(logits: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the k largest entries per row; ties go to the lower index."""
    n = logits.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"top-k needs 1 <= k <= {n}, got k={k}")
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite router logits")
    order = np.argsort(-logits, axis=-1, kind="stable")[..., :k]
    mask = np.zeros(logits.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


def topk_softmax(logits: Tensor, k: int) -> tuple[Tensor, np.ndarray]:
    """Keep the top-k logits per row, mask the rest to -inf, softmax."""
    mask = topk_mask(logits.data, k)
    z = np.where(mask, logits.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    s = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return Tensor._make(s, (logits,), grad_fn), mask


def gelu(x: Tensor) -> Tensor:
    a = x.data
    cdf = 0.5 * (1.0 + special.erf(a / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * a * a) / _SQRT_2PI
    return Tensor._make(a * cdf, (x,), lambda g: (g * (cdf + a * pdf),))


def softplus(x: Tensor) -> Tensor:
    a = x.data
    out = np.logaddexp(0.0, a)
    return Tensor._make(out, (x,), lambda g: (g * special.expit(a),))


def sigmoid(x: Tensor) -> Tensor:
    s = special.expit(x.data)
    return Tensor._make(s, (x,), lambda g: (g * s * (1.0 - s),))


def normal_cdf(x: Tensor) -> Tensor:
    a = x.data
    return Tensor._make(special.ndtr(a), (x,), lambda g: (g * np.exp(-0.5 * a * a) / _SQRT_2PI,))


# --------------------------------------------------------------------------
# resampling
# --------------------------------------------------------------------------


def space_to_depth(x: Tensor, block: int) -> Tensor:
    """(N,C,H,W) -> (N, C*block*block, H/block, W/block); a stride-``block`` patch split."""
    _check4(x, "space_to_depth")
    n, c, h, w = x.shape
    if h % block or w % block:
        raise ShapeError(f"spatial size {h}x{w} is not divisible by patch size {block}")
    out = (
        x.data.reshape(n, c, h // block, block, w // block, block)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(n, c * block * block, h // block, w // block)
    )

    def grad_fn(g):
        return (
            g.reshape(n, c, block, block, h // block, w // block).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h, w),
        )

    return Tensor._make(np.ascontiguousarray(out), (x,), grad_fn)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor == 1:
        return x
    _check4(x, "upsample_nearest")
    n, c, h, w = x.shape
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    return Tensor._make(out, (x,), lambda g: (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),))


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel-centre bilinear weights, edges clamped
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m


def upsample_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    _check4(x, "upsample_bilinear")
    n, c, h, w = x.shape
    if (h, w) == tuple(size):
        return x
    ah = _interp_matrix(h, size[0]).astype(x.dtype)
    aw = _interp_matrix(w, size[1]).astype(x.dtype)
    out = np.einsum("oh,nchw,pw->ncop", ah, x.data, aw, optimize=True)
    return Tensor._make(out, (x,), lambda g: (np.einsum("oh,ncop,pw->nchw", ah, g, aw, optimize=True),))


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean per-pixel cross-entropy; logits (N,K,H,W), integer target (N,H,W)."""
    _check4(logits, "cross_entropy")
    n, k, h, w = logits.shape
    if target.shape != (n, h, w):
        raise ShapeError(f"target shape {target.shape} does not match logits {logits.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logz
    t = target.astype(np.int64)[:, None]
    count = n * h * w
    loss = -np.take_along_axis(logp, t, axis=1).sum() / count

    def grad_fn(g):
        p = np.exp(logp)
        np.put_along_axis(p, t, np.take_along_axis(p, t, axis=1) - 1.0, axis=1)
        return (p * (g / count),)

    return Tensor._make(np.asarray(loss, dtype=logits.dtype), (logits,), grad_fn)


def balanced_bce_with_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """Class-balanced binary cross-entropy: positives weighted by the negative fraction."""
    if logits.shape != target.shape:
        raise ShapeError(f"target shape {target.shape} does not match logits {logits.shape}")
    t = target.astype(logits.dtype)
    pos = float(t.mean())
    w_pos, w_neg = 1.0 - pos, pos
    return (softplus(-logits) * (w_pos * t) + softplus(logits) * (w_neg * (1.0 - t))).mean()


def masked_l1(pred: Tensor, target: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"target shape {target.shape} does not match prediction {pred.shape}")
    diff = (pred - target.astype(pred.dtype)).abs()
    if mask is None:
        return diff.mean()
    m = np.broadcast_to(mask, pred.shape).astype(pred.dtype)
    return (diff * m).sum() * (1.0 / max(float(m.sum()), 1.0))
