"""Dense tensor primitives for the detector graph.

Every kernel operates on channel-first arrays of shape (C, D, H, W), is a
pure function of its arguments, and keeps a fixed reduction order so that
re-evaluating it on the same inputs reproduces the same bits. That property
is what lets the checkpointed backward pass recompute discarded values and
still match the plain backward pass exactly.

Conventions baked in here:
  * ReLU gradient at exactly 0 is 0.
  * Max-pool ties resolve to the lowest linear index inside the 2x2x2 window.
  * batch_norm normalizes each channel over its spatial extent (batch size
    is always 1), biased variance, configurable epsilon.
  * l2_loss is the mean squared error over all elements.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeMismatch(ValueError):
    """An input violates a primitive's shape rule."""


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeMismatch(msg)


# ---------------------------------------------------------------------------
# conv3d: cubic odd kernel, stride 1, "same" zero padding
# ---------------------------------------------------------------------------

def conv3d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    _require(x.ndim == 4, f"conv3d: input must be (C,D,H,W), got {x.shape}")
    _require(weight.ndim == 5, f"conv3d: weight must be (Cout,Cin,k,k,k), got {weight.shape}")
    cout, cin_w, kd, kh, kw = weight.shape
    _require(kd == kh == kw and kd % 2 == 1, f"conv3d: kernel must be cubic odd, got {weight.shape[2:]}")
    cin, d, h, w = x.shape
    _require(cin == cin_w, f"conv3d: expected {cin_w} input channels, got {cin}")
    _require(bias.shape == (cout,), f"conv3d: bias must be ({cout},), got {bias.shape}")
    k = kd
    if k == 1:
        out = weight.reshape(cout, cin) @ x.reshape(cin, -1)
    else:
        p = k // 2
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (p, p)))
        out = weight.reshape(cout, cin * k**3) @ _im2col(xp, k, (d, h, w))
    out += bias[:, None]
    return out.reshape(cout, d, h, w)


def conv3d_backward(
    x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    cout = weight.shape[0]
    k = weight.shape[2]
    cin, d, h, w = x.shape
    go = grad_out.reshape(cout, -1)
    if k == 1:
        gw = (go @ x.reshape(cin, -1).T).reshape(weight.shape)
        gx = (weight.reshape(cout, cin).T @ go).reshape(x.shape)
    else:
        p = k // 2
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (p, p)))
        cols = _im2col(xp, k, (d, h, w))
        gw = (go @ cols.T).reshape(weight.shape)
        gcols = weight.reshape(cout, cin * k**3).T @ go
        gx = _col2im(gcols, x.shape, k)
    gb = grad_out.sum(axis=(1, 2, 3))
    return gx, gw, gb


def _im2col(xp: np.ndarray, k: int, out_shape: tuple[int, int, int]) -> np.ndarray:
    d, h, w = out_shape
    win = sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))  # (C, d, h, w, k, k, k)
    return win.transpose(0, 4, 5, 6, 1, 2, 3).reshape(xp.shape[0] * k**3, d * h * w)


def _col2im(gcols: np.ndarray, x_shape: tuple[int, ...], k: int) -> np.ndarray:
    cin, d, h, w = x_shape
    p = k // 2
    gxp = np.zeros((cin, d + 2 * p, h + 2 * p, w + 2 * p), dtype=gcols.dtype)
    g = gcols.reshape(cin, k, k, k, d, h, w)
    # fixed (a, b, c) order keeps the scatter-add deterministic
    for a in range(k):
        for b in range(k):
            for c in range(k):
                gxp[:, a : a + d, b : b + h, c : c + w] += g[:, a, b, c]
    return np.ascontiguousarray(gxp[:, p : p + d, p : p + h, p : p + w])


# ---------------------------------------------------------------------------
# deconv3d: transposed convolution, kernel 2, stride 2 (doubles each extent)
# ---------------------------------------------------------------------------

def deconv3d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    _require(x.ndim == 4, f"deconv3d: input must be (C,D,H,W), got {x.shape}")
    _require(
        weight.ndim == 5 and weight.shape[2:] == (2, 2, 2),
        f"deconv3d: weight must be (Cin,Cout,2,2,2), got {weight.shape}",
    )
    cin_w, cout = weight.shape[:2]
    cin, d, h, w = x.shape
    _require(cin == cin_w, f"deconv3d: expected {cin_w} input channels, got {cin}")
    tmp = weight.reshape(cin, cout * 8).T @ x.reshape(cin, -1)  # (cout*8, dhw)
    out = (
        tmp.reshape(cout, 2, 2, 2, d, h, w)
        .transpose(0, 4, 1, 5, 2, 6, 3)
        .reshape(cout, 2 * d, 2 * h, 2 * w)
    )
    out += bias[:, None, None, None]
    return out


def deconv3d_backward(
    x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    cin, d, h, w = x.shape
    cout = weight.shape[1]
    go = (
        grad_out.reshape(cout, d, 2, h, 2, w, 2)
        .transpose(0, 2, 4, 6, 1, 3, 5)
        .reshape(cout * 8, d * h * w)
    )
    gx = (weight.reshape(cin, cout * 8) @ go).reshape(x.shape)
    gw = (go @ x.reshape(cin, -1).T).T.reshape(weight.shape)
    gb = grad_out.sum(axis=(1, 2, 3))
    return gx, gw, gb


# ---------------------------------------------------------------------------
# max_pool3d: 2x2x2, stride 2; odd trailing extents are dropped
# ---------------------------------------------------------------------------

def _pool_windows(x: np.ndarray) -> np.ndarray:
    c, d, h, w = x.shape
    _require(d >= 2 and h >= 2 and w >= 2, f"max_pool3d: extents must be >= 2, got {x.shape}")
    d2, h2, w2 = d // 2, h // 2, w // 2
    xc = x[:, : 2 * d2, : 2 * h2, : 2 * w2]
    return (
        xc.reshape(c, d2, 2, h2, 2, w2, 2)
        .transpose(0, 1, 3, 5, 2, 4, 6)
        .reshape(c, d2, h2, w2, 8)
    )


def max_pool3d_forward(x: np.ndarray) -> np.ndarray:
    return _pool_windows(x).max(axis=-1)


def max_pool3d_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    c, d, h, w = x.shape
    d2, h2, w2 = d // 2, h // 2, w // 2
    win = _pool_windows(x)
    idx = win.argmax(axis=-1)  # first max = lowest window-linear index
    gwin = np.zeros_like(win)
    np.put_along_axis(gwin, idx[..., None], grad_out[..., None], axis=-1)
    gx = np.zeros_like(x)
    gx[:, : 2 * d2, : 2 * h2, : 2 * w2] = (
        gwin.reshape(c, d2, h2, w2, 2, 2, 2)
        .transpose(0, 1, 4, 2, 5, 3, 6)
        .reshape(c, 2 * d2, 2 * h2, 2 * w2)
    )
    return gx


# ---------------------------------------------------------------------------
# batch_norm: per-channel spatial statistics (batch size 1)
# ---------------------------------------------------------------------------

def spatial_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and biased variance over the spatial axes."""
    return x.mean(axis=(1, 2, 3)), x.var(axis=(1, 2, 3))


def batch_norm_forward(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    eps: float = 1e-5,
    mean: np.ndarray | None = None,
    var: np.ndarray | None = None,
) -> np.ndarray:
    """Normalize per channel; statistics are computed from x unless given."""
    c = x.shape[0]
    _require(gamma.shape == (c,) and beta.shape == (c,),
             f"batch_norm: affine params must be ({c},), got {gamma.shape}/{beta.shape}")
    if mean is None:
        mean, var = spatial_stats(x)
    istd = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = (x - mean[:, None, None, None]) * istd[:, None, None, None]
    return gamma[:, None, None, None] * xhat + beta[:, None, None, None]


def batch_norm_backward(
    x: np.ndarray,
    gamma: np.ndarray,
    grad_out: np.ndarray,
    eps: float = 1e-5,
    mean: np.ndarray | None = None,
    var: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    frozen = mean is not None
    if mean is None:
        mean, var = spatial_stats(x)
    istd = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = (x - mean[:, None, None, None]) * istd[:, None, None, None]
    ggamma = (grad_out * xhat).sum(axis=(1, 2, 3))
    gbeta = grad_out.sum(axis=(1, 2, 3))
    gscaled = grad_out * gamma[:, None, None, None]
    if frozen:
        gx = gscaled * istd[:, None, None, None]
    else:
        m1 = gscaled.mean(axis=(1, 2, 3), keepdims=True)
        m2 = (gscaled * xhat).mean(axis=(1, 2, 3), keepdims=True)
        gx = istd[:, None, None, None] * (gscaled - m1 - xhat * m2)
    return gx, ggamma, gbeta


# ---------------------------------------------------------------------------
# relu / channel_concat / add / l2_loss
# ---------------------------------------------------------------------------

def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, np.asarray(0, dtype=x.dtype))


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return np.where(x > 0, grad_out, np.asarray(0, dtype=grad_out.dtype))


def concat_forward(values: list[np.ndarray]) -> np.ndarray:
    _require(len(values) >= 2, "channel_concat: needs at least two inputs")
    spatial = values[0].shape[1:]
    for v in values[1:]:
        _require(
            v.shape[1:] == spatial,
            f"channel_concat: spatial extents differ, {v.shape[1:]} vs {spatial}",
        )
    return np.concatenate(values, axis=0)


def concat_backward(channel_counts: list[int], grad_out: np.ndarray) -> list[np.ndarray]:
    splits = np.cumsum(channel_counts[:-1])
    return [np.ascontiguousarray(g) for g in np.split(grad_out, splits, axis=0)]


def add_forward(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _require(a.shape == b.shape, f"add: shapes differ, {a.shape} vs {b.shape}")
    return a + b


def l2_loss_forward(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    _require(pred.shape == target.shape, f"l2_loss: shapes differ, {pred.shape} vs {target.shape}")
    diff = (pred - target).ravel()
    return np.asarray(np.dot(diff, diff) / diff.size, dtype=pred.dtype)


def l2_loss_backward(
    pred: np.ndarray, target: np.ndarray, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    g = (2.0 / pred.size) * grad_out * (pred - target)
    return g, -g
