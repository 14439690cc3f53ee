"""Pure-numpy fallback kernels for the conv/pool hot loops.

Arrays are channels-last (n, h, w, c): the im2col GEMM then writes conv
outputs directly in layout, with no transposes between conv/pool stages.
Semantics here (shapes, padding, accumulation order) are the reference for
the compiled backend: both must produce bit-identical outputs so training
trajectories do not depend on which backend was selected at import.

All kernels accept an optional preallocated output, matching the compiled
backend's buffer-reuse API.
"""

import numpy as np

BACKEND = "numpy"


def im2col(x, kernel, pad_before, pad_after, out=None):
    """Unfold (n, h, w, c) into patch rows (n*oh*ow, kernel*kernel*c).

    Stride is 1; zero padding of pad_before/pad_after rows and columns is
    applied on each spatial edge. Row r = (n, oh, ow) in C order, columns
    in (ki, kj, c) order.
    """
    n, h, w, c = x.shape
    k = kernel
    if pad_before or pad_after:
        x = np.pad(x, ((0, 0), (pad_before, pad_after), (pad_before, pad_after), (0, 0)))
    oh = x.shape[1] - k + 1
    ow = x.shape[2] - k + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))
    # (n, oh, ow, c, ki, kj) -> rows (n, oh, ow), columns (ki, kj, c)
    src = win.transpose(0, 1, 2, 4, 5, 3)
    if out is None:
        return np.ascontiguousarray(src).reshape(n * oh * ow, k * k * c)
    np.copyto(out.reshape(n, oh, ow, k, k, c), src)
    return out


def col2im(dcols, x_shape, kernel, pad_before, pad_after, out=None):
    """Scatter-add patch-row gradients back to the (n, h, w, c) input.

    Accumulation runs in ascending (ki, kj) order per output element; the
    compiled backend mirrors this order for bitwise-equal float sums.
    """
    n, h, w, c = x_shape
    k = kernel
    hp = h + pad_before + pad_after
    wp = w + pad_before + pad_after
    oh = hp - k + 1
    ow = wp - k + 1
    dcols = dcols.reshape(n, oh, ow, k, k, c)
    dxp = np.zeros((n, hp, wp, c), dtype=dcols.dtype)
    for ki in range(k):
        for kj in range(k):
            dxp[:, ki:ki + oh, kj:kj + ow, :] += dcols[:, :, :, ki, kj, :]
    if pad_before or pad_after:
        dxp = dxp[:, pad_before:pad_before + h, pad_before:pad_before + w, :]
    if out is None:
        return np.ascontiguousarray(dxp)
    np.copyto(out, dxp)
    return out


def maxpool_forward(x, window, out=None, idx=None, want_idx=True):
    """Max pool (n, h, w, c) with stride == window; trailing rows/cols that
    do not fill a window are dropped. Returns (out, argmax) where argmax
    holds the flat in-window index as int8 (first maximum wins), or None
    when want_idx is false."""
    n, h, w, c = x.shape
    p = window
    if want_idx and p * p > 127:
        raise ValueError("pool window too large for int8 argmax indices")
    oh, ow = h // p, w // p
    xc = x[:, :oh * p, :ow * p, :]
    win = (xc.reshape(n, oh, p, ow, p, c)
             .transpose(0, 1, 3, 5, 2, 4)
             .reshape(n, oh, ow, c, p * p))
    am = np.argmax(win, axis=-1)
    vals = np.take_along_axis(win, am[..., None], axis=-1)[..., 0]
    if out is None:
        out = np.ascontiguousarray(vals)
    else:
        np.copyto(out, vals)
    if not want_idx:
        return out, None
    if idx is None:
        idx = am.astype(np.int8)
    else:
        np.copyto(idx, am, casting="unsafe")
    return out, idx


def maxpool_backward(dout, idx, x_shape, window, out=None):
    """Route pooled gradients back to the argmax positions; dropped
    remainder rows/cols receive zero gradient."""
    n, h, w, c = x_shape
    p = window
    oh, ow = h // p, w // p
    dwin = np.zeros((n, oh, ow, c, p * p), dtype=dout.dtype)
    np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
    if out is None:
        out = np.empty(x_shape, dtype=dout.dtype)
    out[:] = 0
    out[:, :oh * p, :ow * p, :] = (
        dwin.reshape(n, oh, ow, c, p, p)
            .transpose(0, 1, 4, 2, 5, 3)
            .reshape(n, oh * p, ow * p, c))
    return out
