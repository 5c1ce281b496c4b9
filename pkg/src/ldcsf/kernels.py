"""Stride-1, zero-padded ("same") 2-D convolution kernels.

Each public function dispatches on :func:`ldcsf._backend.get_backend` to a
numba path (compiled im2col + BLAS for dense kernels, compiled loops for
depthwise) or a numpy path that loops over the k*k kernel taps and
contracts the channel axes with ``tensordot``.  Both produce the
same math; summation order differs, so results agree to rounding only.
"""

import numpy as np

from ._backend import HAS_NUMBA, get_backend

if HAS_NUMBA:
    from numba import njit
else:  # pragma: no cover
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


# ---------------------------------------------------------------- numba path
#
# Dense k x k convs gather shifted rows into a [Ci*k*k, N*H*W] column matrix
# and hand the contraction to BLAS via np.dot; a scalar loop cannot compete
# with BLAS on the channel product.  Depthwise convs have no channel product,
# so they stay as loops over a zero-padded plane with a branch-free inner row.


@njit(cache=True)
def _im2col_nb(x, k):
    n_, ci_, h_, w_ = x.shape
    p = k // 2
    hw = h_ * w_
    cols = np.zeros((ci_ * k * k, n_ * hw), dtype=x.dtype)
    for ci in range(ci_):
        for di in range(k):
            i0 = max(0, p - di)
            i1 = min(h_, h_ + p - di)
            for dj in range(k):
                j0 = max(0, p - dj)
                j1 = min(w_, w_ + p - dj)
                row = cols[(ci * k + di) * k + dj]
                for n in range(n_):
                    for i in range(i0, i1):
                        base = n * hw + i * w_
                        src = x[n, ci, i + di - p]
                        for j in range(j0, j1):
                            row[base + j] = src[j + dj - p]
    return cols


@njit(cache=True)
def _col2im_nb(cols, n_, ci_, h_, w_, k):
    p = k // 2
    hw = h_ * w_
    gx = np.zeros((n_, ci_, h_, w_), dtype=cols.dtype)
    for ci in range(ci_):
        for di in range(k):
            i0 = max(0, p - di)
            i1 = min(h_, h_ + p - di)
            for dj in range(k):
                j0 = max(0, p - dj)
                j1 = min(w_, w_ + p - dj)
                row = cols[(ci * k + di) * k + dj]
                for n in range(n_):
                    for i in range(i0, i1):
                        base = n * hw + i * w_
                        dst = gx[n, ci, i + di - p]
                        for j in range(j0, j1):
                            dst[j + dj - p] += row[base + j]
    return gx


@njit(cache=True)
def _to_channel_major(a, n_, c_, hw):
    # [N,C,H*W] <-> [C,N*H*W]
    out = np.empty((c_, n_ * hw), dtype=a.dtype)
    for n in range(n_):
        for c in range(c_):
            out[c, n * hw:(n + 1) * hw] = a[n, c]
    return out


@njit(cache=True)
def _conv2d_fwd_nb(x, w):
    n_, ci_, h_, w_ = x.shape
    co_, _, k, _ = w.shape
    hw = h_ * w_
    y2 = np.dot(w.reshape(co_, ci_ * k * k), _im2col_nb(x, k))
    y = np.empty((n_, co_, h_, w_), dtype=x.dtype)
    for n in range(n_):
        for co in range(co_):
            y[n, co] = y2[co, n * hw:(n + 1) * hw].reshape(h_, w_)
    return y


@njit(cache=True)
def _conv2d_bwd_nb(x, w, gy):
    n_, ci_, h_, w_ = x.shape
    co_, _, k, _ = w.shape
    g2 = _to_channel_major(gy.reshape(n_, co_, h_ * w_), n_, co_, h_ * w_)
    gw = np.dot(g2, _im2col_nb(x, k).T).reshape(co_, ci_, k, k)
    gcols = np.dot(w.reshape(co_, ci_ * k * k).T.copy(), g2)
    return _col2im_nb(gcols, n_, ci_, h_, w_, k), gw


@njit(cache=True)
def _dwconv2d_fwd_nb(x, w):
    n_, c_, h_, w_ = x.shape
    k = w.shape[1]
    p = k // 2
    xp = np.zeros((h_ + 2 * p, w_ + 2 * p), dtype=x.dtype)
    y = np.zeros_like(x)
    for n in range(n_):
        for c in range(c_):
            xp[p:p + h_, p:p + w_] = x[n, c]
            yc = y[n, c]
            for di in range(k):
                for dj in range(k):
                    wv = w[c, di, dj]
                    for i in range(h_):
                        xr = xp[i + di]
                        yr = yc[i]
                        for j in range(w_):
                            yr[j] += wv * xr[j + dj]
    return y


@njit(cache=True, fastmath=True)  # lets the gw reduction vectorise
def _dwconv2d_bwd_nb(x, w, gy):
    n_, c_, h_, w_ = x.shape
    k = w.shape[1]
    p = k // 2
    xp = np.zeros((h_ + 2 * p, w_ + 2 * p), dtype=x.dtype)
    gxp = np.zeros_like(xp)
    gx = np.empty_like(x)
    gw = np.zeros_like(w)
    for n in range(n_):
        for c in range(c_):
            xp[p:p + h_, p:p + w_] = x[n, c]
            gxp[:, :] = 0
            gc = gy[n, c]
            for di in range(k):
                for dj in range(k):
                    wv = w[c, di, dj]
                    acc = gc[0, 0] * 0
                    for i in range(h_):
                        gr = gc[i]
                        xr = xp[i + di]
                        dr = gxp[i + di]
                        for j in range(w_):
                            acc += gr[j] * xr[j + dj]
                            dr[j + dj] += wv * gr[j]
                    gw[c, di, dj] += acc
            gx[n, c] = gxp[p:p + h_, p:p + w_]
    return gx, gw


# ---------------------------------------------------------------- numpy path


def _pad(x, p):
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _conv2d_fwd_np(x, w):
    n_, _, h_, w_ = x.shape
    co_, _, k, _ = w.shape
    p = k // 2
    xp = _pad(x, p)
    y = np.zeros((n_, h_, w_, co_), dtype=x.dtype)
    for di in range(k):
        for dj in range(k):
            patch = xp[:, :, di:di + h_, dj:dj + w_]
            y += np.tensordot(patch, w[:, :, di, dj], axes=([1], [1]))
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def _conv2d_bwd_np(x, w, gy):
    _, _, h_, w_ = x.shape
    k = w.shape[2]
    p = k // 2
    xp = _pad(x, p)
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for di in range(k):
        for dj in range(k):
            patch = xp[:, :, di:di + h_, dj:dj + w_]
            gw[:, :, di, dj] = np.tensordot(gy, patch, axes=([0, 2, 3], [0, 2, 3]))
            gxp[:, :, di:di + h_, dj:dj + w_] += np.tensordot(
                gy, w[:, :, di, dj], axes=([1], [0])
            ).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(gxp[:, :, p:p + h_, p:p + w_]), gw


def _dwconv2d_fwd_np(x, w):
    _, _, h_, w_ = x.shape
    k = w.shape[1]
    p = k // 2
    xp = _pad(x, p)
    y = np.zeros_like(x)
    for di in range(k):
        for dj in range(k):
            y += xp[:, :, di:di + h_, dj:dj + w_] * w[None, :, di, dj, None, None]
    return y


def _dwconv2d_bwd_np(x, w, gy):
    _, _, h_, w_ = x.shape
    k = w.shape[1]
    p = k // 2
    xp = _pad(x, p)
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for di in range(k):
        for dj in range(k):
            gw[:, di, dj] = (gy * xp[:, :, di:di + h_, dj:dj + w_]).sum(axis=(0, 2, 3))
            gxp[:, :, di:di + h_, dj:dj + w_] += gy * w[None, :, di, dj, None, None]
    return np.ascontiguousarray(gxp[:, :, p:p + h_, p:p + w_]), gw


# ------------------------------------------------------------------ dispatch


def _pointwise_fwd(x, w):
    # 1x1 kernels are a channel contraction; BLAS beats either loop
    y = np.tensordot(w[:, :, 0, 0], x, axes=([1], [1]))
    return np.ascontiguousarray(y.transpose(1, 0, 2, 3))


def _pointwise_bwd(x, w, gy):
    gx = np.tensordot(w[:, :, 0, 0], gy, axes=([0], [1])).transpose(1, 0, 2, 3)
    gw = np.tensordot(gy, x, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None]
    return np.ascontiguousarray(gx), np.ascontiguousarray(gw)


def conv2d_forward(x, w):
    """``x`` [N,Ci,H,W], ``w`` [Co,Ci,k,k] -> [N,Co,H,W]."""
    if w.shape[2] == 1:
        return _pointwise_fwd(x, w)
    if get_backend() == "numba":
        return _conv2d_fwd_nb(np.ascontiguousarray(x), np.ascontiguousarray(w))
    return _conv2d_fwd_np(x, w)


def conv2d_backward(x, w, gy):
    if w.shape[2] == 1:
        return _pointwise_bwd(x, w, gy)
    if get_backend() == "numba":
        return _conv2d_bwd_nb(
            np.ascontiguousarray(x), np.ascontiguousarray(w), np.ascontiguousarray(gy)
        )
    return _conv2d_bwd_np(x, w, gy)


def depthwise_conv2d_forward(x, w):
    """``x`` [N,C,H,W], ``w`` [C,k,k] -> [N,C,H,W]."""
    if get_backend() == "numba":
        return _dwconv2d_fwd_nb(np.ascontiguousarray(x), np.ascontiguousarray(w))
    return _dwconv2d_fwd_np(x, w)


def depthwise_conv2d_backward(x, w, gy):
    if get_backend() == "numba":
        return _dwconv2d_bwd_nb(
            np.ascontiguousarray(x), np.ascontiguousarray(w), np.ascontiguousarray(gy)
        )
    return _dwconv2d_bwd_np(x, w, gy)
