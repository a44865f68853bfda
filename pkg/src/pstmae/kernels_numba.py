"""Numba-jitted implementations of the hot numeric kernels.

Loop nests compiled with ``@njit``; signatures mirror
:mod:`pstmae.kernels_numpy` exactly. Compilation is lazy per dtype
(float32 for training, float64 for the shadow-precision gradient checks)
and cached on disk.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _pad1(x):
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2, w + 2), dtype=x.dtype)
    xp[:, :, 1:h + 1, 1:w + 1] = x
    return xp


@njit(cache=True)
def _im2col(xp, stride, ho, wo):
    # (N,C,H+2,W+2) -> patch matrix (N*ho*wo, C*9)
    n, c = xp.shape[0], xp.shape[1]
    cols = np.empty((n * ho * wo, c * 9), dtype=xp.dtype)
    for ni in range(n):
        for i in range(ho):
            base = (ni * ho + i) * wo
            for ci in range(c):
                for ui in range(3):
                    col0 = ci * 9 + ui * 3
                    for j in range(wo):
                        row = base + j
                        for vi in range(3):
                            cols[row, col0 + vi] = xp[ni, ci, stride * i + ui, stride * j + vi]
    return cols


@njit(cache=True)
def _col2im(t, stride, n, c, h, w, ho, wo):
    # adjoint of _im2col: scatter-add the patch matrix into a padded image
    dxp = np.zeros((n, c, h + 2, w + 2), dtype=t.dtype)
    for ni in range(n):
        for i in range(ho):
            base = (ni * ho + i) * wo
            for ci in range(c):
                for ui in range(3):
                    col0 = ci * 9 + ui * 3
                    for j in range(wo):
                        row = base + j
                        for vi in range(3):
                            dxp[ni, ci, stride * i + ui, stride * j + vi] += t[row, col0 + vi]
    return dxp[:, :, 1:h + 1, 1:w + 1]


@njit(cache=True)
def _nhwo_to_nohw(y2, n, o, ho, wo):
    y = np.empty((n, o, ho, wo), dtype=y2.dtype)
    for ni in range(n):
        for i in range(ho):
            base = (ni * ho + i) * wo
            for j in range(wo):
                for oi in range(o):
                    y[ni, oi, i, j] = y2[base + j, oi]
    return y


@njit(cache=True)
def _nohw_to_nhwo(dy):
    n, o, ho, wo = dy.shape
    out = np.empty((n * ho * wo, o), dtype=dy.dtype)
    for ni in range(n):
        for i in range(ho):
            base = (ni * ho + i) * wo
            for j in range(wo):
                for oi in range(o):
                    out[base + j, oi] = dy[ni, oi, i, j]
    return out


@njit(cache=True)
def _conv_fwd(xp, k, stride, ho, wo):
    n, c = xp.shape[0], xp.shape[1]
    o = k.shape[0]
    cols = _im2col(xp, stride, ho, wo)
    kmat = np.ascontiguousarray(k.reshape(o, c * 9).T)
    return _nhwo_to_nohw(np.dot(cols, kmat), n, o, ho, wo)


def conv_fwd(x, k, stride):
    n, c, h, w = x.shape
    return _conv_fwd(_pad1(x), k, stride, h // stride, w // stride)


@njit(cache=True)
def _conv_input_grad(dy, k, stride, h, w):
    n, o, ho, wo = dy.shape
    c = k.shape[1]
    dyr = _nohw_to_nhwo(dy)
    kmat = np.ascontiguousarray(k.reshape(o, c * 9))
    return _col2im(np.dot(dyr, kmat), stride, n, c, h, w, ho, wo)


def conv_input_grad(dy, k, stride, h, w):
    return np.ascontiguousarray(_conv_input_grad(dy, k, stride, h, w))


@njit(cache=True)
def _conv_kernel_grad(xp, dy, stride, c):
    n, o, ho, wo = dy.shape
    cols = _im2col(xp, stride, ho, wo)
    dyr = _nohw_to_nhwo(dy)
    dk = np.dot(dyr.T.copy(), cols)
    return dk.reshape(o, c, 3, 3)


def conv_kernel_grad(x, dy, stride):
    return np.ascontiguousarray(_conv_kernel_grad(_pad1(x), dy, stride, x.shape[1]))


@njit(cache=True)
def swe_step(h, u, v, g, b, dt, dx):
    n, m = h.shape
    hn = np.empty_like(h)
    un = np.empty_like(u)
    vn = np.empty_like(v)
    inv2dx = 1.0 / (2.0 * dx)
    for i in range(n):
        ip = i + 1 if i + 1 < n else 0
        im = i - 1 if i > 0 else n - 1
        for j in range(m):
            jp = j + 1 if j + 1 < m else 0
            jm = j - 1 if j > 0 else m - 1
            dflux = (h[ip, j] * u[ip, j] - h[im, j] * u[im, j]) * inv2dx \
                + (h[i, jp] * v[i, jp] - h[i, jm] * v[i, jm]) * inv2dx
            dhdx = (h[ip, j] - h[im, j]) * inv2dx
            dhdy = (h[i, jp] - h[i, jm]) * inv2dx
            hn[i, j] = h[i, j] - dt * dflux
            un[i, j] = u[i, j] + dt * (-g * dhdx - b * u[i, j])
            vn[i, j] = v[i, j] + dt * (-g * dhdy - b * v[i, j])
    return hn, un, vn


@njit(cache=True)
def dr_step(u, v, alpha_u, alpha_v, c, dt, dx, include_reaction=True):
    n, m = u.shape
    un = np.empty_like(u)
    vn = np.empty_like(v)
    invdx2 = 1.0 / (dx * dx)
    for i in range(n):
        ip = i + 1 if i + 1 < n else i
        im = i - 1 if i > 0 else i
        for j in range(m):
            jp = j + 1 if j + 1 < m else j
            jm = j - 1 if j > 0 else j
            lap_u = (u[ip, j] + u[im, j] + u[i, jp] + u[i, jm] - 4.0 * u[i, j]) * invdx2
            lap_v = (v[ip, j] + v[im, j] + v[i, jp] + v[i, jm] - 4.0 * v[i, j]) * invdx2
            du = alpha_u * lap_u
            dv = alpha_v * lap_v
            if include_reaction:
                du += u[i, j] - u[i, j] ** 3 - c - v[i, j]
                dv += u[i, j] - v[i, j]
            un[i, j] = u[i, j] + dt * du
            vn[i, j] = v[i, j] + dt * dv
    return un, vn
