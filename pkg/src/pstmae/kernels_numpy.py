"""Pure-numpy implementations of the hot numeric kernels.

Same call signatures as :mod:`pstmae.kernels_numba`; selected via the
``PSTMAE_BACKEND`` environment flag (see :mod:`pstmae.backend`).
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _patches(x, stride):
    """(N,C,H,W) -> padded 3x3 patch view (N,C,Ho,Wo,3,3)."""
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv_fwd(x, k, stride):
    """3x3 cross-correlation, zero padding 1.

    x: (N,C,H,W), k: (O,C,3,3) -> (N,O,H/stride,W/stride). No bias.
    """
    win = _patches(x, stride)
    return np.einsum("ncijuv,ocuv->noij", win, k, optimize=True)


def conv_input_grad(dy, k, stride, h, w):
    """Adjoint of conv_fwd in its first argument.

    dy: (N,O,Ho,Wo), k: (O,C,3,3) -> (N,C,h,w). Also the forward map of the
    transposed convolution.
    """
    n = dy.shape[0]
    c = k.shape[1]
    t = np.einsum("noij,ocuv->ncijuv", dy, k, optimize=True)
    ho, wo = dy.shape[2], dy.shape[3]
    dxp = np.zeros((n, c, h + 2, w + 2), dtype=dy.dtype)
    for u in range(3):
        for v in range(3):
            dxp[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += t[:, :, :, :, u, v]
    return dxp[:, :, 1:h + 1, 1:w + 1]


def conv_kernel_grad(x, dy, stride):
    """Adjoint of conv_fwd in its kernel argument.

    x: (N,C,H,W), dy: (N,O,Ho,Wo) -> (O,C,3,3).
    """
    win = _patches(x, stride)
    return np.einsum("ncijuv,noij->ocuv", win, dy, optimize=True)


def _ddx(f, dx):
    return (np.roll(f, -1, axis=0) - np.roll(f, 1, axis=0)) / (2.0 * dx)


def _ddy(f, dx):
    return (np.roll(f, -1, axis=1) - np.roll(f, 1, axis=1)) / (2.0 * dx)


def swe_step(h, u, v, g, b, dt, dx):
    """One forward-Euler shallow-water step, periodic boundaries.

    Height uses the conservative flux form so the discrete sum of h is
    preserved up to roundoff.
    """
    dh = -(_ddx(h * u, dx) + _ddy(h * v, dx))
    du = -g * _ddx(h, dx) - b * u
    dv = -g * _ddy(h, dx) - b * v
    return h + dt * dh, u + dt * du, v + dt * dv


def _laplacian_neumann(f, dx):
    # edge replication == zero normal flux
    fp = np.pad(f, 1, mode="edge")
    return (fp[2:, 1:-1] + fp[:-2, 1:-1] + fp[1:-1, 2:] + fp[1:-1, :-2] - 4.0 * f) / (dx * dx)


def dr_step(u, v, alpha_u, alpha_v, c, dt, dx, include_reaction=True):
    """One forward-Euler FitzHugh-Nagumo diffusion-reaction step.

    5-point Laplacian with no-flux (replicated edge) boundaries;
    ``include_reaction=False`` is a test hook that leaves pure diffusion.
    """
    du = alpha_u * _laplacian_neumann(u, dx)
    dv = alpha_v * _laplacian_neumann(v, dx)
    if include_reaction:
        du = du + (u - u ** 3 - c - v)
        dv = dv + (u - v)
    return u + dt * du, v + dt * dv
