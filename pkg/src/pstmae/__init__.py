"""Spatiotemporal masked-autoencoder forecasting of PDE fields.

Self-contained numpy/numba stack: a small reverse-mode autodiff library,
finite-difference data generators (shallow water, diffusion-reaction),
a convolutional autoencoder with a masked transformer over its latent
sequence, an autoregressive latent-LSTM baseline, and MSE/SSIM/PSNR
evaluation. See the ``pstmae`` command-line entry point.
"""

from .backend import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
