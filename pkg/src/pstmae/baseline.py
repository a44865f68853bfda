"""Autoregressive latent-LSTM baseline and the persistence forecaster.

The baseline mirrors the two-stage recurrent approach: frames are
compressed by the frozen spatial codec, missing input latents are filled
by linear interpolation between observed neighbours, and an LSTM cell is
rolled out for the forecast steps (teacher forcing during training, its
own predictions at inference). The predicted latent is the cell's hidden
output: z_next, (h, c) = cell(z, (h, c)).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import MaskSpec

_GATES = ("i", "f", "o", "g")


class LatentLstm:
    """Single LSTM cell over d_z with hidden dim d_z."""

    def __init__(self, d_z, rng=None):
        self.d_z = d_z
        self.params = {}
        if rng is None:
            return
        lim = np.sqrt(6.0 / (2 * d_z))
        for gate in _GATES:
            self.params[f"lstm.wx_{gate}"] = Tensor(rng.uniform(-lim, lim, (d_z, d_z)), requires_grad=True)
            self.params[f"lstm.wh_{gate}"] = Tensor(rng.uniform(-lim, lim, (d_z, d_z)), requires_grad=True)
            bias = np.ones(d_z) if gate == "f" else np.zeros(d_z)  # forget gate opens at init
            self.params[f"lstm.b_{gate}"] = Tensor(bias, requires_grad=True)

    def step(self, x: Tensor, h: Tensor, c: Tensor):
        """One gated update; x, h, c: (B, d_z). Returns (h_new, c_new)."""
        p = self.params

        def gate(name):
            return ad.add(ad.linear(x, p[f"lstm.wx_{name}"], p[f"lstm.b_{name}"]),
                          ad.matmul(h, p[f"lstm.wh_{name}"]))

        i = ad.sigmoid(gate("i"))
        f = ad.sigmoid(gate("f"))
        o = ad.sigmoid(gate("o"))
        g = ad.tanh(gate("g"))
        c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
        h_new = ad.mul(o, ad.tanh(c_new))
        return h_new, c_new

    def rollout(self, z_in: np.ndarray, t_out: int, teacher: np.ndarray | None = None):
        """Consume (B, t_in, d_z) inputs, then emit t_out latent predictions.

        teacher: (B, t_out, d_z) ground-truth latents; when given, rollout
        step k>1 is fed teacher[k-1] instead of the previous prediction.
        Returns a (B, t_out, d_z) tensor.
        """
        b, t_in, d = z_in.shape
        h = Tensor(np.zeros((b, d)))
        c = Tensor(np.zeros((b, d)))
        for t in range(t_in):
            h, c = self.step(Tensor(np.ascontiguousarray(z_in[:, t])), h, c)
        preds = [h]
        for k in range(1, t_out):
            x = Tensor(np.ascontiguousarray(teacher[:, k - 1])) if teacher is not None else preds[-1]
            h, c = self.step(x, h, c)
            preds.append(h)
        stacked = ad.concat([ad.reshape(p, (b, 1, d)) for p in preds], axis=1)
        return stacked


def interpolate_missing(z_seq: np.ndarray, mask: MaskSpec) -> np.ndarray:
    """Fill latent rows at missing steps by linear interpolation.

    z_seq: (t_in, d_z) with arbitrary content at missing rows; observed
    rows are kept. Missing steps before the first / after the last
    observation copy the nearest observed latent.
    """
    out = np.array(z_seq, copy=True)
    obs = sorted(mask.t_obs)
    for t in mask.t_miss:
        before = [o for o in obs if o < t]
        after = [o for o in obs if o > t]
        if before and after:
            t0, t1 = before[-1], after[0]
            w = (t - t0) / (t1 - t0)
            out[t - 1] = (1.0 - w) * z_seq[t0 - 1] + w * z_seq[t1 - 1]
        elif before:
            out[t - 1] = z_seq[before[-1] - 1]
        else:
            out[t - 1] = z_seq[after[0] - 1]
    return out


def persistence_forecast(window: np.ndarray, mask: MaskSpec) -> np.ndarray:
    """Copy the last observed frame across all forecast steps."""
    last = max(mask.t_obs)
    frame = window[last - 1]
    return np.repeat(frame[None], mask.t_out, axis=0)
