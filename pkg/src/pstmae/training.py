"""Two-phase optimization and the optimizers it relies on.

Phase 1 trains the spatial codec on per-frame reconstruction; phase 2
freezes it and trains the masked transformer on the combined
physical + latent loss. The recurrent baseline trains with teacher
forcing on the same frozen codec. Every run emits a loss-curve CSV
(epoch, split, full_mse, latent_mse) and keeps the best-validation
checkpoint.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .baseline import LatentLstm, interpolate_missing
from .data import (RNG_INIT, RNG_BATCH_RATIO, RNG_SHUFFLE, RNG_TRAIN_MASK,
                   WindowDataset, eval_mask, mask_rng, sample_mask)
from .model import (CaeConfig, MaskedSequenceModel, SpatialAutoencoder,
                    TransformerConfig, load_checkpoint, save_checkpoint)


class DivergenceError(RuntimeError):
    """Loss or gradients went non-finite during training."""


@dataclass
class TrainConfig:
    lam: float = 0.5
    batch: int = 8
    lr_pstmae: float = 3e-4
    lr_baseline: float = 1e-3
    lr_cae: float = 1e-3
    epochs: int = 30
    epochs_cae: int = 30
    seed: int = 0
    missing_ratio: object = 0.5   # float, or list of floats drawn per batch
    eval_missing_ratio: float | None = None
    dilation: int = 1
    grad_clip: float = 1.0        # global norm; 0 disables
    t_in: int = 10
    t_out: int = 5

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("loss weighting coefficient must be >= 0")
        if self.batch < 1:
            raise ValueError("batch size must be >= 1")
        for lr in (self.lr_pstmae, self.lr_baseline, self.lr_cae):
            if lr <= 0:
                raise ValueError("learning rates must be positive")

    @property
    def ratio_grid(self):
        r = self.missing_ratio
        return list(r) if isinstance(r, (list, tuple)) else [float(r)]

    @property
    def eval_ratio(self):
        if self.eval_missing_ratio is not None:
            return float(self.eval_missing_ratio)
        if isinstance(self.missing_ratio, (list, tuple)):
            raise ValueError("eval_missing_ratio is required when training on mixed ratios")
        return float(self.missing_ratio)


# ---------------------------------------------------------------------------
# losses


def combined_loss_terms(x_hat, x, z_hat, z, lam):
    """(total, physical mse, latent mse) per the joint objective."""
    phys = ad.mse(x_hat, x)
    lat = ad.mse(z_hat, z)
    return ad.add(phys, ad.scale(lat, lam)), phys, lat


def combined_loss(x_hat, x, z_hat, z, lam):
    """Mean over all steps of physical MSE plus lam * latent MSE."""
    return combined_loss_terms(x_hat, x, z_hat, z, lam)[0]


# ---------------------------------------------------------------------------
# optimizers


class Adam:
    """Standard Adam over a named parameter dict."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def _moments(self, name, g):
        m = self.m[name]
        v = self.v[name]
        m *= self.beta1
        m += (1.0 - self.beta1) * g
        v *= self.beta2
        v += (1.0 - self.beta2) * g * g
        return m / (1.0 - self.beta1 ** self.t), v / (1.0 - self.beta2 ** self.t)

    def step(self):
        self.t += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient for {name!r} at optimizer step {self.t}")
            mhat, vhat = self._moments(name, g)
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)


class RAdam(Adam):
    """Adam with variance rectification.

    While the rectification term is undefined (approximated SMA length
    rho_t <= 4, the first few steps at beta2=0.999) the update falls back
    to bias-corrected SGD-with-momentum.
    """

    @staticmethod
    def sma_length(t, beta2):
        rho_inf = 2.0 / (1.0 - beta2) - 1.0
        b2t = beta2 ** t
        return rho_inf - 2.0 * t * b2t / (1.0 - b2t)

    @classmethod
    def rectified(cls, t, beta2):
        return cls.sma_length(t, beta2) > 4.0

    def step(self):
        self.t += 1
        rho_inf = 2.0 / (1.0 - self.beta2) - 1.0
        rho_t = self.sma_length(self.t, self.beta2)
        if rho_t > 4.0:
            rect = math.sqrt(((rho_t - 4.0) * (rho_t - 2.0) * rho_inf)
                             / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
        else:
            rect = None
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient for {name!r} at optimizer step {self.t}")
            mhat, vhat = self._moments(name, g)
            if rect is None:
                upd = self.lr * mhat
            else:
                upd = self.lr * rect * mhat / (np.sqrt(vhat) + self.eps)
            p.data -= upd.astype(p.data.dtype)


def clip_gradients(params, max_norm):
    """Scale all gradients so their global L2 norm is at most max_norm."""
    if not max_norm:
        return 1.0
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm:
        s = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= s
        return s
    return 1.0


# ---------------------------------------------------------------------------
# shared plumbing


def write_loss_csv(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "split", "full_mse", "latent_mse"])
        for r in rows:
            w.writerow(r)


def _loss_value(loss):
    val = loss.item()
    if not math.isfinite(val):
        raise DivergenceError(f"training loss diverged (value {val})")
    return val


def _batched(indices, batch):
    for lo in range(0, len(indices), batch):
        yield indices[lo:lo + batch]


def _snapshot(params):
    return {k: p.data.copy() for k, p in params.items()}


def precompute_latents(cae: SpatialAutoencoder, dataset: WindowDataset, chunk=256):
    """Frozen-codec latents for every dilated sequence: seq_index -> (T, d_z)."""
    out = {}
    for split_seqs in dataset.sequences.values():
        for seq_index, arr in split_seqs:
            zs = [cae.encode_array(arr[lo:lo + chunk]) for lo in range(0, arr.shape[0], chunk)]
            out[seq_index] = np.concatenate(zs, axis=0)
    return out


def _window_latents(latents, window):
    z = latents[window.seq_index]
    return z[window.start:window.start + window.frames.shape[0]]


def _frozen_masks(windows, cfg: TrainConfig):
    return [eval_mask(cfg.seed, w.window_id, cfg.t_in, cfg.t_out, cfg.eval_ratio) for w in windows]


# ---------------------------------------------------------------------------
# phase 1: codec pretraining


def train_cae(dataset: WindowDataset, cfg: TrainConfig, model_config: CaeConfig,
              out_ckpt, loss_csv=None, resume=None, log=None):
    """Per-frame reconstruction training; keeps the best-validation weights."""
    rng = mask_rng(cfg.seed, RNG_INIT, 0)
    cae = SpatialAutoencoder(model_config, rng)
    if resume is not None:
        _, _, arrays = load_checkpoint(resume)
        for k in cae.params:
            cae.params[k].data = np.ascontiguousarray(arrays[k], dtype=cae.params[k].data.dtype)
    train = dataset.split_frames("train")
    val = dataset.split_frames("val")
    if train.shape[0] == 0:
        raise ValueError("train split is empty")
    opt = Adam(cae.params, cfg.lr_cae)
    rows, best, best_params = [], math.inf, _snapshot(cae.params)
    for epoch in range(1, cfg.epochs_cae + 1):
        perm = mask_rng(cfg.seed, RNG_SHUFFLE, epoch).permutation(train.shape[0])
        tot, seen = 0.0, 0
        for idx in _batched(perm, cfg.batch):
            batch = np.ascontiguousarray(train[idx])
            with ad.tape():
                x = Tensor(batch)
                loss = ad.mse(cae.reconstruct(x), x)
                ad.backward(loss)
            val_loss = _loss_value(loss)
            clip_gradients(cae.params, cfg.grad_clip)
            opt.step()
            opt.zero_grad()
            tot += val_loss * len(idx)
            seen += len(idx)
        train_mse = tot / seen
        val_mse = evaluate_cae_mse(cae, val if val.shape[0] else train)
        rows.append([epoch, "train", f"{train_mse:.8e}", ""])
        rows.append([epoch, "val", f"{val_mse:.8e}", ""])
        if log:
            log(f"cae epoch {epoch}: train {train_mse:.3e} val {val_mse:.3e}")
        if val_mse < best:
            best, best_params = val_mse, _snapshot(cae.params)
    config = {"cae": _cae_config_dict(model_config), "train": _train_config_dict(cfg),
              "stats": dataset.stats.tolist(), "dataset_kind": dataset.kind}
    save_checkpoint(out_ckpt, "cae", config, best_params)
    if loss_csv:
        write_loss_csv(loss_csv, rows)
    return rows


def evaluate_cae_mse(cae, frames, chunk=64):
    tot = 0.0
    for lo in range(0, frames.shape[0], chunk):
        batch = np.ascontiguousarray(frames[lo:lo + chunk])
        rec = cae.reconstruct(Tensor(batch)).data
        tot += float(((rec - batch) ** 2).mean()) * batch.shape[0]
    return tot / frames.shape[0]


def _cae_config_dict(c: CaeConfig):
    return {"in_channels": c.in_channels, "grid": c.grid,
            "channels": list(c.channels), "latent_dim": c.latent_dim}


def _tr_config_dict(c: TransformerConfig):
    return {"latent_dim": c.latent_dim, "heads": c.heads, "encoder_depth": c.encoder_depth,
            "decoder_depth": c.decoder_depth, "ff_mult": c.ff_mult}


def _train_config_dict(c: TrainConfig):
    return {"lambda": c.lam, "batch": c.batch, "lr_pstmae": c.lr_pstmae,
            "lr_baseline": c.lr_baseline, "lr_cae": c.lr_cae, "epochs": c.epochs,
            "epochs_cae": c.epochs_cae, "seed": c.seed,
            "missing_ratio": c.missing_ratio if not isinstance(c.missing_ratio, tuple) else list(c.missing_ratio),
            "eval_missing_ratio": c.eval_missing_ratio,
            "dilation": c.dilation, "grad_clip": c.grad_clip,
            "t_in": c.t_in, "t_out": c.t_out}


# ---------------------------------------------------------------------------
# phase 2: masked transformer


def _batch_masks(windows, cfg: TrainConfig, epoch, batch_no):
    grid = cfg.ratio_grid
    if len(grid) == 1:
        ratio = grid[0]
    else:  # fixed ratio within a batch, randomized between batches
        ratio = grid[int(mask_rng(cfg.seed, RNG_BATCH_RATIO, epoch, batch_no).integers(len(grid)))]
    return [sample_mask(cfg.t_in, cfg.t_out, ratio,
                        mask_rng(cfg.seed, RNG_TRAIN_MASK, epoch, w.window_id))
            for w in windows]


def _forward_batch(model: MaskedSequenceModel, windows, masks, latents):
    """(z_hat, x_hat, x_true, z_true) tensors for a batch of windows."""
    span = masks[0].span
    z_true = np.stack([_window_latents(latents, w) for w in windows])
    x_true = np.stack([w.frames for w in windows])
    b, _, d = z_true.shape
    z_obs = np.stack([z[[t - 1 for t in m.t_obs]] for z, m in zip(z_true, masks)])
    z_hat = model.temporal_forward(Tensor(np.ascontiguousarray(z_obs)), masks)
    c, g = x_true.shape[2], x_true.shape[3]
    x_hat = ad.reshape(model.cae.decode(ad.reshape(z_hat, (b * span, d))), x_true.shape)
    return z_hat, x_hat, Tensor(x_true), Tensor(z_true)


def _eval_pstmae(model, windows, masks, latents, lam, batch=16):
    tot_full, tot_lat, n = 0.0, 0.0, 0
    for lo in range(0, len(windows), batch):
        ws, ms = windows[lo:lo + batch], masks[lo:lo + batch]
        z_hat, x_hat, x_t, z_t = _forward_batch(model, ws, ms, latents)
        tot_full += float(((x_hat.data - x_t.data) ** 2).mean()) * len(ws)
        tot_lat += float(((z_hat.data - z_t.data) ** 2).mean()) * len(ws)
        n += len(ws)
    return tot_full / n, tot_lat / n


def train_pstmae(dataset: WindowDataset, cae_ckpt, cfg: TrainConfig,
                 tr_config: TransformerConfig, out_ckpt, loss_csv=None,
                 resume=None, log=None):
    """Masked-transformer training over a frozen codec.

    Masks are resampled per window per epoch; validation uses frozen
    per-window masks. Best checkpoint by validation full-space MSE.
    """
    _, cae_cfg_dict, cae_arrays = load_checkpoint(cae_ckpt)
    cae_config = CaeConfig(**cae_cfg_dict["cae"])
    rng = mask_rng(cfg.seed, RNG_INIT, 1)
    model = MaskedSequenceModel(cae_config, tr_config, rng)
    model.load_cae(cae_arrays)
    model.freeze_cae()
    if resume is not None:
        _, _, arrays = load_checkpoint(resume)
        for k, p in model.params.items():
            p.data = np.ascontiguousarray(arrays[k], dtype=p.data.dtype)
    trainable = model.temporal_params()
    opt = RAdam(trainable, cfg.lr_pstmae)
    latents = precompute_latents(model.cae, dataset)
    train_ws = dataset.windows["train"]
    val_ws = dataset.windows["val"] or train_ws
    val_masks = _frozen_masks(val_ws, cfg)
    if not train_ws:
        raise ValueError("train split has no windows")

    rows, best, best_params = [], math.inf, _snapshot(model.params)
    for epoch in range(1, cfg.epochs + 1):
        perm = mask_rng(cfg.seed, RNG_SHUFFLE, epoch).permutation(len(train_ws))
        tot_full, tot_lat, seen = 0.0, 0.0, 0
        for batch_no, idx in enumerate(_batched(perm, cfg.batch)):
            ws = [train_ws[i] for i in idx]
            masks = _batch_masks(ws, cfg, epoch, batch_no)
            with ad.tape():
                z_hat, x_hat, x_t, z_t = _forward_batch(model, ws, masks, latents)
                total, phys, lat = combined_loss_terms(x_hat, x_t, z_hat, z_t, cfg.lam)
                ad.backward(total)
            _loss_value(total)
            clip_gradients(trainable, cfg.grad_clip)
            opt.step()
            opt.zero_grad()
            tot_full += phys.item() * len(ws)
            tot_lat += lat.item() * len(ws)
            seen += len(ws)
        val_full, val_lat = _eval_pstmae(model, val_ws, val_masks, latents, cfg.lam)
        rows.append([epoch, "train", f"{tot_full / seen:.8e}", f"{tot_lat / seen:.8e}"])
        rows.append([epoch, "val", f"{val_full:.8e}", f"{val_lat:.8e}"])
        if log:
            log(f"pstmae epoch {epoch}: train {tot_full / seen:.3e} val {val_full:.3e}")
        if val_full < best:
            best, best_params = val_full, _snapshot(model.params)
    config = {"cae": _cae_config_dict(cae_config), "transformer": _tr_config_dict(tr_config),
              "train": _train_config_dict(cfg), "stats": dataset.stats.tolist(),
              "dataset_kind": dataset.kind}
    save_checkpoint(out_ckpt, "pstmae", config, best_params)
    if loss_csv:
        write_loss_csv(loss_csv, rows)
    return rows


# ---------------------------------------------------------------------------
# recurrent baseline


def _baseline_batch(lstm, cae, windows, masks, latents, cfg, teacher):
    t_in = cfg.t_in
    z_full = np.stack([_window_latents(latents, w) for w in windows])
    z_in = np.stack([interpolate_missing(z[:t_in], m) for z, m in zip(z_full, masks)])
    teach = z_full[:, t_in:] if teacher else None
    z_pred = lstm.rollout(z_in, cfg.t_out, teacher=teach)
    b, to, d = z_pred.shape
    x_true = np.stack([w.frames[t_in:] for w in windows])
    x_pred = ad.reshape(cae.decode(ad.reshape(z_pred, (b * to, d))), x_true.shape)
    return z_pred, x_pred, Tensor(x_true), Tensor(np.ascontiguousarray(z_full[:, t_in:]))


def train_baseline_lstm(dataset: WindowDataset, cae_ckpt, cfg: TrainConfig,
                        out_ckpt, loss_csv=None, resume=None, log=None):
    """Teacher-forced latent LSTM; loss is full-space MSE on forecast steps."""
    _, cae_cfg_dict, cae_arrays = load_checkpoint(cae_ckpt)
    cae_config = CaeConfig(**cae_cfg_dict["cae"])
    cae = SpatialAutoencoder(cae_config)
    cae.params = {k: Tensor(v) for k, v in cae_arrays.items()}
    rng = mask_rng(cfg.seed, RNG_INIT, 2)
    lstm = LatentLstm(cae_config.latent_dim, rng)
    if resume is not None:
        _, _, arrays = load_checkpoint(resume)
        for k, p in lstm.params.items():
            p.data = np.ascontiguousarray(arrays[k], dtype=p.data.dtype)
    opt = Adam(lstm.params, cfg.lr_baseline)
    latents = precompute_latents(cae, dataset)
    train_ws = dataset.windows["train"]
    val_ws = dataset.windows["val"] or train_ws
    val_masks = _frozen_masks(val_ws, cfg)

    rows, best, best_params = [], math.inf, _snapshot(lstm.params)
    for epoch in range(1, cfg.epochs + 1):
        perm = mask_rng(cfg.seed, RNG_SHUFFLE, epoch).permutation(len(train_ws))
        tot_full, tot_lat, seen = 0.0, 0.0, 0
        for batch_no, idx in enumerate(_batched(perm, cfg.batch)):
            ws = [train_ws[i] for i in idx]
            masks = _batch_masks(ws, cfg, epoch, batch_no)
            with ad.tape():
                z_pred, x_pred, x_t, z_t = _baseline_batch(lstm, cae, ws, masks, latents, cfg, teacher=True)
                loss = ad.mse(x_pred, x_t)
                lat = ad.mse(z_pred, z_t)
                ad.backward(loss)
            val_loss = _loss_value(loss)
            clip_gradients(lstm.params, cfg.grad_clip)
            opt.step()
            opt.zero_grad()
            tot_full += val_loss * len(ws)
            tot_lat += lat.item() * len(ws)
            seen += len(ws)
        vf, vl, n = 0.0, 0.0, 0
        for lo in range(0, len(val_ws), 16):
            ws, ms = val_ws[lo:lo + 16], val_masks[lo:lo + 16]
            z_pred, x_pred, x_t, z_t = _baseline_batch(lstm, cae, ws, ms, latents, cfg, teacher=False)
            vf += float(((x_pred.data - x_t.data) ** 2).mean()) * len(ws)
            vl += float(((z_pred.data - z_t.data) ** 2).mean()) * len(ws)
            n += len(ws)
        rows.append([epoch, "train", f"{tot_full / seen:.8e}", f"{tot_lat / seen:.8e}"])
        rows.append([epoch, "val", f"{vf / n:.8e}", f"{vl / n:.8e}"])
        if log:
            log(f"baseline epoch {epoch}: train {tot_full / seen:.3e} val {vf / n:.3e}")
        if vf / n < best:
            best, best_params = vf / n, _snapshot(lstm.params)
    all_params = dict(best_params)
    all_params.update({k: v.data for k, v in cae.params.items()})
    config = {"cae": _cae_config_dict(cae_config), "train": _train_config_dict(cfg),
              "stats": dataset.stats.tolist(), "dataset_kind": dataset.kind}
    save_checkpoint(out_ckpt, "lstm", config, all_params)
    if loss_csv:
        write_loss_csv(loss_csv, rows)
    return rows
