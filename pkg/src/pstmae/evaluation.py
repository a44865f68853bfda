"""Checkpoint evaluation: metrics per variable and forecast step.

Forecasting models (masked transformer, latent LSTM, persistence) are
scored on the t_out forecast frames of every window in the chosen split
under frozen per-window masks, which keeps the three directly
comparable. A codec checkpoint is scored on per-frame reconstruction
(step 0 rows).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .baseline import LatentLstm, interpolate_missing, persistence_forecast
from .data import WindowDataset, build_dataset, eval_mask
from .metrics import MetricsReport, make_row, mse_field, psnr_field, psnr_is_exact, ssim_field, error_map
from .model import CaeConfig, SpatialAutoencoder, TransformerConfig, MaskedSequenceModel, load_checkpoint
from .training import TrainConfig, precompute_latents, _window_latents

VARIABLE_NAMES = {"swe": ("h", "u", "v"), "dr": ("u", "v")}


def variable_names(kind, channels):
    names = VARIABLE_NAMES.get(kind)
    if names and len(names) == channels:
        return names
    return tuple(f"c{i}" for i in range(channels))


def _train_cfg_from(config):
    t = config["train"]
    return TrainConfig(
        lam=t["lambda"], batch=t["batch"], lr_pstmae=t["lr_pstmae"],
        lr_baseline=t["lr_baseline"], lr_cae=t["lr_cae"], epochs=t["epochs"],
        epochs_cae=t["epochs_cae"], seed=t["seed"], missing_ratio=t["missing_ratio"],
        eval_missing_ratio=t.get("eval_missing_ratio"), dilation=t["dilation"],
        grad_clip=t["grad_clip"], t_in=t["t_in"], t_out=t["t_out"])


def _frozen_eval_masks(windows, cfg: TrainConfig):
    return [eval_mask(cfg.seed, w.window_id, cfg.t_in, cfg.t_out, cfg.eval_ratio) for w in windows]


def _score_forecasts(preds, windows, cfg, dataset, dataset_name, model_name, maps_dir=None):
    """preds: list of (t_out,C,H,W) arrays aligned with windows."""
    names = variable_names(dataset.kind, dataset.channels)
    report = MetricsReport()
    t_in = cfg.t_in
    per = {(v, k): ([], [], [], 0) for v in names for k in range(1, cfg.t_out + 1)}
    for w, pred in zip(windows, preds):
        truth = w.frames[t_in:]
        for k in range(cfg.t_out):
            for ci, v in enumerate(names):
                mses, ssims, psnrs, exact = per[(v, k + 1)]
                mses.append(mse_field(pred[k, ci], truth[k, ci]))
                ssims.append(ssim_field(pred[k, ci], truth[k, ci]))
                psnrs.append(psnr_field(pred[k, ci], truth[k, ci]))
                if psnr_is_exact(pred[k, ci], truth[k, ci]):
                    exact += 1
                per[(v, k + 1)] = (mses, ssims, psnrs, exact)
    for (v, k), (mses, ssims, psnrs, exact) in per.items():
        report.add(make_row(dataset_name, model_name, v, k, mses, ssims, psnrs, exact))
    report.finalize()
    if maps_dir is not None and windows:
        w, pred = windows[0], preds[0]
        truth = w.frames[t_in:]
        for k in range(cfg.t_out):
            for ci, v in enumerate(names):
                error_map(pred[k, ci], truth[k, ci], f"{maps_dir}/{model_name}_{v}_step{k + 1}")
    return report


def predict_pstmae(model: MaskedSequenceModel, dataset: WindowDataset, windows, masks, batch=16):
    """Forecast frames for each window via the single-pass model."""
    latents = precompute_latents(model.cae, dataset)
    t_in = dataset.t_in
    out = []
    for lo in range(0, len(windows), batch):
        ws, ms = windows[lo:lo + batch], masks[lo:lo + batch]
        z_true = np.stack([_window_latents(latents, w) for w in ws])
        z_obs = np.stack([z[[t - 1 for t in m.t_obs]] for z, m in zip(z_true, ms)])
        z_hat = model.temporal_forward(Tensor(np.ascontiguousarray(z_obs)), ms)
        b, span, d = z_hat.shape
        x_hat = model.cae.decode(ad.reshape(z_hat, (b * span, d))).data
        x_hat = x_hat.reshape(b, span, *x_hat.shape[1:])
        out.extend(x_hat[i, t_in:] for i in range(b))
    return out


def predict_lstm(lstm: LatentLstm, cae: SpatialAutoencoder, dataset: WindowDataset,
                 windows, masks, t_in, t_out, batch=16):
    """Autoregressive rollout after latent interpolation over missing steps."""
    latents = precompute_latents(cae, dataset)
    out = []
    for lo in range(0, len(windows), batch):
        ws, ms = windows[lo:lo + batch], masks[lo:lo + batch]
        z_full = np.stack([_window_latents(latents, w) for w in ws])
        z_in = np.stack([interpolate_missing(z[:t_in], m) for z, m in zip(z_full, ms)])
        z_pred = lstm.rollout(z_in, t_out, teacher=None)
        b, to, d = z_pred.shape
        x_pred = cae.decode(ad.reshape(z_pred, (b * to, d))).data.reshape(b, to, -1, dataset.grid, dataset.grid)
        out.extend(x_pred[i] for i in range(b))
    return out


def evaluate_persistence(dataset: WindowDataset, cfg: TrainConfig, split,
                         dataset_name, maps_dir=None):
    windows = dataset.windows[split]
    masks = _frozen_eval_masks(windows, cfg)
    preds = [persistence_forecast(w.frames, m) for w, m in zip(windows, masks)]
    return _score_forecasts(preds, windows, cfg, dataset, dataset_name, "persistence", maps_dir)


def evaluate_cae_report(cae: SpatialAutoencoder, dataset: WindowDataset, split,
                        dataset_name, maps_dir=None, chunk=64):
    """Per-frame reconstruction quality (step 0 rows)."""
    frames = dataset.split_frames(split)
    names = variable_names(dataset.kind, dataset.channels)
    per = {v: ([], [], [], 0) for v in names}
    recon_first = None
    for lo in range(0, frames.shape[0], chunk):
        batch = np.ascontiguousarray(frames[lo:lo + chunk])
        rec = cae.reconstruct(Tensor(batch)).data
        if recon_first is None:
            recon_first = (batch[0], rec[0])
        for i in range(batch.shape[0]):
            for ci, v in enumerate(names):
                mses, ssims, psnrs, exact = per[v]
                mses.append(mse_field(rec[i, ci], batch[i, ci]))
                ssims.append(ssim_field(rec[i, ci], batch[i, ci]))
                psnrs.append(psnr_field(rec[i, ci], batch[i, ci]))
                if psnr_is_exact(rec[i, ci], batch[i, ci]):
                    exact += 1
                per[v] = (mses, ssims, psnrs, exact)
    report = MetricsReport()
    for v, (mses, ssims, psnrs, exact) in per.items():
        report.add(make_row(dataset_name, "cae", v, 0, mses, ssims, psnrs, exact))
    report.finalize()
    if maps_dir is not None and recon_first is not None:
        truth, rec = recon_first
        for ci, v in enumerate(names):
            error_map(rec[ci], truth[ci], f"{maps_dir}/cae_{v}_recon")
    return report


def evaluate_checkpoint(ckpt_path, data_dir, split="test", dataset_name=None,
                        maps_dir=None, with_persistence=False):
    """Evaluate any checkpoint kind on a dataset split.

    Returns (report, persistence_report_or_None). The dataset is rebuilt
    with the dilation/window protocol stored in the checkpoint.
    """
    kind, config, arrays = load_checkpoint(ckpt_path)
    cfg = _train_cfg_from(config)
    dataset = build_dataset(data_dir, t_in=cfg.t_in, t_out=cfg.t_out, dilation=cfg.dilation)
    dataset_name = dataset_name or config.get("dataset_kind", dataset.kind)
    windows = dataset.windows[split]
    if kind == "cae":
        cae = SpatialAutoencoder(CaeConfig(**config["cae"]))
        cae.params = {k: Tensor(v) for k, v in arrays.items()}
        report = evaluate_cae_report(cae, dataset, split, dataset_name, maps_dir)
    elif kind == "pstmae":
        model = MaskedSequenceModel(CaeConfig(**config["cae"]), TransformerConfig(**config["transformer"]))
        for name, arr in arrays.items():
            model.params[name] = Tensor(arr)
        model.cae.params = {k: v for k, v in model.params.items() if k.startswith("cae.")}
        for blk in model.enc_blocks + model.dec_blocks:
            blk.params = {k: v for k, v in model.params.items() if k.startswith(blk.prefix + ".")}
        masks = _frozen_eval_masks(windows, cfg)
        preds = predict_pstmae(model, dataset, windows, masks)
        report = _score_forecasts(preds, windows, cfg, dataset, dataset_name, "pstmae", maps_dir)
    elif kind == "lstm":
        cae = SpatialAutoencoder(CaeConfig(**config["cae"]))
        cae.params = {k: Tensor(v) for k, v in arrays.items() if k.startswith("cae.")}
        lstm = LatentLstm(CaeConfig(**config["cae"]).latent_dim)
        lstm.params = {k: Tensor(v) for k, v in arrays.items() if k.startswith("lstm.")}
        masks = _frozen_eval_masks(windows, cfg)
        preds = predict_lstm(lstm, cae, dataset, windows, masks, cfg.t_in, cfg.t_out)
        report = _score_forecasts(preds, windows, cfg, dataset, dataset_name, "lstm", maps_dir)
    else:
        raise ValueError(f"unknown checkpoint kind {kind!r}")
    pers = None
    if with_persistence and kind != "cae":
        pers = evaluate_persistence(dataset, cfg, split, dataset_name, maps_dir)
    return report, pers
