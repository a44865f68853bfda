"""Spatial codec and masked transformer over latent sequences.

The spatial autoencoder compresses (C,H,W) fields into d_z-dimensional
latents through a ladder of stride-2 3x3 convolutions (GELU hidden
activations, Sigmoid output). The temporal model runs self-attention over
the observed latents only, then a lighter decoder stack over the full
sequence in which every missing/future position is a shared learnable
mask token plus its positional embedding; the whole sequence is predicted
in one pass.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import MaskSpec

CHECKPOINT_MAGIC = b"PSCK"


@dataclass
class CaeConfig:
    in_channels: int = 3
    grid: int = 128
    channels: tuple = (8, 16, 32, 64, 128)
    latent_dim: int = 128

    def __post_init__(self):
        self.channels = tuple(self.channels)
        if len(self.channels) < 2:
            raise ValueError("channel ladder needs at least 2 stages")
        down = 2 ** (len(self.channels) - 1)
        if self.grid % down:
            raise ValueError(f"grid {self.grid} not divisible by downsampling factor {down}")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")

    @property
    def bottleneck_grid(self):
        return self.grid // 2 ** (len(self.channels) - 1)

    @property
    def bottleneck_size(self):
        return self.channels[-1] * self.bottleneck_grid ** 2


@dataclass
class TransformerConfig:
    latent_dim: int = 128
    heads: int = 2
    encoder_depth: int = 4
    decoder_depth: int = 1
    ff_mult: int = 4

    def __post_init__(self):
        if self.latent_dim % self.heads:
            raise ValueError("latent_dim must be divisible by heads")
        if self.encoder_depth < 1 or self.decoder_depth < 1:
            raise ValueError("depths must be >= 1")

    @property
    def head_dim(self):
        return self.latent_dim // self.heads


# preset matching the larger real-data configuration
SST_TRANSFORMER = TransformerConfig(latent_dim=128, heads=8, encoder_depth=8, decoder_depth=1)


def positional_embedding(t, d):
    """Sine-cosine embedding: component 2i = sin(t/10000^(2i/d)), 2i+1 = cos."""
    idx = np.arange(d)
    expo = 2.0 * (idx // 2) / d
    angle = t / np.power(10000.0, expo)
    out = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return out.astype(ad.active_dtype())


def positional_table(n_steps, d):
    """Rows t = 1..n_steps of the sine-cosine embedding (non-trainable)."""
    return np.stack([positional_embedding(t, d) for t in range(1, n_steps + 1)])


def _he_conv(rng, c_out, c_in):
    std = np.sqrt(2.0 / (c_in * 9))
    return Tensor(rng.normal(0.0, std, size=(c_out, c_in, 3, 3)), requires_grad=True)


def _glorot(rng, d_in, d_out):
    lim = np.sqrt(6.0 / (d_in + d_out))
    return Tensor(rng.uniform(-lim, lim, size=(d_in, d_out)), requires_grad=True)


def _zeros(*shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(*shape):
    return Tensor(np.ones(shape), requires_grad=True)


class SpatialAutoencoder:
    """Convolutional field codec: encode (N,C,H,W) -> (N,d_z) and back."""

    def __init__(self, config: CaeConfig, rng=None):
        self.config = config
        self.params = {}
        if rng is None:
            return
        chans = config.channels
        prev = config.in_channels
        for i, ch in enumerate(chans):
            self.params[f"cae.enc.conv{i}.w"] = _he_conv(rng, ch, prev)
            self.params[f"cae.enc.conv{i}.b"] = _zeros(ch)
            prev = ch
        flat = config.bottleneck_size
        self.params["cae.enc.fc.w"] = _glorot(rng, flat, config.latent_dim)
        self.params["cae.enc.fc.b"] = _zeros(config.latent_dim)
        self.params["cae.dec.fc.w"] = _glorot(rng, config.latent_dim, flat)
        self.params["cae.dec.fc.b"] = _zeros(flat)
        for i in range(len(chans) - 1, 0, -1):
            self.params[f"cae.dec.tconv{i}.w"] = _he_conv(rng, chans[i], chans[i - 1])
            self.params[f"cae.dec.tconv{i}.b"] = _zeros(chans[i - 1])
        self.params["cae.dec.out.w"] = _he_conv(rng, config.in_channels, chans[0])
        self.params["cae.dec.out.b"] = _zeros(config.in_channels)

    def encode(self, x: Tensor) -> Tensor:
        p = self.params
        h = x
        for i in range(len(self.config.channels)):
            stride = 1 if i == 0 else 2
            h = ad.gelu(ad.conv2d(h, p[f"cae.enc.conv{i}.w"], stride=stride, bias=p[f"cae.enc.conv{i}.b"]))
        n = h.shape[0]
        h = ad.reshape(h, (n, self.config.bottleneck_size))
        return ad.linear(h, p["cae.enc.fc.w"], p["cae.enc.fc.b"])

    def decode(self, z: Tensor) -> Tensor:
        p = self.params
        cfg = self.config
        n = z.shape[0]
        h = ad.gelu(ad.linear(z, p["cae.dec.fc.w"], p["cae.dec.fc.b"]))
        h = ad.reshape(h, (n, cfg.channels[-1], cfg.bottleneck_grid, cfg.bottleneck_grid))
        for i in range(len(cfg.channels) - 1, 0, -1):
            h = ad.gelu(ad.conv2d_transpose(h, p[f"cae.dec.tconv{i}.w"], stride=2, bias=p[f"cae.dec.tconv{i}.b"]))
        return ad.sigmoid(ad.conv2d(h, p["cae.dec.out.w"], stride=1, bias=p["cae.dec.out.b"]))

    def encode_array(self, frames: np.ndarray) -> np.ndarray:
        """Tape-free encode of a (N,C,H,W) array (frozen-codec fast path)."""
        return self.encode(Tensor(frames)).data

    def reconstruct(self, x: Tensor) -> Tensor:
        return self.decode(self.encode(x))


class TransformerBlock:
    """Pre-norm block: attention with a query-side residual, then FFN.

    Given normalized input, per-head attention computes
    A = softmax(Q K^T / sqrt(d_k)), O = A V; the projected output adds the
    query matrix back (O' = Linear(O) + Q) before the feedforward sublayer
    with its own residual.
    """

    def __init__(self, config: TransformerConfig, prefix, rng=None, params=None):
        self.config = config
        self.prefix = prefix
        self.params = {}
        d = config.latent_dim
        if rng is None:
            return
        p = self.params
        p[f"{prefix}.ln1.g"] = _ones(d)
        p[f"{prefix}.ln1.b"] = _zeros(d)
        for name in ("wq", "wk", "wv", "wo"):
            p[f"{prefix}.{name}.w"] = _glorot(rng, d, d)
            p[f"{prefix}.{name}.b"] = _zeros(d)
        p[f"{prefix}.ln2.g"] = _ones(d)
        p[f"{prefix}.ln2.b"] = _zeros(d)
        p[f"{prefix}.ff1.w"] = _glorot(rng, d, config.ff_mult * d)
        p[f"{prefix}.ff1.b"] = _zeros(config.ff_mult * d)
        p[f"{prefix}.ff2.w"] = _glorot(rng, config.ff_mult * d, d)
        p[f"{prefix}.ff2.b"] = _zeros(d)

    def _lin(self, x, name):
        return ad.linear(x, self.params[f"{self.prefix}.{name}.w"], self.params[f"{self.prefix}.{name}.b"])

    def attention_weights(self, x: Tensor) -> Tensor:
        """Attention matrix A (B, heads, n, n) for a (B,n,d) input."""
        return self._attend(x)[0]

    def _attend(self, x):
        cfg = self.config
        b, n, d = x.shape
        hn = ad.layer_norm_lastdim(x, self.params[f"{self.prefix}.ln1.g"], self.params[f"{self.prefix}.ln1.b"])
        q = self._lin(hn, "wq")
        k = self._lin(hn, "wk")
        v = self._lin(hn, "wv")
        heads, dk = cfg.heads, cfg.head_dim

        def split(t):
            return ad.transpose(ad.reshape(t, (b, n, heads, dk)), (0, 2, 1, 3))

        qh, kh, vh = split(q), split(k), split(v)
        logits = ad.scale(ad.matmul(qh, ad.transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(dk))
        a = ad.softmax_lastdim(logits)
        o = ad.matmul(a, vh)
        o = ad.reshape(ad.transpose(o, (0, 2, 1, 3)), (b, n, d))
        return a, ad.add(self._lin(o, "wo"), q)

    def forward(self, x: Tensor) -> Tensor:
        _, op = self._attend(x)
        f = ad.layer_norm_lastdim(op, self.params[f"{self.prefix}.ln2.g"], self.params[f"{self.prefix}.ln2.b"])
        ff = self._lin(ad.gelu(self._lin(f, "ff1")), "ff2")
        return ad.add(op, ff)


class MaskedSequenceModel:
    """Full pipeline: spatial codec + masked latent transformer.

    Observed frames are encoded, tagged with positional embeddings, and
    passed through the encoder stack; the decoder stack sees the full
    sequence with a learnable mask token standing in at missing and
    future positions, and a linear head emits the predicted latents.
    Placeholder content at masked input positions never reaches the
    network.
    """

    def __init__(self, cae_config: CaeConfig, tr_config: TransformerConfig, rng=None):
        if cae_config.latent_dim != tr_config.latent_dim:
            raise ValueError("codec and transformer latent dims must agree")
        self.cae_config = cae_config
        self.tr_config = tr_config
        self.cae = SpatialAutoencoder(cae_config, rng)
        self.enc_blocks = [TransformerBlock(tr_config, f"enc{i}", rng) for i in range(tr_config.encoder_depth)]
        self.dec_blocks = [TransformerBlock(tr_config, f"dec{i}", rng) for i in range(tr_config.decoder_depth)]
        self.params = dict(self.cae.params)
        for blk in self.enc_blocks + self.dec_blocks:
            self.params.update(blk.params)
        if rng is not None:
            d = tr_config.latent_dim
            self.params["head.w"] = _glorot(rng, d, d)
            self.params["head.b"] = _zeros(d)
            self.params["mask_token"] = Tensor(rng.normal(0.0, 0.02, size=d), requires_grad=True)
        self._pos_cache = {}

    # -- positional embeddings (non-trainable, excluded from params) --------

    def pos_rows(self, span):
        key = (span, np.dtype(ad.active_dtype()).name)
        if key not in self._pos_cache:
            self._pos_cache[key] = positional_table(span, self.tr_config.latent_dim)
        return self._pos_cache[key]

    # -- stages --------------------------------------------------------------

    def encoder_forward(self, tokens: Tensor) -> Tensor:
        """Encoder stack over observed tokens only; tokens: (B, n_obs, d)."""
        if tokens.shape[1] < 1:
            raise ad.ShapeError("encoder requires at least one observed token")
        for blk in self.enc_blocks:
            tokens = blk.forward(tokens)
        return tokens

    def decoder_forward(self, enc_tokens: Tensor, masks) -> Tensor:
        """Assemble the full sequence and predict latents for every step.

        enc_tokens: (B, n_obs, d) aligned to each mask's observed steps;
        returns (B, t_in+t_out, d).
        """
        b, n_obs, d = enc_tokens.shape
        span = masks[0].span
        if len(masks) != b or any(len(m.t_obs) != n_obs or m.span != span for m in masks):
            raise ad.ShapeError("masks misaligned with encoded tokens")
        flat = ad.reshape(enc_tokens, (b * n_obs, d))
        rep = ad.gather_rows(ad.reshape(self.params["mask_token"], (1, d)), [0] * span)
        mask_rows = ad.add(rep, Tensor(self.pos_rows(span)))
        pool = ad.concat([flat, mask_rows], axis=0)
        idx = []
        for wi, m in enumerate(masks):
            obs_pos = {t: j for j, t in enumerate(m.t_obs)}
            for t in range(1, span + 1):
                idx.append(wi * n_obs + obs_pos[t] if t in obs_pos else b * n_obs + t - 1)
        full = ad.reshape(ad.gather_rows(pool, idx), (b, span, d))
        for blk in self.dec_blocks:
            full = blk.forward(full)
        return ad.linear(full, self.params["head.w"], self.params["head.b"])

    def temporal_forward(self, z_obs: Tensor, masks) -> Tensor:
        """Latents at observed steps (B, n_obs, d) -> all steps (B, span, d)."""
        b, n_obs, d = z_obs.shape
        span = masks[0].span
        pos = self.pos_rows(span)
        pos_obs = np.stack([pos[[t - 1 for t in m.t_obs]] for m in masks])
        tokens = ad.add(z_obs, Tensor(pos_obs))
        return self.decoder_forward(self.encoder_forward(tokens), masks)

    def forward(self, window, mask: MaskSpec):
        """Single-pass reconstruction of one window.

        window: (t_in+t_out, C, H, W) normalized array with placeholders
        applied; only frames at mask.t_obs are read. Returns
        (x_hat (span,C,H,W), z_hat (span,d)) tensors.
        """
        window = np.asarray(window)
        if window.shape[0] != mask.span:
            raise ad.ShapeError(f"window length {window.shape[0]} != t_in+t_out {mask.span}")
        obs = np.ascontiguousarray(window[[t - 1 for t in mask.t_obs]])
        z_obs = self.cae.encode(Tensor(obs))
        n_obs, d = z_obs.shape
        z_hat = self.temporal_forward(ad.reshape(z_obs, (1, n_obs, d)), [mask])
        z_flat = ad.reshape(z_hat, (mask.span, d))
        x_hat = self.cae.decode(z_flat)
        return x_hat, z_flat

    # -- parameter bookkeeping ------------------------------------------------

    def all_params(self):
        return self.params

    def temporal_params(self):
        """Trainable parameters of phase 2 (everything except the codec)."""
        return {k: v for k, v in self.params.items() if not k.startswith("cae.")}

    def freeze_cae(self):
        for k, v in self.params.items():
            if k.startswith("cae."):
                v.requires_grad = False

    def load_cae(self, arrays):
        for k, v in self.cae.params.items():
            v.data = np.ascontiguousarray(arrays[k], dtype=v.data.dtype)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, kind, config, params):
    """JSON header (config + named parameter index) followed by an f32 blob.

    Byte-stable for identical parameters: the header is canonical JSON
    and parameters are laid out in insertion order.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index = []
    blobs = []
    offset = 0
    for name, t in params.items():
        arr = np.ascontiguousarray(t.data if isinstance(t, Tensor) else t, dtype="<f4")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps(
        {"format": "pstmae-checkpoint", "version": 1, "kind": kind,
         "config": config, "params": index},
        sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)


def load_checkpoint(path):
    """Returns (kind, config dict, {name: float32 array})."""
    path = Path(path)
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode())
        blob = f.read()
    params = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=entry["offset"]).reshape(shape)
        params[entry["name"]] = arr.copy()
    return header["kind"], header["config"], params


def cae_from_checkpoint(path):
    kind, config, arrays = load_checkpoint(path)
    if kind != "cae":
        raise ValueError(f"{path}: expected a cae checkpoint, got {kind!r}")
    cae = SpatialAutoencoder(CaeConfig(**config["cae"]))
    for name in arrays:
        cae.params[name] = Tensor(arrays[name], requires_grad=True)
    return cae


def model_from_checkpoint(path):
    kind, config, arrays = load_checkpoint(path)
    if kind != "pstmae":
        raise ValueError(f"{path}: expected a pstmae checkpoint, got {kind!r}")
    model = MaskedSequenceModel(CaeConfig(**config["cae"]), TransformerConfig(**config["transformer"]))
    for name, arr in arrays.items():
        model.params[name] = Tensor(arr, requires_grad=True)
    model.cae.params = {k: v for k, v in model.params.items() if k.startswith("cae.")}
    for blk in model.enc_blocks + model.dec_blocks:
        blk.params = {k: v for k, v in model.params.items() if k.startswith(blk.prefix + ".")}
    return model, config
