"""Sequences on disk plus the windowing/masking/normalization pipeline.

FieldSequence file layout (little-endian):
    magic  "PSTM"                       4 bytes
    format version                      u32 = 1
    dims T, C, H, W                     4 x u32
    per-channel stats block             C x 8 x f32 (min, max, six zeros)
    payload                             T*C*H*W f32, row-major

A dataset directory holds one ``.fsq`` file per sequence and a
``manifest.json``: a JSON array of {file, kind, params, split}.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

MAGIC = b"PSTM"
FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"


@dataclass
class FieldSequence:
    """(T,C,H,W) float32 snapshots with per-channel (min,max) stats.

    ``stats`` holds the linear map associated with the data: for raw
    sequences it is the data's own range; after :func:`normalize_channelwise`
    it is the train-split range that was applied. ``normalized`` tracks
    which of the two states the data is in.
    """

    data: np.ndarray
    kind: str = "unknown"
    params: dict = field(default_factory=dict)
    stats: np.ndarray | None = None
    normalized: bool = False

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ValueError(f"sequence data must be (T,C,H,W), got {self.data.shape}")
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.stats is None:
            self.stats = channel_ranges(self.data)

    @property
    def dims(self):
        return self.data.shape


def channel_ranges(data):
    """Per-channel (min, max) over a (T,C,H,W) array -> (C,2) float32."""
    c = data.shape[1]
    out = np.empty((c, 2), dtype=np.float32)
    for ci in range(c):
        out[ci, 0] = data[:, ci].min()
        out[ci, 1] = data[:, ci].max()
    return out


def save_sequence(path, seq: FieldSequence):
    path = Path(path)
    t, c, h, w = seq.dims
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<5I", FORMAT_VERSION, t, c, h, w))
        block = np.zeros((c, 8), dtype="<f4")
        block[:, :2] = seq.stats
        f.write(block.tobytes())
        f.write(np.ascontiguousarray(seq.data, dtype="<f4").tobytes())


def load_sequence(path, kind="unknown", params=None) -> FieldSequence:
    path = Path(path)
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ValueError(f"{path}: not a FieldSequence file")
        version, t, c, h, w = struct.unpack("<5I", f.read(20))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported format version {version}")
        stats = np.frombuffer(f.read(c * 8 * 4), dtype="<f4").reshape(c, 8)[:, :2].copy()
        data = np.frombuffer(f.read(t * c * h * w * 4), dtype="<f4").reshape(t, c, h, w).copy()
    return FieldSequence(data=data, kind=kind, params=params or {}, stats=stats)


def write_manifest(data_dir, entries):
    with open(Path(data_dir) / MANIFEST_NAME, "w") as f:
        json.dump(entries, f, indent=1, sort_keys=True)
        f.write("\n")


def read_manifest(data_dir):
    p = Path(data_dir) / MANIFEST_NAME
    if not p.is_file():
        raise FileNotFoundError(f"dataset manifest not found: {p}")
    with open(p) as f:
        return json.load(f)


# ---------------------------------------------------------------------------
# splits and normalization


def split(n_items, ratios=(0.8, 0.1, 0.1), seed=0):
    """Seeded disjoint train/val/test index split at sequence granularity."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    if n_items < 3:
        raise ValueError(f"need at least 3 sequences to split, got {n_items}")
    perm = np.random.default_rng(seed).permutation(n_items)
    n_train = int(ratios[0] * n_items)
    n_val = int(ratios[1] * n_items)
    if n_train == 0 or n_val == 0 or n_train + n_val >= n_items:
        raise ValueError(f"{n_items} sequences produce an empty split at ratios {ratios}")
    train = np.sort(perm[:n_train])
    val = np.sort(perm[n_train:n_train + n_val])
    test = np.sort(perm[n_train + n_val:])
    return train.tolist(), val.tolist(), test.tolist()


def normalize_channelwise(sequences, train_indices):
    """Min-max normalize every sequence with train-split channel statistics.

    Values on non-train sequences are clamped to [0,1]. A constant channel
    maps to 0.5 (with a warning). Returns (new sequences, stats (C,2)).
    """
    if not train_indices:
        raise ValueError("normalization requires a non-empty train split")
    c = sequences[0].data.shape[1]
    mins = np.full(c, np.inf, dtype=np.float64)
    maxs = np.full(c, -np.inf, dtype=np.float64)
    for i in train_indices:
        r = channel_ranges(sequences[i].data)
        mins = np.minimum(mins, r[:, 0])
        maxs = np.maximum(maxs, r[:, 1])
    stats = np.stack([mins, maxs], axis=1).astype(np.float32)

    out = []
    for i, seq in enumerate(sequences):
        data = seq.data.copy()
        for ci in range(c):
            lo, hi = float(stats[ci, 0]), float(stats[ci, 1])
            if hi == lo:
                warnings.warn(f"channel {ci} is constant in the train split; mapping to 0.5")
                data[:, ci] = 0.5
            else:
                data[:, ci] = (data[:, ci] - lo) / (hi - lo)
        if i not in train_indices:
            np.clip(data, 0.0, 1.0, out=data)
        out.append(replace(seq, data=data, stats=stats.copy(), normalized=True))
    return out, stats


def denormalize(data, stats):
    """Invert the channel-wise min-max map on a (...,C,H,W) array."""
    out = np.asarray(data, dtype=np.float32).copy()
    for ci in range(stats.shape[0]):
        lo, hi = float(stats[ci, 0]), float(stats[ci, 1])
        out[..., ci, :, :] = out[..., ci, :, :] * (hi - lo) + lo
    return out


# ---------------------------------------------------------------------------
# windows, dilation, masks


def dilate(data, d):
    """Keep every d-th frame starting from the first: indices 0, d, 2d, ..."""
    if int(d) != d or d < 1:
        raise ValueError(f"dilation factor must be an integer >= 1, got {d}")
    return data[::int(d)]


def shifting_windows(seq_len, t_in=10, t_out=5, stride=1):
    """Start offsets of all length-(t_in+t_out) windows at the given stride."""
    span = t_in + t_out
    if seq_len < span:
        raise ValueError(f"sequence length {seq_len} shorter than window span {span}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    return list(range(0, seq_len - span + 1, stride))


@dataclass(frozen=True)
class MaskSpec:
    """Disjoint index sets over a window; 1-based step indices.

    t_obs and t_miss partition {1..t_in}; t_out_set covers the forecast
    steps {t_in+1 .. t_in+t_out}.
    """

    t_in: int
    t_out: int
    t_obs: tuple
    t_miss: tuple

    def __post_init__(self):
        if set(self.t_obs) | set(self.t_miss) != set(range(1, self.t_in + 1)) or \
                set(self.t_obs) & set(self.t_miss):
            raise ValueError("t_obs and t_miss must partition 1..t_in")
        if not self.t_obs:
            raise ValueError("at least one observed step is required")

    @property
    def t_out_set(self):
        return tuple(range(self.t_in + 1, self.t_in + self.t_out + 1))

    @property
    def masked(self):
        return tuple(sorted(self.t_miss)) + self.t_out_set

    @property
    def span(self):
        return self.t_in + self.t_out


def sample_mask(t_in, t_out, missing_ratio, rng) -> MaskSpec:
    """Uniformly random missing set of size round(ratio * t_in)."""
    if not 0.0 <= missing_ratio < 1.0:
        raise ValueError(f"missing ratio must be in [0,1), got {missing_ratio}")
    n_miss = int(round(missing_ratio * t_in))
    if n_miss >= t_in:
        raise ValueError("missing ratio leaves no observed steps")
    miss = rng.choice(t_in, size=n_miss, replace=False) + 1
    t_miss = tuple(sorted(int(i) for i in miss))
    t_obs = tuple(i for i in range(1, t_in + 1) if i not in set(t_miss))
    return MaskSpec(t_in=t_in, t_out=t_out, t_obs=t_obs, t_miss=t_miss)


def mask_rng(seed, domain, *key):
    """Deterministic Generator for a (seed, domain, key...) address."""
    return np.random.default_rng(np.random.SeedSequence((int(seed), int(domain)) + tuple(int(k) for k in key)))


# rng domains
RNG_INIT = 0
RNG_TRAIN_MASK = 1
RNG_EVAL_MASK = 2
RNG_SHUFFLE = 3
RNG_BATCH_RATIO = 4


def eval_mask(seed, window_id, t_in, t_out, missing_ratio) -> MaskSpec:
    """Frozen per-window evaluation mask (reproducible across runs)."""
    return sample_mask(t_in, t_out, missing_ratio, mask_rng(seed, RNG_EVAL_MASK, window_id))


def apply_placeholders(window, mask: MaskSpec):
    """Zero out frames at missing and forecast positions (copy)."""
    if window.shape[0] != mask.span:
        raise ValueError(f"window length {window.shape[0]} != t_in+t_out {mask.span}")
    out = np.array(window, dtype=np.float32, copy=True)
    for t in mask.masked:
        if not 1 <= t <= window.shape[0]:
            raise IndexError(f"mask index {t} out of range")
        out[t - 1] = 0.0
    return out


# ---------------------------------------------------------------------------
# assembled dataset


@dataclass
class Window:
    """A view into a normalized sequence plus its stable identity."""

    frames: np.ndarray  # (t_in+t_out, C, H, W), normalized
    window_id: int      # stable across runs: position in manifest enumeration
    seq_index: int
    start: int


@dataclass
class WindowDataset:
    kind: str
    stats: np.ndarray
    t_in: int
    t_out: int
    dilation: int
    windows: dict          # split -> list[Window]
    sequences: dict        # split -> list[(seq_index, dilated (T,C,H,W))]
    channels: int
    grid: int

    def split_windows(self, name):
        return self.windows[name]

    def split_frames(self, name):
        """All dilated frames of a split stacked into one (N,C,H,W) array."""
        arrs = [a for _, a in self.sequences[name]]
        if not arrs:
            return np.empty((0, self.channels, self.grid, self.grid), np.float32)
        return np.concatenate(arrs, axis=0)


def build_dataset(data_dir, t_in=10, t_out=5, dilation=1, stride=1) -> WindowDataset:
    """Load a generated dataset directory into normalized, dilated windows.

    Splits come from the manifest; normalization statistics come from the
    train split only. Window ids are stable across runs.
    """
    entries = read_manifest(data_dir)
    data_dir = Path(data_dir)
    seqs = [load_sequence(data_dir / e["file"], kind=e["kind"], params=e["params"]) for e in entries]
    split_of = [e["split"] for e in entries]
    train_idx = [i for i, s in enumerate(split_of) if s == "train"]
    seqs, stats = normalize_channelwise(seqs, train_idx)

    windows = {"train": [], "val": [], "test": []}
    sequences = {"train": [], "val": [], "test": []}
    wid = 0
    for i, seq in enumerate(seqs):
        dilated = dilate(seq.data, dilation)
        sequences[split_of[i]].append((i, dilated))
        for start in shifting_windows(dilated.shape[0], t_in, t_out, stride):
            windows[split_of[i]].append(
                Window(frames=dilated[start:start + t_in + t_out], window_id=wid,
                       seq_index=i, start=start))
            wid += 1
    t, c, h, w = seqs[0].dims
    return WindowDataset(kind=seqs[0].kind, stats=stats, t_in=t_in, t_out=t_out,
                         dilation=dilation, windows=windows, sequences=sequences,
                         channels=c, grid=h)
