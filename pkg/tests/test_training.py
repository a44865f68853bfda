"""Optimizers, losses, baseline cell, and the training loops."""

import csv
import math

import numpy as np
import pytest

from pstmae import autodiff as ad
from pstmae import data
from pstmae import model as M
from pstmae import pde
from pstmae import training as T
from pstmae.autodiff import Tensor
from pstmae.baseline import LatentLstm, interpolate_missing, persistence_forecast


class TestCombinedLoss:
    def test_perfect_prediction_is_zero(self, rng):
        x = Tensor(rng.random((2, 15, 1, 4, 4)))
        z = Tensor(rng.random((2, 15, 8)))
        assert T.combined_loss(x, x, z, z, 0.5).item() == 0.0

    def test_lambda_zero_is_physical_mse(self, rng):
        xh = Tensor(rng.random((2, 4)))
        x = Tensor(rng.random((2, 4)))
        zh = Tensor(rng.random((2, 3)))
        z = Tensor(rng.random((2, 3)))
        assert T.combined_loss(xh, x, zh, z, 0.0).item() == ad.mse(xh, x).item()

    def test_default_lambda(self):
        assert T.TrainConfig().lam == 0.5

    def test_nonnegative_and_zero_iff_exact(self, rng):
        x = Tensor(rng.random((2, 4)))
        z = Tensor(rng.random((2, 3)))
        x_off = Tensor(x.data + 0.1)
        z_off = Tensor(z.data + 0.1)
        assert T.combined_loss(x_off, x, z, z, 0.5).item() > 0
        assert T.combined_loss(x, x, z_off, z, 0.5).item() > 0
        assert T.combined_loss(x, x, z, z, 0.5).item() == 0.0

    def test_config_validation(self):
        with pytest.raises(ValueError):
            T.TrainConfig(lam=-0.1)
        with pytest.raises(ValueError):
            T.TrainConfig(batch=0)
        with pytest.raises(ValueError):
            T.TrainConfig(lr_pstmae=0.0)
        with pytest.raises(ValueError):
            T.TrainConfig(missing_ratio=[0.2, 0.5]).eval_ratio

    def test_latent_gradient_scales_linearly_with_lambda(self, rng):
        m_token = Tensor(rng.standard_normal(4), requires_grad=True)
        zh_base = Tensor(rng.standard_normal((3, 4)))
        z = Tensor(rng.standard_normal((3, 4)))
        xh = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
        x = Tensor(rng.standard_normal((3, 2)))

        def grad_at(lam):
            m_token.zero_grad()
            xh.zero_grad()
            with ad.tape():
                rep = ad.gather_rows(ad.reshape(m_token, (1, 4)), [0, 0, 0])
                zh = ad.add(zh_base, rep)
                loss = T.combined_loss(xh, x, zh, z, lam)
                ad.backward(loss)
            return m_token.grad.copy()

        g0 = grad_at(0.0)
        g1 = grad_at(0.5)
        g2 = grad_at(1.0)
        assert np.abs(g0).max() == 0.0
        assert np.abs((g2 - g0) - 2.0 * (g1 - g0)).max() < 1e-6


def quadratic_params(w0=1.0):
    return {"w": Tensor([w0], requires_grad=True)}


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = quadratic_params()
        opt = T.Adam(p, lr=0.1)
        p["w"].grad = np.zeros(1, np.float32)
        opt.step()
        assert p["w"].data[0] == 1.0

    def test_quadratic_converges_and_matches_scalar_simulation(self):
        p = quadratic_params()
        opt = T.Adam(p, lr=0.1)
        # independent scalar re-implementation of the update rule
        w, m, v = 1.0, 0.0, 0.0
        for t in range(1, 201):
            g = 2.0 * p["w"].data[0]
            p["w"].grad = np.array([g], np.float32)
            opt.step()
            gs = 2.0 * w
            m = 0.9 * m + 0.1 * gs
            v = 0.999 * v + 0.001 * gs * gs
            w -= 0.1 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
            assert abs(p["w"].data[0] - w) < 1e-4
        assert abs(p["w"].data[0]) < 1e-2

    def test_nonfinite_gradient_aborts(self):
        p = quadratic_params()
        opt = T.Adam(p, lr=0.1)
        p["w"].grad = np.array([np.nan], np.float32)
        with pytest.raises(T.DivergenceError, match="w"):
            opt.step()


class TestRAdam:
    def test_first_four_steps_unrectified(self):
        for t in range(1, 5):
            assert not T.RAdam.rectified(t, 0.999)
        assert T.RAdam.rectified(5, 0.999)

    def test_zero_gradient_leaves_params(self):
        p = quadratic_params()
        opt = T.RAdam(p, lr=0.1)
        p["w"].grad = np.zeros(1, np.float32)
        for _ in range(6):
            opt.step()
        assert p["w"].data[0] == 1.0

    def test_unrectified_branch_is_momentum_update(self):
        p = quadratic_params()
        opt = T.RAdam(p, lr=0.1)
        p["w"].grad = np.array([2.0], np.float32)
        opt.step()
        # step 1: mhat = g, update = lr * mhat with no denominator
        assert abs(p["w"].data[0] - (1.0 - 0.1 * 2.0)) < 1e-6

    def test_quadratic_converges(self):
        p = quadratic_params()
        opt = T.RAdam(p, lr=0.1)
        for _ in range(200):
            p["w"].grad = np.array([2.0 * p["w"].data[0]], np.float32)
            opt.step()
        assert abs(p["w"].data[0]) < 1e-2


class TestClip:
    def test_global_norm_clipping(self):
        p = {"a": Tensor(np.zeros(2), requires_grad=True), "b": Tensor(np.zeros(1), requires_grad=True)}
        p["a"].grad = np.array([3.0, 0.0], np.float32)
        p["b"].grad = np.array([4.0], np.float32)
        s = T.clip_gradients(p, 1.0)
        assert abs(s - 0.2) < 1e-12
        total = math.sqrt(float((p["a"].grad ** 2).sum() + (p["b"].grad ** 2).sum()))
        assert abs(total - 1.0) < 1e-6

    def test_disabled_when_zero(self):
        p = {"a": Tensor(np.zeros(1), requires_grad=True)}
        p["a"].grad = np.array([100.0], np.float32)
        assert T.clip_gradients(p, 0.0) == 1.0
        assert p["a"].grad[0] == 100.0


class TestLstmCell:
    def test_single_step_matches_hand_computed_gates(self):
        d = 2
        lstm = LatentLstm(d)
        wx = {"i": [[0.1, -0.2], [0.3, 0.1]], "f": [[0.0, 0.2], [-0.1, 0.4]],
              "o": [[0.2, 0.1], [0.1, -0.3]], "g": [[0.5, -0.5], [0.2, 0.2]]}
        wh = {"i": [[0.1, 0.0], [0.0, 0.1]], "f": [[0.2, 0.1], [0.0, -0.2]],
              "o": [[-0.1, 0.2], [0.3, 0.0]], "g": [[0.0, 0.3], [-0.2, 0.1]]}
        bias = {"i": [0.01, -0.01], "f": [1.0, 1.0], "o": [0.0, 0.1], "g": [-0.05, 0.05]}
        for gate in ("i", "f", "o", "g"):
            lstm.params[f"lstm.wx_{gate}"] = Tensor(wx[gate])
            lstm.params[f"lstm.wh_{gate}"] = Tensor(wh[gate])
            lstm.params[f"lstm.b_{gate}"] = Tensor(bias[gate])
        x = [0.4, -0.6]
        h0 = [0.2, 0.1]
        c0 = [-0.3, 0.5]

        def sig(v):
            return 1.0 / (1.0 + math.exp(-v))

        def gate_val(name, j):
            pre = sum(x[i] * wx[name][i][j] for i in range(d)) \
                + sum(h0[i] * wh[name][i][j] for i in range(d)) + bias[name][j]
            return pre

        want_h, want_c = [], []
        for j in range(d):
            i_g = sig(gate_val("i", j))
            f_g = sig(gate_val("f", j))
            o_g = sig(gate_val("o", j))
            g_g = math.tanh(gate_val("g", j))
            c1 = f_g * c0[j] + i_g * g_g
            want_c.append(c1)
            want_h.append(o_g * math.tanh(c1))
        with ad.float64_shadow():
            h1, c1 = lstm.step(Tensor([x]), Tensor([h0]), Tensor([c0]))
        assert np.abs(h1.data[0] - np.array(want_h)).max() < 1e-6
        assert np.abs(c1.data[0] - np.array(want_c)).max() < 1e-6

    def test_rollout_emits_t_out_latents(self, rng):
        lstm = LatentLstm(4, rng)
        z_in = rng.standard_normal((2, 10, 4)).astype(np.float32)
        out = lstm.rollout(z_in, 5)
        assert out.shape == (2, 5, 4)


class TestInterpolation:
    def test_midpoint_is_mean_of_neighbours(self, rng):
        z = rng.standard_normal((10, 4)).astype(np.float32)
        mask = data.MaskSpec(t_in=10, t_out=5, t_obs=(1, 2, 4, 6, 7, 8, 9, 10), t_miss=(3, 5))
        out = interpolate_missing(z, mask)
        assert np.allclose(out[2], 0.5 * (z[1] + z[3]), atol=1e-6)
        assert np.allclose(out[4], 0.5 * (z[3] + z[5]), atol=1e-6)

    def test_fractional_weighting(self, rng):
        z = rng.standard_normal((10, 3)).astype(np.float32)
        mask = data.MaskSpec(t_in=10, t_out=5, t_obs=(1, 4, 5, 6, 7, 8, 9, 10), t_miss=(2, 3))
        out = interpolate_missing(z, mask)
        assert np.allclose(out[1], (2 * z[0] + z[3]) / 3, atol=1e-6)
        assert np.allclose(out[2], (z[0] + 2 * z[3]) / 3, atol=1e-6)

    def test_boundary_copy(self, rng):
        z = rng.standard_normal((4, 2)).astype(np.float32)
        mask = data.MaskSpec(t_in=4, t_out=1, t_obs=(2, 3), t_miss=(1, 4))
        out = interpolate_missing(z, mask)
        assert np.array_equal(out[0], z[1])
        assert np.array_equal(out[3], z[2])


class TestPersistence:
    def test_copies_last_observed_frame(self, rng):
        w = rng.random((15, 2, 4, 4)).astype(np.float32)
        mask = data.MaskSpec(t_in=10, t_out=5, t_obs=(1, 3, 7), t_miss=(2, 4, 5, 6, 8, 9, 10))
        pred = persistence_forecast(w, mask)
        assert pred.shape == (5, 2, 4, 4)
        for k in range(5):
            assert np.array_equal(pred[k], w[6])


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    td = tmp_path_factory.mktemp("ds")
    rng = np.random.default_rng(0)
    entries = []
    for i in range(6):
        p = pde.SweParams.sample(rng, n_grid=16, frames=18, seed=i, snapshot_interval=5)
        seq = pde.simulate_sequence("swe", p)
        fn = f"seq_{i:04d}.fsq"
        data.save_sequence(td / fn, seq)
        entries.append({"file": fn, "kind": "swe", "params": seq.params,
                        "split": ["train", "train", "train", "train", "val", "test"][i]})
    data.write_manifest(td, entries)
    return data.build_dataset(td, t_in=10, t_out=5, dilation=1)


def tiny_cfg(**kw):
    base = dict(batch=4, epochs=2, epochs_cae=2, seed=0)
    base.update(kw)
    return T.TrainConfig(**base)


CAE_CFG = M.CaeConfig(in_channels=3, grid=16, channels=(8, 16), latent_dim=16)
TR_CFG = M.TransformerConfig(latent_dim=16, heads=2, encoder_depth=2, decoder_depth=1)


class TestLoops:
    def test_cae_loss_csv_rows(self, tiny_dataset, tmp_path):
        csv_path = tmp_path / "loss.csv"
        rows = T.train_cae(tiny_dataset, tiny_cfg(), CAE_CFG, tmp_path / "cae.ckpt", loss_csv=csv_path)
        assert len(rows) == 2 * 2  # epochs x splits
        with open(csv_path) as f:
            lines = list(csv.reader(f))
        assert lines[0] == ["epoch", "split", "full_mse", "latent_mse"]
        assert len(lines) == 1 + 4
        assert {l[1] for l in lines[1:]} == {"train", "val"}

    def test_cae_frozen_through_phase_two(self, tiny_dataset, tmp_path):
        cae_ckpt = tmp_path / "cae.ckpt"
        T.train_cae(tiny_dataset, tiny_cfg(), CAE_CFG, cae_ckpt)
        _, _, before = M.load_checkpoint(cae_ckpt)
        T.train_pstmae(tiny_dataset, cae_ckpt, tiny_cfg(), TR_CFG, tmp_path / "p.ckpt")
        _, _, after = M.load_checkpoint(tmp_path / "p.ckpt")
        for k, v in before.items():
            assert np.array_equal(v, after[k]), f"codec weight {k} changed during phase 2"

    def test_training_deterministic_given_seed(self, tiny_dataset, tmp_path):
        cae_ckpt = tmp_path / "cae.ckpt"
        T.train_cae(tiny_dataset, tiny_cfg(), CAE_CFG, cae_ckpt)
        r1 = T.train_pstmae(tiny_dataset, cae_ckpt, tiny_cfg(), TR_CFG, tmp_path / "a.ckpt")
        r2 = T.train_pstmae(tiny_dataset, cae_ckpt, tiny_cfg(), TR_CFG, tmp_path / "b.ckpt")
        assert r1 == r2
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_baseline_trains_and_embeds_codec(self, tiny_dataset, tmp_path):
        cae_ckpt = tmp_path / "cae.ckpt"
        T.train_cae(tiny_dataset, tiny_cfg(), CAE_CFG, cae_ckpt)
        rows = T.train_baseline_lstm(tiny_dataset, cae_ckpt, tiny_cfg(), tmp_path / "l.ckpt")
        assert len(rows) == 4
        kind, cfg, arrays = M.load_checkpoint(tmp_path / "l.ckpt")
        assert kind == "lstm"
        assert any(k.startswith("lstm.") for k in arrays)
        assert any(k.startswith("cae.") for k in arrays)

    def test_mixed_ratio_batches_fixed_within_batch(self, tiny_dataset, tmp_path):
        cfg = tiny_cfg(missing_ratio=[0.2, 0.5], eval_missing_ratio=0.5, epochs=1)
        ws = tiny_dataset.windows["train"][:4]
        masks = T._batch_masks(ws, cfg, epoch=1, batch_no=0)
        sizes = {len(m.t_miss) for m in masks}
        assert len(sizes) == 1  # same ratio within the batch
        assert sizes.pop() in (2, 5)
