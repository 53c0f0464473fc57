"""Backbone, uncertainty module, adapters and the fused three-branch model."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmdg import autodiff as ad
from mmdg.adapter import AdapterParams, FusionTopology, adapter_forward, fuse_block, gated_attention
from mmdg.autodiff import ConfigError, Tensor
from mmdg.model import MMDGModel
from mmdg.uem import (MODALITIES, UncertaintyMap, dump_uncertainty, gate, load_uncertainty,
                      mc_token_variance, modality_uncertainty)
from mmdg.vit import Backbone, BackboneConfig, BlockTaps, ForwardContext

TINY = BackboneConfig(image_size=8, patch_size=4, hidden_c=8, heads=2, n_blocks=2)


def images(rng, b=2, size=8):
    return {m: rng.uniform(size=(b, size, size, 3)) for m in MODALITIES}


class TestBackbone:
    def test_paper_scale_token_count(self):
        assert BackboneConfig.paper_scale().n_tokens == 197

    def test_desk_token_count(self):
        bb = Backbone(BackboneConfig(), seed=0)
        tokens = bb.patchify(np.zeros((2, 32, 32, 3)))
        assert tokens.shape == (2, 17, 32)

    @pytest.mark.parametrize("kw", [dict(image_size=30, patch_size=8), dict(hidden_c=30, heads=4)])
    def test_invalid_config(self, kw):
        with pytest.raises(ConfigError):
            BackboneConfig(**kw)

    def test_wrong_image_size(self):
        with pytest.raises(ConfigError):
            Backbone(TINY).patchify(np.zeros((1, 16, 16, 3)))

    def test_identical_images_identical_tokens(self):
        bb = Backbone(TINY, seed=1)
        img = np.random.default_rng(0).uniform(size=(8, 8, 3))
        tok = bb.patchify(np.stack([img, img])).data
        assert np.array_equal(tok[0], tok[1])

    def test_zero_weights_zero_taps(self):
        bb = Backbone(TINY, seed=0)
        for name, t in bb.params.items():
            if ".attn." in name or ".mlp." in name:
                t.data[...] = 0.0
        taps = bb.block_forward(Tensor(np.zeros((1, 5, 8))), 0)
        assert isinstance(taps, BlockTaps)
        assert not taps.x2.data.any() and not taps.x4.data.any()

    def test_block_index_range(self):
        with pytest.raises(IndexError):
            Backbone(TINY).block_forward(Tensor(np.zeros((1, 5, 8))), 2)

    def test_checkpoint_names(self):
        names = set(Backbone(TINY).params)
        for part in ("ln1.gamma", "attn.wqkv", "ln2.beta", "mlp.w1"):
            assert f"backbone.block1.{part}" in names

    def test_frozen_after_training_step(self):
        from mmdg.train import Adam
        model = MMDGModel(TINY, adapter_width=4, seed=0)
        before = {n: t.data.copy() for n, t in model.backbone.params.items()}
        rng = np.random.default_rng(0)
        out = model.forward(images(rng, 4), ForwardContext(train=True, seed=0, step=1))
        loss = ad.cross_entropy(ad.linear(out.cls["R"], model.cls_w, model.cls_b), np.array([0, 1, 0, 1]))
        params = model.trainable_parameters()
        opt = Adam(params, lr=0.1)
        opt.step(dict(zip(params, ad.grad(loss, list(params.values())))))
        assert all(np.array_equal(before[n], t.data) for n, t in model.backbone.params.items())
        assert not any(n.startswith("backbone") for n in params)


class TestUEM:
    def test_all_keep_limit_has_zero_variance(self):
        x = np.random.default_rng(0).normal(size=(2, 5, 4))
        umap = mc_token_variance(x, 1e-12, 8, 0)
        # keep-all masks give identical samples; only last-bit rounding of the mean remains
        np.testing.assert_allclose(umap.values, 0.0, atol=1e-28)
        assert umap.values.shape == (2, 5, 1)

    def test_bernoulli_closed_form(self):
        # per-sample values {0, v/(1-p)}; population variance v^2 p/(1-p) = 1 for v=1, p=0.5
        umap = mc_token_variance(np.ones((1, 1, 1)), 0.5, 10000, 3)
        assert umap.values.item() == pytest.approx(1.0, abs=0.03)

    def test_token_permutation_equivariance(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(1, 6, 3))
        perm = rng.permutation(6)
        # per-token statistics only; use a fixed mask by evaluating each token with the same stream
        a = np.array([mc_token_variance(x[:, [k]], 0.3, 50, 9).values.item() for k in range(6)])
        b = np.array([mc_token_variance(x[:, perm][:, [k]], 0.3, 50, 9).values.item() for k in range(6)])
        np.testing.assert_allclose(b, a[perm])

    def test_t_below_two(self):
        with pytest.raises(ConfigError):
            mc_token_variance(np.ones((1, 1, 1)), 0.1, 1)

    def test_gate_values(self):
        assert gate(0.0, 3.0) == 1.0
        assert gate(5.0, 0.0) == 1.0
        assert gate(np.log(2.0), 1.0) == pytest.approx(0.5, abs=1e-15)

    def test_gate_negative_r_e(self):
        with pytest.raises(ConfigError):
            gate(1.0, -0.1)

    @given(st.floats(0, 50), st.floats(0, 50), st.floats(0.01, 10))
    def test_gate_monotone(self, u1, u2, r_e):
        lo, hi = sorted((u1, u2))
        assert gate(lo, r_e) >= gate(hi, r_e)
        assert 0.0 <= gate(hi, r_e) <= 1.0

    def test_modality_uncertainty(self):
        v = np.zeros((2, 5, 1))
        v[:, 0, 0] = [0.2, 0.4]
        v[:, 1:, 0] = 9.0
        assert modality_uncertainty(UncertaintyMap(3, v)).u == pytest.approx(0.3)
        assert modality_uncertainty(UncertaintyMap(3, np.zeros((2, 5, 1)))).u == 0.0

    def test_negative_map_rejected(self):
        with pytest.raises(ValueError):
            UncertaintyMap(0, -np.ones((1, 2, 1)))

    def test_dump_roundtrip(self, tmp_path):
        v = np.random.default_rng(0).uniform(size=(3, 5, 1))
        dump_uncertainty(tmp_path / "u.bin", UncertaintyMap(0, v))
        np.testing.assert_array_equal(load_uncertainty(tmp_path / "u.bin"), v[..., 0])

    def test_uncertainty_detached(self):
        rng = np.random.default_rng(2)
        p = AdapterParams(6, 4, rng)
        for t in p.tensors.values():
            t.data[...] = rng.normal(size=t.shape)
        xs, xd = Tensor(rng.normal(size=(1, 5, 6))), Tensor(rng.normal(size=(1, 5, 6)))
        u = rng.uniform(size=(1, 5, 1))
        out = ad.tsum(adapter_forward(u, xs, xd, p))
        leaves = {id(t) for t in ad._topo_order(out) if t.requires_grad and not t._parents}
        assert leaves == {id(t) for t in p.tensors.values()}


class TestAdapter:
    def _ident(self):
        p = AdapterParams(1, 1, np.random.default_rng(0))
        for k in ("wq", "wk", "wv", "pw", "wu"):
            p[k].data[...] = 1.0
        p["cdc"].data[...] = 0.0
        p["cdc"].data[0, 0, 1, 1] = 1.0
        return p

    def test_single_token_hand_value(self):
        out = adapter_forward(np.zeros((1, 1, 1)), Tensor([[[1.0]]]), Tensor([[[2.0]]]), self._ident(), 1.0, 0.0)
        assert out.data.item() == pytest.approx(2.0)

    def test_zero_r_e_equals_ungated(self):
        rng = np.random.default_rng(4)
        p = AdapterParams(8, 4, rng)
        for t in p.tensors.values():
            t.data[...] = rng.normal(size=t.shape)
        xs, xd = Tensor(rng.normal(size=(2, 5, 8))), Tensor(rng.normal(size=(2, 5, 8)))
        u = rng.uniform(0, 3, size=(2, 5, 1))
        gated = adapter_forward(u, xs, xd, p, r_e=0.0).data
        ungated = adapter_forward(np.zeros_like(u), xs, xd, p, r_e=0.0).data
        assert np.array_equal(gated, ungated)

    def test_large_r_e_row_uniform(self):
        rng = np.random.default_rng(5)
        p = AdapterParams(8, 4, rng)
        xs, xd = Tensor(rng.normal(size=(1, 5, 8))), Tensor(rng.normal(size=(1, 5, 8)))
        u = np.zeros((1, 5, 1))
        u[0, 2, 0] = 1.0
        w, _ = gated_attention(u, xs, xd, p, 1e3)
        np.testing.assert_allclose(w.data[0, 2], 0.2, atol=1e-6)
        assert np.abs(w.data[0, 0] - 0.2).max() > 1e-3

    def test_row_entropy_nondecreasing_in_u(self):
        rng = np.random.default_rng(6)
        p = AdapterParams(8, 4, rng)
        xs, xd = Tensor(rng.normal(size=(1, 5, 8))), Tensor(rng.normal(size=(1, 5, 8)))
        ent = []
        for ui in np.linspace(0, 4, 9):
            u = np.zeros((1, 5, 1))
            u[0, 1, 0] = ui
            row = gated_attention(u, xs, xd, p, 1.0)[0].data[0, 1]
            ent.append(-(row * np.log(row)).sum())
        assert np.all(np.diff(ent) >= -1e-12)

    def test_non_square_grid(self):
        p = AdapterParams(4, 2, np.random.default_rng(0))
        x = Tensor(np.zeros((1, 4, 4)))
        with pytest.raises(ConfigError):
            adapter_forward(np.zeros((1, 4, 1)), x, x, p)

    def test_zero_init_is_identity(self):
        p = AdapterParams(8, 4, np.random.default_rng(0))
        rng = np.random.default_rng(1)
        out = adapter_forward(rng.uniform(size=(1, 5, 1)), Tensor(rng.normal(size=(1, 5, 8))),
                              Tensor(rng.normal(size=(1, 5, 8))), p)
        assert not out.data.any()

    def test_topology_rejects_depth_infrared_edge(self):
        with pytest.raises(ConfigError):
            FusionTopology({"R": ("D",), "D": ("I",), "I": ("R",)})

    def test_four_edges_per_block(self):
        assert sorted(FusionTopology().edges()) == sorted([("D", "R"), ("I", "R"), ("R", "D"), ("R", "I")])

    def test_model_zero_init_matches_backbone(self):
        model = MMDGModel(TINY, adapter_width=4, seed=3)
        rng = np.random.default_rng(0)
        imgs = images(rng)
        out = model.forward(imgs)
        stacked = np.stack([imgs[m] for m in MODALITIES])
        ref = model.backbone.forward(stacked).data
        for k, m in enumerate(MODALITIES):
            np.testing.assert_array_equal(out.cls[m].data, ref[k, :, 0, :])

    def test_infrared_never_reaches_depth_within_block(self):
        rng = np.random.default_rng(9)
        model = MMDGModel(TINY, adapter_width=4, seed=1)
        for p in model.adapters.values():
            for t in p.tensors.values():
                t.data[...] = rng.normal(size=t.shape)
        taps = {m: BlockTaps(*(Tensor(rng.normal(size=(2, 5, 8))) for _ in range(5))) for m in MODALITIES}
        maps = {m: UncertaintyMap(0, rng.uniform(size=(2, 5, 1))) for m in MODALITIES}
        base = fuse_block(taps, maps, model.adapters, 0)
        pert = dict(taps)
        t_i = taps["I"]
        pert["I"] = BlockTaps(t_i.x1, t_i.x2, Tensor(t_i.x3.data + rng.normal(size=t_i.x3.shape)),
                              Tensor(t_i.x4.data + 1.0), t_i.attn)
        pmaps = dict(maps, I=UncertaintyMap(0, maps["I"].values + 0.5))
        out = fuse_block(pert, pmaps, model.adapters, 0)
        assert np.array_equal(out["D"].data, base["D"].data)
        assert not np.array_equal(out["R"].data, base["R"].data)

    def test_missing_modality_is_internal_error(self):
        model = MMDGModel(TINY, adapter_width=4)
        with pytest.raises(KeyError):
            model.forward({"R": np.zeros((1, 8, 8, 3)), "D": np.zeros((1, 8, 8, 3))})

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_forward_deterministic(self, seed):
        model = MMDGModel(TINY, adapter_width=4, seed=seed % 7)
        imgs = images(np.random.default_rng(seed))
        ctx = ForwardContext(train=True, seed=seed, step=3)
        a, b = model.forward(imgs, ctx), model.forward(imgs, ctx)
        assert all(np.array_equal(a.cls[m].data, b.cls[m].data) for m in MODALITIES)
        assert a.uncertainty == b.uncertainty
