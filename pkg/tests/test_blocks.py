"""Backbone construction, maskable-site taxonomy, and forward-pass oracles."""

import numpy as np
import pytest

import trimlab.autograd as ag
from trimlab.autograd import Tensor, backward
from trimlab.blocks import (
    HeadCfg,
    ModelSpec,
    SpecError,
    attach_head,
    build_backbone,
    default_spec,
    forward_encoder,
    forward_head,
    param_counts,
)

from ref_forward import ref_conv_encode, ref_head, ref_transformer_encode


def tiny_spec(backbone, num_outputs=3, **kw):
    kw.setdefault("feature_dim", 12)
    if backbone != "conv_t":
        kw.setdefault("d_model", 8)
        kw.setdefault("num_layers", 2)
        kw.setdefault("num_heads", 2)
        kw.setdefault("ffn_hidden", 6)
        kw.setdefault("conformer_conv_channels", 5)
    else:
        kw.setdefault("conv_channels", (4, 6, 5))
    kw.setdefault("head_hidden", 7)
    return default_spec(backbone, num_outputs=num_outputs, **kw)


def np_params(model):
    return {k: v.data.astype(np.float64) for k, v in model.params.items()}


def all_ones_assignment(spec):
    return {s.site_id: np.ones(s.unit_count) for s in spec.sites()}


class TestSpecAndSites:
    def test_conv_t_default_sites(self):
        spec = default_spec("conv_t")
        sites = spec.sites()
        assert len(sites) == 4
        assert [s.unit_count for s in sites] == [32, 64, 64, 128]
        assert all(s.kind == "conv_channels" for s in sites)

    def test_transformer_default_sites(self):
        spec = default_spec("transformer_t")
        sites = spec.sites()
        assert len(sites) == 8
        assert sum(s.unit_count for s in sites) == 4 * (4 + 128)

    def test_conformer_default_sites(self):
        assert len(default_spec("conformer_t").sites()) == 12

    def test_invalid_hyperparameters(self):
        with pytest.raises(SpecError):
            default_spec("transformer_t", d_model=0)
        with pytest.raises(SpecError):
            default_spec("transformer_t", d_model=10, num_heads=4)
        with pytest.raises(SpecError):
            ModelSpec("conv_t", feature_dim=8).validate()
        with pytest.raises(SpecError):
            default_spec("nope")

    def test_spec_roundtrip(self):
        for backbone in ("conv_t", "transformer_t", "conformer_t"):
            spec = tiny_spec(backbone)
            again = ModelSpec.from_dict(spec.to_dict())
            assert again.to_dict() == spec.to_dict()

    def test_param_counts_split(self):
        spec = tiny_spec("conv_t")
        counts = param_counts(spec)
        model = build_backbone(spec, seed=0)
        enc = sum(p.size for n, p in model.params.items() if not n.startswith("head."))
        head = sum(p.size for n, p in model.params.items() if n.startswith("head."))
        assert counts["encoder"] == enc and counts["head"] == head


class TestBuildDeterminism:
    @pytest.mark.parametrize("backbone", ["conv_t", "transformer_t", "conformer_t"])
    def test_equal_seed_bitwise_equal(self, backbone):
        spec = tiny_spec(backbone)
        a = build_backbone(spec, seed=11)
        b = build_backbone(spec, seed=11)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name].data, b.params[name].data)

    def test_different_seed_differs(self):
        spec = tiny_spec("conv_t")
        a = build_backbone(spec, seed=1)
        b = build_backbone(spec, seed=2)
        assert any(not np.array_equal(a.params[n].data, b.params[n].data) for n in a.params)

    def test_bias_zero_scale_one(self):
        model = build_backbone(tiny_spec("conformer_t"), seed=0)
        np.testing.assert_array_equal(model.params["layer0.ln1.scale"].data, 1.0)
        np.testing.assert_array_equal(model.params["layer0.ffn.b1"].data, 0.0)


class TestForwardOracles:
    def test_head_matches_loop_recomputation(self):
        model = build_backbone(tiny_spec("transformer_t"), seed=5)
        rng = np.random.default_rng(0)
        emb = rng.normal(size=(4, 8)).astype(np.float32)
        with ag.no_grad():
            got = forward_head(model, Tensor(emb)).data
        want = ref_head(np_params(model), emb.astype(np.float64))
        np.testing.assert_allclose(got, want, atol=1e-6)

    @pytest.mark.parametrize("backbone", ["transformer_t", "conformer_t"])
    def test_encoder_matches_reference(self, backbone):
        spec = tiny_spec(backbone)
        model = build_backbone(spec, seed=3)
        rng = np.random.default_rng(1)
        x = rng.normal(size=(5, 12)).astype(np.float32)
        with ag.no_grad():
            got = model.encode(x).data[0]
        want = ref_transformer_encode(np_params(model), spec, x.astype(np.float64))
        np.testing.assert_allclose(got, want, atol=1e-5)

    def test_conv_encoder_matches_reference(self):
        spec = tiny_spec("conv_t")
        model = build_backbone(spec, seed=3)
        rng = np.random.default_rng(2)
        x = rng.normal(size=(9, 12)).astype(np.float32)
        with ag.no_grad():
            got = model.encode(x).data[0]
        want = ref_conv_encode(np_params(model), spec, x.astype(np.float64))
        np.testing.assert_allclose(got, want, atol=1e-5)

    def test_head_zero_weights_gives_bias(self):
        model = build_backbone(tiny_spec("conv_t", num_outputs=4), seed=0)
        for n in ("head.w1", "head.w2"):
            model.params[n].data[...] = 0.0
        model.params["head.b2"].data[...] = [1.0, -2.0, 0.5, 3.0]
        with ag.no_grad():
            out = forward_head(model, Tensor(np.random.default_rng(0).normal(size=(3, 5)).astype(np.float32)))
        np.testing.assert_array_equal(out.data, np.tile([1.0, -2.0, 0.5, 3.0], (3, 1)))

    def test_identity_like_head(self):
        spec = ModelSpec("conv_t", feature_dim=4, conv_blocks=tiny_spec("conv_t").conv_blocks[:1], head=HeadCfg(2, 2))
        spec.conv_blocks[0].out_channels = 2
        model = build_backbone(spec, seed=0)
        model.params["head.w1"].data[...] = np.eye(2)
        model.params["head.b1"].data[...] = 0.0
        model.params["head.w2"].data[...] = np.eye(2)
        model.params["head.b2"].data[...] = 0.0
        with ag.no_grad():
            out = forward_head(model, Tensor(np.array([[1.0, 0.0]], dtype=np.float32)))
        np.testing.assert_array_equal(out.data, [[1.0, 0.0]])

    def test_missing_head_raises(self):
        model = build_backbone(tiny_spec("conv_t", num_outputs=None), seed=0)
        with pytest.raises(SpecError, match="head"):
            forward_head(model, Tensor(np.zeros((1, 5), dtype=np.float32)))


class TestMaskedForward:
    @pytest.mark.parametrize("backbone", ["conv_t", "transformer_t", "conformer_t"])
    def test_all_ones_masks_bitwise_identity(self, backbone):
        spec = tiny_spec(backbone)
        model = build_backbone(spec, seed=7)
        x = np.random.default_rng(3).normal(size=(2, 6, 12)).astype(np.float32)
        with ag.no_grad():
            plain = model.encode(x).data
            masked = forward_encoder(model, x, all_ones_assignment(spec)).data
        np.testing.assert_array_equal(plain, masked)

    def test_all_zeros_final_conv_site_zero_embedding(self):
        spec = tiny_spec("conv_t")
        model = build_backbone(spec, seed=7)
        masks = all_ones_assignment(spec)
        masks["conv2.channels"] = np.zeros(spec.conv_blocks[-1].out_channels)
        x = np.random.default_rng(3).normal(size=(2, 9, 12)).astype(np.float32)
        with ag.no_grad():
            emb = forward_encoder(model, x, masks).data
        np.testing.assert_array_equal(emb, 0.0)

    @pytest.mark.parametrize("backbone", ["transformer_t", "conformer_t"])
    def test_all_zeros_assignment_still_finite(self, backbone):
        # residual stream is never gated
        spec = tiny_spec(backbone)
        model = build_backbone(spec, seed=7)
        masks = {s.site_id: np.zeros(s.unit_count) for s in spec.sites()}
        x = np.random.default_rng(3).normal(size=(1, 6, 12)).astype(np.float32)
        with ag.no_grad():
            emb = forward_encoder(model, x, masks).data
        assert np.all(np.isfinite(emb))

    def test_ffn_unit_rank_one_contribution(self):
        # gating one hidden unit off removes exactly its rank-1 term
        spec = tiny_spec("transformer_t", num_layers=1)
        model = build_backbone(spec, seed=9)
        rng = np.random.default_rng(4)
        x = rng.normal(size=(6, 12)).astype(np.float64)
        params = np_params(model)
        full, internals = ref_transformer_encode(params, spec, x, want_internals=True)
        j = 2
        rank1 = internals["ffn_act"][0][:, j].mean() * params["layer0.ffn.w2"][:, j]

        masks = all_ones_assignment(spec)
        masks["layer0.ffn"][j] = 0.0
        with ag.no_grad():
            got = forward_encoder(model, x.astype(np.float32), masks).data[0]
        np.testing.assert_allclose(got, full - rank1, atol=1e-5)

    def test_masking_commutes_with_batching(self):
        spec = tiny_spec("conformer_t")
        model = build_backbone(spec, seed=2)
        rng = np.random.default_rng(5)
        x = rng.normal(size=(4, 6, 12)).astype(np.float32)
        masks = {s.site_id: (rng.random(s.unit_count) < 0.7).astype(np.float64) for s in spec.sites()}
        with ag.no_grad():
            batched = forward_encoder(model, x, masks).data
            singles = np.stack([forward_encoder(model, x[i], masks).data[0] for i in range(4)])
        np.testing.assert_allclose(batched, singles, atol=1e-6)

    def test_head_gate_equals_head_slice_deletion(self):
        # zeroing head h == removing its q/k/v slices and matching wo rows
        spec = tiny_spec("transformer_t", num_layers=1)
        model = build_backbone(spec, seed=13)
        rng = np.random.default_rng(6)
        x = rng.normal(size=(5, 12)).astype(np.float32)
        masks = all_ones_assignment(spec)
        masks["layer0.heads"][0] = 0.0
        with ag.no_grad():
            gated = forward_encoder(model, x, masks).data[0]

        sliced = build_backbone(spec, seed=13)
        dh = spec.layers[0].d_head
        keep = np.arange(dh, 2 * dh)  # keep head 1
        for proj, b in (("wq", "bq"), ("wk", "bk"), ("wv", "bv")):
            sliced.params[f"layer0.attn.{proj}"] = Tensor(sliced.params[f"layer0.attn.{proj}"].data[keep])
            sliced.params[f"layer0.attn.{b}"] = Tensor(sliced.params[f"layer0.attn.{b}"].data[keep])
        sliced.params["layer0.attn.wo"] = Tensor(sliced.params["layer0.attn.wo"].data[:, keep])
        sliced.spec.layers[0].num_heads = 1
        with ag.no_grad():
            cut = sliced.encode(x).data[0]
        np.testing.assert_allclose(gated, cut, atol=1e-6)

    def test_gated_off_unit_params_get_zero_grad(self):
        spec = tiny_spec("conformer_t", num_layers=1)
        model = build_backbone(spec, seed=1)
        masks = all_ones_assignment(spec)
        masks["layer0.ffn"][1] = 0.0
        masks["layer0.heads"][0] = 0.0
        masks["layer0.conv"][3] = 0.0
        x = np.random.default_rng(8).normal(size=(2, 6, 12)).astype(np.float32)
        backward(ag.sum_(forward_encoder(model, x, masks)))

        dh = spec.layers[0].d_head
        p = model.params
        np.testing.assert_array_equal(p["layer0.ffn.w1"].grad[1], 0.0)
        np.testing.assert_array_equal(p["layer0.ffn.b1"].grad[1], 0.0)
        np.testing.assert_array_equal(p["layer0.ffn.w2"].grad[:, 1], 0.0)
        np.testing.assert_array_equal(p["layer0.attn.wq"].grad[:dh], 0.0)
        np.testing.assert_array_equal(p["layer0.attn.bv"].grad[:dh], 0.0)
        np.testing.assert_array_equal(p["layer0.attn.wo"].grad[:, :dh], 0.0)
        np.testing.assert_array_equal(p["layer0.conv.pw1_w"].grad[3], 0.0)
        np.testing.assert_array_equal(p["layer0.conv.dw_w"].grad[3], 0.0)
        np.testing.assert_array_equal(p["layer0.conv.pw2_w"].grad[:, 3], 0.0)

    def test_assignment_validation(self):
        spec = tiny_spec("conv_t")
        model = build_backbone(spec, seed=0)
        x = np.zeros((1, 9, 12), dtype=np.float32)
        with pytest.raises(ag.ShapeError, match="missing"):
            forward_encoder(model, x, {"conv0.channels": np.ones(4)})
        bad = all_ones_assignment(spec)
        bad["conv1.channels"] = np.ones(3)
        with pytest.raises(ag.ShapeError, match="conv1.channels"):
            forward_encoder(model, x, bad)


class TestAttachHead:
    def test_attach_and_replace(self):
        model = build_backbone(tiny_spec("transformer_t", num_outputs=None), seed=0)
        assert model.spec.head is None
        attach_head(model, HeadCfg(7, 5), seed=4)
        with ag.no_grad():
            out = model.forward(np.zeros((2, 6, 12), dtype=np.float32))
        assert out.shape == (2, 5)
