import numpy as np
import pytest
import torch

from anatomyssl.config import (AdapterConfig, BackboneConfig, HeadConfig,
                               ModelConfig, PromptEngineConfig)
from anatomyssl.nets import (AdapterBlock, ConfigMismatchError,
                             CrossAttentionFusion, LatentPromptEngine,
                             MaskTokenDecoder, MultiHeadCrossAttention,
                             MultiScaleBackbone, OnlineModel,
                             SegmentationHead, TargetModel, load_checkpoint,
                             map_to_tokens, save_checkpoint)
from helpers import FD_TOL, check_input_grads, check_param_grads

torch.manual_seed(0)


def tiny_backbone_cfg():
    return BackboneConfig(in_size=16, stage_channels=(3, 4, 5, 6),
                          fpn_channels=3, scales=4, stem_stride=2)


class TestBackbone:
    def test_default_map_sizes(self):
        net = MultiScaleBackbone(BackboneConfig())
        maps = net(torch.zeros(1, 1, 224, 224))
        assert [m.shape[-1] for m in maps] == [56, 28, 14, 7]
        assert all(m.shape[1] == 64 for m in maps)

    def test_zero_input_finite(self):
        net = MultiScaleBackbone(BackboneConfig())
        maps = net(torch.zeros(2, 1, 224, 224))
        assert all(torch.isfinite(m).all() for m in maps)

    def test_wrong_size_rejected(self):
        net = MultiScaleBackbone(BackboneConfig())
        with pytest.raises(ValueError, match="divisible"):
            net(torch.zeros(1, 1, 100, 100))

    def test_tiny_variant_sizes(self):
        net = MultiScaleBackbone(tiny_backbone_cfg())
        maps = net(torch.zeros(1, 1, 16, 16))
        assert [m.shape[-1] for m in maps] == [8, 4, 2, 1]

    def test_gradcheck_16px(self):
        torch.manual_seed(1)
        net = MultiScaleBackbone(tiny_backbone_cfg()).double()
        x = torch.randn(1, 1, 16, 16, dtype=torch.float64, requires_grad=True)
        readouts = [torch.randn_like(net(x.detach())[i]) for i in range(4)]

        def scalar():
            maps = net(x)
            return sum((r * m).sum() for r, m in zip(readouts, maps))

        assert check_param_grads(net, scalar) < FD_TOL
        assert check_input_grads(x, scalar) < FD_TOL


class TestMultiHeadCrossAttention:
    def test_single_key_returns_value(self):
        attn = MultiHeadCrossAttention(4, 1)
        with torch.no_grad():
            for lin in (attn.q_proj, attn.k_proj, attn.v_proj, attn.out_proj):
                lin.weight.copy_(torch.eye(4))
                lin.bias.zero_()
        q = torch.randn(1, 5, 4)
        t = torch.randn(1, 1, 4)
        out = attn(q, t, t)
        assert torch.allclose(out, t.expand(1, 5, 4), atol=1e-6)

    def test_weights_row_sum_one(self):
        attn = MultiHeadCrossAttention(8, 2)
        q, k = torch.randn(2, 5, 8), torch.randn(2, 7, 8)
        _, w = attn(q, k, k, return_weights=True)
        assert torch.allclose(w.sum(-1), torch.ones(2, 2, 5), atol=1e-12)

    def test_output_shape_matches_query(self):
        attn = MultiHeadCrossAttention(8, 4)
        out = attn(torch.randn(3, 6, 8), torch.randn(3, 9, 8),
                   torch.randn(3, 9, 8))
        assert out.shape == (3, 6, 8)

    def test_channel_mismatch(self):
        attn = MultiHeadCrossAttention(8, 2)
        with pytest.raises(ValueError):
            attn(torch.randn(1, 2, 8), torch.randn(1, 2, 4),
                 torch.randn(1, 2, 4))

    def test_kv_length_mismatch(self):
        attn = MultiHeadCrossAttention(8, 2)
        with pytest.raises(ValueError):
            attn(torch.randn(1, 2, 8), torch.randn(1, 3, 8),
                 torch.randn(1, 4, 8))

    def test_gradcheck(self):
        torch.manual_seed(2)
        attn = MultiHeadCrossAttention(6, 2).double()
        q = torch.randn(1, 2, 6, dtype=torch.float64, requires_grad=True)
        k = torch.randn(1, 3, 6, dtype=torch.float64, requires_grad=True)
        v = torch.randn(1, 3, 6, dtype=torch.float64, requires_grad=True)
        r = torch.randn(1, 2, 6, dtype=torch.float64)

        def scalar():
            return (r * attn(q, k, v)).sum()

        assert check_param_grads(attn, scalar) < FD_TOL
        assert check_input_grads([q, k, v], scalar) < FD_TOL


class TestFusion:
    def test_shape_preserved(self):
        fusion = CrossAttentionFusion(8, 2)
        g, l = torch.randn(2, 16, 8), torch.randn(2, 16, 8)
        assert fusion(g, l).shape == g.shape

    def test_zeroed_attention_reduces_to_norm(self):
        fusion = CrossAttentionFusion(8, 2)
        with torch.no_grad():
            fusion.attn.out_proj.weight.zero_()
            fusion.attn.out_proj.bias.zero_()
        g, l = torch.randn(1, 9, 8), torch.randn(1, 9, 8)
        assert torch.allclose(fusion(g, l), fusion.norm(g), atol=1e-12)

    def test_shape_mismatch(self):
        fusion = CrossAttentionFusion(8, 2)
        with pytest.raises(ValueError):
            fusion(torch.randn(1, 4, 8), torch.randn(1, 5, 8))

    def test_gradcheck_4x4_maps(self):
        torch.manual_seed(3)
        fusion = CrossAttentionFusion(8, 2).double()
        g = torch.randn(1, 16, 8, dtype=torch.float64, requires_grad=True)
        l = torch.randn(1, 16, 8, dtype=torch.float64, requires_grad=True)
        r = torch.randn(1, 16, 8, dtype=torch.float64)

        def scalar():
            return (r * fusion(g, l)).sum()

        assert check_param_grads(fusion, scalar) < FD_TOL
        assert check_input_grads([g, l], scalar) < FD_TOL


class TestLatentPromptEngine:
    def _engine(self, rounds, dim=4, tokens=2, heads=2):
        cfg = PromptEngineConfig(tokens=tokens, channels=dim, heads=heads,
                                 rounds=rounds, mlp_ratio=2)
        return LatentPromptEngine(cfg)

    def test_single_round_matches_manual(self):
        torch.manual_seed(4)
        eng = self._engine(rounds=1)
        fv = torch.randn(1, 9, 4)
        fc = torch.randn(1, 9, 4)
        feat, tok = eng(fv, fc)

        t0 = eng.tokens.unsqueeze(0)
        fused = eng.fusion(fv, fc)
        feat_manual = eng.feat_mlp(eng.feat_norm(
            eng.feat_attn(fused, t0, t0) + fused))
        tok_manual = eng.tok_mlp(eng.tok_norm(
            eng.tok_attn(t0, fused, fused) + t0))
        assert torch.allclose(feat, feat_manual, atol=1e-12)
        assert torch.allclose(tok, tok_manual, atol=1e-12)

    def test_default_round_count(self):
        assert PromptEngineConfig().rounds == 4

    @pytest.mark.parametrize("rounds", [1, 2, 4, 6, 8])
    def test_token_shape_across_round_sweep(self, rounds):
        eng = self._engine(rounds=rounds, tokens=3)
        feat, tok = eng(torch.randn(2, 9, 4), torch.randn(2, 9, 4))
        assert tok.shape == (2, 3, 4)
        assert feat.shape == (2, 9, 4)

    def test_rounds_below_one_rejected(self):
        with pytest.raises(ValueError):
            self._engine(rounds=0)

    def test_gradcheck_one_round(self):
        torch.manual_seed(5)
        eng = self._engine(rounds=1).double()
        fv = torch.randn(1, 4, 4, dtype=torch.float64, requires_grad=True)
        fc = torch.randn(1, 4, 4, dtype=torch.float64, requires_grad=True)
        r1 = torch.randn(1, 4, 4, dtype=torch.float64)
        r2 = torch.randn(1, 2, 4, dtype=torch.float64)

        def scalar():
            feat, tok = eng(fv, fc)
            return (r1 * feat).sum() + (r2 * tok).sum()

        assert check_param_grads(eng, scalar) < FD_TOL
        assert check_input_grads([fv, fc], scalar) < FD_TOL


class TestAdapterBlock:
    def test_identity_at_init(self):
        block = AdapterBlock(AdapterConfig(d=16, d_prime=4))
        x = torch.randn(3, 16)
        assert torch.equal(block(x), x)

    def test_parameter_count(self):
        d, dp = 16, 4
        block = AdapterBlock(AdapterConfig(d=d, d_prime=dp))
        n = sum(p.numel() for p in block.parameters())
        assert n == 2 * d * dp + dp + d

    def test_gradcheck(self):
        torch.manual_seed(6)
        block = AdapterBlock(AdapterConfig(d=16, d_prime=4)).double()
        with torch.no_grad():  # move off the zero-init saddle
            block.up.weight.normal_(0, 0.2)
            block.up.bias.normal_(0, 0.2)
        x = torch.randn(2, 16, dtype=torch.float64, requires_grad=True)
        r = torch.randn(2, 16, dtype=torch.float64)

        def scalar():
            return (r * block(x)).sum()

        assert check_param_grads(block, scalar) < FD_TOL
        assert check_input_grads(x, scalar) < FD_TOL


class TestMaskDecoder:
    def test_token_count_maps(self):
        cfg = PromptEngineConfig(tokens=5, channels=8, heads=2)
        dec = MaskTokenDecoder(cfg)
        feat = torch.randn(2, 16, 8)
        tokens = torch.randn(2, 5, 8)
        out = dec(feat, tokens, (4, 4))
        assert out.shape == (2, 5, 8, 8)

    def test_finite_logits(self):
        cfg = PromptEngineConfig(tokens=3, channels=8, heads=2)
        dec = MaskTokenDecoder(cfg)
        out = dec(torch.randn(1, 16, 8), torch.randn(1, 3, 8), (4, 4))
        assert torch.isfinite(out).all()

    def test_segmentation_head_shapes(self):
        cfg = PromptEngineConfig(tokens=4, channels=8, heads=2, rounds=2)
        head = SegmentationHead(8, cfg, AdapterConfig(d=8, d_prime=2))
        logits = head(torch.randn(2, 8, 7, 7))
        assert logits.shape == (2, 4, 14, 14)
        fg = head.foreground_logits(torch.randn(2, 8, 7, 7))
        assert fg.shape == (2, 1, 14, 14)


class TestHeads:
    def test_online_prediction_normalizes(self):
        model = OnlineModel(ModelConfig())
        h = torch.randn(6, 64)
        z, q = model.project_predict(h, 0)
        qn = q / q.norm(dim=-1, keepdim=True)
        assert torch.allclose(qn.norm(dim=-1), torch.ones(6), atol=1e-12)

    def test_target_has_no_predictor(self):
        target = TargetModel(ModelConfig())
        assert target.heads.predictors is None
        with pytest.raises(RuntimeError):
            target.heads.predict(torch.randn(2, 128), 0)

    def test_unknown_scale_rejected(self):
        model = OnlineModel(ModelConfig())
        with pytest.raises(ValueError, match="scale"):
            model.heads.project(torch.randn(1, 64), 7)

    def test_shared_backbone_single_registry(self):
        model = OnlineModel(ModelConfig())
        backbones = [m for m in model.modules()
                     if isinstance(m, MultiScaleBackbone)]
        assert len(backbones) == 1
        v1 = torch.randn(1, 1, 224, 224)
        v2 = torch.randn(1, 1, 224, 224)
        # same parameter set serves both views by construction
        assert model.backbone(v1)[0].shape == model.backbone(v2)[0].shape

    def test_head_gradcheck(self):
        torch.manual_seed(7)
        from anatomyssl.nets import ScaleHeads
        heads = ScaleHeads(4, HeadConfig(proj_dim=3, pred_hidden=5,
                                         per_scale=True), 2,
                           with_predictor=True).double()
        h = torch.randn(2, 4, dtype=torch.float64, requires_grad=True)
        r = torch.randn(2, 3, dtype=torch.float64)

        def scalar():
            z = heads.project(h, 1)
            return (r * heads.predict(z, 1)).sum()

        assert check_param_grads(heads, scalar) < FD_TOL
        assert check_input_grads(h, scalar) < FD_TOL


class TestCheckpoints:
    def test_roundtrip(self, tmp_path):
        net = MultiScaleBackbone(tiny_backbone_cfg())
        path = save_checkpoint(tmp_path / "enc.pt", "encoder", {"a": 1},
                               {"backbone": net.state_dict()})
        payload = load_checkpoint(path)
        assert payload["kind"] == "encoder"
        net2 = MultiScaleBackbone(tiny_backbone_cfg())
        net2.load_state_dict(payload["state_dict"]["backbone"])
        x = torch.randn(1, 1, 16, 16)
        assert torch.equal(net(x)[0], net2(x)[0])

    def test_config_mismatch_field_diff(self, tmp_path):
        path = save_checkpoint(tmp_path / "c.pt", "train",
                               {"loss": {"tau": 0.1}}, {})
        with pytest.raises(ConfigMismatchError) as err:
            load_checkpoint(path, expected_config={"loss": {"tau": 0.2}})
        assert any("loss.tau" in d for d in err.value.diffs)

    def test_atomic_write_replaces(self, tmp_path):
        p = tmp_path / "x.pt"
        save_checkpoint(p, "train", {}, {})
        save_checkpoint(p, "train", {"v": 2}, {})
        assert load_checkpoint(p)["config"] == {"v": 2}
        assert not p.with_suffix(".pt.tmp").exists()


def test_map_token_roundtrip():
    x = torch.randn(2, 8, 3, 5)
    from anatomyssl.nets import tokens_to_map
    assert torch.equal(tokens_to_map(map_to_tokens(x), 3, 5), x)
