"""Shape, invariant and oracle tests for the network modules."""

import numpy as np
import pytest
import torch

import oracles
from futurebev.config import build_config
from futurebev.decoder import BOX_DIM, InstanceDecoder
from futurebev.encoder import BevEncoder
from futurebev.model import build_model
from futurebev.predictor import BevPredictor, FlowHead


def tiny_cfg(**overrides):
    extra = [f"{k}={v}" for k, v in overrides.items()]
    return build_config(
        "tiny",
        overrides=[
            "world.grid.height=12",
            "world.grid.width=12",
            "model.channels=8",
            "model.num_queries=5",
            "model.num_heads=2",
            "model.num_points=2",
            "model.num_predictor_layers=2",
            "model.num_decoder_layers=2",
            "model.ffn_dim=16",
            *extra,
        ],
    )


class TestEncoder:
    def test_output_shape(self):
        enc = BevEncoder(num_frames=3, raster_channels=3, channels=8)
        out = enc(torch.randn(2, 3, 3, 12, 10))
        assert out.shape == (2, 8, 12, 10)

    def test_rejects_wrong_frame_count(self):
        enc = BevEncoder(num_frames=3, raster_channels=3, channels=8)
        with pytest.raises(ValueError):
            enc(torch.randn(2, 4, 3, 12, 10))


class TestPredictor:
    def test_rollout_shapes(self):
        pred = BevPredictor(8, 6, 6, t_out=3, num_layers=2, num_heads=2,
                            num_points=2, ffn_dim=16)
        feats, flows = pred(torch.randn(2, 8, 6, 6))
        assert len(feats) == 4
        assert all(f.shape == (2, 8, 6, 6) for f in feats)
        assert flows.shape == (2, 3, 2, 6, 6)

    def test_initial_flow_is_zero(self):
        head = FlowHead(8)
        flow = head(torch.randn(2, 8, 5, 5))
        assert torch.allclose(flow, torch.zeros_like(flow))

    def test_unguided_mode_has_no_flow(self):
        pred = BevPredictor(8, 6, 6, t_out=2, num_layers=1, num_heads=2,
                            num_points=2, ffn_dim=16, flow_guided=False)
        feats, flows = pred(torch.randn(1, 8, 6, 6))
        assert flows is None
        assert len(feats) == 3
        assert pred.flow_heads is None

    def test_future_steps_share_queries_but_differ(self):
        torch.manual_seed(0)
        pred = BevPredictor(8, 6, 6, t_out=2, num_layers=2, num_heads=2,
                            num_points=2, ffn_dim=16)
        # Give the flow heads distinct nonzero outputs.
        with torch.no_grad():
            for i, h in enumerate(pred.flow_heads):
                h.out.bias.copy_(torch.tensor([0.5 * (i + 1), -0.25]))
        feats, _ = pred(torch.randn(1, 8, 6, 6))
        assert not torch.allclose(feats[1], feats[2])

    def test_grid_size_mismatch_rejected(self):
        pred = BevPredictor(8, 6, 6, t_out=1, num_layers=1, num_heads=2,
                            num_points=2, ffn_dim=16)
        with pytest.raises(ValueError):
            pred(torch.randn(1, 8, 5, 6))


class TestDecoder:
    def make(self, use_box_head=True):
        return InstanceDecoder(8, num_queries=4, num_classes=1, t_out=2,
                               num_layers=3, num_heads=2, num_points=2,
                               ffn_dim=16, use_box_head=use_box_head)

    def test_output_shapes(self):
        dec = self.make()
        feats = [torch.randn(2, 8, 5, 5) for _ in range(3)]
        out = dec(feats)
        assert out.class_logits.shape == (3, 2, 4, 2)
        assert out.boxes.shape == (3, 2, 4, BOX_DIM)
        assert out.mask_logits.shape == (2, 4, 3, 5, 5)
        assert out.reference_points.shape == (3, 2, 4, 2)

    def test_box_centers_in_unit_range(self):
        dec = self.make()
        out = dec([torch.randn(1, 8, 5, 5) for _ in range(3)])
        centers = out.boxes[..., :2]
        assert (centers >= 0).all() and (centers <= 1).all()

    def test_without_box_head_boxes_are_zero(self):
        dec = self.make(use_box_head=False)
        out = dec([torch.randn(1, 8, 5, 5) for _ in range(3)])
        assert dec.box_head is None
        assert torch.all(out.boxes == 0)

    def test_mask_logits_match_dot_product_oracle(self):
        """The final mask logits are exactly the per-frame query/context
        dot product, verified with explicit loops."""
        torch.manual_seed(1)
        dec = self.make()
        feats = [torch.randn(1, 8, 4, 6) for _ in range(3)]
        out = dec(feats)
        # Recompute the transformed tensors the decoder used.
        from futurebev.layers import inverse_sigmoid

        with torch.no_grad():
            current = feats[0]
            qpos = dec.query_pos
            refs = torch.sigmoid(dec.reference_head(dec.query_pos))
            hidden = dec.query_content
            for layer in dec.layers:
                hidden = layer(hidden, qpos, refs, current)
                box = dec.box_head(dec.final_norm(hidden))
                refs = torch.sigmoid(inverse_sigmoid(refs) + box[..., :2])
            final = dec.final_norm(hidden)
            for t in range(3):
                q_t = dec.mask_query_heads[t](final)[0]      # (M, C)
                ctx_t = dec.mask_context_heads[t](feats[t])[0]  # (C, H, W)
                want = oracles.mask_logits_oracle(q_t.numpy(), ctx_t.numpy())
                got = out.mask_logits[0, :, t].numpy()
                assert np.abs(got - want).max() < 1e-5

    def test_mask_head_gradients(self):
        rng = np.random.default_rng(3)
        dec = self.make().double()
        final = torch.tensor(rng.normal(size=(1, 4, 8)), requires_grad=True)
        feat = torch.tensor(rng.normal(size=(1, 8, 4, 4)), requires_grad=True)
        probe = torch.tensor(rng.normal(size=(1, 4, 4, 4)))

        def fn():
            q = dec.mask_query_heads[0](final)
            ctx = dec.mask_context_heads[0](feat)
            return (torch.einsum("bmc,bchw->bmhw", q, ctx) * probe).sum()

        worst = oracles.check_gradients(fn, [final, feat])
        assert worst < 1e-4

    def test_wrong_feature_count_rejected(self):
        dec = self.make()
        with pytest.raises(ValueError):
            dec([torch.randn(1, 8, 5, 5)])


class TestFullModel:
    def test_forward_shapes(self):
        cfg = tiny_cfg()
        model = build_model(cfg)
        b, tin1 = 2, cfg.world.t_in + 1
        h, w = cfg.world.grid.height, cfg.world.grid.width
        out = model(torch.randn(b, tin1, 3, h, w))
        m, k = cfg.model.num_queries, cfg.model.num_classes
        tout = cfg.world.t_out
        assert out.bev_features.shape == (b, tout + 1, cfg.model.channels, h, w)
        assert out.flows.shape == (b, tout, 2, h, w)
        assert out.class_logits.shape == (cfg.model.num_decoder_layers, b, m, k + 1)
        assert out.boxes.shape == (cfg.model.num_decoder_layers, b, m, 9)
        assert out.mask_logits.shape == (b, m, tout + 1, h, w)

    def test_forward_deterministic(self):
        cfg = tiny_cfg()
        torch.manual_seed(0)
        model = build_model(cfg)
        model.eval()
        x = torch.randn(1, cfg.world.t_in + 1, 3, 12, 12)
        with torch.no_grad():
            a = model(x)
            b = model(x)
        assert torch.equal(a.mask_logits, b.mask_logits)
        assert torch.equal(a.class_logits, b.class_logits)

    def test_flow_ablation_removes_flow_output(self):
        cfg = tiny_cfg(**{"model.flow_guided": "false"})
        model = build_model(cfg)
        out = model(torch.randn(1, cfg.world.t_in + 1, 3, 12, 12))
        assert out.flows is None

    def test_gradients_reach_all_parameters(self):
        """Every parameter is connected to the loss.

        Zero-initialized projections (flow output convs, sampling offsets)
        block gradients at the fresh-init saddle point, so parameters are
        randomized first; what remains is a pure connectivity check.
        """
        cfg = tiny_cfg()
        model = build_model(cfg)
        rng = np.random.default_rng(0)
        with torch.no_grad():
            for p in model.parameters():
                p.copy_(
                    torch.from_numpy(rng.normal(scale=0.1, size=tuple(p.shape))).float()
                )
        out = model(torch.randn(1, cfg.world.t_in + 1, 3, 12, 12))
        loss = (
            out.mask_logits.square().mean()
            + out.class_logits.square().mean()
            + out.boxes.square().mean()
            + (out.flows - 0.3).square().mean()
            + out.bev_features.square().mean()
        )
        loss.backward()
        missing = [
            name
            for name, p in model.named_parameters()
            if p.requires_grad and (p.grad is None or torch.all(p.grad == 0))
        ]
        assert missing == [], f"dead parameters: {missing}"
