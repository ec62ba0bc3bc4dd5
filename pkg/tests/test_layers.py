"""Unit tests for the sampler and attention building blocks.

The deformable attention module is compared against a scalar-loop oracle
(`oracles.deformable_attention_oracle`) and all differentiable pieces are
checked against central-difference gradients.
"""

import numpy as np
import pytest
import torch

import oracles
from futurebev.layers import (
    FlowGuidedAttentionLayer,
    FlowGuidedDeformableAttention,
    MLP,
    ResidualConvBlock,
    inverse_sigmoid,
    normalized_grid_reference_points,
    sample_bilinear,
)


def randomize_module(module, rng):
    """Overwrite all parameters with random values (breaking zero inits)."""
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.from_numpy(rng.normal(scale=0.5, size=tuple(p.shape))).to(p.dtype))


class TestSampleBilinear:
    def test_exact_on_lattice(self):
        torch.manual_seed(0)
        feats = torch.randn(2, 3, 4, 5)
        pts = []
        for r in range(4):
            for c in range(5):
                pts.append([c, r])
        points = torch.tensor(pts, dtype=torch.float32).unsqueeze(0).repeat(2, 1, 1)
        out = sample_bilinear(feats, points)
        want = feats.flatten(2)
        assert torch.allclose(out, want, atol=1e-6)

    def test_matches_scalar_oracle_at_random_points(self):
        rng = np.random.default_rng(1)
        feats = torch.from_numpy(rng.normal(size=(1, 2, 5, 6)))
        points = torch.from_numpy(rng.uniform(-2, 8, size=(1, 40, 2)))
        out = sample_bilinear(feats, points).numpy()
        for p in range(40):
            for c in range(2):
                want = oracles.bilinear_scalar(
                    feats[0, c].numpy(), points[0, p, 0].item(), points[0, p, 1].item()
                )
                assert out[0, c, p] == pytest.approx(want, abs=1e-12)

    def test_gradients(self):
        rng = np.random.default_rng(2)
        feats = torch.tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
        # Keep sample points off the integer lattice, where bilinear
        # interpolation has corners.
        points = torch.tensor(
            rng.uniform(0.2, 2.8, size=(1, 6, 2)) + 0.37, requires_grad=True
        )
        weights = torch.tensor(rng.normal(size=(1, 2, 6)))

        def fn():
            return (sample_bilinear(feats, points) * weights).sum()

        worst = oracles.check_gradients(fn, [feats, points])
        assert worst < 1e-4


class TestDeformableAttention:
    @pytest.mark.parametrize("flow_conditioned", [False, True])
    def test_matches_scalar_oracle(self, flow_conditioned):
        rng = np.random.default_rng(5 if flow_conditioned else 6)
        for trial in range(8):
            c = int(rng.choice([2, 4]))
            heads = int(rng.choice([1, 2]))
            k = int(rng.integers(1, 4))
            h = int(rng.integers(2, 7))
            w = int(rng.integers(2, 7))
            n = int(rng.integers(1, 9))
            module = FlowGuidedDeformableAttention(
                c, heads, k, flow_conditioned=flow_conditioned
            ).double()
            randomize_module(module, rng)
            query = torch.from_numpy(rng.normal(size=(1, n, c)))
            refs = torch.from_numpy(rng.uniform(0, 1, size=(1, n, 2)))
            value = torch.from_numpy(rng.normal(size=(1, c, h, w)))
            flow = torch.from_numpy(rng.normal(scale=2.0, size=(1, 2, h, w)))
            got = module(query, refs, value, flow if flow_conditioned else None)
            want = oracles.deformable_attention_oracle(
                module, query, refs, value, flow if flow_conditioned else None
            )
            assert np.abs(got.detach().numpy() - want).max() < 1e-6

    def test_flow_changes_sampling(self):
        """With nonzero offset weights, moving the flow field moves the output."""
        rng = np.random.default_rng(7)
        module = FlowGuidedDeformableAttention(4, 2, 2, flow_conditioned=True).double()
        randomize_module(module, rng)
        query = torch.from_numpy(rng.normal(size=(1, 3, 4)))
        refs = torch.from_numpy(rng.uniform(0.2, 0.8, size=(1, 3, 2)))
        value = torch.from_numpy(rng.normal(size=(1, 4, 5, 5)))
        flow_a = torch.zeros(1, 2, 5, 5, dtype=torch.float64)
        flow_b = torch.ones(1, 2, 5, 5, dtype=torch.float64)
        out_a = module(query, refs, value, flow_a)
        out_b = module(query, refs, value, flow_b)
        assert not torch.allclose(out_a, out_b)

    def test_default_init_attends_near_reference(self):
        """Zero-init offsets/weights: output is an average of ring samples,
        identical for any two queries (weights don't depend on content yet
        beyond the zeroed projections)."""
        module = FlowGuidedDeformableAttention(4, 2, 2, flow_conditioned=False)
        query = torch.randn(1, 2, 4)
        refs = torch.full((1, 2, 2), 0.5)
        value = torch.randn(1, 4, 6, 6)
        out = module(query, refs, value)
        assert torch.allclose(out[0, 0], out[0, 1], atol=1e-6)

    def test_requires_flow_when_conditioned(self):
        module = FlowGuidedDeformableAttention(4, 2, 2, flow_conditioned=True)
        with pytest.raises(ValueError):
            module(torch.randn(1, 1, 4), torch.rand(1, 1, 2), torch.randn(1, 4, 4, 4))

    def test_gradients_through_everything(self):
        rng = np.random.default_rng(8)
        module = FlowGuidedDeformableAttention(4, 2, 2, flow_conditioned=True).double()
        randomize_module(module, rng)
        query = torch.tensor(rng.normal(size=(1, 2, 4)), requires_grad=True)
        refs = torch.tensor(rng.uniform(0.25, 0.75, size=(1, 2, 2)), requires_grad=True)
        value = torch.tensor(rng.normal(size=(1, 4, 4, 4)), requires_grad=True)
        flow = torch.tensor(rng.normal(scale=0.5, size=(1, 2, 4, 4)), requires_grad=True)
        probe = torch.tensor(rng.normal(size=(1, 2, 4)))

        def fn():
            return (module(query, refs, value, flow) * probe).sum()

        worst = oracles.check_gradients(fn, [query, refs, value, flow])
        assert worst < 1e-4

    def test_parameter_gradients(self):
        rng = np.random.default_rng(9)
        module = FlowGuidedDeformableAttention(2, 1, 2, flow_conditioned=True).double()
        randomize_module(module, rng)
        query = torch.tensor(rng.normal(size=(1, 2, 2)))
        refs = torch.tensor(rng.uniform(0.2, 0.8, size=(1, 2, 2)))
        value = torch.tensor(rng.normal(size=(1, 2, 3, 3)))
        flow = torch.tensor(rng.normal(scale=0.5, size=(1, 2, 3, 3)))
        probe = torch.tensor(rng.normal(size=(1, 2, 2)))
        params = [module.sampling_offsets.weight, module.value_proj.weight,
                  module.attention_weights.weight, module.output_proj.weight]

        def fn():
            return (module(query, refs, value, flow) * probe).sum()

        worst = oracles.check_gradients(fn, params)
        assert worst < 1e-4


class TestAttentionLayer:
    def test_zeroed_projections_make_identity(self):
        layer = FlowGuidedAttentionLayer(8, 2, 2, 16, flow_conditioned=False)
        with torch.no_grad():
            layer.attention.output_proj.weight.zero_()
            layer.attention.output_proj.bias.zero_()
            layer.ffn[2].weight.zero_()
            layer.ffn[2].bias.zero_()
        q = torch.randn(2, 5, 8)
        refs = torch.rand(2, 5, 2)
        value = torch.randn(2, 8, 4, 4)
        out = layer(q, refs, value)
        assert torch.allclose(out, q, atol=1e-7)

    def test_gradient_flow_end_to_end(self):
        rng = np.random.default_rng(10)
        layer = FlowGuidedAttentionLayer(4, 2, 2, 8, flow_conditioned=True).double()
        randomize_module(layer, rng)
        q = torch.tensor(rng.normal(size=(1, 3, 4)), requires_grad=True)
        refs = torch.tensor(rng.uniform(0.3, 0.7, size=(1, 3, 2)))
        value = torch.tensor(rng.normal(size=(1, 4, 4, 4)), requires_grad=True)
        flow = torch.tensor(rng.normal(scale=0.3, size=(1, 2, 4, 4)), requires_grad=True)
        probe = torch.tensor(rng.normal(size=(1, 3, 4)))

        def fn():
            return (layer(q, refs, value, flow) * probe).sum()

        worst = oracles.check_gradients(fn, [q, value, flow])
        assert worst < 1e-4


class TestSmallBlocks:
    def test_residual_block_preserves_shape(self):
        block = ResidualConvBlock(8)
        x = torch.randn(2, 8, 6, 7)
        assert block(x).shape == x.shape

    def test_mlp_layer_count_and_shape(self):
        mlp = MLP(4, 16, 3, num_layers=3)
        assert len(mlp.layers) == 3
        assert mlp(torch.randn(5, 4)).shape == (5, 3)

    def test_reference_grid_layout(self):
        refs = normalized_grid_reference_points(2, 3)
        assert refs.shape == (6, 2)
        # Row-major: first point is cell (0, 0).
        assert torch.allclose(refs[0], torch.tensor([0.5 / 3, 0.25]))
        assert torch.allclose(refs[-1], torch.tensor([2.5 / 3, 0.75]))

    def test_inverse_sigmoid_round_trip(self):
        x = torch.tensor([0.1, 0.5, 0.9])
        assert torch.allclose(torch.sigmoid(inverse_sigmoid(x)), x, atol=1e-6)
