"""Multi-path network: construction, both forward modes, path weights."""

import numpy as np
import pytest

from kernelshrink import (KernelShape, SubKernelSet, default_subkernel_set,
                          build_supernet, embed_subkernel, inflate_init, nn)
from kernelshrink.backbone import PlainConvLayer, build_network
from kernelshrink.supernet import CostSuperLayer
from kernelshrink.tensor import Tensor

from conftest import tiny_backbone


@pytest.fixture
def sub7():
    return default_subkernel_set()


class TestConstruction:
    def test_cost_mode_branch_and_aggregator_counts(self, sub7):
        spec = tiny_backbone(width=4)
        net = build_supernet(spec, sub7, "cost")
        _, layer = net.super_layers[0]
        assert isinstance(layer, CostSuperLayer)
        assert len(layer.weights) == 7
        assert all(w.shape[0] == 4 for w in layer.weights)  # 28 branch outputs
        assert layer.aggregator.shape == (4, 28, 1, 1, 1)

    def test_aggregator_averages_own_channel_slots(self, sub7):
        spec = tiny_backbone(width=3)
        net = build_supernet(spec, sub7, "cost")
        _, layer = net.super_layers[0]
        agg = layer.aggregator.data[:, :, 0, 0, 0]
        for c in range(3):
            own = [i * 3 + c for i in range(7)]
            np.testing.assert_array_equal(agg[c, own], np.full(7, 1 / 7))
            others = [j for j in range(21) if j not in own]
            assert np.all(agg[c, others] == 0.0)

    def test_stem_gets_no_branches(self, sub7):
        spec = tiny_backbone()
        net = build_supernet(spec, sub7, "cost")
        assert isinstance(net.net.body[0], PlainConvLayer)
        assert len(net.super_layers) == 2

    def test_degenerate_single_candidate_set(self):
        ss = SubKernelSet(KernelShape(3, 3, 3), (KernelShape(3, 3, 3),))
        spec = tiny_backbone(width=4)
        for mode in ("perf", "cost"):
            net = build_supernet(spec, ss, mode)
            _, layer = net.super_layers[0]
            assert len(layer.weights) == 1

    def test_base_mismatch_rejected(self, sub7):
        spec = tiny_backbone()
        bad = SubKernelSet(KernelShape(5, 5, 5), (KernelShape(5, 5, 5),))
        with pytest.raises(ValueError, match="base"):
            build_supernet(spec, bad, "cost")

    def test_unknown_mode_rejected(self, sub7):
        with pytest.raises(ValueError, match="mode"):
            build_supernet(tiny_backbone(), sub7, "express")


class TestSinglePathForward:
    def test_all_base_sample_equals_plain_backbone(self, sub7, rng):
        spec = tiny_backbone(width=4)
        net = build_supernet(spec, sub7, "perf", seed=5)
        sample = net.sample_path(rng)
        for k in sample.choices:
            sample.choices[k][:] = 0  # index 0 is the 3x3x3 base

        plain = build_network(spec, seed=5)
        stem_sup = net.net.body[0]
        plain.body[0].conv.weight.data = stem_sup.conv.weight.data.copy()
        for i, (_, layer) in enumerate(net.super_layers):
            plain.body[i + 1].conv.weight.data = layer.weights[0].data.copy()
        plain.head.weight.data = net.net.head.weight.data.copy()
        plain.head.bias.data = net.net.head.bias.data.copy()

        x = Tensor(rng.normal(size=(2, 1, 8, 8, 8)))
        net.train(True)
        plain.train(True)
        np.testing.assert_allclose(net.forward(x, sample).data,
                                   plain.forward(x).data, rtol=0, atol=1e-12)

    def test_repeat_forward_is_identical(self, sub7, rng):
        net = build_supernet(tiny_backbone(), sub7, "perf")
        net.eval()
        sample = net.sample_path(rng)
        x = Tensor(rng.normal(size=(2, 1, 8, 8, 8)))
        y1 = net.forward(x, sample).data
        y2 = net.forward(x, sample).data
        np.testing.assert_array_equal(y1, y2)

    def test_non_sampled_branches_get_zero_gradient(self, sub7, rng):
        net = build_supernet(tiny_backbone(width=4), sub7, "perf")
        sample = net.sample_path(rng)
        x = Tensor(rng.normal(size=(2, 1, 8, 8, 8)))
        loss = (net.forward(x, sample) * net.forward(x, sample)).sum()
        loss.backward()
        for name, layer in net.super_layers:
            used = set(sample.choices[name].tolist())
            for i in range(7):
                g = layer.weights[i].grad
                if i in used:
                    assert g is not None
                else:
                    assert g is None or np.all(g == 0.0)

    def test_out_of_range_sample_rejected(self, sub7, rng):
        net = build_supernet(tiny_backbone(width=4), sub7, "perf")
        sample = net.sample_path(rng)
        next(iter(sample.choices.values()))[0] = 7
        with pytest.raises(ValueError, match="out of range"):
            net.forward(Tensor(rng.normal(size=(1, 1, 8, 8, 8))), sample)

    def test_sample_required_in_perf_mode(self, sub7, rng):
        net = build_supernet(tiny_backbone(), sub7, "perf")
        with pytest.raises(ValueError, match="sample"):
            net.forward(Tensor(rng.normal(size=(1, 1, 8, 8, 8))))


class TestAllPathForward:
    def test_zero_scale_kills_branch(self, sub7, rng):
        net = build_supernet(tiny_backbone(width=3), sub7, "cost")
        net.eval()
        net.freeze_identity_stats()
        name, layer = net.super_layers[0]
        layer.scales[2].data[:] = 0.0
        x = Tensor(rng.normal(size=(1, 1, 8, 8, 8)))
        y1 = net.forward(x).data
        layer.weights[2].data = rng.normal(size=layer.weights[2].shape)
        y2 = net.forward(x).data
        np.testing.assert_array_equal(y1, y2)

    def test_frozen_stats_linearity_in_alpha(self, sub7, rng):
        """Pre-head output is linear in one layer's alpha vector (eval mode)."""
        spec = tiny_backbone(width=3, replaceable=1)
        net = build_supernet(spec, sub7, "cost")
        net.eval()
        net.freeze_identity_stats()
        _, layer = net.super_layers[0]
        for s in layer.shifts:
            s.data[:] = 0.0
        x = Tensor(rng.normal(size=(2, 3, 8, 8, 8)))

        def layer_out(alpha):
            layer.set_alpha(alpha)
            # pre-activation response: conv branches + aggregation only
            parts = [layer.branch_norm(
                nn.conv_nd(x, layer.weights[i], stride=layer.layer.stride), i)
                for i in range(7)]
            from kernelshrink.tensor import concat
            return nn.conv_nd(concat(parts, axis=1), layer.aggregator).data

        a1 = rng.normal(size=(3, 7))
        a2 = rng.normal(size=(3, 7))
        lhs = layer_out(a1 + 2.5 * a2)
        rhs = layer_out(a1) + 2.5 * layer_out(a2) - 1.5 * layer_out(np.zeros((3, 7)))
        rel = np.abs(lhs - rhs).max() / max(np.abs(rhs).max(), 1e-30)
        assert rel < 1e-10

    def test_merged_kernel_equivalence(self, sub7, rng):
        """Frozen stats: sum_i alpha_i * conv(X, W_i) == conv(X, merged kernel)."""
        spec = tiny_backbone(width=4, replaceable=1)
        net = build_supernet(spec, sub7, "cost", seed=2)
        net.eval()
        net.freeze_identity_stats()
        _, layer = net.super_layers[0]
        alpha = rng.normal(size=(4, 7))
        layer.set_alpha(alpha)
        for s in layer.shifts:
            s.data[:] = 0.0
        x = Tensor(rng.normal(size=(2, 4, 8, 8, 8)))
        out = layer.forward(x).data

        merged = np.zeros((4, 4, 3, 3, 3))
        for i, shape in enumerate(sub7):
            emb = embed_subkernel(layer.weights[i].data, sub7.base)
            merged += (alpha[:, i] / 7.0)[:, None, None, None, None] * emb
        ref = nn.conv_nd(x, Tensor(merged)).data
        ref = ref * (ref > 0)  # layer activation
        rel = np.abs(out - ref).max() / np.abs(ref).max()
        assert rel < 1e-10

    def test_sample_rejected_in_cost_mode(self, sub7, rng):
        net = build_supernet(tiny_backbone(), sub7, "cost")
        sample_like = net.read_path_weights()
        from kernelshrink.supernet import PathSample
        with pytest.raises(ValueError, match="no path sample"):
            net.forward(Tensor(rng.normal(size=(1, 1, 8, 8, 8))),
                        PathSample({k: np.zeros(4, int) for k in sample_like}))


class TestPathSampling:
    def test_uniform_frequencies(self, sub7):
        net = build_supernet(tiny_backbone(width=4), sub7, "perf")
        rng = np.random.default_rng(77)
        counts = np.zeros((2, 4, 7))
        n = 2000
        for _ in range(n):
            s = net.sample_path(rng)
            for li, name in enumerate(s.choices):
                for c, i in enumerate(s.choices[name]):
                    counts[li, c, i] += 1
        freq = counts / n
        assert np.abs(freq - 1 / 7).max() < 0.05  # coarse; exact bound in acceptance

    def test_single_candidate_constant_sample(self):
        ss = SubKernelSet(KernelShape(3, 3, 3), (KernelShape(3, 3, 3),))
        net = build_supernet(tiny_backbone(width=4), ss, "perf")
        s = net.sample_path(np.random.default_rng(0))
        assert all(np.all(v == 0) for v in s.choices.values())

    def test_fixed_seed_identical_sequence(self, sub7):
        net = build_supernet(tiny_backbone(width=4), sub7, "perf")
        seq1 = [net.sample_path(np.random.default_rng(3)).choices for _ in range(1)]
        seq2 = [net.sample_path(np.random.default_rng(3)).choices for _ in range(1)]
        for a, b in zip(seq1, seq2):
            for k in a:
                np.testing.assert_array_equal(a[k], b[k])


class TestPathWeights:
    def test_initialized_to_one(self, sub7):
        net = build_supernet(tiny_backbone(width=4), sub7, "cost")
        alpha = net.read_path_weights()
        assert all(np.all(a == 1.0) for a in alpha.values())

    def test_alias_read_back(self, sub7):
        net = build_supernet(tiny_backbone(width=4), sub7, "cost")
        name, layer = net.super_layers[0]
        layer.scales[3].data[2] = 0.3
        assert net.read_path_weights()[name][2, 3] == 0.3

    def test_alpha_shape(self, sub7):
        net = build_supernet(tiny_backbone(width=5, replaceable=3), sub7, "perf")
        alpha = net.read_path_weights()
        assert len(alpha) == 3
        assert all(a.shape == (5, 7) for a in alpha.values())

    def test_stem_structure_identical_to_backbone(self, sub7):
        spec = tiny_backbone(width=4)
        net = build_supernet(spec, sub7, "cost")
        plain = build_network(spec)
        assert type(net.net.body[0]) is type(plain.body[0])
        assert net.net.body[0].conv.weight.shape == plain.body[0].conv.weight.shape


class TestInflateInit:
    def test_constant_2d_kernel_fills_3d_with_v_over_3(self, sub7):
        net = build_supernet(tiny_backbone(width=2), sub7, "cost")
        name, layer = net.super_layers[0]
        v = 0.6
        src = {name: np.full((2, 4, 3, 3), v)}
        # other layer needs a source too
        for other, l in net.super_layers[1:]:
            src[other] = np.zeros((2, 2, 3, 3))
        # first replaceable has in_channels 4? no: width 2 everywhere
        src[name] = np.full((2, 2, 3, 3), v)
        inflate_init(net, src)
        i3d = sub7.index(KernelShape(3, 3, 3))
        np.testing.assert_allclose(layer.weights[i3d].data, v / 3, rtol=0, atol=0)

    def test_zero_source_gives_zero_everywhere(self, sub7):
        net = build_supernet(tiny_backbone(width=2), sub7, "cost")
        src = {name: np.zeros((2, 2, 3, 3)) for name, _ in net.super_layers}
        inflate_init(net, src)
        for _, layer in net.super_layers:
            for w in layer.weights:
                assert np.all(w.data == 0.0)

    def test_rule_per_shape(self, sub7, rng):
        net = build_supernet(tiny_backbone(width=2), sub7, "cost")
        name, layer = net.super_layers[0]
        src = {n: rng.normal(size=(2, 2, 3, 3)) for n, _ in net.super_layers}
        inflate_init(net, src)
        w2 = src[name]
        # spatial 2D branch copies the source at depth 1
        i = sub7.index(KernelShape(1, 3, 3))
        np.testing.assert_array_equal(layer.weights[i].data[:, :, 0], w2)
        # temporal branch: spatial average repeated / 3
        i = sub7.index(KernelShape(3, 1, 1))
        expect = np.repeat(w2.mean(axis=(2, 3))[:, :, None], 3, axis=2) / 3
        np.testing.assert_allclose(layer.weights[i].data[:, :, :, 0, 0], expect)
        # full 3D branch: repeat / 3
        i = sub7.index(KernelShape(3, 3, 3))
        np.testing.assert_allclose(layer.weights[i].data,
                                   np.repeat(w2[:, :, None], 3, axis=2) / 3)

    def test_constant_input_response_preserved_in_interior(self, sub7, rng):
        net = build_supernet(tiny_backbone(width=2), sub7, "cost")
        name, layer = net.super_layers[0]
        src = {n: rng.normal(size=(2, 2, 3, 3)) for n, _ in net.super_layers}
        inflate_init(net, src)
        x = Tensor(np.full((1, 2, 7, 7, 7), 1.7))
        i3d = sub7.index(KernelShape(3, 3, 3))
        y3 = nn.conv_nd(x, layer.weights[i3d]).data
        i2d = sub7.index(KernelShape(1, 3, 3))
        y2 = nn.conv_nd(x, layer.weights[i2d]).data
        np.testing.assert_allclose(y3[:, :, 1:-1], y2[:, :, 1:-1], atol=1e-12)

    def test_shape_mismatch_rejected(self, sub7):
        net = build_supernet(tiny_backbone(width=2), sub7, "cost")
        name, _ = net.super_layers[0]
        with pytest.raises(ValueError, match="shape"):
            inflate_init(net, {name: np.zeros((2, 2, 5, 5))})
