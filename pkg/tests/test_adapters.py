import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from segadapt.adapters import (
    AdaptedConv2d,
    AdapterConfig,
    DegenerateChannelWarning,
    Method,
    adapter_state_dict,
    attach_adapters,
    compose_effective_weight,
    count_trainable,
    delta_convlora,
    delta_cp,
    delta_lorac,
    init_adapter,
    load_adapter_state_dict,
    merge,
    merge_adapters,
    param_count,
)
from segadapt.backbones import build_multiview_unet

from .oracles import convlora_loops, cp_loops, lorac_loops

ALL_METHODS = list(Method)
LORA_METHODS = [m for m in Method if not m.is_dora]
DORA_METHODS = [m for m in Method if m.is_dora]


def _perturb(adapter, seed, scale=0.3):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in adapter.parameters():
            p.add_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))


class TestConfig:
    def test_default_alpha_is_twice_rank(self):
        cfg = AdapterConfig("lorac", 8)
        assert cfg.alpha == 16
        assert cfg.scaling == 2.0

    @pytest.mark.parametrize("rank", [0, -3, 1.5])
    def test_rejects_bad_rank(self, rank):
        with pytest.raises(ValueError):
            AdapterConfig("lorac", rank)

    @pytest.mark.parametrize("name,expected", [("DoRA-C", Method.DORA_C), ("cp_lora", Method.CP_LORA), ("convLoRA", Method.CONV_LORA)])
    def test_method_names(self, name, expected):
        assert Method.parse(name) is expected

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            Method.parse("ia3")


class TestDeltas:
    def test_lorac_constant(self):
        # R=1, B = 1, A = 2 -> every entry is 2
        A = torch.full((1, 3, 3), 2.0)
        B = torch.ones(4, 3, 1)
        assert torch.equal(delta_lorac(A, B), torch.full((4, 3, 3, 3), 2.0))

    def test_lorac_zero_B(self):
        A = torch.randn(2, 3, 3)
        assert torch.count_nonzero(delta_lorac(A, torch.zeros(4, 3, 2))) == 0

    def test_lorac_integer_case(self):
        rng = np.random.default_rng(0)
        A = rng.integers(-3, 4, (2, 2, 2)).astype(float)
        B = rng.integers(-3, 4, (2, 2, 2)).astype(float)
        got = delta_lorac(torch.from_numpy(A), torch.from_numpy(B)).numpy()
        assert np.array_equal(got, lorac_loops(A, B))

    def test_lorac_axis_pairing(self):
        # B carries kernel height, A carries kernel width
        A = torch.zeros(1, 1, 3)
        A[0, 0, 2] = 1.0
        B = torch.zeros(1, 3, 1)
        B[0, 1, 0] = 1.0
        d = delta_lorac(A, B)
        assert d[0, 0, 1, 2] == 1.0 and d.sum() == 1.0

    def test_convlora_selection(self):
        K = torch.randn(3, 3, 3)
        A = torch.zeros(2, 3, 3, 3)
        A[0] = K
        B = torch.zeros(4, 2)
        B[:, 0] = 1.0
        d = delta_convlora(A, B)
        for o in range(4):
            assert torch.equal(d[o], K)

    def test_convlora_zero(self):
        assert torch.count_nonzero(delta_convlora(torch.randn(2, 3, 3, 3), torch.zeros(4, 2))) == 0

    def test_cp_unit_vectors(self):
        a1 = torch.tensor([[1.0, 2.0]])
        a2 = torch.tensor([[1.0, 0.0]])
        a3 = torch.tensor([[1.0]])
        a4 = torch.tensor([[1.0]])
        d = delta_cp(a1, a2, a3, a4)
        assert d.shape == (2, 2, 1, 1)
        assert d[0, 0, 0, 0] == 1.0 and d[1, 0, 0, 0] == 2.0
        assert torch.count_nonzero(d[:, 1]) == 0

    @pytest.mark.parametrize("zero", range(4))
    def test_cp_zero_factor(self, zero):
        f = [torch.randn(2, 3), torch.randn(2, 2), torch.randn(2, 3), torch.randn(2, 3)]
        f[zero] = torch.zeros_like(f[zero])
        assert torch.count_nonzero(delta_cp(*f)) == 0

    def test_cp_rank3_random(self):
        rng = np.random.default_rng(1)
        f = [rng.uniform(-1, 1, (3, d)) for d in (3, 2, 2, 2)]
        got = delta_cp(*(torch.from_numpy(x) for x in f)).numpy()
        assert np.max(np.abs(got - cp_loops(*f))) < 1e-12

    def test_shape_errors(self):
        with pytest.raises(ValueError):
            delta_lorac(torch.zeros(2, 3, 3), torch.zeros(4, 3, 3))
        with pytest.raises(ValueError):
            delta_convlora(torch.zeros(2, 3, 3, 3), torch.zeros(4, 3))
        with pytest.raises(ValueError):
            delta_cp(torch.zeros(2, 3), torch.zeros(3, 3), torch.zeros(2, 3), torch.zeros(2, 3))


dims = st.integers(1, 4)


@settings(max_examples=40, deadline=None)
@given(c_out=dims, c_in=dims, k_h=dims, k_w=dims, R=st.integers(1, 3), seed=st.integers(0, 2**31))
def test_deltas_match_loops(c_out, c_in, k_h, k_w, R, seed):
    rng = np.random.default_rng(seed)
    u = lambda *s: rng.uniform(-1, 1, s)
    A, B = u(R, c_in, k_w), u(c_out, k_h, R)
    assert np.max(np.abs(delta_lorac(torch.from_numpy(A), torch.from_numpy(B)).numpy() - lorac_loops(A, B))) < 1e-12
    A, B = u(R, c_in, k_h, k_w), u(c_out, R)
    assert np.max(np.abs(delta_convlora(torch.from_numpy(A), torch.from_numpy(B)).numpy() - convlora_loops(A, B))) < 1e-12
    f = [u(R, c_out), u(R, c_in), u(R, k_h), u(R, k_w)]
    assert np.max(np.abs(delta_cp(*(torch.from_numpy(x) for x in f)).numpy() - cp_loops(*f))) < 1e-12


class TestInit:
    @pytest.mark.parametrize("method", ALL_METHODS)
    def test_zero_delta(self, method):
        w = torch.randn(4, 3, 3, 3)
        ad = init_adapter(w, AdapterConfig(method, 2), seed=0)
        assert torch.count_nonzero(ad.delta()) == 0

    @pytest.mark.parametrize("method", LORA_METHODS)
    def test_lora_effective_equals_base(self, method):
        w = torch.randn(4, 3, 3, 3)
        ad = init_adapter(w, AdapterConfig(method, 2), seed=0)
        assert torch.equal(compose_effective_weight(w, ad), w)

    @pytest.mark.parametrize("method", DORA_METHODS)
    def test_dora_effective_equals_base(self, method):
        w = torch.randn(4, 3, 3, 3, dtype=torch.float64)
        ad = init_adapter(w, AdapterConfig(method, 2), seed=0)
        eff = compose_effective_weight(w, ad)
        assert torch.max(torch.abs(eff - w)) / torch.max(torch.abs(w)) <= 1e-6

    def test_dora_magnitude_of_ones(self):
        w = torch.randn(4, 3, 3, 3)
        w[0] = 1.0
        ad = init_adapter(w, AdapterConfig("dorac", 2), seed=0)
        assert ad.magnitude[0].item() == pytest.approx(math.sqrt(27), rel=1e-6)
        assert ad.magnitude[0].item() == pytest.approx(5.19615, abs=1e-5)

    @pytest.mark.parametrize("method", ALL_METHODS)
    def test_deterministic(self, method):
        w = torch.randn(4, 3, 3, 3)
        a = init_adapter(w, AdapterConfig(method, 2), seed=7)
        b = init_adapter(w, AdapterConfig(method, 2), seed=7)
        for (n1, p1), (n2, p2) in zip(a.named_parameters(), b.named_parameters()):
            assert n1 == n2 and torch.equal(p1, p2)

    def test_rejects_non_finite_base(self):
        w = torch.randn(4, 3, 3, 3)
        w[1, 0, 0, 0] = float("nan")
        with pytest.raises(ValueError):
            init_adapter(w, AdapterConfig("lorac", 2))

    def test_factor_shapes(self):
        w = torch.randn(5, 3, 3, 2)
        ad = init_adapter(w, AdapterConfig("lorac", 4))
        assert ad.lora_A.shape == (4, 3, 2) and ad.lora_B.shape == (5, 3, 4)
        ad = init_adapter(w, AdapterConfig("convdora", 4))
        assert ad.lora_A.shape == (4, 3, 3, 2) and ad.lora_B.shape == (5, 4) and ad.magnitude.shape == (5,)
        ad = init_adapter(w, AdapterConfig("cplora", 4))
        assert [p.shape for p in ad.factors().values()] == [(4, 5), (4, 3), (4, 3), (4, 2)]


class TestCompose:
    def test_lorac_alpha_2r(self):
        w = torch.randn(4, 3, 3, 3, dtype=torch.float64)
        ad = init_adapter(w, AdapterConfig("lorac", 3), seed=0)
        _perturb(ad, 1)
        eff = compose_effective_weight(w, ad)
        assert torch.allclose(eff, w + 2 * ad.delta(), rtol=0, atol=1e-12)

    def test_custom_alpha(self):
        w = torch.randn(4, 3, 3, 3, dtype=torch.float64)
        ad = init_adapter(w, AdapterConfig("convlora", 4, alpha=1.0), seed=0)
        _perturb(ad, 1)
        assert torch.allclose(compose_effective_weight(w, ad), w + 0.25 * ad.delta(), atol=1e-12)

    @pytest.mark.parametrize("method", DORA_METHODS)
    def test_dora_channel_norm_is_magnitude(self, method):
        w = torch.randn(6, 3, 3, 3, dtype=torch.float64)
        ad = init_adapter(w, AdapterConfig(method, 2), seed=0)
        _perturb(ad, 2)
        eff = compose_effective_weight(w, ad)
        V = w + ad.config.scaling * ad.delta()
        vn = V.flatten(1).norm(dim=1)
        expected = ad.magnitude * vn / (vn + ad.config.epsilon)
        assert torch.allclose(eff.flatten(1).norm(dim=1), expected.abs(), rtol=1e-12)
        direction = V / (vn + ad.config.epsilon).view(-1, 1, 1, 1)
        n = direction.flatten(1).norm(dim=1)
        assert torch.all(n <= 1) and torch.all(n >= 1 - 1e-4)

    def test_degenerate_channel_warns(self):
        w = torch.randn(3, 2, 3, 3, dtype=torch.float64)
        w[1] = 0.0
        ad = init_adapter(w, AdapterConfig("dorac", 2), seed=0)
        with pytest.warns(DegenerateChannelWarning):
            eff = compose_effective_weight(w, ad)
        assert torch.isfinite(eff).all()

    def test_shape_mismatch(self):
        ad = init_adapter(torch.randn(4, 3, 3, 3), AdapterConfig("lorac", 2))
        with pytest.raises(ValueError):
            compose_effective_weight(torch.randn(4, 3, 1, 1), ad)


class TestMerge:
    @pytest.mark.parametrize("method", LORA_METHODS)
    def test_zero_adapter_merge_is_bitwise_base(self, method):
        conv = nn.Conv2d(3, 4, 3, padding=1)
        ad = init_adapter(conv, AdapterConfig(method, 2))
        merged = merge(conv, ad)
        assert merged.weight.detach().numpy().tobytes() == conv.weight.detach().numpy().tobytes()
        again = merge(merged, init_adapter(merged, AdapterConfig(method, 2)))
        assert torch.equal(again.weight, merged.weight)

    @pytest.mark.parametrize("method", ALL_METHODS)
    def test_merged_forward_matches_runtime(self, method):
        torch.manual_seed(0)
        conv = nn.Conv2d(3, 5, 3, padding=1)
        ad = init_adapter(conv, AdapterConfig(method, 2), seed=1)
        _perturb(ad, 3)
        layer = AdaptedConv2d(conv, ad)
        merged = merge(conv, ad)
        x = torch.randn(4, 3, 8, 8)
        with torch.no_grad():
            a, b = layer(x), merged(x)
        assert (a - b).abs().max() / a.abs().max() < 1e-5

    def test_lorac_random_state(self):
        conv = nn.Conv2d(4, 6, 3, padding=1)
        ad = init_adapter(conv, AdapterConfig("lorac", 3), seed=0)
        _perturb(ad, 5)
        x = torch.randn(2, 4, 12, 12)
        with torch.no_grad():
            composed = F.conv2d(x, compose_effective_weight(conv.weight, ad), conv.bias, padding=1)
            merged = merge(conv, ad)(x)
        assert (merged - composed).abs().max() / composed.abs().max() < 1e-5

    def test_bias_untouched(self):
        conv = nn.Conv2d(3, 4, 3)
        ad = init_adapter(conv, AdapterConfig("dorac", 2))
        _perturb(ad, 1)
        assert torch.equal(merge(conv, ad).bias, conv.bias)


class TestParamCount:
    def test_lorac(self):
        assert param_count("lorac", 64, 128, 3, 8) == 4608

    def test_convlora(self):
        assert param_count("convlora", 64, 128, 3, 2) == 1408

    def test_cpdora(self):
        assert param_count("cpdora", 64, 128, 3, 8) == 1712

    @pytest.mark.parametrize("method", ALL_METHODS)
    @pytest.mark.parametrize("shape", [(4, 3, 3, 3), (2, 5, 1, 1), (7, 2, 3, 3)])
    def test_matches_allocated_parameters(self, method, shape):
        ad = init_adapter(torch.randn(shape), AdapterConfig(method, 3))
        c_out, c_in, k, _ = shape
        assert sum(p.numel() for p in ad.parameters()) == param_count(method, c_in, c_out, k, 3)

    def test_no_bias_added(self):
        conv = nn.Conv2d(3, 4, 3)
        layer = AdaptedConv2d(conv, init_adapter(conv, AdapterConfig("convlora", 2)))
        names = [n for n, p in layer.named_parameters() if p.requires_grad]
        assert names == ["adapter.lora_A", "adapter.lora_B"]


def _closed_form(method, c_in, c_out, k_h, k_w, R):
    m = Method.parse(method)
    factors = {
        "lorac": R * (c_in * k_w + c_out * k_h),
        "convlora": R * (c_out + c_in * k_h * k_w),
        "cplora": R * (c_out + c_in + k_h + k_w),
    }[m.value.replace("dora", "lora")]
    return factors + (c_out if m.is_dora else 0)


layer_shapes = st.tuples(st.integers(1, 6), st.integers(1, 6), st.sampled_from([1, 3, 5]))


class TestAdapterProperties:
    @settings(max_examples=40, deadline=None)
    @given(method=st.sampled_from(ALL_METHODS), shape=layer_shapes, rank=st.sampled_from([2, 4, 8]), seed=st.integers(0, 2**16))
    def test_fresh_adapter_reproduces_base(self, method, shape, rank, seed):
        c_out, c_in, k = shape
        torch.manual_seed(seed)
        conv = nn.Conv2d(c_in, c_out, k, padding=k // 2).double()
        layer = AdaptedConv2d(conv, init_adapter(conv, AdapterConfig(method, rank), seed=seed))
        x = torch.randn(2, c_in, 7, 7, dtype=torch.float64)
        with torch.no_grad():
            a, b = layer(x), conv(x)
        if not method.is_dora:
            assert torch.equal(a, b)
            return
        # DoRA rescales channel j by |W_j| / (|W_j| + eps), so outputs shrink by at most eps/|W_j|
        norms = conv.weight.detach().flatten(1).norm(dim=1)
        bound = (1e-8 / norms).view(1, -1, 1, 1) * (b - conv.bias.view(1, -1, 1, 1)).abs()
        assert torch.all((a - b).abs() <= 1.01 * bound + 1e-15)

    @settings(max_examples=40, deadline=None)
    @given(method=st.sampled_from(ALL_METHODS), shape=layer_shapes, rank=st.sampled_from([2, 4, 8]), seed=st.integers(0, 2**16))
    def test_merge_matches_runtime(self, method, shape, rank, seed):
        c_out, c_in, k = shape
        torch.manual_seed(seed)
        conv = nn.Conv2d(c_in, c_out, k, padding=k // 2).double()
        ad = init_adapter(conv, AdapterConfig(method, rank), seed=seed)
        _perturb(ad, seed)
        layer = AdaptedConv2d(conv, ad)
        x = torch.randn(2, c_in, 7, 7, dtype=torch.float64)
        with torch.no_grad():
            a, b = layer(x), merge(conv, ad)(x)
        assert torch.allclose(a, b, rtol=1e-9, atol=1e-10)

    @settings(max_examples=60, deadline=None)
    @given(method=st.sampled_from(ALL_METHODS), shape=layer_shapes, rank=st.sampled_from([2, 4, 8, 16, 32, 64, 96, 128]))
    def test_param_count_closed_form(self, method, shape, rank):
        c_out, c_in, k = shape
        expected = _closed_form(method, c_in, c_out, k, k, rank)
        assert param_count(method, c_in, c_out, k, rank) == expected
        ad = init_adapter(torch.zeros(c_out, c_in, k, k).normal_(), AdapterConfig(method, rank))
        assert sum(p.numel() for p in ad.parameters()) == expected


class TestNetworkAttach:
    @pytest.mark.parametrize("method", ALL_METHODS)
    def test_network_counts(self, method):
        net = build_multiview_unet(base_channels=4)
        layers = attach_adapters(net, AdapterConfig(method, 2))
        expected = 0
        for layer in layers.values():
            c_out, c_in, k_h, k_w = layer.base.weight.shape
            expected += param_count(method, c_in, c_out, k_h, 2)
        assert count_trainable(net) == expected
        assert all(not p.requires_grad for layer in layers.values() for p in layer.base.parameters())

    def test_state_roundtrip(self):
        net = build_multiview_unet(base_channels=4)
        attach_adapters(net, AdapterConfig("cpdora", 2), seed=1)
        for _, layer in net.named_modules():
            if isinstance(layer, AdaptedConv2d):
                _perturb(layer.adapter, 4)
        sd = adapter_state_dict(net)
        other = build_multiview_unet(base_channels=4)
        attach_adapters(other, AdapterConfig("cpdora", 2), seed=9)
        load_adapter_state_dict(other, sd)
        for k, v in adapter_state_dict(other).items():
            assert torch.equal(v, sd[k])
        with pytest.raises(ValueError):
            load_adapter_state_dict(other, {k: v for k, v in list(sd.items())[1:]})

    def test_merge_adapters_restores_plain_convs(self):
        net = build_multiview_unet(base_channels=4)
        names = [n for n, _ in net.named_parameters()]
        attach_adapters(net, AdapterConfig("lorac", 2))
        merge_adapters(net)
        assert [n for n, _ in net.named_parameters()] == names
