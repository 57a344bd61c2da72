import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from graftkit import tensor as T
from graftkit.analysis import operator_params
from graftkit.operators import (
    Attention, Hyena, HyenaXMLP, Kind, MLP, OperatorConfig, attention_weights, build_operator, param_count,
)

ALL_KINDS = list(Kind)


def make(kind, dim=8, **kw):
    kw.setdefault("heads", 2)
    return build_operator(OperatorConfig(kind, dim, **kw))


def set_identity(m):
    """Identity (or identity-embed / identity-extract) projections and exact delta filters."""
    with torch.no_grad():
        for name, p in m.named_parameters():
            if name.startswith("w_"):
                p.zero_()
                k = min(p.shape)
                p[:k, :k] = torch.eye(k)
            elif name.startswith("filter_"):
                p.zero_()
                p[:, 0] = 1.0
            elif name.startswith("b"):
                p.zero_()
    return m


def naive_attention(m, x, band=None):
    """Per-head loop over explicit score matrices."""
    D, H = m.config.dim, m.config.heads
    d = D // H
    q, k, v = x @ m.w_q, x @ m.w_k, x @ m.w_v
    heads, weights = [], []
    for h in range(H):
        sl = slice(h * d, (h + 1) * d)
        scores = q[..., sl] @ k[..., sl].transpose(-1, -2) / math.sqrt(d)
        if band is not None:
            n = x.shape[1]
            i = torch.arange(n)
            scores = scores.masked_fill((i[:, None] - i[None, :]).abs() > band, -math.inf)
        w = torch.exp(scores - scores.amax(-1, keepdim=True))
        w = w / w.sum(-1, keepdim=True)
        weights.append(w)
        heads.append(w @ v[..., sl])
    return torch.cat(heads, -1) @ m.w_o, torch.stack(weights, 1)


class TestAttention:
    def test_single_token_attends_to_itself(self):
        m = set_identity(make(Kind.MHA, 4))
        x = torch.randn(3, 1, 4)
        assert torch.allclose(m(x), x, atol=1e-7)

    def test_two_token_hand_evaluated(self):
        m = set_identity(build_operator(OperatorConfig(Kind.MHA, 2, heads=1)))
        x = torch.tensor([[[1.0, 0.0], [0.0, 1.0]]])
        w = attention_weights(m, x)[0, 0]
        a = math.exp(1 / math.sqrt(2)) / (math.exp(1 / math.sqrt(2)) + 1)
        assert w[0].tolist() == pytest.approx([a, 1 - a], abs=1e-6)
        assert w[0].tolist() == pytest.approx([0.66976, 0.33024], abs=1e-5)
        assert m(x)[0, 0].tolist() == pytest.approx([0.66976, 0.33024], abs=1e-5)

    def test_matches_per_head_loop(self, f64):
        m = make(Kind.MHA, 8, heads=2)
        x = torch.randn(2, 5, 8)
        y, w = naive_attention(m, x)
        assert torch.allclose(m(x), y, atol=1e-6)
        assert torch.allclose(attention_weights(m, x), w, atol=1e-6)

    def test_uniform_tokens_give_uniform_weights(self):
        m = set_identity(make(Kind.MHA, 4))
        w = attention_weights(m, torch.ones(1, 4, 4))
        assert torch.allclose(w, torch.full_like(w, 0.25))

    def test_weights_are_row_stochastic(self):
        w = attention_weights(make(Kind.MHA), torch.randn(2, 6, 8))
        assert torch.allclose(w.sum(-1), torch.ones(2, 2, 6), atol=1e-6)

    def test_non_attention_rejected(self):
        with pytest.raises(TypeError):
            attention_weights(make(Kind.HYENA_X), torch.randn(1, 3, 8))


class TestSlidingWindow:
    def test_full_band_equals_mha(self):
        mha = make(Kind.MHA, seed=3)
        swa = make(Kind.SWA, seed=3, window=7)
        x = torch.randn(2, 8, 8)
        assert torch.allclose(mha(x), swa(x), atol=1e-6)

    def test_zero_window_is_self_attention(self):
        m = set_identity(make(Kind.SWA, 4, window=0))
        x = torch.randn(2, 6, 4)
        assert torch.allclose(m(x), x, atol=1e-6)

    def test_token_outside_band_has_no_effect(self):
        m = make(Kind.SWA, window=2)
        x = torch.randn(1, 8, 8)
        x2 = x.clone()
        x2[:, 7] += 5.0
        assert torch.equal(m(x)[:, 0], m(x2)[:, 0])

    def test_band_support(self):
        w = attention_weights(make(Kind.SWA, window=1), torch.randn(1, 4, 8))
        assert (w[0, :, 0, 2:] == 0).all() and (w[0, :, 0, :2] > 0).all()

    def test_matches_banded_oracle(self, f64):
        m = make(Kind.SWA, window=2)
        x = torch.randn(2, 9, 8)
        y, w = naive_attention(m, x, band=2)
        assert torch.allclose(m(x), y, atol=1e-6)
        assert torch.allclose(attention_weights(m, x), w, atol=1e-6)


class TestHyena:
    def test_hyena_x_on_ones(self):
        m = set_identity(make(Kind.HYENA_X, 4))
        assert torch.equal(m(torch.ones(1, 3, 4)), torch.ones(1, 3, 4))

    def test_hyena_x_cubes_input(self):
        m = set_identity(make(Kind.HYENA_X, 2))
        x = torch.tensor([[[2.0, -1.0]]])
        assert m(x).tolist() == [[[8.0, -1.0]]]

    def test_hyena_y_unit_filter_equals_hyena_x(self):
        y = make(Kind.HYENA_Y, kernel_size=1, seed=5)
        x_op = make(Kind.HYENA_X, seed=5)
        with torch.no_grad():
            for name in ("w_q", "w_k", "w_v", "w_o"):
                getattr(x_op, name).copy_(getattr(y, name))
            y.filter_gate.fill_(1.0)
            for n in ("q", "k", "v"):
                getattr(x_op, f"filter_{n}").zero_()
                getattr(x_op, f"filter_{n}")[:, 0] = 1.0
        x = torch.randn(2, 6, 8)
        assert torch.allclose(y(x), x_op(x), atol=1e-6)

    def test_delta_reductions(self, f64):
        se, xo = make(Kind.HYENA_SE, seed=9), make(Kind.HYENA_X, seed=9)
        with torch.no_grad():
            for m in (se, xo):
                for n in m.filter_names:
                    getattr(m, f"filter_{n}").zero_()
                    getattr(m, f"filter_{n}")[:, 0] = 1.0
            for name in ("w_q", "w_k", "w_v", "w_o"):
                getattr(xo, name).copy_(getattr(se, name))
        x = torch.randn(3, 7, 8)
        closed = ((x @ se.w_q) * (x @ se.w_k) * (x @ se.w_v)) @ se.w_o
        assert torch.allclose(se(x), closed, atol=1e-6)
        assert torch.allclose(xo(x), closed, atol=1e-6)

    def test_inner_convolution_order(self, f64):
        """y = (q * conv_G(k * v)) M, checked against an explicit loop."""
        m = make(Kind.HYENA_Y, kernel_size=3)
        x = torch.randn(1, 5, 8)
        kv = (x @ m.w_k) * (x @ m.w_v)
        h, b = m.filter_gate, m.bias_gate
        conv = torch.stack([
            sum(h[:, j] * kv[0, s - j] for j in range(3) if s - j >= 0) + b for s in range(5)
        ])[None]
        assert torch.allclose(m(x), ((x @ m.w_q) * conv) @ m.w_o, atol=1e-10)

    def test_non_causal_rejected(self):
        with pytest.raises(ValueError, match="causal"):
            OperatorConfig(Kind.HYENA_SE, 8, causal=False)

    def test_filter_init_is_delta_plus_noise(self):
        m = make(Kind.HYENA_SE, 64)
        f = m.filter_q
        assert (f[:, 0] - 1).abs().max() < 0.15 and f[:, 1:].abs().max() < 0.15
        assert 0.01 < f[:, 1:].std() < 0.03


class TestMLP:
    def test_zero_weights_give_zero(self):
        m = make(Kind.MLP)
        with torch.no_grad():
            for p in m.parameters():
                p.zero_()
        assert torch.equal(m(torch.randn(2, 3, 8)), torch.zeros(2, 3, 8))

    def test_identity_for_large_positive_inputs(self):
        m = set_identity(make(Kind.MLP, 4))
        x = torch.full((1, 2, 4), 20.0) + torch.rand(1, 2, 4)
        assert torch.allclose(m(x), x, atol=1e-5)

    def test_matches_two_matmul_oracle(self, f64):
        m = make(Kind.MLP, ratio=3)
        with torch.no_grad():
            m.b_1.normal_()
            m.b_2.normal_()
        x = torch.randn(2, 4, 8)
        h = x @ m.w_1 + m.b_1
        h = 0.5 * h * (1 + torch.special.erf(h / math.sqrt(2)))
        assert torch.allclose(m(x), h @ m.w_2 + m.b_2, atol=1e-6)
        assert m.w_1.shape == (8, 24)

    def test_bad_ratio_rejected(self):
        with pytest.raises(ValueError):
            OperatorConfig(Kind.MLP, 8, ratio=0)
        with pytest.raises(ValueError):
            OperatorConfig(Kind.MLP, 8, ratio=0.3)


class TestHyenaXMLP:
    def test_identity_composed_on_ones(self):
        m = set_identity(make(Kind.HYENA_X_MLP, 4, ratio=2))
        assert torch.equal(m(torch.ones(2, 3, 4)), torch.ones(2, 3, 4))

    def test_tokens_do_not_interact(self):
        m = make(Kind.HYENA_X_MLP, ratio=2)
        x = torch.randn(1, 5, 8)
        x2 = x.clone()
        x2[:, [0, 1, 3, 4]] = torch.randn(1, 4, 8)
        assert torch.equal(m(x)[:, 2], m(x2)[:, 2])

    def test_matches_token_loop_oracle(self, f64):
        m = make(Kind.HYENA_X_MLP, ratio=2, kernel_size=3)
        with torch.no_grad():
            for n in ("q", "k", "v"):
                getattr(m, f"bias_{n}").normal_()
        x = torch.randn(2, 4, 8)
        out = np.zeros((2, 4, 8))
        p = {k: v.detach().numpy() for k, v in m.named_parameters()}
        for b in range(2):
            for n in range(4):
                tok = x[b, n].numpy()
                streams = []
                for s in ("q", "k", "v"):
                    u = tok @ p[f"w_{s}"]
                    conv = np.convolve(u, p[f"filter_{s}"][0])[: len(u)] + p[f"bias_{s}"][0]
                    streams.append(conv)
                out[b, n] = (streams[0] * streams[1] * streams[2]) @ p["w_o"]
        assert np.allclose(m(x).detach().numpy(), out, atol=1e-6)


@pytest.mark.parametrize("kind", ALL_KINDS)
@pytest.mark.parametrize("shape", [(1, 1), (2, 5), (3, 16)])
def test_shape_contract(kind, shape):
    m = make(kind)
    x = torch.randn(*shape, 8)
    assert m(x).shape == x.shape


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_wrong_width_rejected(kind):
    with pytest.raises(ValueError, match=r"\[B, N, 8\]"):
        make(kind)(torch.randn(1, 3, 6))


@pytest.mark.parametrize("kind", [Kind.HYENA_SE, Kind.HYENA_X, Kind.HYENA_Y])
@settings(max_examples=15, deadline=None)
@given(length=st.integers(2, 10), data=st.data())
def test_hyena_is_causal(kind, length, data):
    m = make(kind, seed=1)
    s = data.draw(st.integers(0, length - 2))
    x = torch.randn(2, length, 8)
    x2 = x.clone()
    x2[:, s + 1:] = torch.randn(2, length - s - 1, 8)
    assert torch.equal(m(x)[:, : s + 1], m(x2)[:, : s + 1])


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_batch_permutation_equivariance(kind):
    m = make(kind)
    x = torch.randn(5, 4, 8)
    perm = torch.tensor([3, 0, 4, 1, 2])
    assert torch.allclose(m(x)[perm], m(x[perm]), atol=1e-6)


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_param_count_matches_analysis(kind):
    cfg = OperatorConfig(kind, 16, heads=4, ratio=3)
    assert param_count(build_operator(cfg)) == operator_params(cfg).total


@pytest.mark.parametrize("kind", ALL_KINDS)
@pytest.mark.parametrize("shape", [(1, 3, 4), (2, 5, 8), (2, 4, 12)])
def test_grad_check_every_kind(f64, kind, shape):
    b, n, d = shape
    m = build_operator(OperatorConfig(kind, d, heads=2, ratio=2, window=1, kernel_size=3, seed=n))
    m = m.double()
    x = torch.randn(shape, generator=torch.Generator().manual_seed(d), dtype=torch.float64)
    w = torch.randn(shape, generator=torch.Generator().manual_seed(d + 1), dtype=torch.float64)
    ok, err = T.grad_check(lambda v: (m(v) * w).sum(), x, max_coords=64)
    assert ok, err
    for name, p in m.named_parameters():
        ok, err = T.grad_check(lambda v: (torch.func.functional_call(m, {name: v}, (x,)) * w).sum(),
                               p.detach().clone(), max_coords=32)
        assert ok, (name, err)


def test_seeded_init_is_deterministic():
    a, b = make(Kind.HYENA_SE, seed=4), make(Kind.HYENA_SE, seed=4)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and torch.equal(pa, pb)
    assert not torch.equal(a.w_q, make(Kind.HYENA_SE, seed=5).w_q)


@pytest.mark.parametrize("bad", [dict(kind="MHA", dim=10, heads=4), dict(kind="SWA", dim=8, window=-1),
                                 dict(kind="HYENA_X", dim=8, kernel_size=0), dict(kind="NOPE", dim=8)])
def test_invalid_configs(bad):
    with pytest.raises(ValueError):
        OperatorConfig(**bad)


def test_config_round_trip_and_unknown_keys():
    cfg = OperatorConfig(Kind.SWA, 8, window=2, seed=3)
    assert OperatorConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError, match="unknown"):
        OperatorConfig.from_dict({**cfg.to_dict(), "bogus": 1})


def test_classes_dispatch():
    assert isinstance(make(Kind.SWA), Attention)
    assert isinstance(make(Kind.HYENA_Y), Hyena)
    assert isinstance(make(Kind.MLP), MLP)
    assert isinstance(make(Kind.HYENA_X_MLP), HyenaXMLP)
