import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from evfuse.errors import ConfigError, NumericError
from evfuse.uncertainty import (
    CrossAttention,
    GaussianTokens,
    UncertaintyFusion,
    UncertaintyPerception,
    cmdup,
    cross_attention,
    kl_regularizer,
    mdup,
    muf,
    reparameterize,
)


def np_linear(lin, x):
    return x @ lin.weight.detach().double().numpy().T + lin.bias.detach().double().numpy()


def np_softmax(z):
    z = z - z.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


def np_mha(mha, q_in, kv_in):
    """Independent multi-head attention for a single sample."""
    H, D = mha.heads, mha.head_dim
    q, k, v = np_linear(mha.q, q_in), np_linear(mha.k, kv_in), np_linear(mha.v, kv_in)
    heads = []
    for h in range(H):
        sl = slice(h * D, (h + 1) * D)
        w = np_softmax(q[:, sl] @ k[:, sl].T / np.sqrt(D))
        heads.append(w @ v[:, sl])
    return np_linear(mha.proj, np.concatenate(heads, 1))


def np_mlp(mlp, x):
    h = np_linear(mlp[0], x)
    h = 0.5 * h * (1 + np.vectorize(__import__("math").erf)(h / np.sqrt(2)))
    return np_linear(mlp[2], h)


def np_layernorm(ln, x):
    m = x.mean(-1, keepdims=True)
    v = x.var(-1, keepdims=True)
    return (x - m) / np.sqrt(v + ln.eps) * ln.weight.detach().double().numpy() + ln.bias.detach().double().numpy()


def randomize(module, seed=0):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * 0.5)
    return module


class TestCrossAttention:
    def test_identity_projection_oracle(self):
        torch.manual_seed(0)
        m = CrossAttention(4, 1).double()
        with torch.no_grad():
            for lin in (m.attn.q, m.attn.k, m.attn.v, m.attn.proj):
                lin.weight.copy_(torch.eye(4))
                lin.bias.zero_()
        q = np.random.default_rng(0).normal(size=(5, 4))
        out, attn = cross_attention(m, torch.tensor(q)[None], torch.tensor(q)[None])
        expect = np_softmax(q @ q.T / 2.0) @ q
        assert np.allclose(out[0].detach().numpy(), expect, atol=1e-12)

    def test_single_kv_token(self):
        m = randomize(CrossAttention(4, 2).double())
        q = torch.randn(1, 7, 4, dtype=torch.float64)
        kv = torch.randn(1, 1, 4, dtype=torch.float64)
        out, attn = cross_attention(m, q, kv)
        assert torch.equal(attn, torch.ones_like(attn))
        value = m.attn.proj(m.attn.v(kv))
        assert torch.allclose(out, value.expand_as(out), atol=1e-12)

    def test_rows_and_length(self):
        m = CrossAttention(8, 2)
        out, attn = m(torch.randn(2, 5, 8), torch.randn(2, 11, 8))
        assert out.shape == (2, 5, 8)
        assert ((attn.sum(-1) - 1).abs() <= 1e-6).all()

    def test_multihead_oracle_with_positions(self):
        m = randomize(CrossAttention(4, 2).double(), seed=1)
        rng = np.random.default_rng(1)
        q, kv, qp, kp = (rng.normal(size=s) for s in ((3, 4), (6, 4), (3, 4), (6, 4)))
        out, _ = m(*(torch.tensor(a)[None] for a in (q, kv, qp, kp)))
        assert np.allclose(out[0].detach().numpy(), np_mha(m.attn, q + qp, kv + kp), atol=1e-12)

    def test_head_mismatch(self):
        with pytest.raises(ConfigError):
            CrossAttention(6, 4)
        with pytest.raises(ConfigError):
            CrossAttention(4, 1)(torch.zeros(1, 2, 4), torch.zeros(1, 2, 5))


class TestPerception:
    def test_query_length_contract(self):
        m = UncertaintyPerception(16, 2)
        g = cmdup(m, torch.randn(1, 180, 16), torch.randn(1, 180, 16))
        assert g.mu.shape == (1, 180, 16) == g.log_var.shape
        assert cmdup(m, torch.randn(1, 9, 16), torch.randn(1, 3, 16)).mu.shape == (1, 9, 16)

    def test_zero_variance_head(self):
        m = UncertaintyPerception(8, 2)
        with torch.no_grad():
            for p in m.var_head[2].parameters():
                p.zero_()
            m.var_head[2].bias.fill_(-1.5)
        g = cmdup(m, torch.randn(2, 5, 8), torch.randn(2, 4, 8))
        assert torch.equal(g.log_var, torch.full_like(g.log_var, -1.5))

    def test_logvar_clamped(self):
        m = UncertaintyPerception(4, 1)
        with torch.no_grad():
            m.var_head[2].bias.fill_(50.0)
        assert mdup(m, torch.randn(1, 3, 4)).log_var.max() == 10.0

    def test_d4_oracle(self):
        m = randomize(UncertaintyPerception(4, 2).double(), seed=2)
        rng = np.random.default_rng(2)
        fv, fe = rng.normal(size=(5, 4)), rng.normal(size=(3, 4))
        g = cmdup(m, torch.tensor(fv)[None], torch.tensor(fe)[None])
        a = np_mha(m.attention.attn, fv, fe)
        assert np.allclose(g.mu[0].detach().numpy(), np_mlp(m.mu_head, a), atol=1e-10)
        lv = np.clip(np_mlp(m.var_head, a), -10, 10)
        assert np.allclose(g.log_var[0].detach().numpy(), lv, atol=1e-10)

    def test_mdup_equals_cmdup_on_same_input(self):
        m = randomize(UncertaintyPerception(8, 2), seed=3)
        f = torch.randn(2, 6, 8)
        assert torch.equal(mdup(m, f).mu, cmdup(m, f, f).mu)

    def test_self_attention_rows(self):
        m = UncertaintyPerception(8, 2)
        _, attn = m(torch.randn(2, 6, 8), return_attn=True)
        assert attn.shape == (2, 2, 6, 6) and ((attn.sum(-1) - 1).abs() <= 1e-6).all()

    def test_empty_event_tokens(self):
        with pytest.raises(ValueError):
            cmdup(UncertaintyPerception(4, 1), torch.randn(1, 3, 4), torch.zeros(1, 0, 4))

    def test_gaussian_shape_check(self):
        with pytest.raises(ConfigError):
            GaussianTokens(torch.zeros(2, 3), torch.zeros(3, 2))


class TestReparameterize:
    def test_eval_returns_mu(self):
        g = GaussianTokens(torch.randn(3, 4), torch.randn(3, 4))
        assert reparameterize(g, training=False) is g.mu

    def test_zero_eps(self):
        g = GaussianTokens(torch.randn(3, 4), torch.randn(3, 4))
        assert torch.equal(reparameterize(g, eps=torch.zeros(3, 4)), g.mu)

    def test_tiny_variance(self):
        g = GaussianTokens(torch.ones(10), torch.full((10,), -10.0))
        s = reparameterize(g, torch.Generator().manual_seed(0))
        assert torch.allclose(s, g.mu, atol=0.05)

    def test_monte_carlo_moments(self):
        n = 100_000
        g = GaussianTokens(torch.ones(n, dtype=torch.float64), torch.full((n,), np.log(4.0), dtype=torch.float64))
        s = reparameterize(g, torch.Generator().manual_seed(11)).numpy()
        assert abs(s.mean() - 1) < 0.02
        assert abs(s.var() - 4) < 0.15

    def test_fresh_noise_per_call(self):
        g = GaussianTokens(torch.zeros(8), torch.zeros(8))
        gen = torch.Generator().manual_seed(0)
        assert not torch.equal(reparameterize(g, gen), reparameterize(g, gen))

    def test_gradient_reaches_mu_and_logvar_only(self):
        mu = torch.zeros(4, requires_grad=True)
        lv = torch.zeros(4, requires_grad=True)
        eps = torch.tensor([1.0, -2.0, 0.5, 0.0], requires_grad=True)
        reparameterize(GaussianTokens(mu, lv), eps=eps).sum().backward()
        assert torch.equal(mu.grad, torch.ones(4))
        assert torch.allclose(lv.grad, 0.5 * eps.detach())
        assert eps.grad is None


class TestKL:
    def test_standard_normal_zero(self):
        assert kl_regularizer(GaussianTokens(torch.zeros(5, 3), torch.zeros(5, 3))).item() == 0.0

    def test_unit_mean(self):
        assert kl_regularizer(GaussianTokens(torch.ones(2, 4), torch.zeros(2, 4))).item() == 0.5

    def test_quadrature(self):
        rng = np.random.default_rng(0)
        mus, sig = rng.uniform(-2, 2, 100), rng.uniform(0.3, 2.5, 100)
        g = GaussianTokens(torch.tensor(mus), torch.tensor(np.log(sig ** 2)))
        closed = (-0.5 * (1 + g.log_var - g.mu ** 2 - g.log_var.exp())).numpy()
        for m, s, c in zip(mus, sig, closed):
            p = stats.norm(m, s)
            f = lambda x: p.pdf(x) * (p.logpdf(x) - stats.norm.logpdf(x))
            q, _ = integrate.quad(f, m - 12 * s, m + 12 * s, epsabs=1e-12, epsrel=1e-12, limit=200)
            assert abs(q - c) < 1e-6
        assert kl_regularizer(g).item() == pytest.approx(closed.mean(), abs=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-5, 5), st.floats(-9, 9))
    def test_nonnegative(self, m, lv):
        k = kl_regularizer(GaussianTokens(torch.tensor([m], dtype=torch.float64),
                                          torch.tensor([lv], dtype=torch.float64))).item()
        assert k >= 0
        if k <= 1e-9:
            assert abs(m) < 1e-4 and abs(lv) < 1e-4

    def test_nonfinite(self):
        with pytest.raises(NumericError):
            kl_regularizer(GaussianTokens(torch.tensor([float("nan")]), torch.zeros(1)))
        with pytest.raises(NumericError):
            kl_regularizer(GaussianTokens(torch.zeros(1), torch.tensor([float("inf")])))


class TestFusion:
    def test_lengths(self):
        m = UncertaintyFusion(8, 2)
        assert muf(m, torch.randn(2, 7, 8), torch.randn(2, 3, 8)).shape == (2, 7, 8)

    def test_single_token_memory(self):
        m = UncertaintyFusion(8, 2)
        _, attn = m(torch.randn(1, 4, 8), torch.randn(1, 1, 8), return_attn=True)
        assert torch.equal(attn, torch.ones_like(attn))

    def test_d4_oracle(self):
        m = randomize(UncertaintyFusion(4, 2).double(), seed=4)
        rng = np.random.default_rng(4)
        sv, sm = rng.normal(size=(5, 4)), rng.normal(size=(6, 4))
        out = muf(m, torch.tensor(sv)[None], torch.tensor(sm)[None])[0].detach().numpy()
        y = sv + np_mha(m.attention.attn, sv, sm)
        assert np.allclose(out, np_layernorm(m.norm, y + np_mlp(m.mlp, y)), atol=1e-10)

    def test_shape_mismatch(self):
        with pytest.raises(ConfigError):
            muf(UncertaintyFusion(4, 1), torch.randn(1, 3, 4), torch.randn(1, 3, 8))

    def test_gradient_check(self):
        torch.manual_seed(5)
        per = randomize(UncertaintyPerception(4, 2).double(), seed=5)
        fus = randomize(UncertaintyFusion(4, 2).double(), seed=6)
        fv = torch.randn(1, 5, 4, dtype=torch.float64)
        fe = torch.randn(1, 3, 4, dtype=torch.float64)
        eps = torch.randn(1, 5, 4, dtype=torch.float64)

        def objective():
            g = cmdup(per, fv, fe)
            s_m = reparameterize(g, eps=eps)
            return kl_regularizer(g) + muf(fus, fv, s_m).sum()

        params = list(per.parameters()) + list(fus.parameters())
        grads = torch.autograd.grad(objective(), params)
        rng = np.random.default_rng(0)
        with torch.no_grad():
            for p, gr in zip(params, grads):
                flat = p.view(-1)
                for j in rng.choice(flat.numel(), size=min(3, flat.numel()), replace=False):
                    old = flat[j].item()
                    flat[j] = old + 1e-6
                    up = objective().item()
                    flat[j] = old - 1e-6
                    down = objective().item()
                    flat[j] = old
                    fd = (up - down) / 2e-6
                    an = gr.view(-1)[j].item()
                    assert abs(fd - an) <= 1e-3 * max(abs(fd), abs(an)) + 1e-8
