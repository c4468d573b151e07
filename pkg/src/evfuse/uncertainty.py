"""Gaussian uncertainty perception, reparameterized sampling, KL regularizer and
uncertainty-aware fusion.

Per-token features are modelled as ``N(mu, diag(sigma^2))`` with
``sigma = exp(log_var / 2)``; ``log_var`` is what the variance head predicts.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

from .errors import ConfigError, NumericError
from .layers import Mlp, MultiHeadAttention, init_weights


@dataclass
class GaussianTokens:
    mu: torch.Tensor
    log_var: torch.Tensor
    region_tags: Optional[torch.Tensor] = None

    def __post_init__(self):
        if self.mu.shape != self.log_var.shape:
            raise ConfigError(f"mu {tuple(self.mu.shape)} and log_var {tuple(self.log_var.shape)} differ")

    @property
    def sigma(self) -> torch.Tensor:
        return torch.exp(0.5 * self.log_var)


class CrossAttention(nn.Module):
    """Multi-head attention with optional positional encodings added to the inputs."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.attn = MultiHeadAttention(dim, heads)

    def forward(self, query, kv, query_pos=None, kv_pos=None):
        if query_pos is not None:
            query = query + query_pos
        if kv_pos is not None:
            kv = kv + kv_pos
        return self.attn(query, kv)


def cross_attention(module: CrossAttention, query_tokens, kv_tokens, query_pos=None, kv_pos=None):
    """Output (length of ``query_tokens``) and attention weights of ``module``."""
    return module(query_tokens, kv_tokens, query_pos, kv_pos)


class UncertaintyPerception(nn.Module):
    """Attention followed by separate two-layer mean and log-variance heads.

    Used as a cross-modal module (queries from RGB, keys/values from events)
    or, with ``kv = query``, as the RGB-only self-attention module.
    """

    def __init__(self, dim: int, heads: int, hidden: Optional[int] = None, logvar_clamp: float = 10.0,
                 logvar_init: float = -8.0):
        super().__init__()
        hidden = hidden or 2 * dim
        self.attention = CrossAttention(dim, heads)
        self.mu_head = Mlp(dim, hidden)
        self.var_head = Mlp(dim, hidden)
        self.logvar_clamp = logvar_clamp
        # no residual path here, so use fan-scaled weights to keep mu at the scale of the input tokens
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.xavier_uniform_(m.weight)
                nn.init.zeros_(m.bias)
        # start with small sigma so early samples carry the signal rather than unit noise
        nn.init.zeros_(self.var_head[-1].weight)
        nn.init.constant_(self.var_head[-1].bias, logvar_init)

    def forward(self, query, kv=None, query_pos=None, kv_pos=None, return_attn=False):
        if kv is None:
            kv, kv_pos = query, query_pos
        if kv.shape[1] == 0:
            raise ValueError("empty key/value token set: every event token was eliminated")
        a, attn = self.attention(query, kv, query_pos, kv_pos)
        mu = self.mu_head(a)
        log_var = self.var_head(a).clamp(-self.logvar_clamp, self.logvar_clamp)
        g = GaussianTokens(mu, log_var)
        return (g, attn) if return_attn else g


def cmdup(module: UncertaintyPerception, f_v, f_e, pos_v=None, pos_e=None) -> GaussianTokens:
    """Cross-modal uncertainty: RGB tokens query event tokens."""
    return module(f_v, f_e, pos_v, pos_e)


def mdup(module: UncertaintyPerception, f_v, pos_v=None) -> GaussianTokens:
    """RGB-only uncertainty: self-attention over RGB tokens."""
    return module(f_v, None, pos_v)


def reparameterize(g: GaussianTokens, generator: Optional[torch.Generator] = None,
                   training: bool = True, eps: Optional[torch.Tensor] = None) -> torch.Tensor:
    """``mu + eps * sigma`` with fresh standard-normal ``eps`` when training, ``mu`` otherwise.

    ``eps`` is drawn outside the autograd graph, so gradients reach ``mu`` and
    ``log_var`` only.
    """
    if not training:
        return g.mu
    if eps is None:
        eps = torch.randn(g.mu.shape, generator=generator, dtype=g.mu.dtype, device=g.mu.device)
    return g.mu + eps.detach() * g.sigma


def kl_regularizer(g: GaussianTokens) -> torch.Tensor:
    """Mean over tokens and dimensions of ``-1/2 (1 + log s^2 - mu^2 - s^2)``."""
    if not (torch.isfinite(g.mu).all() and torch.isfinite(g.log_var).all()):
        raise NumericError("non-finite mean or log-variance passed to the KL regularizer")
    kl = -0.5 * (1 + g.log_var - g.mu.pow(2) - g.log_var.exp())
    return kl.mean()


class UncertaintyFusion(nn.Module):
    """Fuse RGB samples (queries) with cross-modal samples (keys/values).

    ``out = LayerNorm(y + MLP(y))`` with ``y = s_v + CrossAttn(s_v, s_m)``.
    """

    def __init__(self, dim: int, heads: int, hidden: Optional[int] = None):
        super().__init__()
        self.attention = CrossAttention(dim, heads)
        self.mlp = Mlp(dim, hidden or 2 * dim)
        self.norm = nn.LayerNorm(dim)
        init_weights(self)

    def forward(self, s_v, s_m, pos_v=None, pos_m=None, return_attn=False):
        if s_v.shape[-1] != s_m.shape[-1] or s_v.shape[0] != s_m.shape[0]:
            raise ConfigError(f"cannot fuse {tuple(s_v.shape)} with {tuple(s_m.shape)}")
        a, attn = self.attention(s_v, s_m, pos_v, pos_m)
        y = s_v + a
        out = self.norm(y + self.mlp(y))
        return (out, attn) if return_attn else out


def muf(module: UncertaintyFusion, s_v, s_m, pos_v=None, pos_m=None) -> torch.Tensor:
    return module(s_v, s_m, pos_v, pos_m)
