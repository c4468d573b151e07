"""Attention and MLP building blocks shared by the backbone and fusion modules."""

import math

import torch
import torch.nn as nn

from .errors import ConfigError


def init_weights(module: nn.Module, std: float = 0.02):
    """Truncated-normal weights, zero biases, unit LayerNorm."""
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv2d)):
            nn.init.trunc_normal_(m.weight, std=std, a=-2 * std, b=2 * std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class MultiHeadAttention(nn.Module):
    """``Cat(head_1..head_N) W_o`` with ``head_j = Softmax(Q Wq_j (K Wk_j)^T / sqrt(D)) V Wv_j``.

    Works for self-attention (``kv is None``) and cross-attention alike, and
    returns the ``(B, heads, Nq, Nk)`` attention weights next to the output.
    """

    def __init__(self, dim: int, heads: int, bias: bool = True):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"dim {dim} not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.head_dim = dim // heads
        self.q = nn.Linear(dim, dim, bias=bias)
        self.k = nn.Linear(dim, dim, bias=bias)
        self.v = nn.Linear(dim, dim, bias=bias)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, kv=None):
        kv = x if kv is None else kv
        if x.shape[-1] != self.dim or kv.shape[-1] != self.dim:
            raise ConfigError(f"expected token dim {self.dim}, got {x.shape[-1]} and {kv.shape[-1]}")
        B, Nq, C = x.shape
        Nk = kv.shape[1]
        q = self.q(x).reshape(B, Nq, self.heads, self.head_dim).transpose(1, 2)
        k = self.k(kv).reshape(B, Nk, self.heads, self.head_dim).transpose(1, 2)
        v = self.v(kv).reshape(B, Nk, self.heads, self.head_dim).transpose(1, 2)
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, Nq, C)
        return self.proj(out), attn


class Mlp(nn.Sequential):
    def __init__(self, dim: int, hidden: int, out_dim: int = None):
        super().__init__(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, out_dim or dim))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x):
        a, attn = self.attn(self.norm1(x))
        x = x + a
        x = x + self.mlp(self.norm2(x))
        return x, attn


def softmax_rows_ok(attn: torch.Tensor, tol: float) -> bool:
    return bool(torch.all((attn.sum(-1) - 1).abs() <= tol))
