"""Joint RGB/event ViT backbone with per-modality early token elimination.

The four regions are concatenated in the fixed order
``[rgb template, rgb search, event template, event search]``. Token
positions are tracked by their *global* index in that concatenation, so
eliminated tokens can be re-inserted as zeros downstream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn

from .errors import ConfigError
from .layers import Block, init_weights

RGB_TEMPLATE, RGB_SEARCH, EV_TEMPLATE, EV_SEARCH = range(4)
REGION_NAMES = ("rgb-template", "rgb-search", "ev-template", "ev-search")


@dataclass
class TokenSet:
    """Live tokens of one or more regions.

    ``tokens`` is ``(B, n, d)``; ``region_tags`` is ``(n,)`` and shared by the
    whole batch because every sample keeps the same number of tokens per
    region; ``index`` is ``(B, n)`` global positions within a layout of
    ``n_total`` tokens.
    """

    tokens: torch.Tensor
    region_tags: torch.Tensor
    index: torch.Tensor
    n_total: int
    grid_shapes: dict

    def __len__(self):
        return self.tokens.shape[1]

    @property
    def live_mask(self) -> torch.Tensor:
        B = self.tokens.shape[0]
        mask = torch.zeros(B, self.n_total, dtype=torch.bool, device=self.tokens.device)
        mask.scatter_(1, self.index, True)
        return mask

    def dense(self) -> torch.Tensor:
        """``(B, n_total, d)`` with eliminated positions filled with zeros."""
        B, _, d = self.tokens.shape
        out = self.tokens.new_zeros(B, self.n_total, d)
        return out.scatter(1, self.index.unsqueeze(-1).expand(-1, -1, d), self.tokens)

    def select(self, *tags: int) -> "TokenSet":
        keep = torch.zeros_like(self.region_tags, dtype=torch.bool)
        for t in tags:
            keep |= self.region_tags == t
        pos = torch.nonzero(keep).squeeze(1)
        return TokenSet(self.tokens[:, pos], self.region_tags[pos], self.index[:, pos],
                        self.n_total, self.grid_shapes)

    def count(self, tag: int) -> int:
        return int((self.region_tags == tag).sum())

    @staticmethod
    def cat(sets: Sequence["TokenSet"]) -> "TokenSet":
        """Concatenate region token sets, offsetting indices into a shared layout."""
        offset, idx = 0, []
        for s in sets:
            idx.append(s.index + offset)
            offset += s.n_total
        grids = {}
        for s in sets:
            grids.update(s.grid_shapes)
        if len({s.tokens.shape[-1] for s in sets}) != 1:
            raise ConfigError("token sets have different dimensions")
        return TokenSet(
            torch.cat([s.tokens for s in sets], 1),
            torch.cat([s.region_tags for s in sets]),
            torch.cat(idx, 1),
            offset,
            grids,
        )


def eliminate_tokens(attn: torch.Tensor, token_set: TokenSet, keep_ratio: float):
    """Drop low-ranked search tokens, independently for each modality.

    A modality's search tokens are ranked by the mean attention they receive
    from that modality's template tokens (averaged over heads); the top
    ``ceil(keep_ratio * count)`` survive, ties going to the lower index.
    Template tokens are never dropped and surviving tokens keep their order.

    Returns ``(token_set, keep)`` where ``keep`` is the ``(B, n_kept)`` index
    into the input sequence.
    """
    if not 0 < keep_ratio <= 1:
        raise ValueError(f"keep_ratio must lie in (0, 1], got {keep_ratio}")
    B, n = token_set.tokens.shape[:2]
    tags = token_set.region_tags
    device = tags.device
    if keep_ratio == 1:
        keep = torch.arange(n, device=device).expand(B, n)
        return token_set, keep
    a = attn.mean(dim=1)  # (B, N, N)
    pieces = []
    for tmpl, srch in ((RGB_TEMPLATE, RGB_SEARCH), (EV_TEMPLATE, EV_SEARCH)):
        t_pos = torch.nonzero(tags == tmpl).squeeze(1)
        s_pos = torch.nonzero(tags == srch).squeeze(1)
        pieces.append(t_pos.expand(B, -1))
        if len(s_pos) == 0:
            continue
        if len(t_pos):
            score = a[:, t_pos][:, :, s_pos].mean(dim=1)  # (B, n_search)
        else:
            score = torch.zeros(B, len(s_pos), dtype=a.dtype, device=device)
        k = math.ceil(keep_ratio * len(s_pos))
        order = torch.argsort(-score, dim=1, stable=True)[:, :k]
        order = torch.sort(order, dim=1).values
        pieces.append(s_pos[order])
    # tags outside the four known regions pass through untouched
    other = torch.nonzero(tags > EV_SEARCH).squeeze(1)
    if len(other):
        pieces.append(other.expand(B, -1))
    keep = torch.sort(torch.cat(pieces, dim=1), dim=1).values
    d = token_set.tokens.shape[-1]
    tokens = torch.gather(token_set.tokens, 1, keep.unsqueeze(-1).expand(-1, -1, d))
    index = torch.gather(token_set.index, 1, keep)
    # keep is sorted and per-sample counts per region are equal, so tags line up
    new_tags = tags[keep[0]]
    return TokenSet(tokens, new_tags, index, token_set.n_total, token_set.grid_shapes), keep


@dataclass
class EliminationTrace:
    block: int
    kept_index: torch.Tensor  # global positions of survivors, (B, n)
    counts: dict


class JointBackbone(nn.Module):
    """Patch embedding for both modalities plus one transformer over all tokens."""

    def __init__(self, dim=192, depth=6, heads=3, patch_size=16, template_size=96, search_size=192,
                 elim_blocks=(2, 4), keep_ratio=0.7, mlp_ratio=4.0, in_chans=3):
        super().__init__()
        for side in (template_size, search_size):
            if side % patch_size:
                raise ConfigError(f"patch side {side} not divisible by patch size {patch_size}")
        self.dim, self.depth, self.patch_size = dim, depth, patch_size
        self.elim_blocks = tuple(elim_blocks)
        self.keep_ratio = keep_ratio
        self.template_grid = template_size // patch_size
        self.search_grid = search_size // patch_size
        self.embed = nn.ModuleDict({
            "rgb": nn.Conv2d(in_chans, dim, patch_size, patch_size),
            "event": nn.Conv2d(in_chans, dim, patch_size, patch_size),
        })
        nt, ns = self.template_grid ** 2, self.search_grid ** 2
        self.pos = nn.ParameterList([nn.Parameter(torch.zeros(1, n, dim)) for n in (nt, ns, nt, ns)])
        self.blocks = nn.ModuleList([Block(dim, heads, mlp_ratio) for _ in range(depth)])
        self.norm = nn.LayerNorm(dim)
        init_weights(self)
        for p in self.pos:
            nn.init.trunc_normal_(p, std=0.02, a=-0.04, b=0.04)

    def patch_embed(self, patch: torch.Tensor, modality: str, region: str) -> TokenSet:
        """Embed a ``(B, 3, S, S)`` template or search patch into a region-tagged TokenSet."""
        if patch.shape[-1] % self.patch_size or patch.shape[-2] % self.patch_size:
            raise ConfigError(f"patch of {tuple(patch.shape[-2:])} not divisible by {self.patch_size}")
        tag = {("rgb", "template"): RGB_TEMPLATE, ("rgb", "search"): RGB_SEARCH,
               ("event", "template"): EV_TEMPLATE, ("event", "search"): EV_SEARCH}[(modality, region)]
        x = self.embed[modality](patch)
        gh, gw = x.shape[-2:]
        x = x.flatten(2).transpose(1, 2)
        pos = self.pos[tag]
        if pos.shape[1] != gh * gw:
            raise ConfigError(f"{REGION_NAMES[tag]} grid {gh}x{gw} does not match configured size")
        x = x + pos
        B, n = x.shape[:2]
        idx = torch.arange(n, device=x.device).expand(B, n)
        tags = torch.full((n,), tag, dtype=torch.long, device=x.device)
        return TokenSet(x, tags, idx, n, {tag: (gh, gw)})

    def joint_encode(self, tv: TokenSet, sv: TokenSet, te: TokenSet, se: TokenSet,
                     keep_ratio: Optional[float] = None, return_attn: bool = False):
        """Run all blocks over the concatenation; returns ``(TokenSet, trace[, attns])``."""
        keep_ratio = self.keep_ratio if keep_ratio is None else keep_ratio
        ts = TokenSet.cat([tv, sv, te, se])
        trace, attns = [], []
        x = ts.tokens
        for i, blk in enumerate(self.blocks):
            x, attn = blk(x)
            if return_attn:
                attns.append(attn)
            if i in self.elim_blocks and keep_ratio < 1:
                ts = TokenSet(x, ts.region_tags, ts.index, ts.n_total, ts.grid_shapes)
                ts, _ = eliminate_tokens(attn, ts, keep_ratio)
                x = ts.tokens
                trace.append(EliminationTrace(i, ts.index, {
                    REGION_NAMES[t]: ts.count(t) for t in range(4)}))
        if len(self.blocks):
            x = self.norm(x)
        out = TokenSet(x, ts.region_tags, ts.index, ts.n_total, ts.grid_shapes)
        if return_attn:
            return out, trace, attns
        return out, trace

    def forward(self, rgb_template, rgb_search, ev_template, ev_search, **kw):
        return self.joint_encode(
            self.patch_embed(rgb_template, "rgb", "template"),
            self.patch_embed(rgb_search, "rgb", "search"),
            self.patch_embed(ev_template, "event", "template"),
            self.patch_embed(ev_search, "event", "search"),
            **kw,
        )
