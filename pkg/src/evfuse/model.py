"""The full tracking network and the 1x1-conv concatenation baseline."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .backbone import EV_SEARCH, EV_TEMPLATE, RGB_SEARCH, RGB_TEMPLATE, JointBackbone, TokenSet
from .config import RunConfig
from .head import CenterHead, ScoreMaps, tokens_to_grid
from .uncertainty import GaussianTokens, UncertaintyFusion, UncertaintyPerception, reparameterize

PIXEL_MEAN, PIXEL_STD = 0.5, 0.25


def to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """``(H, W, 3)`` image(s) in [0, 1] -> normalised ``(B, 3, H, W)`` tensor."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    t = torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))
    return ((t - PIXEL_MEAN) / PIXEL_STD).to(dtype)


@dataclass
class NetOutput:
    maps: dict  # branch name -> ScoreMaps; "fusion" always present
    gaussians: dict = field(default_factory=dict)  # "rgb", "cross" -> GaussianTokens
    tokens: Optional[TokenSet] = None
    trace: list = field(default_factory=list)
    attn: dict = field(default_factory=dict)


class FusionTracker(nn.Module):
    """Backbone -> uncertainty perception -> fusion -> shared head on three branches.

    ``variant="baseline"`` skips the uncertainty modules and fuses the RGB and
    event search grids with a 1x1 convolution over their channel concatenation.
    """

    def __init__(self, cfg: Optional[RunConfig] = None, seed: int = 0):
        super().__init__()
        cfg = cfg if cfg is not None else RunConfig()
        self.cfg = cfg
        self.variant = cfg["model.variant"]
        self.patch_size = cfg["backbone.patch_size"]
        dim = cfg["backbone.dim"]
        self.backbone = JointBackbone(
            dim=dim, depth=cfg["backbone.depth"], heads=cfg["backbone.heads"],
            patch_size=self.patch_size, template_size=cfg["data.template_size"],
            search_size=cfg["data.search_size"], elim_blocks=cfg["backbone.elim_blocks"],
            keep_ratio=cfg["backbone.keep_ratio"], mlp_ratio=cfg["backbone.mlp_ratio"],
        )
        self.grid = self.backbone.search_grid
        nt, ns = self.backbone.template_grid ** 2, self.grid ** 2
        self.region_offset = {RGB_TEMPLATE: 0, RGB_SEARCH: nt, EV_TEMPLATE: nt + ns, EV_SEARCH: 2 * nt + ns}
        if self.variant == "full":
            hidden = int(dim * cfg["uncert.hidden_ratio"])
            clamp = cfg["uncert.logvar_clamp"]
            lv0 = cfg["uncert.logvar_init"]
            self.mdup = UncertaintyPerception(dim, cfg["uncert.heads"], hidden, clamp, lv0)
            self.cmdup = UncertaintyPerception(dim, cfg["uncert.heads"], hidden, clamp, lv0)
            self.muf = UncertaintyFusion(dim, cfg["uncert.heads"], hidden)
            self.token_pos = nn.Parameter(torch.zeros(1, 2 * (nt + ns), dim))
            nn.init.trunc_normal_(self.token_pos, std=0.02, a=-0.04, b=0.04)
        else:
            self.fuse = nn.Conv2d(2 * dim, dim, 1)
            nn.init.trunc_normal_(self.fuse.weight, std=0.02, a=-0.04, b=0.04)
            nn.init.zeros_(self.fuse.bias)
        self.head = CenterHead(dim, cfg["head.channels"])
        self.sample_at_eval = cfg["uncert.sample_at_eval"]
        self.noise = torch.Generator().manual_seed(seed)

    def backbone_parameters(self):
        return list(self.backbone.parameters())

    def other_parameters(self):
        ids = {id(p) for p in self.backbone.parameters()}
        return [p for p in self.parameters() if id(p) not in ids]

    def embed_templates(self, rgb_template, ev_template):
        return (self.backbone.patch_embed(rgb_template, "rgb", "template"),
                self.backbone.patch_embed(ev_template, "event", "template"))

    def _search_grid(self, ts: TokenSet, values: torch.Tensor, tag: int) -> torch.Tensor:
        sel = ts.region_tags == tag
        idx = ts.index[:, sel] - self.region_offset[tag]
        return tokens_to_grid(values[:, sel], idx, self.grid)

    def _pos(self, ts: TokenSet) -> torch.Tensor:
        d = self.token_pos.shape[-1]
        return torch.gather(self.token_pos.expand(ts.tokens.shape[0], -1, -1), 1,
                            ts.index.unsqueeze(-1).expand(-1, -1, d))

    def forward(self, rgb_template, rgb_search, ev_template, ev_search, templates=None,
                keep_ratio=None, return_attn=False) -> NetOutput:
        if templates is None:
            templates = self.embed_templates(rgb_template, ev_template)
        tv, te = templates
        sv = self.backbone.patch_embed(rgb_search, "rgb", "search")
        se = self.backbone.patch_embed(ev_search, "event", "search")
        enc = self.backbone.joint_encode(tv, sv, te, se, keep_ratio=keep_ratio, return_attn=return_attn)
        ts, trace = enc[0], enc[1]
        out = NetOutput({}, tokens=ts, trace=trace)
        if return_attn:
            out.attn["backbone"] = enc[2]

        if self.variant == "baseline":
            g_v = self._search_grid(ts, ts.tokens, RGB_SEARCH)
            g_e = self._search_grid(ts, ts.tokens, EV_SEARCH)
            out.maps["fusion"] = self.head(self.fuse(torch.cat([g_v, g_e], 1)))
            return out

        f_v = ts.select(RGB_TEMPLATE, RGB_SEARCH)
        f_e = ts.select(EV_TEMPLATE, EV_SEARCH)
        pos_v, pos_e = self._pos(f_v), self._pos(f_e)
        g_rgb, a_rgb = self.mdup(f_v.tokens, None, pos_v, return_attn=True)
        g_cm, a_cm = self.cmdup(f_v.tokens, f_e.tokens, pos_v, pos_e, return_attn=True)
        sampling = self.training or self.sample_at_eval
        s_v = reparameterize(g_rgb, self.noise, sampling)
        s_m = reparameterize(g_cm, self.noise, sampling)
        fused, a_f = self.muf(s_v, s_m, pos_v, pos_v, return_attn=True)
        if return_attn:
            out.attn.update(mdup=a_rgb, cmdup=a_cm, muf=a_f)
        out.gaussians = {"rgb": GaussianTokens(g_rgb.mu, g_rgb.log_var, f_v.region_tags),
                         "cross": GaussianTokens(g_cm.mu, g_cm.log_var, f_v.region_tags)}
        for name, feats in (("fusion", fused), ("cross", s_m), ("rgb", s_v)):
            out.maps[name] = self.head(self._search_grid(f_v, feats, RGB_SEARCH))
        return out


def build_model(cfg: Optional[RunConfig] = None, seed: Optional[int] = None) -> FusionTracker:
    cfg = cfg if cfg is not None else RunConfig()
    seed = cfg["train.seed"] if seed is None else seed
    torch.manual_seed(seed)
    return FusionTracker(cfg, seed)


__all__ = ["FusionTracker", "NetOutput", "ScoreMaps", "build_model", "to_tensor"]
