"""Two-expert transformer over mixed sequences.

VLM-expert weights process every prefix and target token; action-expert
weights process only the noisy action tokens. The two interact solely through
one shared softmax per head over concatenated keys and values.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig
from .sequence import Batch

EPS = 1e-6


def rms_normalize(h: torch.Tensor) -> torch.Tensor:
    return h * torch.rsqrt(h.pow(2).mean(-1, keepdim=True) + EPS)


def sinusoidal(tau: torch.Tensor, width: int, min_period: float, max_period: float) -> torch.Tensor:
    """phi(tau): sines then cosines over a geometric ladder of periods."""
    half = width // 2
    frac = torch.linspace(0.0, 1.0, half, dtype=tau.dtype, device=tau.device)
    period = min_period * (max_period / min_period) ** frac
    arg = tau[:, None] * (2.0 * math.pi / period)[None]
    return torch.cat([torch.sin(arg), torch.cos(arg)], dim=-1)


class RMSNorm(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(dim))

    def forward(self, h):
        return rms_normalize(h) * self.gain


class AdaRMSNorm(nn.Module):
    """h/rms(h) * (1 + scale(cond)) + shift(cond); modulation starts at zero."""

    def __init__(self, dim: int, cond_dim: int):
        super().__init__()
        self.mod = nn.Linear(cond_dim, 2 * dim)
        nn.init.zeros_(self.mod.weight)
        nn.init.zeros_(self.mod.bias)

    def forward(self, h, cond):
        scale, shift = self.mod(cond).chunk(2, dim=-1)
        if h.dim() == 3:
            scale, shift = scale[:, None], shift[:, None]
        return rms_normalize(h) * (1.0 + scale) + shift


def ada_rmsnorm(h: torch.Tensor, cond: torch.Tensor, norm: AdaRMSNorm) -> torch.Tensor:
    return norm(h, cond)


class TimestepMLP(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.time_width
        self.cfg = cfg
        self.W1 = nn.Linear(w, w, bias=False)
        self.W2 = nn.Linear(w, w, bias=False)

    def phi(self, tau):
        return sinusoidal(tau, self.cfg.time_width, self.cfg.time_min_period, self.cfg.time_max_period)

    def forward(self, tau):
        return F.silu(self.W2(F.silu(self.W1(self.phi(tau)))))


def timestep_embed(tau: torch.Tensor, mlp: TimestepMLP) -> torch.Tensor:
    return mlp(tau)


class ExpertBlock(nn.Module):
    """Per-expert projections of one layer. Attention itself lives in the layer."""

    def __init__(self, dim: int, mlp_dim: int, cfg: ModelConfig, adaptive: bool):
        super().__init__()
        hq, hk, hd = cfg.num_heads, cfg.num_kv_heads, cfg.head_dim
        self.adaptive = adaptive
        if adaptive:
            self.norm1 = AdaRMSNorm(dim, cfg.time_width)
            self.norm2 = AdaRMSNorm(dim, cfg.time_width)
        else:
            self.norm1 = RMSNorm(dim)
            self.norm2 = RMSNorm(dim)
        self.q = nn.Linear(dim, hq * hd, bias=False)
        self.k = nn.Linear(dim, hk * hd, bias=False)
        self.v = nn.Linear(dim, hk * hd, bias=False)
        self.o = nn.Linear(hq * hd, dim, bias=False)
        self.up = nn.Linear(dim, mlp_dim)
        self.down = nn.Linear(mlp_dim, dim)

    def n1(self, x, cond):
        return self.norm1(x, cond) if self.adaptive else self.norm1(x)

    def n2(self, x, cond):
        return self.norm2(x, cond) if self.adaptive else self.norm2(x)

    def mlp(self, x, cond):
        return self.down(F.silu(self.up(self.n2(x, cond))))


class Layer(nn.Module):
    def __init__(self, cfg: ModelConfig, with_action: bool):
        super().__init__()
        self.cfg = cfg
        self.vlm = ExpertBlock(cfg.width, cfg.mlp_dim, cfg, adaptive=False)
        self.act = ExpertBlock(cfg.expert_width, cfg.expert_mlp_dim, cfg, adaptive=True) if with_action else None

    def _heads(self, t, n_heads):
        B, N, _ = t.shape
        return t.view(B, N, n_heads, self.cfg.head_dim).transpose(1, 2)

    def forward(self, x, xa, mask, cond):
        cfg = self.cfg
        hq, hk = cfg.num_heads, cfg.num_kv_heads
        h = self.vlm.n1(x, None)
        q, k, v = self.vlm.q(h), self.vlm.k(h), self.vlm.v(h)
        if xa is not None:
            ha = self.act.n1(xa, cond)
            q = torch.cat([q, self.act.q(ha)], 1)
            k = torch.cat([k, self.act.k(ha)], 1)
            v = torch.cat([v, self.act.v(ha)], 1)
        q, k, v = self._heads(q, hq), self._heads(k, hk), self._heads(v, hk)
        if hk != hq:
            k = k.repeat_interleave(hq // hk, dim=1)
            v = v.repeat_interleave(hq // hk, dim=1)
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=mask[:, None])
        B, _, N, _ = out.shape
        out = out.transpose(1, 2).reshape(B, N, hq * cfg.head_dim)
        L = x.shape[1]
        x = x + self.vlm.o(out[:, :L])
        x = x + self.vlm.mlp(x, None)
        if xa is not None:
            xa = xa + self.act.o(out[:, L:])
            xa = xa + self.act.mlp(xa, cond)
        return x, xa


class VLANet(nn.Module):
    """Parameter paths starting with ``action.`` or ``layers.*.act.`` belong to the action expert."""

    def __init__(self, cfg: ModelConfig, with_action: bool = True):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.patch_proj = nn.Linear(cfg.patch_dim, cfg.width)
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.width)
        self.pos_emb = nn.Embedding(cfg.n_positions, cfg.width)
        nn.init.normal_(self.tok_emb.weight, std=0.02)
        nn.init.normal_(self.pos_emb.weight, std=0.02)
        self.layers = nn.ModuleList([Layer(cfg, with_action) for _ in range(cfg.depth)])
        self.final_norm = RMSNorm(cfg.width)
        self.lm_head = nn.Linear(cfg.width, cfg.vocab_size)
        self.action = ActionParts(cfg) if with_action else None

    @property
    def has_action_expert(self) -> bool:
        return self.action is not None

    def add_action_expert(self, seed: int = 0):
        """Fresh, randomly initialized action-expert weights."""
        g = torch.random.fork_rng()
        with g:
            torch.manual_seed(seed)
            dtype = self.lm_head.weight.dtype
            self.action = ActionParts(self.cfg).to(dtype)
            for layer in self.layers:
                layer.act = ExpertBlock(self.cfg.expert_width, self.cfg.expert_mlp_dim, self.cfg,
                                        adaptive=True).to(dtype)

    def embed(self, batch: Batch) -> torch.Tensor:
        cfg = self.cfg
        L = batch.roles.shape[1] - (cfg.horizon if batch.has_noisy else 0)
        n_img = cfg.n_image_tokens
        tok = self.tok_emb(batch.tokens[:, n_img:L])
        img = self.patch_proj(batch.patches)
        x = torch.cat([img, tok], 1) + self.pos_emb(batch.positions[:, :L])
        return x

    def hidden(self, batch: Batch):
        """Final hidden states: (VLM part (B, L, width), action part (B, H, expert_width) or None)."""
        x = self.embed(batch)
        xa, cond = None, None
        if batch.has_noisy:
            if self.action is None:
                raise ValueError("batch has noisy action tokens but the model has no action expert")
            cond = self.action.time_mlp(batch.tau)
            xa = self.action.in_proj(batch.noisy) + self.action.pos[None]
        for layer in self.layers:
            x, xa = layer(x, xa, batch.mask, cond)
        return x, xa, cond

    def forward(self, batch: Batch):
        """(text logits at loss positions (M, V), action outputs (B, H, d_max) or None)."""
        x, xa, cond = self.hidden(batch)
        h = x[batch.pred_b, batch.pred_i]
        logits = self.lm_head(self.final_norm(h))
        ya = None
        if xa is not None:
            ya = self.action.out_proj(self.action.final_norm(xa, cond))
        return logits, ya

    def logits_at(self, batch: Batch, index: torch.Tensor) -> torch.Tensor:
        """Next-token logits read off position ``index[b]`` of each sequence."""
        x, _, _ = self.hidden(batch)
        h = x[torch.arange(x.shape[0]), index]
        return self.lm_head(self.final_norm(h))

    def action_params(self):
        return [(n, p) for n, p in self.named_parameters() if is_action_param(n)]


class ActionParts(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.in_proj = nn.Linear(cfg.d_max, cfg.expert_width)
        self.pos = nn.Parameter(torch.randn(cfg.horizon, cfg.expert_width) * 0.02)
        self.time_mlp = TimestepMLP(cfg)
        self.final_norm = AdaRMSNorm(cfg.expert_width, cfg.time_width)
        self.out_proj = nn.Linear(cfg.expert_width, cfg.d_max)


def is_action_param(name: str) -> bool:
    return name.startswith("action.") or ".act." in name


def build_model(cfg: ModelConfig, seed: int = 0, with_action: bool = True,
                dtype: torch.dtype = torch.float32) -> VLANet:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return VLANet(cfg, with_action).to(dtype)
