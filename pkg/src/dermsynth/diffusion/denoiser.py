"""Noise-prediction networks for the toy backend.

``ToyUNet`` is the desk-scale denoiser: pixel space, two resolutions and
cross-attention to caption tokens at each level. ``TinyDenoiser`` is a
few-hundred-parameter network for finite-difference gradient checks.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


def timestep_embedding(t, dim):
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([args.sin(), args.cos()], dim=1)


class CrossAttention(nn.Module):
    def __init__(self, dim, context_dim, heads=4):
        super().__init__()
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.heads = heads
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(context_dim, dim, bias=False)
        self.to_v = nn.Linear(context_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x, context, mask=None):
        b, n, c = x.shape
        h = self.heads
        q = self.to_q(x).view(b, n, h, c // h).transpose(1, 2)
        k = self.to_k(context).view(b, -1, h, c // h).transpose(1, 2)
        v = self.to_v(context).view(b, -1, h, c // h).transpose(1, 2)
        attn_mask = None if mask is None else mask[:, None, None, :]
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=attn_mask)
        return self.to_out(out.transpose(1, 2).reshape(b, n, c))


class AttentionBlock(nn.Module):
    """Pre-norm cross-attention over the flattened feature map, residual."""

    def __init__(self, channels, context_dim, heads):
        super().__init__()
        self.norm = nn.LayerNorm(channels)
        self.attn = CrossAttention(channels, context_dim, heads)

    def forward(self, x, context, mask):
        b, c, hgt, wid = x.shape
        seq = x.flatten(2).transpose(1, 2)
        seq = self.attn(self.norm(seq), context, mask)
        return x + seq.transpose(1, 2).reshape(b, c, hgt, wid)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, temb_dim, groups=8):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb_dim, cout)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x))) + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class ToyUNet(nn.Module):
    def __init__(self, channels=16, context_dim=64, temb_dim=64, in_channels=3, heads=2):
        super().__init__()
        c, c2 = channels, 2 * channels
        self.config = dict(channels=channels, context_dim=context_dim, temb_dim=temb_dim, in_channels=in_channels, heads=heads)
        self.temb_dim = temb_dim
        self.time_mlp = nn.Sequential(nn.Linear(temb_dim, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
        self.conv_in = nn.Conv2d(in_channels, c, 3, padding=1)
        self.down_res = ResBlock(c, c, temb_dim)
        self.down_attn = AttentionBlock(c, context_dim, heads)
        self.downsample = nn.Conv2d(c, c2, 3, stride=2, padding=1)
        self.mid_res1 = ResBlock(c2, c2, temb_dim)
        self.mid_attn = AttentionBlock(c2, context_dim, 2 * heads)
        self.mid_res2 = ResBlock(c2, c2, temb_dim)
        self.upsample = nn.ConvTranspose2d(c2, c, 4, stride=2, padding=1)
        self.up_res = ResBlock(2 * c, c, temb_dim)
        self.up_attn = AttentionBlock(c, context_dim, heads)
        self.norm_out = nn.GroupNorm(8, c)
        self.conv_out = nn.Conv2d(c, in_channels, 3, padding=1)

    def forward(self, x, t, context, mask=None):
        t = torch.as_tensor(t).reshape(-1).expand(x.shape[0])
        temb = self.time_mlp(timestep_embedding(t, self.temb_dim).to(x.dtype))
        h1 = self.down_attn(self.down_res(self.conv_in(x), temb), context, mask)
        h = self.downsample(h1)
        h = self.mid_res2(self.mid_attn(self.mid_res1(h, temb), context, mask), temb)
        h = self.upsample(h)
        h = self.up_attn(self.up_res(torch.cat([h, h1], dim=1), temb), context, mask)
        return self.conv_out(F.silu(self.norm_out(h)))


class TinyDenoiser(nn.Module):
    """Per-pixel MLP plus one cross-attention layer; small enough for finite differences."""

    def __init__(self, channels=2, dim=8, context_dim=6, temb_dim=4):
        super().__init__()
        self.temb_dim = temb_dim
        self.inp = nn.Linear(channels + temb_dim, dim)
        self.attn = CrossAttention(dim, context_dim, heads=2)
        self.out = nn.Linear(dim, channels)

    def forward(self, x, t, context, mask=None):
        b, c, hgt, wid = x.shape
        t = torch.as_tensor(t).reshape(-1).expand(b)
        temb = timestep_embedding(t, self.temb_dim).to(x.dtype)
        seq = x.flatten(2).transpose(1, 2)
        seq = torch.cat([seq, temb[:, None, :].expand(b, seq.shape[1], -1)], dim=2)
        h = torch.tanh(self.inp(seq))
        h = h + self.attn(h, context, mask)
        return self.out(h).transpose(1, 2).reshape(b, c, hgt, wid)
