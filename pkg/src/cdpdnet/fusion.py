"""Cross-attention fusion of the two vision branches and text-vision alignment."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


class Alignment(nn.Module):
    """psi(v, t) = (W_a t + b_a) * v + W_b t + b_b, broadcast over space.

    ``t`` may be a single ``(text_dim,)`` vector, a ``(rows, text_dim)`` set
    (mean-pooled first), or a per-item ``(B, text_dim)`` batch when
    ``per_item=True``.
    """

    def __init__(self, channels, text_dim=512):
        super().__init__()
        self.channels, self.text_dim = channels, text_dim
        self.scale = nn.Linear(text_dim, channels)
        self.shift = nn.Linear(text_dim, channels)
        # start close to the identity map so early training sees the raw features
        nn.init.normal_(self.scale.weight, std=0.01)
        nn.init.ones_(self.scale.bias)
        nn.init.normal_(self.shift.weight, std=0.01)
        nn.init.zeros_(self.shift.bias)

    def condition(self, t, per_item=False):
        if t.shape[-1] != self.text_dim:
            raise ValueError(f"text dim {t.shape[-1]} != {self.text_dim}")
        if t.dim() == 1:
            t = t[None]
        elif not per_item:
            t = t.mean(0, keepdim=True)
        return self.scale(t), self.shift(t)

    def forward(self, v, t, per_item=False):
        if v.shape[1] != self.channels:
            raise ValueError(f"feature channels {v.shape[1]} != alignment width {self.channels}")
        a, b = self.condition(t, per_item)
        view = (a.shape[0], self.channels) + (1,) * (v.dim() - 2)
        return a.view(view) * v + b.view(view)


def pooled_grid(spatial, max_tokens):
    """Halve the largest axis until the token count fits ``max_tokens``."""
    dims = list(spatial)
    while max_tokens and math.prod(dims) > max_tokens and max(dims) > 1:
        i = dims.index(max(dims))
        dims[i] = math.ceil(dims[i] / 2)
    return tuple(dims)


class CrossAttention(nn.Module):
    """Multi-head attention with queries from one token set, keys/values from another."""

    def __init__(self, channels, heads=4):
        super().__init__()
        if channels % heads:
            raise ValueError(f"{channels} channels do not split into {heads} heads")
        self.channels, self.heads, self.head_dim = channels, heads, channels // heads
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(channels, channels)
        self.v = nn.Linear(channels, channels)
        self.out = nn.Linear(channels, channels)

    def split(self, x):
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, query_tokens, kv_tokens, return_weights=False):
        """``(B, Nq, C)`` x ``(B, Nk, C)`` -> ``(B, Nq, C)``."""
        q, k, v = self.split(self.q(query_tokens)), self.split(self.k(kv_tokens)), self.split(self.v(kv_tokens))
        logits = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        weights = logits.softmax(-1)
        heads = weights @ v
        b, _, n, _ = heads.shape
        out = self.out(heads.transpose(1, 2).reshape(b, n, self.channels))
        return (out, weights) if return_weights else out


def to_tokens(x):
    return x.flatten(2).transpose(1, 2)


def from_tokens(t, spatial):
    b, _, c = t.shape
    return t.transpose(1, 2).reshape(b, c, *spatial)


class FusionLevel(nn.Module):
    """Fuse dense (query) and CNN (key/value) features at one resolution.

    Dense features are upsampled to the CNN grid. Grids above ``max_tokens``
    voxels are average-pooled for the attention and the result is trilinearly
    unpooled. The attention output is concatenated with the CNN features and
    projected back to ``channels`` with a 1x1x1 conv.
    """

    def __init__(self, channels, heads=4, max_tokens=1728):
        super().__init__()
        self.attn = CrossAttention(channels, heads)
        self.proj = nn.Conv3d(2 * channels, channels, 1)
        self.max_tokens = max_tokens

    def forward(self, dense, cnn):
        spatial = cnn.shape[2:]
        if dense.shape[2:] != spatial:
            dense = F.interpolate(dense, size=spatial, mode="trilinear", align_corners=False)
        if dense.shape[:2] != cnn.shape[:2] or dense.shape[2:] != spatial:
            raise ValueError(f"dense {tuple(dense.shape)} and cnn {tuple(cnn.shape)} features disagree")
        grid = pooled_grid(spatial, self.max_tokens)
        d, s = dense, cnn
        if grid != tuple(spatial):
            d = F.adaptive_avg_pool3d(dense, grid)
            s = F.adaptive_avg_pool3d(cnn, grid)
        fused = from_tokens(self.attn(to_tokens(d), to_tokens(s)), grid)
        if grid != tuple(spatial):
            fused = F.interpolate(fused, size=spatial, mode="trilinear", align_corners=False)
        return self.proj(torch.cat([fused, cnn], 1))
