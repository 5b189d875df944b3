"""Vision encoders: the CNN branch and the frozen slice-wise dense branch.

Tensors are ``(B, C, Z, Y, X)`` with Z the axial axis. The CNN stem uses 1x3x3
kernels and the first block keeps Z, so per-slice processing happens along Z.
"""
from __future__ import annotations

import math
from typing import List, Sequence

import torch
import torch.nn.functional as F
from torch import nn

CNN_STRIDES = ((1, 2, 2), (2, 2, 2), (2, 2, 2), (2, 2, 2))


def make_norm(kind, ch):
    if kind == "batch":
        return nn.BatchNorm3d(ch)
    if kind == "instance":
        return nn.InstanceNorm3d(ch, affine=True)
    raise ValueError(f"unknown norm {kind!r}")


class ConvNormAct(nn.Sequential):
    """Conv3d -> norm -> LeakyReLU."""

    def __init__(self, cin, cout, kernel=3, stride=1, norm="batch", slope=0.01):
        kernel = (kernel,) * 3 if isinstance(kernel, int) else tuple(kernel)
        stride = (stride,) * 3 if isinstance(stride, int) else tuple(stride)
        super().__init__(
            nn.Conv3d(cin, cout, kernel, stride, padding=tuple(k // 2 for k in kernel), bias=False),
            make_norm(norm, cout),
            nn.LeakyReLU(slope, inplace=True),
        )


class CNNEncoder(nn.Module):
    def __init__(self, in_channels=1, stem_channels=32, channels=(64, 128, 256, 320),
                 strides=CNN_STRIDES, norm="batch", slope=0.01):
        super().__init__()
        self.stem = nn.Sequential(
            ConvNormAct(in_channels, stem_channels, (1, 3, 3), 1, norm, slope),
            ConvNormAct(stem_channels, stem_channels, (1, 3, 3), 1, norm, slope),
        )
        blocks = []
        cin = stem_channels
        for cout, stride in zip(channels, strides):
            blocks.append(nn.Sequential(ConvNormAct(cin, cout, 3, stride, norm, slope),
                                        ConvNormAct(cout, cout, 3, 1, norm, slope)))
            cin = cout
        self.blocks = nn.ModuleList(blocks)
        self.channels = tuple(channels)
        self.strides = tuple(tuple(s) for s in strides)

    def forward(self, x, return_stem=False):
        """Return the four block outputs (fine to coarse) and the bottleneck."""
        h = self.stem(x)
        stem = h
        levels = []
        for blk in self.blocks:
            h = blk(h)
            levels.append(h)
        if return_stem:
            return levels, levels[-1], stem
        return levels, levels[-1]


def level_shapes(spatial, strides=CNN_STRIDES):
    shapes, cur = [], tuple(spatial)
    for s in strides:
        cur = tuple(math.ceil(n / k) for n, k in zip(cur, s))
        shapes.append(cur)
    return shapes


# dense branch

def slice_to_2d(volume: torch.Tensor, patch_size: int) -> torch.Tensor:
    """Axial slices of ``(B, 1, Z, Y, X)`` as ``(B*Z, 3, Y', X')`` RGB images.

    In-plane sizes are rounded up to a multiple of ``patch_size`` with
    bilinear resizing when needed.
    """
    if volume.dim() == 3:
        volume = volume[None, None]
    elif volume.dim() == 4:
        volume = volume[:, None]
    b, c, z, y, x = volume.shape
    if c != 1:
        raise ValueError(f"expected a single-channel volume, got {c} channels")
    slices = volume.permute(0, 2, 1, 3, 4).reshape(b * z, 1, y, x)
    ty, tx = (math.ceil(n / patch_size) * patch_size for n in (y, x))
    if (ty, tx) != (y, x):
        slices = F.interpolate(slices, size=(ty, tx), mode="bilinear", align_corners=False)
    return slices.expand(-1, 3, -1, -1)


class DenseBackbone(nn.Module):
    """Frozen 2D backbone returning four token grids per slice.

    Subclasses implement ``tokens(images) -> list of (S, embed_dim, h, w)``
    with ``h = H / patch_size`` and ``w = W / patch_size``.
    """

    patch_size: int
    embed_dim: int
    tap_layers: Sequence[int]

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        return self.eval()

    def train(self, mode=True):
        # frozen: never leave inference mode
        return super().train(False)

    def tokens(self, images):
        raise NotImplementedError

    def forward(self, images):
        return self.tokens(images)


class _Block(nn.Module):
    def __init__(self, dim, heads, mlp_ratio=4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * mlp_ratio), nn.GELU(), nn.Linear(dim * mlp_ratio, dim))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class StandinViT(DenseBackbone):
    """Tiny seeded ViT honouring the dense-backbone contract."""

    def __init__(self, seed=0, embed_dim=64, depth=4, patch=16, heads=4, tap_layers=None, pos_grid=16):
        super().__init__()
        self.seed, self.patch_size, self.embed_dim, self.depth = int(seed), int(patch), int(embed_dim), int(depth)
        self.tap_layers = tuple(tap_layers) if tap_layers is not None else tuple(range(depth - 4, depth))
        if len(self.tap_layers) != 4:
            raise ValueError(f"need exactly 4 tap layers, got {self.tap_layers}")
        if min(self.tap_layers) < 0 or max(self.tap_layers) >= depth:
            raise ValueError(f"tap layers {self.tap_layers} out of range for depth {depth}")
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.seed)
            self.patch_embed = nn.Conv2d(3, embed_dim, patch, patch)
            self.pos_embed = nn.Parameter(0.02 * torch.randn(1, embed_dim, pos_grid, pos_grid))
            self.blocks = nn.ModuleList(_Block(embed_dim, heads) for _ in range(depth))
            self.norm = nn.LayerNorm(embed_dim)
        self.freeze()

    def config(self):
        return {"standin": {"seed": self.seed, "embed_dim": self.embed_dim, "depth": self.depth,
                            "patch": self.patch_size, "tap_layers": list(self.tap_layers)}}

    def tokens(self, images):
        s, _, hh, ww = images.shape
        if hh % self.patch_size or ww % self.patch_size:
            raise ValueError(f"slice size {hh}x{ww} not divisible by patch {self.patch_size}")
        x = self.patch_embed(images)
        gh, gw = x.shape[-2:]
        pos = self.pos_embed
        if pos.shape[-2:] != (gh, gw):
            pos = F.interpolate(pos, size=(gh, gw), mode="bilinear", align_corners=False)
        x = (x + pos).flatten(2).transpose(1, 2)
        taps = []
        for i, blk in enumerate(self.blocks):
            x = blk(x)
            if i in self.tap_layers:
                taps.append(self.norm(x).transpose(1, 2).reshape(s, self.embed_dim, gh, gw))
        return taps


class DinoV2Backbone(DenseBackbone):
    """Pretrained DINOv2 loaded through torch.hub; taps its last four blocks."""

    def __init__(self, arch_id="dinov2_vits14", weights_path=None, repo="facebookresearch/dinov2"):
        super().__init__()
        model = torch.hub.load(repo, arch_id, pretrained=weights_path is None)
        if weights_path is not None:
            model.load_state_dict(torch.load(weights_path, map_location="cpu"))
        self.model = model
        self.arch_id, self.weights_path = arch_id, weights_path
        self.patch_size = int(model.patch_size)
        self.embed_dim = int(model.embed_dim)
        n = len(model.blocks)
        self.tap_layers = tuple(range(n - 4, n))
        self.freeze()

    def config(self):
        return {"pretrained": {"arch_id": self.arch_id, "weights_path": self.weights_path}}

    def tokens(self, images):
        return list(self.model.get_intermediate_layers(images, n=4, reshape=True))


def make_backbone(cfg=None) -> DenseBackbone:
    cfg = dict(cfg or {"standin": {}})
    if "pretrained" in cfg:
        return DinoV2Backbone(**cfg["pretrained"])
    return StandinViT(**cfg.get("standin", {}))


@torch.no_grad()
def dense_encode(slices, backbone: DenseBackbone, batch=1, chunk=64) -> List[torch.Tensor]:
    """Run the backbone slice-wise and restack each tap along the axial axis.

    Returns four ``(B, embed_dim, Z, h, w)`` volumes.
    """
    if len(backbone.tap_layers) != 4:
        raise ValueError(f"backbone must expose 4 tap layers, has {len(backbone.tap_layers)}")
    n = slices.shape[0]
    if n % batch:
        raise ValueError(f"{n} slices do not split into batch {batch}")
    taps = [[] for _ in range(4)]
    for start in range(0, n, chunk):
        try:
            out = backbone(slices[start:start + chunk])
        except Exception as e:
            raise RuntimeError(f"dense backbone failed on slices {start}..{min(n, start + chunk) - 1}: {e}") from e
        if len(out) != 4:
            raise RuntimeError(f"dense backbone returned {len(out)} tap outputs, expected 4")
        for k, t in enumerate(out):
            taps[k].append(t)
    stacks = []
    for parts in taps:
        t = torch.cat(parts, 0)
        s, e, h, w = t.shape
        stacks.append(t.reshape(batch, s // batch, e, h, w).permute(0, 2, 1, 3, 4).contiguous())
    return stacks


class Adaptor3D(nn.Module):
    """ReLU(conv3d(depthwise_conv3d(x))): mixes stacked slice features axially."""

    def __init__(self, embed_dim, out_channels, kernel=3):
        super().__init__()
        self.depthwise = nn.Conv3d(embed_dim, embed_dim, kernel, padding=kernel // 2, groups=embed_dim)
        self.proj = nn.Conv3d(embed_dim, out_channels, kernel, padding=kernel // 2)

    def forward(self, x):
        return F.relu(self.proj(self.depthwise(x)))
