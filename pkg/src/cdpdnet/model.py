"""Full network: encoders, fusion, alignment skips, TTPG and the mask decoder."""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .encoders import CNN_STRIDES, Adaptor3D, CNNEncoder, ConvNormAct, dense_encode, make_backbone, slice_to_2d
from .fusion import Alignment, FusionLevel
from .ttpg import TTPG

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    label_count: int
    task_count: int
    in_channels: int = 1
    stem_channels: int = 32
    level_channels: tuple = (64, 128, 256, 320)
    decoder_channels: tuple = (320, 256, 128, 64, 32)
    heads: int = 4
    max_tokens: int = 1728
    text_dim: int = 512
    norm: str = "batch"
    slope: float = 0.01
    bottleneck_stride: tuple = (2, 2, 2)
    task_condition: str = "bank_mean"
    patch_size: int = 96
    slice_chunk: int = 128
    backbone: dict = field(default_factory=lambda: {"standin": {"seed": 0, "embed_dim": 64, "depth": 4, "patch": 16}})
    text_encoder: dict = field(default_factory=lambda: {"standin": {"seed": 0}})

    def __post_init__(self):
        self.level_channels = tuple(self.level_channels)
        self.decoder_channels = tuple(self.decoder_channels)
        self.bottleneck_stride = tuple(self.bottleneck_stride)
        if len(self.level_channels) != 4 or len(self.decoder_channels) != 5:
            raise ValueError("need 4 encoder level widths and 5 decoder widths")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    @property
    def divisor(self):
        """Per-axis size multiple a valid input patch must have."""
        z = y = x = 1
        for s in list(CNN_STRIDES) + [self.bottleneck_stride]:
            z, y, x = z * s[0], y * s[1], x * s[2]
        return z, y, x


class DecoderBlock(nn.Module):
    def __init__(self, cin, skip, cout, up, norm="batch", slope=0.01):
        super().__init__()
        self.up = nn.ConvTranspose3d(cin, cout, up, up)
        self.skip_channels = skip
        self.convs = nn.Sequential(ConvNormAct(cout + skip, cout, 3, 1, norm, slope),
                                   ConvNormAct(cout, cout, 3, 1, norm, slope))

    def forward(self, x, skip=None):
        x = self.up(x)
        if self.skip_channels:
            if skip is None or skip.shape[1] != self.skip_channels:
                got = None if skip is None else skip.shape[1]
                raise ValueError(f"decoder block expects a {self.skip_channels}-channel skip, got {got}")
            if skip.shape[2:] != x.shape[2:]:
                raise ValueError(f"skip grid {tuple(skip.shape[2:])} != upsampled grid {tuple(x.shape[2:])}")
            x = torch.cat([x, skip], 1)
        return self.convs(x)


class MaskDecoder(nn.Module):
    """Four 2x2x2 up-blocks fed with alignment skips, then a 1x2x2 up-block."""

    def __init__(self, in_channels, skip_channels, widths, num_labels, norm="batch", slope=0.01):
        super().__init__()
        if len(skip_channels) != 4 or len(widths) != 5:
            raise ValueError("decoder needs 4 skips and 5 block widths")
        ups = [(2, 2, 2)] * 4 + [(1, 2, 2)]
        skips = list(skip_channels) + [0]
        blocks, cin = [], in_channels
        for w, s, u in zip(widths, skips, ups):
            blocks.append(DecoderBlock(cin, s, w, u, norm, slope))
            cin = w
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Conv3d(cin, num_labels, 1)

    def forward(self, x, skips):
        """``skips`` ordered coarse to fine."""
        if len(skips) != 4:
            raise ValueError(f"decoder needs 4 skips, got {len(skips)}")
        for i, blk in enumerate(self.blocks):
            x = blk(x, skips[i] if i < 4 else None)
        return self.head(x)


class CDPDNet(nn.Module):
    def __init__(self, config: ModelConfig, roi_emb, task_bank):
        super().__init__()
        self.config = c = config
        roi_emb = torch.as_tensor(np.asarray(roi_emb), dtype=torch.float32)
        task_bank = torch.as_tensor(np.asarray(task_bank), dtype=torch.float32)
        if roi_emb.shape != (c.label_count, c.text_dim):
            raise ValueError(f"roi embeddings {tuple(roi_emb.shape)} != ({c.label_count}, {c.text_dim})")
        if task_bank.shape != (c.task_count, c.text_dim):
            raise ValueError(f"task bank {tuple(task_bank.shape)} != ({c.task_count}, {c.text_dim})")
        self.register_buffer("roi_emb", roi_emb)
        self.register_buffer("task_bank", task_bank)

        self.cnn = CNNEncoder(c.in_channels, c.stem_channels, c.level_channels, norm=c.norm, slope=c.slope)
        self.backbone = make_backbone(c.backbone)
        e = self.backbone.embed_dim
        self.adaptors = nn.ModuleList(Adaptor3D(e, ch) for ch in c.level_channels)
        self.fusions = nn.ModuleList(FusionLevel(ch, c.heads, c.max_tokens) for ch in c.level_channels)
        self.aligns = nn.ModuleList(Alignment(ch, c.text_dim) for ch in c.level_channels)
        top = c.level_channels[-1]
        self.ttpg = TTPG(top, c.task_count, c.text_dim, c.norm, c.slope, c.bottleneck_stride, c.task_condition)
        self.decoder = MaskDecoder(top + 1, c.level_channels[::-1], c.decoder_channels, c.label_count,
                                   c.norm, c.slope)

    def trainable_groups(self):
        return {"cnn": self.cnn, "adaptors": self.adaptors, "attention": self.fusions,
                "alignment": self.aligns, "ttpg": self.ttpg, "decoder": self.decoder}

    def frozen_state(self):
        """Frozen parameters and text-embedding buffers, keyed by name."""
        out = {f"backbone.{k}": v for k, v in self.backbone.state_dict().items()}
        out["roi_emb"], out["task_bank"] = self.roi_emb, self.task_bank
        return out

    def check_input(self, x):
        if x.dim() != 5 or x.shape[1] != self.config.in_channels:
            raise ValueError(f"expected (B, {self.config.in_channels}, Z, Y, X), got {tuple(x.shape)}")
        div = self.config.divisor
        bad = [n for n, d in zip(x.shape[2:], div) if n % d]
        if bad:
            raise ValueError(f"patch {tuple(x.shape[2:])} must be divisible by {div} per axis")

    def check_task_ids(self, task_ids, batch):
        ids = torch.as_tensor(task_ids).reshape(-1).tolist()
        n = self.config.task_count
        if len(ids) not in (1, batch) or any(not 1 <= int(i) <= n for i in ids):
            raise ValueError(f"task ids {ids} invalid for batch {batch}; valid ids are 1..{n}")

    def encode(self, x):
        self.check_input(x)
        levels, bottleneck = self.cnn(x)
        slices = slice_to_2d(x, self.backbone.patch_size)
        stacks = dense_encode(slices, self.backbone, batch=x.shape[0], chunk=self.config.slice_chunk)
        skips = []
        for k, (stack, cnn_feat) in enumerate(zip(stacks, levels)):
            try:
                dense = self.adaptors[k](stack)
                fused = self.fusions[k](dense, cnn_feat)
                skips.append(self.aligns[k](fused, self.roi_emb))
            except (RuntimeError, ValueError) as e:
                raise type(e)(f"level {k + 1}: {e}") from e
        return levels, bottleneck, skips

    def forward(self, x, task_ids, return_state=False):
        """Per-label logits ``(B, |L|, Z, Y, X)`` for the given task ID(s)."""
        self.check_task_ids(task_ids, x.shape[0])
        levels, bottleneck, skips = self.encode(x)
        dec_in, state = self.ttpg(bottleneck, self.roi_emb, self.task_bank, task_ids, return_state=True)
        logits = self.decoder(dec_in, skips[::-1])
        if return_state:
            state.update(levels=levels, skips=skips, decoder_input=dec_in)
            return logits, state
        return logits

    @torch.no_grad()
    def predict_proba(self, x, task_ids):
        return torch.sigmoid(self(x, task_ids))


def build_model(config: ModelConfig, registry=None, roi_emb=None, task_bank=None, cache=None):
    """Build a model, encoding the registry prompts when embeddings are not given."""
    from .text import embed_roi_names, embed_task_prompts, make_text_encoder

    if roi_emb is None or task_bank is None:
        if registry is None:
            raise ValueError("need a registry or precomputed embeddings")
        enc = make_text_encoder(config.text_encoder)
        if roi_emb is None:
            roi_emb = embed_roi_names(registry, enc, cache)
        if task_bank is None:
            task_bank = embed_task_prompts(registry, enc, cache)
    return CDPDNet(config, roi_emb, task_bank)


def state_checksum(tensors) -> str:
    h = hashlib.sha256()
    for k in sorted(tensors):
        h.update(k.encode())
        h.update(tensors[k].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path, model: CDPDNet, registry_fingerprint, extra=None):
    state = {k: v for k, v in model.state_dict().items() if not k.startswith("backbone.")}
    payload = {"format_version": CHECKPOINT_VERSION, "config": model.config.to_dict(),
               "registry_fingerprint": registry_fingerprint, "state": state,
               "backbone_checksum": state_checksum(model.backbone.state_dict()),
               "extra": extra or {}}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path, map_location="cpu"):
    """Return ``(model, payload)``; the frozen backbone is rebuilt from its config."""
    payload = torch.load(path, map_location=map_location, weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('format_version')}")
    config = ModelConfig.from_dict(payload["config"])
    state = payload["state"]
    model = CDPDNet(config, state["roi_emb"], state["task_bank"])
    if state_checksum(model.backbone.state_dict()) != payload["backbone_checksum"]:
        raise ValueError(f"{path}: rebuilt backbone does not match the one used in training")
    missing, unexpected = model.load_state_dict(state, strict=False)
    missing = [k for k in missing if not k.startswith("backbone.")]
    if missing or unexpected:
        raise ValueError(f"{path}: state mismatch (missing {missing}, unexpected {unexpected})")
    return model.eval(), payload
