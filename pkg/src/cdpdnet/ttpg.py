"""Text-based task prompt generation at the bottleneck."""
from __future__ import annotations

import torch
from torch import nn

from .encoders import ConvNormAct
from .fusion import Alignment


def select_task_channel(spatial_map, task_ids):
    """Gather channel ``task_ids[b] - 1`` for every batch item -> ``(B, 1, ...)``."""
    n = spatial_map.shape[1]
    task_ids = torch.as_tensor(task_ids, device=spatial_map.device).reshape(-1)
    if task_ids.numel() == 1 and spatial_map.shape[0] > 1:
        task_ids = task_ids.expand(spatial_map.shape[0])
    if task_ids.numel() != spatial_map.shape[0]:
        raise ValueError(f"{task_ids.numel()} task ids for batch of {spatial_map.shape[0]}")
    bad = [int(i) for i in task_ids if not 1 <= int(i) <= n]
    if bad:
        raise ValueError(f"task ids {bad} out of range; valid ids are 1..{n}")
    idx = (task_ids - 1).long().view(-1, 1, *([1] * (spatial_map.dim() - 2)))
    idx = idx.expand(-1, 1, *spatial_map.shape[2:])
    return torch.gather(spatial_map, 1, idx)


class TTPG(nn.Module):
    """Builds an N-channel task-aware map and emits the active task's channel.

    ``task_condition='bank_mean'`` conditions the task alignment on the mean of
    all task embeddings, which keeps the map independent of the task ID;
    ``'row'`` uses each item's own task embedding instead.
    """

    def __init__(self, channels, num_tasks, text_dim=512, norm="batch", slope=0.01,
                 bottleneck_stride=(2, 2, 2), task_condition="bank_mean"):
        super().__init__()
        if task_condition not in ("bank_mean", "row"):
            raise ValueError(f"unknown task_condition {task_condition!r}")
        self.num_tasks, self.task_condition = num_tasks, task_condition
        self.bottleneck_conv = ConvNormAct(channels, channels, 3, bottleneck_stride, norm, slope)
        self.align_bot = Alignment(channels, text_dim)
        self.task_conv = ConvNormAct(channels, channels, 3, 1, norm, slope)
        self.align_task = Alignment(channels, text_dim)
        self.fusion = nn.Sequential(
            ConvNormAct(2 * channels, channels, 3, 1, norm, slope),
            ConvNormAct(channels, channels, 3, 1, norm, slope),
            nn.Conv3d(channels, num_tasks, 1),
        )

    def forward(self, v_bot, roi_emb, task_bank, task_ids, return_state=False):
        if task_bank.shape[0] != self.num_tasks:
            raise ValueError(f"task bank has {task_bank.shape[0]} rows, expected {self.num_tasks}")
        v_hat = self.bottleneck_conv(v_bot)
        t_bot = self.align_bot(v_hat, roi_emb)
        h = self.task_conv(t_bot)
        if self.task_condition == "row":
            ids = torch.as_tensor(task_ids, device=v_bot.device).reshape(-1)
            if ids.numel() == 1:
                ids = ids.expand(v_bot.shape[0])
            if ids.numel() != v_bot.shape[0] or not ((ids >= 1) & (ids <= self.num_tasks)).all():
                raise ValueError(f"task ids {ids.tolist()} invalid for batch {v_bot.shape[0]}; "
                                 f"valid ids are 1..{self.num_tasks}")
            ids = ids - 1
            t_task = self.align_task(h, task_bank[ids.long()], per_item=True)
        else:
            t_task = self.align_task(h, task_bank)
        spatial_map = self.fusion(torch.cat([t_task, t_bot], 1))
        prompt = select_task_channel(spatial_map, task_ids)
        out = torch.cat([prompt, t_bot], 1)
        if return_state:
            return out, {"v_hat": v_hat, "t_bot": t_bot, "t_task": t_task,
                         "spatial_map": spatial_map, "prompt": prompt}
        return out
